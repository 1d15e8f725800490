"""Deterministic 2D driving simulation.

Kinematic bicycle dynamics, oriented-rectangle collision tests, and two
scenarios: a straight four-lane highway with scripted traffic, and a
parking lot with a goal slot flanked by parked cars. Rewards follow the
weighted forms used throughout the package: speed-tracking minus collision
penalty on the highway, negative squared goal error minus violation
penalty for parking.

All simulation state is plain Python floats; identical seeds and action
sequences reproduce trajectories bit for bit.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    r = math.remainder(a, math.tau)
    if r <= -math.pi:
        r += math.tau
    return r


# ---------------------------------------------------------------------------
# vehicle model


@dataclass
class BicycleParams:
    length: float = 5.0
    width: float = 2.0
    max_steer: float = math.pi / 4
    max_accel: float = 5.0
    dt: float = 0.1

    @property
    def lf(self):
        return self.length / 2

    @property
    def lr(self):
        return self.length / 2


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    heading: float = 0.0
    speed: float = 0.0


@dataclass
class Action:
    steer: float = 0.0
    accel: float = 0.0

    def clipped(self):
        return Action(
            min(1.0, max(-1.0, self.steer)), min(1.0, max(-1.0, self.accel))
        )


def bicycle_step(state, action, params):
    """One semi-implicit Euler step of the kinematic bicycle model.

    The slip angle beta = atan((lr/(lf+lr)) tan(delta)) rotates the velocity
    relative to the heading; speed integrates first so the position update
    sees the new speed.
    """
    for v in (state.x, state.y, state.heading, state.speed):
        if not math.isfinite(v):
            raise ValueError("non-finite vehicle state")
    if not (math.isfinite(action.steer) and math.isfinite(action.accel)):
        raise ValueError("non-finite action")
    a = action.clipped()
    delta = a.steer * params.max_steer
    accel = a.accel * params.max_accel
    beta = math.atan(params.lr / (params.lf + params.lr) * math.tan(delta))
    dt = params.dt
    v = state.speed + accel * dt
    x = state.x + v * math.cos(state.heading + beta) * dt
    y = state.y + v * math.sin(state.heading + beta) * dt
    heading = wrap_angle(state.heading + v / params.lr * math.sin(beta) * dt)
    return VehicleState(x, y, heading, v)


# ---------------------------------------------------------------------------
# collision


@dataclass
class Rect:
    cx: float
    cy: float
    heading: float
    length: float
    width: float

    def corners(self):
        c = math.cos(self.heading)
        s = math.sin(self.heading)
        hl = self.length / 2
        hw = self.width / 2
        return [
            (self.cx + c * dx - s * dy, self.cy + s * dx + c * dy)
            for dx, dy in ((hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw))
        ]

    def circumradius(self):
        return math.hypot(self.length, self.width) / 2


def vehicle_rect(state, params):
    return Rect(state.x, state.y, state.heading, params.length, params.width)


def collision_check(a, b):
    """Closed-set overlap of two oriented rectangles (touching counts).

    Separating-axis test over the four edge normals.
    """
    if a.length <= 0 or a.width <= 0 or b.length <= 0 or b.width <= 0:
        raise ValueError("rectangle extents must be positive")
    dx = a.cx - b.cx
    dy = a.cy - b.cy
    reach = a.circumradius() + b.circumradius()
    if dx * dx + dy * dy > reach * reach:
        return False
    ca = a.corners()
    cb = b.corners()
    for rect in (a, b):
        c = math.cos(rect.heading)
        s = math.sin(rect.heading)
        for ax, ay in ((c, s), (-s, c)):
            pa = [ax * px + ay * py for px, py in ca]
            pb = [ax * px + ay * py for px, py in cb]
            if max(pa) < min(pb) or max(pb) < min(pa):
                return False
    return True


# ---------------------------------------------------------------------------
# highway scenario


@dataclass
class HighwayConfig:
    lanes: int = 4
    lane_width: float = 4.0
    hdv_count: int = 10
    v_min: float = 20.0
    v_max: float = 30.0
    alpha: float = 0.4
    beta: float = 1.0
    episode_steps: int = 300
    vehicle: BicycleParams = field(default_factory=BicycleParams)

    def lane_center(self, i):
        return (i + 0.5) * self.lane_width

    @property
    def road_width(self):
        return self.lanes * self.lane_width


@dataclass
class IdmParams:
    # car-following constants for the scripted traffic
    accel_max: float = 3.0
    decel_comfort: float = 5.0
    min_gap: float = 10.0
    headway: float = 1.5


class Hdv:
    """Scripted vehicle: fixed lane, car-following longitudinal control."""

    __slots__ = ("x", "lane", "speed", "target_speed")

    def __init__(self, x, lane, speed):
        self.x = x
        self.lane = lane
        self.speed = speed
        self.target_speed = speed


class EpisodeDone(RuntimeError):
    """Raised when step() is called on a finished episode."""


class HighwayEnv:
    """Four-lane straight road; the agent tracks speed while avoiding traffic.

    Reward: alpha * clip((v - v_min)/(v_max - v_min), 0, 1) - beta * [collision].
    Episode ends on collision, road departure, or the step limit.
    """

    env_id = "highway"
    obs_dim = 20
    act_dim = 2

    def __init__(self, config=None, seed=0):
        self.config = config if config is not None else HighwayConfig()
        self.idm = IdmParams()
        self.rng = np.random.default_rng(seed)
        self.ego = None
        self.hdvs = []
        self.t = 0
        self.done = True

    def reset(self):
        cfg = self.config
        rng = self.rng
        lane = int(rng.integers(cfg.lanes))
        speed = float(rng.uniform(cfg.v_min, cfg.v_max))
        self.ego = VehicleState(0.0, cfg.lane_center(lane), 0.0, speed)
        self.hdvs = []
        spacing = cfg.vehicle.length + self.idm.min_gap
        for _ in range(cfg.hdv_count):
            for _ in range(40):
                lane = int(rng.integers(cfg.lanes))
                x = float(rng.uniform(15.0, 215.0))
                near = [h for h in self.hdvs if h.lane == lane]
                if all(abs(h.x - x) >= spacing for h in near):
                    break
            v = float(rng.uniform(cfg.v_min, cfg.v_max))
            self.hdvs.append(Hdv(x, lane, v))
        self.t = 0
        self.done = False
        return self.observe()

    def place(self, ego, hdvs=None):
        """Set the scene directly and restart the episode clock."""
        self.ego = ego
        if hdvs is not None:
            self.hdvs = hdvs
        self.t = 0
        self.done = False
        return self.observe()

    def ego_lane(self):
        cfg = self.config
        i = int(round(self.ego.y / cfg.lane_width - 0.5))
        return min(cfg.lanes - 1, max(0, i))

    def _leader(self, hdv):
        """Nearest vehicle ahead in the same lane, as (gap bumper-to-bumper, speed)."""
        cfg = self.config
        best_x = None
        best_v = 0.0
        for other in self.hdvs:
            if other is hdv or other.lane != hdv.lane:
                continue
            if other.x > hdv.x and (best_x is None or other.x < best_x):
                best_x, best_v = other.x, other.speed
        if self.ego_lane() == hdv.lane and self.ego.x > hdv.x:
            if best_x is None or self.ego.x < best_x:
                best_x = self.ego.x
                best_v = self.ego.speed * math.cos(self.ego.heading)
        if best_x is None:
            return None
        return best_x - hdv.x - cfg.vehicle.length, best_v

    def _advance_hdvs(self):
        idm = self.idm
        dt = self.config.vehicle.dt
        accels = []
        for h in self.hdvs:
            free = 1.0 - (h.speed / h.target_speed) ** 4
            lead = self._leader(h)
            if lead is None:
                a = idm.accel_max * free
            else:
                gap, v_lead = lead
                gap = max(gap, 0.1)
                desired = (
                    idm.min_gap
                    + h.speed * idm.headway
                    + h.speed * (h.speed - v_lead)
                    / (2.0 * math.sqrt(idm.accel_max * idm.decel_comfort))
                )
                a = idm.accel_max * (free - (desired / gap) ** 2)
            accels.append(min(idm.accel_max, max(-idm.decel_comfort, a)))
        for h, a in zip(self.hdvs, accels):
            h.speed = max(0.0, h.speed + a * dt)
            h.x += h.speed * dt

    def min_hdv_distance(self):
        if not self.hdvs:
            return math.inf
        cfg = self.config
        return min(
            math.hypot(h.x - self.ego.x, cfg.lane_center(h.lane) - self.ego.y)
            for h in self.hdvs
        )

    def step(self, action):
        if self.done:
            raise EpisodeDone("episode is finished; reset the environment")
        cfg = self.config
        self.ego = bicycle_step(self.ego, action, cfg.vehicle)
        self.ego.speed = min(cfg.v_max, max(0.0, self.ego.speed))
        self._advance_hdvs()
        self.t += 1

        ego_rect = vehicle_rect(self.ego, cfg.vehicle)
        collided = any(
            collision_check(
                ego_rect,
                Rect(h.x, cfg.lane_center(h.lane), 0.0, cfg.vehicle.length,
                     cfg.vehicle.width),
            )
            for h in self.hdvs
        )
        departed = self.ego.y < 0.0 or self.ego.y > cfg.road_width
        crashed = collided or departed

        span = cfg.v_max - cfg.v_min
        tracking = min(1.0, max(0.0, (self.ego.speed - cfg.v_min) / span))
        reward = cfg.alpha * tracking - cfg.beta * (1.0 if crashed else 0.0)

        self.done = crashed or self.t >= cfg.episode_steps
        info = {
            "min_distance": self.min_hdv_distance(),
            "collision": collided,
            "departed": departed,
            "ego_xy": (self.ego.x, self.ego.y),
            "hdv_xy": [(h.x, cfg.lane_center(h.lane)) for h in self.hdvs],
        }
        return self.observe(), reward, self.done, info

    def observe(self):
        cfg = self.config
        ego = self.ego
        center = cfg.lane_center(self.ego_lane())
        obs = [
            ego.speed / cfg.v_max,
            (ego.y - center) / cfg.lane_width,
            math.cos(ego.heading),
            math.sin(ego.heading),
        ]
        ego_vx = ego.speed * math.cos(ego.heading)
        ego_vy = ego.speed * math.sin(ego.heading)
        ranked = sorted(
            self.hdvs,
            key=lambda h: (h.x - ego.x) ** 2
            + (cfg.lane_center(h.lane) - ego.y) ** 2,
        )
        for h in ranked[:4]:
            obs.extend(
                min(2.0, max(-2.0, u))
                for u in (
                    (h.x - ego.x) / 100.0,
                    (cfg.lane_center(h.lane) - ego.y) / 100.0,
                    (h.speed - ego_vx) / 30.0,
                    (0.0 - ego_vy) / 30.0,
                )
            )
        obs.extend([0.0] * (4 * (4 - min(4, len(ranked)))))
        return np.array(obs)


# ---------------------------------------------------------------------------
# parking scenario


def default_parking_obstacles():
    """A row of parked cars flanking the goal slot, plus the lot walls.

    The slot spans x in [-2.25, 2.25]; a 2 m wide car a full metre off
    centre still clears the neighbours, and the nose of a parked car sits
    half a metre clear of the top wall.
    """
    cars = [
        Rect(sx * off, 9.5, math.pi / 2, 5.0, 2.0)
        for off in (3.25, 6.0, 8.75)
        for sx in (-1.0, 1.0)
    ]
    walls = [
        Rect(0.0, 13.0, 0.0, 44.0, 1.0),
        Rect(0.0, -13.0, 0.0, 44.0, 1.0),
        Rect(-20.5, 0.0, 0.0, 1.0, 27.0),
        Rect(20.5, 0.0, 0.0, 1.0, 27.0),
    ]
    return cars + walls


@dataclass
class ParkingConfig:
    goal_x: float = 0.0
    goal_y: float = 9.5
    goal_heading: float = math.pi / 2
    obstacles: list = field(default_factory=default_parking_obstacles)
    alpha: float = 1.0
    beta: float = 5.0
    episode_steps: int = 100
    pos_tol: float = 0.5
    heading_tol: float = 0.2
    speed_limit: float = 10.0
    half_x: float = 20.0
    half_y: float = 12.5
    vehicle: BicycleParams = field(default_factory=BicycleParams)

    def goal_state(self):
        return [
            self.goal_x, self.goal_y, 0.0, 0.0,
            math.cos(self.goal_heading), math.sin(self.goal_heading),
        ]


def pose_features(state):
    """[x, y, v_x, v_y, cos(heading), sin(heading)]."""
    c = math.cos(state.heading)
    s = math.sin(state.heading)
    return [state.x, state.y, state.speed * c, state.speed * s, c, s]


class ParkingEnv:
    """Drive into the goal slot; squared goal error plus obstacle penalties.

    Reward: -alpha * ||s - s_g||^2 - beta * [violation], on raw features
    [x, y, v_x, v_y, cos, sin]. Success when position and heading are within
    tolerance. Reverse driving is allowed (speed may go negative).
    """

    env_id = "parking"
    obs_dim = 12
    act_dim = 2

    def __init__(self, config=None, seed=0):
        self.config = config if config is not None else ParkingConfig()
        self.rng = np.random.default_rng(seed)
        self.ego = None
        self.t = 0
        self.done = True
        self.success = False

    def reset(self):
        rng = self.rng
        for _ in range(100):
            state = VehicleState(
                float(rng.uniform(-8.0, 8.0)),
                float(rng.uniform(-8.0, 0.0)),
                float(rng.uniform(-math.pi, math.pi)),
                0.0,
            )
            if not self._violates(state):
                break
        return self.place(state)

    def place(self, state):
        """Set the ego pose directly and restart the episode clock."""
        self.ego = state
        self.t = 0
        self.success = self._at_goal(state)
        self.done = self.success
        return self.observe()

    def _at_goal(self, state):
        cfg = self.config
        pos_err = math.hypot(state.x - cfg.goal_x, state.y - cfg.goal_y)
        head_err = abs(wrap_angle(state.heading - cfg.goal_heading))
        return pos_err <= cfg.pos_tol and head_err <= cfg.heading_tol

    def _violates(self, state):
        rect = vehicle_rect(state, self.config.vehicle)
        return any(collision_check(rect, ob) for ob in self.config.obstacles)

    def goal_error(self, state=None):
        s = pose_features(state if state is not None else self.ego)
        g = self.config.goal_state()
        return sum((a - b) ** 2 for a, b in zip(s, g))

    def reward_at(self, state, violation):
        cfg = self.config
        return -cfg.alpha * self.goal_error(state) - cfg.beta * (1.0 if violation else 0.0)

    def step(self, action):
        if self.done:
            raise EpisodeDone("episode is finished; reset the environment")
        cfg = self.config
        self.ego = bicycle_step(self.ego, action, cfg.vehicle)
        self.ego.speed = min(cfg.speed_limit, max(-cfg.speed_limit, self.ego.speed))
        self.t += 1

        violation = self._violates(self.ego)
        reward = self.reward_at(self.ego, violation)
        self.success = self._at_goal(self.ego)
        self.done = self.success or violation or self.t >= cfg.episode_steps
        info = {"success": self.success, "violation": violation,
                "ego_xy": (self.ego.x, self.ego.y)}
        return self.observe(), reward, self.done, info

    def observe(self):
        cfg = self.config
        def norm(feat):
            x, y, vx, vy, c, s = feat
            return [x / cfg.half_x, y / cfg.half_y,
                    vx / cfg.speed_limit, vy / cfg.speed_limit, c, s]
        goal = norm(cfg.goal_state())
        return np.array(norm(pose_features(self.ego)) + goal)

    def goal_relative(self, obs):
        """Lyapunov input: observation error relative to the goal block."""
        obs = np.asarray(obs)
        return obs[..., :6] - obs[..., 6:]


# ---------------------------------------------------------------------------
# registry and config serialization


ENV_IDS = ("highway", "parking")


def make_env(env_id, seed=0, config=None):
    if env_id == "highway":
        return HighwayEnv(config, seed=seed)
    if env_id == "parking":
        return ParkingEnv(config, seed=seed)
    raise ValueError(f"unknown env id {env_id!r}; valid: {', '.join(ENV_IDS)}")


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_from_dict(env_id, d):
    d = dict(d)
    if "vehicle" in d:
        d["vehicle"] = BicycleParams(**d["vehicle"])
    if env_id == "highway":
        return HighwayConfig(**d)
    if env_id == "parking":
        if "obstacles" in d:
            d["obstacles"] = [Rect(**ob) if isinstance(ob, dict) else ob
                              for ob in d["obstacles"]]
        return ParkingConfig(**d)
    raise ValueError(f"unknown env id {env_id!r}")
