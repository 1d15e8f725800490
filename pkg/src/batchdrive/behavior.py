"""Online DDPG agent: collects the offline batch and serves as a baseline.

The actor maps observations to [-1,1]^act_dim through a tanh head; the
critic scores (s, a) pairs. Exploration adds clipped Gaussian action noise.
Every environment transition is stored, and the grown buffer doubles as
the replay source during collection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataset import BatchDataset, Transition
from .drivesim import Action


class TrainingDiverged(RuntimeError):
    """Raised when a loss stops being finite."""


def check_finite(name, value):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{name} became non-finite ({value})")
    return value


def clone_net(net):
    return dc.net_from_dict(net.to_dict())


def soft_update(online, target, tau):
    """target <- tau * online + (1 - tau) * target, elementwise."""
    for (_, p), (_, q) in zip(online.param_items(), target.param_items()):
        q *= 1.0 - tau
        q += tau * p
    target.bump()


@dataclass
class DdpgConfig:
    gamma: float = 0.7
    tau: float = 0.005
    lr: float = 1e-3
    batch: int = 64
    warmup: int = 500
    noise_std: float = 0.1
    hidden: tuple = (64, 64)


class DdpgAgent:
    def __init__(self, obs_dim, act_dim, config, rng):
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.config = config
        h = list(config.hidden)
        self.actor = dc.make_mlp([obs_dim] + h + [act_dim], ["tanh"] * (len(h) + 1), rng)
        self.critic = dc.make_mlp(
            [obs_dim + act_dim] + h + [1], ["tanh"] * len(h) + ["identity"], rng
        )
        self.actor_target = clone_net(self.actor)
        self.critic_target = clone_net(self.critic)
        self.actor_opt = dc.Adam(self.actor, lr=config.lr)
        self.critic_opt = dc.Adam(self.critic, lr=config.lr)

    def act(self, obs, explore=False, rng=None):
        a, _ = self.actor.forward(np.asarray(obs, dtype=float))
        if explore:
            a = a + self.config.noise_std * rng.standard_normal(self.act_dim)
        return np.clip(a, -1.0, 1.0)

    def critic_step(self, S, A, R, S2, D):
        cfg = self.config
        A2, _ = self.actor_target.forward(S2)
        Q2, _ = self.critic_target.forward(np.hstack([S2, A2]))
        y = R + cfg.gamma * (1.0 - D) * Q2[:, 0]
        q, tape = self.critic.forward(np.hstack([S, A]))
        err = q[:, 0] - y
        loss = check_finite("ddpg critic loss", float(np.mean(err * err)))
        gy = (2.0 / len(err)) * err[:, None]
        _, grads = self.critic.backward(tape, gy)
        self.critic_opt.step(grads)
        return loss

    def actor_objective_and_grads(self, S):
        """Mean critic score of the actor's actions, with actor gradients."""
        acts, atape = self.actor.forward(S)
        q, ctape = self.critic.forward(np.hstack([S, acts]))
        objective = float(np.mean(q))
        gin, _ = self.critic.backward(ctape, np.full((len(S), 1), 1.0 / len(S)))
        ga = gin[:, self.obs_dim:]
        _, grads = self.actor.backward(atape, ga)
        return objective, grads

    def actor_step(self, S):
        objective, grads = self.actor_objective_and_grads(S)
        check_finite("ddpg actor objective", objective)
        flat = dc.flatten_grads(grads)
        self.actor_opt.step({k: -g for k, g in flat.items()})
        return objective

    def update(self, minibatch_arrays):
        S, A, R, S2, D = minibatch_arrays
        critic_loss = self.critic_step(S, A, R, S2, D)
        actor_objective = self.actor_step(S)
        self.soft_update_targets()
        return {"critic": critic_loss, "actor": actor_objective}

    def soft_update_targets(self, tau=None):
        tau = self.config.tau if tau is None else tau
        soft_update(self.actor, self.actor_target, tau)
        soft_update(self.critic, self.critic_target, tau)

    def nets(self):
        return {
            "actor": self.actor,
            "critic": self.critic,
            "actor_target": self.actor_target,
            "critic_target": self.critic_target,
        }


def collect(agent, env, steps, rng, header_seed=0):
    """Run online DDPG for `steps` env steps, returning every transition.

    Random actions during the warm-up period, then explore-and-train: one
    minibatch update per step, sampled from the buffer collected so far.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = agent.config
    ds = BatchDataset(env.env_id, env.obs_dim, env.act_dim, seed=header_seed)
    obs = env.reset()
    for t in range(steps):
        if t < cfg.warmup:
            a = rng.uniform(-1.0, 1.0, size=agent.act_dim)
        else:
            a = agent.act(obs, explore=True, rng=rng)
        obs2, r, done, _ = env.step(Action(float(a[0]), float(a[1])))
        ds.append(Transition(obs, a, r, obs2, done))
        if t + 1 >= cfg.warmup:
            agent.update(ds.sample_arrays(cfg.batch, rng))
        obs = env.reset() if done else obs2
    return ds


def collect_dataset(env_id, steps, seed, env_config=None, ddpg_config=None):
    """Seeded end-to-end collection: environment, agent init, and exploration
    all derive from one 64-bit seed."""
    from .drivesim import make_env

    env_ss, init_ss, run_ss = np.random.SeedSequence(seed).spawn(3)
    env = make_env(env_id, seed=env_ss, config=env_config)
    agent = DdpgAgent(
        env.obs_dim, env.act_dim,
        ddpg_config if ddpg_config is not None else DdpgConfig(),
        np.random.default_rng(init_ss),
    )
    return collect(agent, env, steps, np.random.default_rng(run_ss), header_seed=seed)
