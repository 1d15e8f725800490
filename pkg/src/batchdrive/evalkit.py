"""Policy evaluation and analysis: greedy rollouts with return, success,
and distance accounting, plus 1-D principal-component projections of visited
states and actions binned into density grids for external plotting."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .drivesim import Action


@dataclass
class EpisodeTrace:
    """Per-step log of one rollout."""

    actions: list = field(default_factory=list)      # (steer, accel) pairs
    rewards: list = field(default_factory=list)
    min_distances: list = field(default_factory=list)

    def rows(self):
        return [
            (t, a[0], a[1], d)
            for t, (a, d) in enumerate(zip(self.actions, self.min_distances))
        ]


@dataclass
class EvalRecord:
    """One evaluation point: a handful of greedy episodes."""

    epoch: int
    seed: int
    returns: list
    min_distances: list   # per-episode minimum over steps
    successes: list
    traces: list

    def __post_init__(self):
        if not all(math.isfinite(r) for r in self.returns):
            raise ValueError("episode returns must be finite")
        if any(d < 0 for d in self.min_distances):
            raise ValueError("distances cannot be negative")

    @property
    def mean_return(self):
        return float(np.mean(self.returns))

    @property
    def success_rate(self):
        return float(np.mean([1.0 if s else 0.0 for s in self.successes]))

    @property
    def median_min_distance(self):
        return float(np.median(self.min_distances))


def rollout(policy, env, rng):
    """One episode under `policy(obs, rng) -> action in [-1,1]^2`.

    Returns (return, success, episode min distance, trace). An environment
    that is already done at reset (e.g. placed at the goal) yields an empty
    zero-return episode.
    """
    obs = env.reset()
    trace = EpisodeTrace()
    total = 0.0
    success = bool(getattr(env, "success", False))
    while not env.done:
        a = policy(obs, rng)
        obs, r, done, info = env.step(Action(float(a[0]), float(a[1])))
        total += r
        trace.actions.append((float(a[0]), float(a[1])))
        trace.rewards.append(float(r))
        trace.min_distances.append(float(info.get("min_distance", math.inf)))
        if done:
            success = bool(info.get(
                "success",
                not (info.get("collision", False) or info.get("departed", False)),
            ))
    episode_min = min(trace.min_distances) if trace.min_distances else math.inf
    return total, success, episode_min, trace


def evaluate_policy(policy, env, episodes, rng, epoch=0, seed=0):
    """Greedy evaluation: `episodes` rollouts, aggregated into an EvalRecord."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    returns, mins, successes, traces = [], [], [], []
    for _ in range(episodes):
        total, success, episode_min, trace = rollout(policy, env, rng)
        returns.append(total)
        successes.append(success)
        mins.append(episode_min)
        traces.append(trace)
    return EvalRecord(epoch, seed, returns, mins, successes, traces)


def min_distance_trace(trajectory):
    """Per-step min center distance to any HDV; +inf when none are present.

    `trajectory` is a list of per-step dicts with "ego_xy" and "hdv_xy"
    entries, matching the environment's step info.
    """
    out = []
    for step in trajectory:
        ex, ey = step["ego_xy"]
        dists = [math.hypot(hx - ex, hy - ey) for hx, hy in step.get("hdv_xy", [])]
        out.append(min(dists) if dists else math.inf)
    return out


def success_rate(records):
    """Fraction of successful episodes pooled over evaluation records."""
    flags = [s for rec in records for s in rec.successes]
    if not flags:
        raise ValueError("no episodes to aggregate")
    return float(np.mean([1.0 if s else 0.0 for s in flags]))


# ---------------------------------------------------------------------------
# principal-component projection


@dataclass
class PcaAxis:
    vector: np.ndarray
    mean: np.ndarray
    scores: np.ndarray
    variance_ratio: float
    degenerate: bool


def pca_1d(vectors):
    """First principal component of mean-centered data.

    Scores are the centered data projected on the unit eigenvector of the
    largest covariance eigenvalue; the sign convention makes the score of
    largest magnitude positive. Zero-variance input is flagged and yields
    all-zero scores.
    """
    X = np.atleast_2d(np.asarray(vectors, dtype=float))
    if X.shape[0] < 2:
        raise ValueError("need at least two vectors")
    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    total = float(np.sum(evals))
    top = float(evals[-1])
    if top <= 1e-12 * max(1.0, abs(total)):
        return PcaAxis(evecs[:, -1].copy(), mean, np.zeros(X.shape[0]), 0.0, True)
    vec = evecs[:, -1]
    scores = centered @ vec
    if scores[np.argmax(np.abs(scores))] < 0:
        vec = -vec
        scores = -scores
    return PcaAxis(vec.copy(), mean, scores, top / total, False)


@dataclass
class DensityGrid:
    state_edges: np.ndarray
    action_edges: np.ndarray
    counts: np.ndarray
    state_axis: PcaAxis = None
    action_axis: PcaAxis = None

    @property
    def bins(self):
        return self.counts.shape[0]


def density_grid(state_scores, action_scores, bins=50, state_axis=None,
                 action_axis=None):
    """2D histogram of paired 1-D scores over [min, max] per axis."""
    s = np.asarray(state_scores, dtype=float)
    a = np.asarray(action_scores, dtype=float)
    if s.size == 0:
        raise ValueError("no scores to bin")
    if s.shape != a.shape:
        raise ValueError("score lists must have equal length")

    def span(x):
        lo, hi = float(np.min(x)), float(np.max(x))
        if lo == hi:  # degenerate axis: pad so the single value bins cleanly
            lo, hi = lo - 0.5, hi + 0.5
        return lo, hi

    counts, s_edges, a_edges = np.histogram2d(
        s, a, bins=bins, range=[span(s), span(a)]
    )
    return DensityGrid(s_edges, a_edges, counts.astype(int),
                       state_axis, action_axis)


def build_density(states, actions, bins=50):
    """PCA-project states and actions to 1-D each, then bin jointly."""
    s_axis = pca_1d(states)
    a_axis = pca_1d(actions)
    return density_grid(s_axis.scores, a_axis.scores, bins=bins,
                        state_axis=s_axis, action_axis=a_axis)


# ---------------------------------------------------------------------------
# file outputs


def write_density_csv(grid, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state_min", "state_max", "action_min", "action_max",
                         "bins"])
        writer.writerow([
            repr(float(grid.state_edges[0])), repr(float(grid.state_edges[-1])),
            repr(float(grid.action_edges[0])), repr(float(grid.action_edges[-1])),
            grid.bins,
        ])
        for row in grid.counts:
            writer.writerow([int(c) for c in row])


def read_density_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    s_lo, s_hi, a_lo, a_hi = (float(v) for v in rows[1][:4])
    bins = int(rows[1][4])
    counts = np.array([[int(c) for c in row] for row in rows[2:]], dtype=int)
    if counts.shape != (bins, bins):
        raise ValueError(f"expected {bins}x{bins} counts in {path}")
    return DensityGrid(np.linspace(s_lo, s_hi, bins + 1),
                       np.linspace(a_lo, a_hi, bins + 1), counts)


def write_trace_csv(trace, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "steer", "accel", "min_distance"])
        for t, steer, accel, dist in trace.rows():
            writer.writerow([t, repr(steer), repr(accel), repr(dist)])


# ---------------------------------------------------------------------------
# metrics files (shared schema across trainers)


METRIC_COLUMNS = (
    "epoch", "seed", "variant", "mean_return", "success_rate", "min_distance",
    "L_s",
)

EPISODE_COLUMNS = (
    "epoch", "seed", "variant", "episode", "episode_return", "success",
    "min_distance",
)


def fmt(x):
    if x is None:
        return "nan"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def append_csv_row(path, columns, row):
    new = not os.path.exists(path)
    with open(path, "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        writer.writerow([fmt(row[c]) for c in columns])


def append_eval_record(run_dir, record, variant, risk):
    """One metrics.csv row plus per-episode rows for an evaluation point."""
    append_csv_row(os.path.join(run_dir, "metrics.csv"), METRIC_COLUMNS, {
        "epoch": record.epoch,
        "seed": record.seed,
        "variant": variant,
        "mean_return": record.mean_return,
        "success_rate": record.success_rate,
        "min_distance": record.median_min_distance,
        "L_s": risk,
    })
    for i, (ret, success, dist) in enumerate(
        zip(record.returns, record.successes, record.min_distances)
    ):
        append_csv_row(os.path.join(run_dir, "episodes.csv"), EPISODE_COLUMNS, {
            "epoch": record.epoch,
            "seed": record.seed,
            "variant": variant,
            "episode": i,
            "episode_return": ret,
            "success": int(success),
            "min_distance": dist,
        })


def read_metrics(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def read_episodes(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_runs(run_dirs, final_episodes=20):
    """Per-variant summary across run directories.

    Returns rows keyed by variant with mean and standard deviation of the
    final evaluation return across seeds, pooled final success rate, and the
    median per-episode minimum distance over the last `final_episodes`
    episodes per seed.
    """
    by_variant = {}
    for run_dir in run_dirs:
        metrics = read_metrics(os.path.join(run_dir, "metrics.csv"))
        if not metrics:
            raise ValueError(f"empty metrics.csv under {run_dir}")
        last = metrics[-1]
        variant = last["variant"]
        entry = by_variant.setdefault(
            variant, {"finals": [], "success": [], "dists": []}
        )
        entry["finals"].append(float(last["mean_return"]))
        entry["success"].append(float(last["success_rate"]))
        episodes = read_episodes(os.path.join(run_dir, "episodes.csv"))
        tail = episodes[-final_episodes:]
        entry["dists"].extend(float(row["min_distance"]) for row in tail)

    rows = []
    for variant in sorted(by_variant):
        entry = by_variant[variant]
        rows.append({
            "variant": variant,
            "runs": len(entry["finals"]),
            "final_return_mean": float(np.mean(entry["finals"])),
            "final_return_std": float(np.std(entry["finals"])),
            "success_rate": float(np.mean(entry["success"])),
            "median_min_distance": float(np.median(entry["dists"])),
        })
    return rows
