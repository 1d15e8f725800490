"""Command-line entry point: dataset collection, training, evaluation,
density analysis, and cross-run reports.

Configuration resolution is layered: built-in defaults, then a JSON config
file, then BATCHDRIVE_* environment variables, then flags. The fully
resolved values (with per-field provenance) are persisted next to every
training run so a run directory is reproducible from its own records.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import multiprocessing
import os
import sys

import numpy as np

from . import diffcore as dc
from . import evalkit
from .behavior import DdpgAgent, DdpgConfig, TrainingDiverged, collect_dataset
from .dataset import BatchDataset, DatasetError, Transition
from .drivesim import (
    ENV_IDS,
    Action,
    config_from_dict,
    config_to_dict,
    make_env,
)
from .lyapunov import LyapunovConfig
from .safebcq import (
    VARIANTS,
    SafeBcqAgent,
    TrainConfig,
    config_from_json_dict,
    config_to_json_dict,
    load_agent,
    resolve_run_dir,
    run_training,
)

ALGOS = VARIANTS + ("ddpg-online",)

ENV_PREFIX = "BATCHDRIVE_"


class UsageError(ValueError):
    """Bad arguments or configuration; maps to exit code 2."""


class ConfigResolver:
    """Layered lookup (default < file < env < flag) with provenance."""

    def __init__(self, file_cfg, args):
        self.file_cfg = file_cfg
        self.args = args
        self.resolved = {}

    def get(self, name, default, cast=None):
        value, source = default, "default"
        if name in self.file_cfg:
            value, source = self.file_cfg[name], "file"
        env_key = ENV_PREFIX + name.upper()
        if env_key in os.environ:
            raw = os.environ[env_key]
            value = cast(raw) if cast is not None else raw
            source = "env"
        flag = getattr(self.args, name, None)
        if flag is not None:
            value, source = flag, "flag"
        self.resolved[name] = {"value": value, "source": source}
        return value


def load_config_file(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def parse_seeds(text):
    try:
        seeds = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError:
        raise UsageError(f"cannot parse seed list {text!r}") from None
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def env_config_from_file(env_id, file_cfg):
    section = file_cfg.get("env")
    return config_from_dict(env_id, section) if section else None


def build_train_config(variant, file_cfg, epochs, eval_every):
    kw = dict(file_cfg.get("train", {}))
    if "hidden" in kw:
        kw["hidden"] = tuple(kw["hidden"])
    if "icnn_hidden" in kw:
        kw["icnn_hidden"] = tuple(kw["icnn_hidden"])
    if "lyapunov" in kw:
        kw["lyapunov"] = LyapunovConfig(**kw["lyapunov"])
    kw.update(variant=variant, epochs=epochs, eval_every=eval_every)
    try:
        return TrainConfig(**kw)
    except TypeError as e:
        raise UsageError(f"bad train config: {e}") from None


# ---------------------------------------------------------------------------
# online DDPG baseline


class OnlineDdpgTrainer:
    """DDPG trained on live environment interaction; one epoch is a fixed
    number of environment steps with one gradient update per step after
    warm-up."""

    def __init__(self, env_id, seed, config=None, env_config=None,
                 steps_per_epoch=100):
        self.config = config if config is not None else DdpgConfig()
        self.env_config = env_config
        self.env_id = env_id
        self.seed = seed
        self.steps_per_epoch = steps_per_epoch
        env_ss, init_ss, run_ss, eval_ss = np.random.SeedSequence(seed).spawn(4)
        self.env = make_env(env_id, seed=env_ss, config=env_config)
        self.agent = DdpgAgent(
            self.env.obs_dim, self.env.act_dim, self.config,
            np.random.default_rng(init_ss),
        )
        self.run_rng = np.random.default_rng(run_ss)
        self.eval_rng = np.random.default_rng(eval_ss)
        self.buffer = BatchDataset(env_id, self.env.obs_dim,
                                   self.env.act_dim, seed=seed)
        self.obs = self.env.reset()
        self.steps = 0
        self.epoch = 0

    def train_epoch(self):
        cfg = self.config
        sums = {"critic": 0.0, "actor": 0.0}
        updates = 0
        for _ in range(self.steps_per_epoch):
            if self.steps < cfg.warmup:
                a = self.run_rng.uniform(-1.0, 1.0, size=self.env.act_dim)
            else:
                a = self.agent.act(self.obs, explore=True, rng=self.run_rng)
            obs2, r, done, _ = self.env.step(Action(float(a[0]), float(a[1])))
            self.buffer.append(Transition(self.obs, a, r, obs2, done))
            self.steps += 1
            if self.steps >= cfg.warmup:
                losses = self.agent.update(
                    self.buffer.sample_arrays(cfg.batch, self.run_rng)
                )
                sums["critic"] += losses["critic"]
                sums["actor"] += losses["actor"]
                updates += 1
            self.obs = self.env.reset() if done else obs2
        self.epoch += 1
        if updates == 0:
            return {"critic": None, "actor": None}
        return {k: v / updates for k, v in sums.items()}

    def evaluate(self, episodes=5):
        env_rng, act_rng = self.eval_rng.spawn(2)
        env = make_env(self.env_id, seed=env_rng, config=self.env_config)
        policy = lambda obs, rng: self.agent.act(obs)
        return evalkit.evaluate_policy(
            policy, env, episodes, act_rng, epoch=self.epoch, seed=self.seed
        )


def save_ddpg_agent(path, trainer, extra=None):
    meta = {
        "kind": "ddpg",
        "env_id": trainer.env_id,
        "obs_dim": trainer.env.obs_dim,
        "act_dim": trainer.env.act_dim,
        "config": dataclasses.asdict(trainer.config),
    }
    if extra:
        meta.update(extra)
    dc.save_checkpoint(
        path, trainer.agent.nets(),
        adams={"actor": trainer.agent.actor_opt,
               "critic": trainer.agent.critic_opt},
        extra=meta,
    )


def load_ddpg_agent(path):
    nets, _, doc = dc.load_checkpoint(path)
    meta = doc["extra"]
    cfg_kw = dict(meta["config"])
    cfg_kw["hidden"] = tuple(cfg_kw["hidden"])
    agent = DdpgAgent(meta["obs_dim"], meta["act_dim"], DdpgConfig(**cfg_kw),
                      np.random.default_rng(0))
    agent.actor = nets["actor"]
    agent.critic = nets["critic"]
    agent.actor_target = nets["actor_target"]
    agent.critic_target = nets["critic_target"]
    agent.actor_opt = dc.Adam(agent.actor, lr=agent.config.lr)
    agent.critic_opt = dc.Adam(agent.critic, lr=agent.config.lr)
    return agent, meta


DDPG_DIAG_COLUMNS = ("epoch", "critic", "actor")


def run_online_training(env_id, seed, run_dir, epochs=200, eval_every=10,
                        eval_episodes=5, steps_per_epoch=100,
                        ddpg_config=None, env_config=None, progress=None):
    """Online baseline run with the same directory layout as offline runs."""
    os.makedirs(run_dir, exist_ok=True)
    for name in ("metrics.csv", "episodes.csv", "diagnostics.csv"):
        path = os.path.join(run_dir, name)
        if os.path.exists(path):  # appended files: a rerun starts clean
            os.remove(path)
    trainer = OnlineDdpgTrainer(env_id, seed, config=ddpg_config,
                                env_config=env_config,
                                steps_per_epoch=steps_per_epoch)
    doc = {
        "env_id": env_id,
        "seed": seed,
        "variant": "ddpg-online",
        "train": dataclasses.asdict(trainer.config),
        "epochs": epochs,
        "eval_every": eval_every,
        "steps_per_epoch": steps_per_epoch,
        "env": config_to_dict(env_config) if env_config is not None else None,
    }
    with open(os.path.join(run_dir, "config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)

    record = None
    for epoch in range(1, epochs + 1):
        diag = trainer.train_epoch()
        diag["epoch"] = epoch
        evalkit.append_csv_row(
            os.path.join(run_dir, "diagnostics.csv"), DDPG_DIAG_COLUMNS,
            {c: diag.get(c) for c in DDPG_DIAG_COLUMNS},
        )
        if epoch % eval_every == 0:
            record = trainer.evaluate(eval_episodes)
            evalkit.append_eval_record(run_dir, record, "ddpg-online", None)
            save_ddpg_agent(
                os.path.join(run_dir, f"checkpoint_{epoch:04d}.json"),
                trainer, extra={"epoch": epoch},
            )
            if progress is not None:
                progress(epoch, record)
    save_ddpg_agent(os.path.join(run_dir, "checkpoint_final.json"),
                    trainer, extra={"epoch": trainer.epoch})
    return {
        "run_dir": run_dir,
        "variant": "ddpg-online",
        "seed": seed,
        "epochs": trainer.epoch,
        "final_return": record.mean_return if record is not None else None,
        "final_success_rate": (record.success_rate if record is not None
                               else None),
    }


# ---------------------------------------------------------------------------
# checkpoint-driven policies


def load_policy(path):
    """(policy, meta) from a checkpoint of either trainer family.

    The greedy policy is a callable (obs, rng) -> action; `explore` asks the
    batch-constrained agents to resample their weight noise per call.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        kind = json.load(fh).get("extra", {}).get("kind", "safebcq")
    if kind == "ddpg":
        agent, meta = load_ddpg_agent(path)
        greedy = lambda obs, rng: agent.act(obs)
        explore = greedy
    else:
        agent, meta = load_agent(path)
        greedy = lambda obs, rng: agent.select_action(obs, rng, explore=False)
        explore = lambda obs, rng: agent.select_action(obs, rng, explore=True)
    meta["agent"] = agent
    return {"greedy": greedy, "explore": explore}, meta


def find_run_dirs(base):
    """`base` is either one run directory or a directory of run directories."""
    final = os.path.join(base, "checkpoint_final.json")
    if os.path.exists(final):
        return [base]
    if not os.path.isdir(base):
        raise FileNotFoundError(f"checkpoint not found: {final}")
    runs = sorted(
        d for d in (os.path.join(base, name) for name in os.listdir(base))
        if os.path.exists(os.path.join(d, "checkpoint_final.json"))
    )
    if not runs:
        raise FileNotFoundError(f"checkpoint not found: {final}")
    return runs


def run_env_setup(run_dir):
    with open(os.path.join(run_dir, "config.json"), "r",
              encoding="utf-8") as fh:
        doc = json.load(fh)
    env_id = doc["env_id"]
    env_config = config_from_dict(env_id, doc["env"]) if doc.get("env") else None
    return env_id, env_config, doc


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(args):
    file_cfg = load_config_file(args.config)
    r = ConfigResolver(file_cfg, args)
    env_id = r.get("env", "parking")
    steps = r.get("steps", 5000, int)
    seed = r.get("seed", 0, int)
    out = r.get("out", None)
    if env_id not in ENV_IDS:
        raise UsageError(
            f"unknown env {env_id!r}; valid: {', '.join(ENV_IDS)}"
        )
    if steps < 1:
        raise UsageError("--steps must be >= 1")
    if not out:
        raise UsageError("--out is required")
    env_config = env_config_from_file(env_id, file_cfg)
    ds = collect_dataset(env_id, steps, seed, env_config=env_config)
    ds.save(out)
    _, _, R, _, _ = ds.stacked()
    print(f"collected {ds.count} transitions from {env_id} "
          f"(mean reward {float(np.mean(R)):.4f}) -> {out}")
    return 0


def _train_seed_payload(payload):
    ds = BatchDataset.load(payload["data"])
    config = config_from_json_dict(payload["config"])
    env_config = (config_from_dict(ds.env_id, payload["env"])
                  if payload["env"] else None)
    return run_training(ds, config, payload["seed"], payload["run_dir"],
                        env_config=env_config)


def cmd_train(args):
    file_cfg = load_config_file(args.config)
    r = ConfigResolver(file_cfg, args)
    algo = r.get("algo", None)
    data = r.get("data", None)
    out = r.get("out", None)
    epochs = r.get("epochs", 200, int)
    eval_every = r.get("eval_every", 10, int)
    seeds = parse_seeds(r.get("seeds", "0,1,2,3,4", str))
    jobs = r.get("jobs", 1, int)
    if algo not in ALGOS:
        raise UsageError(
            f"unknown algo {algo!r}; valid: {', '.join(ALGOS)}"
        )
    if not data:
        raise UsageError("--data is required")
    if not out:
        raise UsageError("--out is required")
    if not os.path.exists(data):
        raise UsageError(f"dataset not found: {data}")

    ds = BatchDataset.load(data)
    env_config = env_config_from_file(ds.env_id, file_cfg)
    os.makedirs(out, exist_ok=True)

    run_doc = {"resolved": r.resolved, "env_id": ds.env_id,
               "env": config_to_dict(env_config) if env_config else None}
    if algo == "ddpg-online":
        ddpg_kw = dict(file_cfg.get("ddpg", {}))
        if "hidden" in ddpg_kw:
            ddpg_kw["hidden"] = tuple(ddpg_kw["hidden"])
        ddpg_config = DdpgConfig(**ddpg_kw)
        run_doc["train"] = dataclasses.asdict(ddpg_config)
    else:
        config = build_train_config(algo, file_cfg, epochs, eval_every)
        run_doc["train"] = config_to_json_dict(config)
    with open(os.path.join(out, "run_config.json"), "w",
              encoding="utf-8") as fh:
        json.dump(run_doc, fh, indent=2)

    summaries = []
    if algo == "ddpg-online":
        for seed in seeds:
            summary = run_online_training(
                ds.env_id, seed, resolve_run_dir(out, algo, seed),
                epochs=epochs, eval_every=eval_every,
                ddpg_config=ddpg_config, env_config=env_config,
            )
            summaries.append(summary)
    elif jobs > 1:
        payloads = [
            {"data": data, "config": config_to_json_dict(config),
             "seed": seed, "run_dir": resolve_run_dir(out, algo, seed),
             "env": config_to_dict(env_config) if env_config else None}
            for seed in seeds
        ]
        with multiprocessing.Pool(processes=jobs) as pool:
            summaries = pool.map(_train_seed_payload, payloads)
    else:
        for seed in seeds:
            summaries.append(run_training(
                ds, config, seed, resolve_run_dir(out, algo, seed),
                env_config=env_config,
            ))
    for s in summaries:
        final = s["final_return"]
        shown = "n/a" if final is None else f"{final:.4f}"
        print(f"{s['variant']} seed {s['seed']}: {s['epochs']} epochs, "
              f"final return {shown} -> {s['run_dir']}")
    return 0


def cmd_evaluate(args):
    r = ConfigResolver(load_config_file(args.config), args)
    base = r.get("run", None)
    episodes = r.get("episodes", 5, int)
    eval_seed = r.get("seed", 0, int)
    out = r.get("out", None)
    if not base:
        raise UsageError("--run is required")
    if episodes < 1:
        raise UsageError("--episodes must be >= 1")
    run_dirs = find_run_dirs(base)
    out_dir = out if out else os.path.join(base, "eval")
    os.makedirs(out_dir, exist_ok=True)
    for name in ("metrics.csv", "episodes.csv"):
        path = os.path.join(out_dir, name)
        if os.path.exists(path):
            os.remove(path)
    for run_dir in run_dirs:
        policies, meta = load_policy(
            os.path.join(run_dir, "checkpoint_final.json")
        )
        env_id, env_config, doc = run_env_setup(run_dir)
        env_rng, act_rng = np.random.default_rng(
            np.random.SeedSequence(eval_seed)
        ).spawn(2)
        env = make_env(env_id, seed=env_rng, config=env_config)
        record = evalkit.evaluate_policy(
            policies["greedy"], env, episodes, act_rng,
            epoch=meta.get("epoch", 0), seed=doc.get("seed", 0),
        )
        evalkit.append_eval_record(out_dir, record, doc["variant"], None)
        print(f"{doc['variant']} seed {doc.get('seed')}: "
              f"mean return {record.mean_return:.4f}, "
              f"success rate {record.success_rate:.2f}")
    print(f"wrote {os.path.join(out_dir, 'metrics.csv')}")
    return 0


def rollout_pairs(policy, env, episodes, rng):
    """Visited (state, action) pairs over exploration rollouts."""
    states, actions = [], []
    for _ in range(episodes):
        obs = env.reset()
        while not env.done:
            a = policy(obs, rng)
            states.append(np.asarray(obs, dtype=float))
            actions.append(np.asarray(a, dtype=float))
            obs, _, _, _ = env.step(Action(float(a[0]), float(a[1])))
    return states, actions


def scores_for(vectors):
    """1-D projection scores; fewer than two vectors project to zero."""
    if len(vectors) < 2:
        return np.zeros(len(vectors)), None
    axis = evalkit.pca_1d(vectors)
    return axis.scores, axis


def cmd_density(args):
    r = ConfigResolver(load_config_file(args.config), args)
    data = r.get("data", None)
    checkpoint = r.get("checkpoint", None)
    episodes = r.get("episodes", 10, int)
    bins = r.get("bins", 50, int)
    seed = r.get("seed", 0, int)
    out = r.get("out", None)
    if not out:
        raise UsageError("--out is required")
    if (data is None) == (checkpoint is None):
        raise UsageError("exactly one of --data or --checkpoint is required")

    if data is not None:
        ds = BatchDataset.load(data)
        S, A, _, _, _ = ds.stacked()
        states, actions = list(S), list(A)
    else:
        policies, meta = load_policy(checkpoint)
        env_rng, act_rng, noise_rng = np.random.default_rng(
            np.random.SeedSequence(seed)
        ).spawn(3)
        if hasattr(meta["agent"], "noise_rng"):
            meta["agent"].noise_rng = noise_rng
        env = make_env(meta["env_id"], seed=env_rng)
        states, actions = rollout_pairs(policies["explore"], env, episodes,
                                        act_rng)
        if not states:
            raise RuntimeError("rollouts produced no state-action pairs")

    s_scores, s_axis = scores_for(states)
    a_scores, a_axis = scores_for(actions)
    grid = evalkit.density_grid(s_scores, a_scores, bins=bins,
                                state_axis=s_axis, action_axis=a_axis)
    evalkit.write_density_csv(grid, out)
    print(f"projected {len(s_scores)} state-action pairs -> {out}")
    return 0


def cmd_report(args):
    r = ConfigResolver(load_config_file(args.config), args)
    base = r.get("runs", None)
    final_episodes = r.get("final_episodes", 20, int)
    out = r.get("out", None)
    if not base or not os.path.isdir(base):
        raise UsageError(f"--runs must name a directory (got {base!r})")
    run_dirs = [
        d for d in sorted(os.path.join(base, n) for n in os.listdir(base))
        if os.path.exists(os.path.join(d, "metrics.csv"))
    ]
    if not run_dirs:
        raise FileNotFoundError(f"no run directories with metrics.csv in {base}")
    rows = evalkit.summarize_runs(run_dirs, final_episodes=final_episodes)
    header = (f"{'variant':<14} {'runs':>4} {'final return':>22} "
              f"{'success':>8} {'med min dist':>13}")
    print(header)
    for row in rows:
        ret = f"{row['final_return_mean']:.3f} +/- {row['final_return_std']:.3f}"
        dist = row["median_min_distance"]
        dist_s = "inf" if math.isinf(dist) else f"{dist:.3f}"
        print(f"{row['variant']:<14} {row['runs']:>4} {ret:>22} "
              f"{row['success_rate']:>8.2f} {dist_s:>13}")
    if out:
        if os.path.exists(out):
            os.remove(out)
        cols = ("variant", "runs", "final_return_mean", "final_return_std",
                "success_rate", "median_min_distance")
        for row in rows:
            evalkit.append_csv_row(out, cols, {c: row[c] for c in cols})
        print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(
        prog="batchdrive",
        description="Offline batch-constrained driving agents: collect, "
                    "train, evaluate, analyze.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="run the online collector and save a "
                                       "transition dataset")
    p.add_argument("--env", choices=ENV_IDS, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train an algorithm on a dataset "
                                     "across seeds")
    p.add_argument("--algo", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--seeds", default=None,
                   help="comma-separated list, default 0,1,2,3,4")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="greedy rollouts from final "
                                        "checkpoints")
    p.add_argument("--run", default=None,
                   help="run directory or directory of runs")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("density", help="1-D PCA state-action density grid")
    p.add_argument("--data", default=None, help="project a dataset file")
    p.add_argument("--checkpoint", default=None,
                   help="roll out a checkpoint in exploration mode")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("report", help="cross-run summary table")
    p.add_argument("--runs", default=None)
    p.add_argument("--final-episodes", dest="final_episodes", type=int,
                   default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, DatasetError, FileNotFoundError, OSError,
            RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())
