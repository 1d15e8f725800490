#!/usr/bin/env python3
"""Two-minute tour of the library API (no CLI): collect a small parking
batch, train two variants on it, compare greedy evaluations, and print
where the learned policy concentrates in the 1-D PCA action space.

    python3 scripts/quick_demo.py [--out /tmp/batchdrive_demo]
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from batchdrive import evalkit  # noqa: E402
from batchdrive.behavior import collect_dataset  # noqa: E402
from batchdrive.safebcq import TrainConfig, run_training  # noqa: E402


def demo(out):
    t0 = time.perf_counter()
    print("collecting 800 parking steps with the online behavior agent...")
    ds = collect_dataset("parking", 800, seed=0)
    _, A, R, _, _ = ds.stacked()
    print(f"  {ds.count} transitions, mean reward {R.mean():.3f}, "
          f"action coverage [{A.min():.2f}, {A.max():.2f}]")

    cfg_kw = dict(
        hidden=(32, 32), icnn_hidden=(16, 16), minibatch=64,
        iters_per_epoch=50, epochs=30, eval_every=10,
    )
    summaries = {}
    for variant in ("bcq", "safe_bcq"):
        print(f"training {variant} (30 epochs)...")
        run_dir = os.path.join(out, f"{variant}_seed0")
        summaries[variant] = run_training(
            ds, TrainConfig(variant=variant, **cfg_kw), seed=0,
            run_dir=run_dir,
        )

    print(f"\n{'variant':<10} {'final return':>14} {'success':>8}")
    for variant, s in summaries.items():
        print(f"{variant:<10} {s['final_return']:>14.3f} "
              f"{s['final_success_rate']:>8.2f}")

    rows = evalkit.summarize_runs(
        [s["run_dir"] for s in summaries.values()], final_episodes=10
    )
    print("\ncross-run summary (final 10 evaluation episodes):")
    for row in rows:
        print(f"  {row['variant']}: return {row['final_return_mean']:.3f} "
              f"+/- {row['final_return_std']:.3f}, "
              f"success {row['success_rate']:.2f}")

    axis = evalkit.pca_1d(list(A))
    grid = evalkit.density_grid(
        np.zeros_like(axis.scores), axis.scores, bins=21
    )
    occupied = int((grid.counts > 0).sum())
    print(f"\ndataset action PCA: axis {np.round(axis.vector, 3)}, "
          f"variance ratio {axis.variance_ratio:.2f}, "
          f"{occupied}/21 density cells occupied")
    print(f"\ndone in {time.perf_counter() - t0:.0f}s; runs under {out}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="/tmp/batchdrive_demo")
    demo(p.parse_args().out)
