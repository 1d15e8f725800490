#!/usr/bin/env python3
"""Full comparison protocol on one scenario: collect a behavior dataset,
train every algorithm across shared seeds, then evaluate, report, and emit
density grids per variant.

Everything is driven through the command-line interface so the run is
exactly what a user typing the commands would get. At the defaults
(parking, 5 seeds, 200 epochs) expect roughly 45 minutes on one CPU core;
--quick drops to a few minutes of smoke coverage.

    python3 scripts/run_protocol.py --out runs/parking
    python3 scripts/run_protocol.py --env highway --algos safe_bcq,noisy_bcq
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from batchdrive.cli import ALGOS, main  # noqa: E402


def stage(argv):
    print(f"\n$ batchdrive {' '.join(argv)}", flush=True)
    code = main(argv)
    if code != 0:
        sys.exit(code)


def run(args):
    os.makedirs(args.out, exist_ok=True)
    data = os.path.join(args.out, f"{args.env}.jsonl")
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    unknown = [a for a in algos if a not in ALGOS]
    if unknown:
        sys.exit(f"unknown algos {unknown}; valid: {', '.join(ALGOS)}")

    t0 = time.perf_counter()
    stage(["collect", "--env", args.env, "--steps", str(args.steps),
           "--seed", str(args.collect_seed), "--out", data])
    for algo in algos:
        argv = ["train", "--algo", algo, "--data", data, "--out", args.out,
                "--epochs", str(args.epochs), "--eval-every",
                str(args.eval_every), "--seeds", args.seeds]
        if args.config:
            argv += ["--config", args.config]
        stage(argv)
    stage(["evaluate", "--run", args.out,
           "--out", os.path.join(args.out, "eval")])
    for algo in algos:
        first_seed = args.seeds.split(",")[0].strip()
        ckpt = os.path.join(args.out, f"{algo}_seed{first_seed}",
                            "checkpoint_final.json")
        stage(["density", "--checkpoint", ckpt,
               "--out", os.path.join(args.out, f"density_{algo}.csv")])
    stage(["density", "--data", data,
           "--out", os.path.join(args.out, "density_dataset.csv")])
    stage(["report", "--runs", args.out,
           "--out", os.path.join(args.out, "summary.csv")])
    print(f"\nprotocol finished in {(time.perf_counter() - t0) / 60:.1f} min; "
          f"artifacts under {args.out}")


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--env", choices=("highway", "parking"), default="parking")
    p.add_argument("--out", default="runs/protocol")
    p.add_argument("--algos", default=",".join(ALGOS),
                   help=f"comma-separated subset of: {', '.join(ALGOS)}")
    p.add_argument("--steps", type=int, default=5000,
                   help="behavior-dataset size")
    p.add_argument("--collect-seed", type=int, default=0)
    p.add_argument("--seeds", default="0,1,2,3,4",
                   help="training seeds, shared across algorithms")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--config", default=None,
                   help="JSON config file forwarded to train")
    p.add_argument("--quick", action="store_true",
                   help="tiny smoke-scale settings (overrides sizes)")
    args = p.parse_args(argv)
    if args.quick:
        args.steps = 400
        args.seeds = "0,1"
        args.epochs = 10
        args.eval_every = 5
    return args


if __name__ == "__main__":
    run(parse_args())
