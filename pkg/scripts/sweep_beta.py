"""Sweep the drift-penalty weight beta (beta_T = beta_S) for the delta method.

Trains one delta run per beta on an existing data / pretrain / curvature
triple and writes one CSV row per beta with the mean linearization error on
the task test splits, merged accuracy at alpha = 1 and the best accuracy over
the addition grid.

    python scripts/sweep_beta.py --data runs/data --checkpoint runs/pretrain \
        --curvature runs/curvature --out runs/beta_sweep --betas 0,1,3,10,30
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from delta_lab import arithmetic as ar
from delta_lab import linearize as lz
from delta_lab import pipeline as pl


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--curvature", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--betas", default="0,1,3,10,30")
    p.add_argument("--steps", type=int)
    p.add_argument("--workers", type=int)
    args = p.parse_args(argv)

    out = Path(args.out)
    workers = pl.resolve_workers(args.workers)
    betas = [float(b) for b in args.betas.split(",") if b]
    model = pl.load_model(args.checkpoint)
    suite = pl.load_suite(args.data)
    ev = pl.Evaluator(model, suite)
    X = np.concatenate([t.test()[0] for t in suite.tasks])
    indices = range(len(suite.tasks))
    grid = ar.ADDITION_GRID

    rows = []
    for beta in betas:
        run_dir = out / f"beta_{pl.fmt(beta)}"
        cfg = pl.effective_config("train", flags={"beta_T": beta, "beta_S": beta, "steps": args.steps})
        pl.train(cfg, args.data, args.checkpoint, run_dir, args.curvature, workers)
        run = pl.load_run(run_dir, model, suite=suite)
        taus = [run.students[t.task_id] for t in suite.tasks]
        thetas = [model.theta0.values + t.values for t in taus]
        linerr = float(np.mean(lz.linearization_error(model.spec, thetas, X)))
        curve = [float(np.mean(c)) for c in pl.addition(ev, taus, indices, grid, workers)]
        rows.append([beta, linerr, curve[-1], max(curve), grid[int(np.argmax(curve))]])
        print(f"beta {pl.fmt(beta):>8}  linerr {pl.fmt(linerr):>10}  merged@1 {pl.fmt(curve[-1]):>10}  best {pl.fmt(max(curve))}")

    pl.write_csv(out / "beta_sweep.csv", ["beta", "mean_linearization_error", "merged_alpha1", "best_accuracy", "best_alpha"], rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
