#!/usr/bin/env python3
"""Benchmark the masked GRU on synthetic cohorts, with and without attention.

For each seed: generate a cohort, split it 80/20 at the patient level,
train both model variants, and evaluate per-time-step ROC AUC, sensitivity,
and specificity on the held-out patients. Prints an aggregate table over
seeds plus the attention-minus-plain delta, and writes the per-variant
metric series to CSV.

Usage:
    python3 scripts/run_benchmark.py --seeds 0 1 2 --out-dir bench_out
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from tsxplain.data import SynthConfig, split_train_test, synth_cohort
from tsxplain.evaluation import (
    aggregate_repeats,
    delta_report,
    evaluate,
    save_metric_series,
)
from tsxplain.model import TrainConfig, train
from tsxplain.numerics import RngStream


def parse_args() -> argparse.Namespace:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--n-patients", type=int, default=1000)
    ap.add_argument("--mdr-fraction", type=float, default=0.15)
    ap.add_argument("--signal-strength", type=float, default=6.0)
    ap.add_argument("--hidden-size", type=int, default=8)
    ap.add_argument("--max-epochs", type=int, default=60)
    ap.add_argument("--patience", type=int, default=8)
    ap.add_argument("--cv-folds", type=int, default=3)
    ap.add_argument("--learning-rates", type=float, nargs="+", default=[0.25, 0.5])
    ap.add_argument("--out-dir", type=Path, default=Path("bench_out"))
    return ap.parse_args()


def run_one(seed: int, args: argparse.Namespace, use_attention: bool):
    cohort = synth_cohort(
        SynthConfig(
            n_patients=args.n_patients,
            mdr_fraction=args.mdr_fraction,
            signal_strength=args.signal_strength,
            seed=seed,
        )
    )
    train_c, test_c = split_train_test(cohort, 0.8, RngStream(seed).child(1))
    cfg = TrainConfig(
        seed=seed,
        hidden_size=args.hidden_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        cv_folds=args.cv_folds,
        grid_learning_rates=tuple(args.learning_rates),
    )
    model = train(train_c, cfg, use_attention=use_attention)
    return evaluate(model, test_c)


def summarize(name: str, series) -> None:
    auc = series["roc_auc"]
    defined = auc.defined
    mean_auc = float(auc.mean[defined].mean()) if defined.any() else float("nan")
    print(f"\n{name}: mean test AUC over defined steps = {mean_auc:.3f}")
    print("  step   auc(mean+/-std)   sens(mean)   spec(mean)")
    for t in range(auc.mean.size):
        if not defined[t]:
            continue
        sens = series["sensitivity"]
        spec = series["specificity"]
        print(
            f"  {t + 1:4d}   {auc.mean[t]:.3f} +/- {auc.std[t]:.3f}"
            f"      {sens.mean[t]:.3f}        {spec.mean[t]:.3f}"
        )


def main() -> None:
    args = parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for use_attention in (True, False):
        label = "attention" if use_attention else "plain"
        runs = []
        for seed in args.seeds:
            t0 = time.perf_counter()
            runs.append(run_one(seed, args, use_attention))
            print(f"[{label} seed {seed}] done in {time.perf_counter() - t0:.1f} s")
        series = aggregate_repeats(runs)
        results[label] = series
        save_metric_series(series, args.out_dir / f"metrics_{label}.csv")
        summarize(label, series)

    delta = delta_report(results["attention"], results["plain"])
    d = delta.mean_delta["roc_auc"]
    mask = delta.defined["roc_auc"]
    print("\nattention - plain, per-step AUC delta:")
    print("  " + "  ".join(f"{v:+.3f}" for v in d[mask]))
    print(f"  mean delta = {float(np.mean(d[mask])):+.3f}")
    print(f"\nmetric CSVs written to {args.out_dir}/")


if __name__ == "__main__":
    main()
