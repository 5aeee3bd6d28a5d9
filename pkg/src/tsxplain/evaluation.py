"""Mask-aware per-time-step metrics and aggregation over repeated runs.

Steps where a metric is undefined (a class is missing among the patients
still in the ICU at that step) are flagged as None rather than imputed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Cohort
from .errors import DataError
from .model import TrainedModel, forward_prepared

METRICS = ("roc_auc", "sensitivity", "specificity")

StepTable = dict  # metric name -> list of Optional[float], one per step


@dataclass
class MetricSeries:
    name: str
    mean: np.ndarray  # (T,)
    std: np.ndarray  # (T,)
    defined: np.ndarray  # (T,) bool
    n_defined: np.ndarray  # (T,) runs contributing per step
    n_repeats: int


@dataclass
class DeltaReport:
    """Per-step differences a - b; negative values mean b outperforms a."""

    mean_delta: dict  # metric -> (T,)
    std_delta: dict
    defined: dict
    sign_convention: str = "negative values indicate the second model outperforms the first"


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.shape[0])
    sx = x[order]
    i = 0
    while i < x.shape[0]:
        j = i
        while j + 1 < x.shape[0] and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc_step(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC: probability a random positive outscores a random
    negative, ties counted 1/2. None when a class is missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise DataError("scores and labels must have equal length")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def sens_spec_step(
    scores, labels, threshold: float
) -> tuple[Optional[float], Optional[float]]:
    """(sensitivity, specificity) at the threshold; score >= threshold is a
    positive call. A missing class flags that component None."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    pred = scores >= threshold
    pos = labels == 1
    neg = labels == 0
    sens = float(pred[pos].mean()) if pos.any() else None
    spec = float((~pred[neg]).mean()) if neg.any() else None
    return sens, spec


def evaluate(
    model: TrainedModel, test: Cohort, threshold: Optional[float] = None
) -> StepTable:
    """Per-step metric table over the patients valid at each step."""
    if not test.patients:
        raise DataError("test cohort is empty")
    if threshold is None:
        threshold = model.threshold
    X, M, y, valid = test.stacked()
    yhat = forward_prepared(X * M, model.gru, model.attention)
    table: StepTable = {m: [] for m in METRICS}
    for t in range(test.T):
        sel = valid[:, t]
        if not sel.any():
            for m in METRICS:
                table[m].append(None)
            continue
        s, l = yhat[sel, t], y[sel, t]
        table["roc_auc"].append(roc_auc_step(s, l))
        sens, spec = sens_spec_step(s, l, threshold)
        table["sensitivity"].append(sens)
        table["specificity"].append(spec)
    return table


def aggregate_repeats(runs: Sequence[StepTable]) -> dict[str, MetricSeries]:
    """Per-step mean and sample std over runs, skipping undefined entries;
    a step is defined iff at least 2 runs define it."""
    if len(runs) < 2:
        raise DataError("need at least 2 runs to aggregate")
    T = len(runs[0][METRICS[0]])
    for run in runs:
        for m in METRICS:
            if len(run[m]) != T:
                raise DataError("runs have misaligned steps")
    out = {}
    any_defined = False
    for m in METRICS:
        mean = np.zeros(T)
        std = np.zeros(T)
        defined = np.zeros(T, dtype=bool)
        n_def = np.zeros(T, dtype=np.int64)
        for t in range(T):
            vals = [run[m][t] for run in runs if run[m][t] is not None]
            n_def[t] = len(vals)
            if len(vals) >= 2:
                defined[t] = True
                any_defined = True
                mean[t] = float(np.mean(vals))
                std[t] = float(np.std(vals, ddof=1))
        out[m] = MetricSeries(
            name=m, mean=mean, std=std, defined=defined,
            n_defined=n_def, n_repeats=len(runs),
        )
    if not any_defined:
        raise DataError("no step is defined in at least 2 runs")
    return out


def delta_report(
    a: dict[str, MetricSeries], b: dict[str, MetricSeries]
) -> DeltaReport:
    if set(a) != set(b):
        raise DataError("series sets have different metrics")
    mean_delta, std_delta, defined = {}, {}, {}
    for m in a:
        if a[m].mean.shape != b[m].mean.shape:
            raise DataError("series are misaligned in steps")
        mean_delta[m] = a[m].mean - b[m].mean
        std_delta[m] = a[m].std - b[m].std
        defined[m] = a[m].defined & b[m].defined
        mean_delta[m][~defined[m]] = 0.0
        std_delta[m][~defined[m]] = 0.0
    return DeltaReport(mean_delta=mean_delta, std_delta=std_delta, defined=defined)


def save_metric_series(series: dict[str, MetricSeries], path) -> None:
    """Write `metric,t,mean,std,n_defined` rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "t", "mean", "std", "n_defined"])
        for m in METRICS:
            s = series[m]
            for t in range(s.mean.shape[0]):
                if s.defined[t]:
                    writer.writerow(
                        [m, t + 1, repr(float(s.mean[t])), repr(float(s.std[t])),
                         int(s.n_defined[t])]
                    )
                else:
                    writer.writerow([m, t + 1, "", "", int(s.n_defined[t])])


def load_metric_series(path) -> dict[str, MetricSeries]:
    rows: dict[str, list] = {m: [] for m in METRICS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for m, t, mean, std, n_def in reader:
            rows[m].append((int(t), mean, std, int(n_def)))
    out = {}
    for m, entries in rows.items():
        if not entries:
            raise DataError(f"metric {m} missing from {path}")
        T = max(t for t, *_ in entries)
        mean = np.zeros(T)
        std = np.zeros(T)
        defined = np.zeros(T, dtype=bool)
        n_def = np.zeros(T, dtype=np.int64)
        for t, m_str, s_str, n in entries:
            n_def[t - 1] = n
            if m_str != "":
                defined[t - 1] = True
                mean[t - 1] = float(m_str)
                std[t - 1] = float(s_str)
        out[m] = MetricSeries(
            name=m, mean=mean, std=std, defined=defined,
            n_defined=n_def, n_repeats=int(n_def.max()) if n_def.size else 0,
        )
    return out


def save_delta_report(report: DeltaReport, path) -> None:
    """Write `metric,t,mean_delta,std_delta` rows with the sign convention in
    a header comment row."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"# sign convention: {report.sign_convention}"])
        writer.writerow(["metric", "t", "mean_delta", "std_delta"])
        for m in METRICS:
            md = report.mean_delta[m]
            sd = report.std_delta[m]
            for t in range(md.shape[0]):
                if report.defined[m][t]:
                    writer.writerow(
                        [m, t + 1, repr(float(md[t])), repr(float(sd[t]))]
                    )
                else:
                    writer.writerow([m, t + 1, "", ""])
