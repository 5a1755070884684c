"""Selection, estimation and prediction metrics, and the repeated
train/test split harness."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .ald import as_tau, check_loss
from .em import Dataset


@dataclass(frozen=True)
class IdentificationReport:
    tp: int
    fp: int
    fn: int
    tn: int
    f1: float
    mcc: float


@dataclass(frozen=True)
class PredictionReport:
    pmad: float
    pmse: float
    check_loss_mean: float


@dataclass(frozen=True)
class PredictionSummary:
    """Mean and sample sd (ddof=1) of each metric over the splits."""
    pmad_mean: float
    pmad_sd: float
    pmse_mean: float
    pmse_sd: float
    check_loss_mean: float
    check_loss_sd: float
    per_split: tuple


def _same_length(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def f1_score(tp, fp, fn):
    den = 2 * tp + fp + fn
    return 2.0 * tp / den if den else 0.0


def matthews(tp, fp, fn, tn):
    """MCC, 0 when any confusion-matrix margin is empty."""
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def identification_metrics(beta_hat, beta_true) -> IdentificationReport:
    """Confusion counts with "positive" meaning exactly nonzero."""
    bh, bt = _same_length(beta_hat, beta_true)
    sel = bh != 0
    act = bt != 0
    tp = int(np.sum(sel & act))
    fp = int(np.sum(sel & ~act))
    fn = int(np.sum(~sel & act))
    tn = int(np.sum(~sel & ~act))
    return IdentificationReport(tp, fp, fn, tn, f1_score(tp, fp, fn), matthews(tp, fp, fn, tn))


def estimation_error(beta_hat, beta_true) -> float:
    bh, bt = _same_length(beta_hat, beta_true)
    return float(np.sum(np.abs(bh - bt)))


def prediction_errors(y, yhat, tau=0.5) -> PredictionReport:
    y, yhat = _same_length(y, yhat)
    if y.size == 0:
        raise ValueError("prediction metrics need at least one observation")
    r = y - yhat
    return PredictionReport(pmad=float(np.mean(np.abs(r))), pmse=float(np.mean(r * r)),
                            check_loss_mean=float(np.mean(check_loss(r, as_tau(tau)))))


def _mean_sd(x):
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return float(np.mean(x)), sd


def multi_split_eval(data: Dataset, fitter: Callable, n_splits: int = 100,
                     train_fraction: float = 0.75, rng=None, tau: float = 0.5
                     ) -> PredictionSummary:
    """Repeated random train/test evaluation.

    ``fitter(train, rng)`` must return an object with ``predict(Z, X)``;
    any tuning it does sees only ``train``. Split ``s`` draws its
    permutation and the fitter's generator from ``rng`` in split order.
    """
    n = data.n
    if n < 4:
        raise ValueError("multi-split evaluation needs n >= 4")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(train_fraction * n))
    if n_train < 2 or n - n_train < 1:
        raise ValueError(f"degenerate split sizes: {n_train} train / {n - n_train} test")
    if n_splits < 1:
        raise ValueError("need at least one split")
    rng = np.random.default_rng(rng)
    tau = as_tau(tau)
    reports = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        child = np.random.default_rng(rng.integers(2 ** 63))
        train, test = data.subset(np.sort(perm[:n_train])), data.subset(np.sort(perm[n_train:]))
        model = fitter(train, child)
        reports.append(prediction_errors(test.y, model.predict(test.Z, test.X), tau))
    pmad = _mean_sd([r.pmad for r in reports])
    pmse = _mean_sd([r.pmse for r in reports])
    cl = _mean_sd([r.check_loss_mean for r in reports])
    return PredictionSummary(pmad[0], pmad[1], pmse[0], pmse[1], cl[0], cl[1], tuple(reports))
