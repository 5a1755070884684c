"""Selection of the spike and slab scales (s0, s1).

Two criteria are provided: the quantile Schwarz information criterion and
k-fold cross-validated prediction loss. Both scan a rectangular grid,
fitting every admissible cell (s0 < s1).

Starting values
---------------
The posterior is multimodal, and EM from the all-zero start of
:func:`ssqlasso.em.initialize` is absorbed by the null model whenever the
spike penalty is strong (theta decays towards 0 before any coefficient can
enter). Each cell is therefore fitted from a small deterministic set of
starts and the fit with the largest log posterior is kept:

* the all-zero start,
* plain LASSO solutions at a few fractions of lambda_max, and their
  least-squares refits on the LASSO support ("relaxed" starts),
* in warm mode, the final state of the previous (smaller) s0 in the column.

Warm mode then makes a return pass in descending s0, restarting each cell
from its larger-s0 neighbour and keeping the restart if it reaches a higher
log posterior. Modes found at weaker spikes, where signals enter easily,
are thereby carried down to stronger spikes.

Warm mode is sequential along s0; cold mode treats cells independently and
may use a thread pool.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import baselines as bl
from . import em
from .ald import as_tau, check_loss
from .em import Dataset, FitResult, NumericalError, SsqlassoConfig, SsqlassoState

log = logging.getLogger(__name__)

EDF_TOL = 1e-6
PILOT_FRACTIONS = tuple(np.geomspace(0.5, 0.1, 6))
ANNEAL_FLOORS = (1e-1, 1e-2, 1e-3)
ANNEAL_ITER = 50


# -- grid and surface ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TuningGrid:
    s0_values: np.ndarray
    s1_values: np.ndarray

    def __post_init__(self):
        for name in ("s0_values", "s1_values"):
            v = np.array(getattr(self, name), dtype=float).ravel()
            if v.size == 0:
                raise ValueError(f"{name} is empty")
            if np.any(~np.isfinite(v)) or np.any(v <= 0):
                raise ValueError(f"{name} must be positive and finite")
            if v.size > 1 and np.any(np.diff(v) <= 0):
                raise ValueError(f"{name} must be strictly ascending")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def shape(self):
        return self.s0_values.size, self.s1_values.size

    def admissible(self) -> np.ndarray:
        """Boolean (|s0|, |s1|) mask of cells with s0 < s1."""
        return self.s0_values[:, None] < self.s1_values[None, :]

    @property
    def skipped(self):
        """(s0, s1) pairs that violate s0 < s1 and are never fitted."""
        i, j = np.nonzero(~self.admissible())
        return [(float(self.s0_values[a]), float(self.s1_values[b])) for a, b in zip(i, j)]


def default_grid(s1_values=(1.0, 2.0, 4.0), n_s0: int = 20, s0_min: float = 1e-3) -> TuningGrid:
    """s0 geometric on [s0_min, max(s1)/2]; cells with s0 >= s1 are skipped."""
    s1 = np.sort(np.asarray(s1_values, dtype=float))
    return TuningGrid(np.geomspace(s0_min, s1[-1] / 2.0, int(n_s0)), s1)


@dataclass(frozen=True, eq=False)
class TuningSurface:
    """``score[i, j]`` is the criterion at (s0_values[i], s1_values[j]);
    skipped or failed cells hold NaN. ``mode`` is 'warm' or 'cold'."""
    grid: TuningGrid
    score: np.ndarray
    best: tuple
    best_fit: FitResult
    criterion: str = "sic"
    mode: str = "warm"
    failures: tuple = ()
    fits: Optional[dict] = field(default=None, repr=False)

    def rows(self):
        """(s0, s1, score) for every admissible cell, s1-major."""
        adm = self.grid.admissible()
        out = []
        for j, s1 in enumerate(self.grid.s1_values):
            for i, s0 in enumerate(self.grid.s0_values):
                if adm[i, j]:
                    out.append((float(s0), float(s1), float(self.score[i, j])))
        return out


# -- SIC -----------------------------------------------------------------------

@dataclass(frozen=True)
class SicValue:
    value: float
    loss: float
    edf: int
    degenerate: bool


def sic_from_residuals(resid, tau, y_scale: float, edf: Optional[int] = None) -> SicValue:
    """log(sum check_loss(r)) + log(n)/(2n) * edf.

    With ``edf=None`` the degrees of freedom are the residuals with
    ``|r_i| <= EDF_TOL * y_scale``. A saturated fit, i.e. every residual
    zero to that tolerance or ``edf >= n``, gets the ``-inf`` sentinel with
    ``degenerate=True``.
    """
    r = np.asarray(resid, dtype=float).ravel()
    n = r.size
    if edf is None:
        edf = int(np.sum(np.abs(r) <= EDF_TOL * y_scale))
    edf = min(int(edf), n)
    loss = float(np.sum(check_loss(r, as_tau(tau))))
    if loss <= 0.0 or edf >= n or np.all(np.abs(r) <= EDF_TOL * y_scale):
        return SicValue(-np.inf, loss, int(edf), True)
    return SicValue(float(np.log(loss) + np.log(n) / (2.0 * n) * edf), loss, int(edf), False)


def sic(data: Dataset, fit: FitResult, tau, edf_rule: str = "support") -> SicValue:
    """Quantile SIC of a fit.

    ``edf_rule='zero_residuals'`` counts residuals within ``EDF_TOL * sd(y)``
    of zero. ``edf_rule='support'`` (default) counts the fitted coefficients
    that are free, i.e. the nonzero betas plus the q+1 unpenalised alphas,
    capped at n; a fit with n or more free coefficients is saturated and
    flagged degenerate. The two rules agree at a vertex solution of a quantile
    regression, where the number of interpolated points equals the number
    of active parameters; EM iterates approach that vertex only
    geometrically, so on dense fits the residual count badly understates
    model size.
    """
    resid = data.y - fit.predict(data.Z, data.X)
    if edf_rule == "zero_residuals":
        edf = None
    elif edf_rule == "support":
        edf = min(data.n, int(np.count_nonzero(fit.beta)) + data.q + 1)
    else:
        raise ValueError(f"unknown edf rule {edf_rule!r}")
    return sic_from_residuals(resid, tau, data.y_scale, edf)


# -- starting values -----------------------------------------------------------

def _method(template) -> str:
    if isinstance(template, SsqlassoConfig):
        return "ssqlasso"
    if isinstance(template, bl.SslassoConfig):
        return "sslasso"
    raise TypeError(f"unsupported config type {type(template).__name__}")


def _fit_fn(template):
    return em.fit if _method(template) == "ssqlasso" else bl.fit_sslasso


def _log_post(template):
    return em.log_posterior if _method(template) == "ssqlasso" else bl.sslasso_log_posterior


def _scale_start(work: Dataset, template, alpha, beta) -> SsqlassoState:
    """Complete a coefficient start with an intercept shift and a scale."""
    alpha = np.array(alpha, dtype=float)
    r = work.y - work.Z @ alpha - work.X @ beta
    if _method(template) == "ssqlasso":
        tau = template.tau
        shift = float(np.quantile(r, tau))
        alpha[0] += shift
        r = r - shift
        scale = max(float(np.mean(check_loss(r, tau))), 1e-6 * work.y_scale)
    else:
        shift = float(np.mean(r))
        alpha[0] += shift
        r = r - shift
        scale = max(float(np.dot(r, r)) / work.n, (1e-6 * work.y_scale) ** 2)
    return SsqlassoState(alpha, np.array(beta, dtype=float), scale, 0.5)


def initial_states(data: Dataset, template, fractions: Sequence[float] = PILOT_FRACTIONS,
                   relaxed: bool = True) -> list:
    """Working-scale starting states for fits configured like ``template``.

    The first entry is the method's all-zero start; then, for each
    fraction f, the LASSO solution at f * lambda_max and (when ``relaxed``
    and its support has fewer than n/2 columns) the least-squares refit on
    that support.
    """
    work, _, _ = em._working(data, template.standardize)
    if _method(template) == "ssqlasso":
        starts = [em.initialize(work, template)]
    else:
        starts = [bl.sslasso_initialize(work, template)]
    if not fractions:
        return starts
    lmax = bl.lambda_max(work)
    if not lmax > 0:
        return starts
    lams = lmax * np.sort(np.asarray(fractions, dtype=float))[::-1]
    path, apath = bl.lasso_path(work, lams, tol=1e-8, return_alpha=True)
    seen = set()
    for beta, alpha in zip(path, apath):
        starts.append(_scale_start(work, template, alpha, beta))
        support = np.flatnonzero(beta)
        key = tuple(support)
        if not relaxed or not 0 < support.size < work.n // 2 or key in seen:
            continue
        seen.add(key)
        starts.append(_relaxed_start(work, template, support))
    return starts


def _relaxed_start(work: Dataset, template, support) -> SsqlassoState:
    """Least-squares refit of y on Z and the ``support`` columns of X."""
    design = np.column_stack([work.Z, work.X[:, support]])
    coef, *_ = np.linalg.lstsq(design, work.y, rcond=None)
    b = np.zeros(work.p)
    b[support] = coef[work.q + 1:]
    return _scale_start(work, template, coef[:work.q + 1], b)


def anneal(data: Dataset, cfg: SsqlassoConfig, start: SsqlassoState,
           floors: Sequence[float] = ANNEAL_FLOORS, iters: int = ANNEAL_ITER) -> SsqlassoState:
    """Move a start with a few EM iterations under decreasing residual floors.

    With the exact floor, a residual that reaches zero receives a weight
    near 1/|r| and is never released, so EM can stall at a non-optimal
    interpolating configuration. A larger floor smooths the check loss
    near zero and lets such residuals move; the result is only used as a
    starting value for the exact EM.
    """
    st = start
    for floor in floors:
        if floor <= cfg.residual_floor:
            continue
        f = em.fit(data, replace(cfg, residual_floor=float(floor), max_iter=int(iters)), init=st)
        st = f.state
    return st


def _fit_one(data, cfg, st, smooth):
    if smooth and _method(cfg) == "ssqlasso":
        st = anneal(data, cfg, st)
    return _fit_fn(cfg)(data, cfg, init=st)


def prune(data: Dataset, cfg, fit: FitResult, smooth: bool = True, seen=None) -> FitResult:
    """Halve the support of ``fit`` while that raises the log posterior.

    Each step keeps the larger half of the nonzero coefficients (by
    magnitude), refits them by least squares and reruns the EM. EM with a
    strong spike seldom removes many small spurious coefficients at once,
    because each of them sits on an interpolated observation; dropping
    them jointly lets it reach the sparser mode.
    """
    work, _, _ = em._working(data, cfg.standardize)
    seen = set() if seen is None else seen
    while True:
        b = fit.state.beta
        support = np.flatnonzero(b)
        if support.size < 2:
            return fit
        keep = support[np.argsort(-np.abs(b[support]), kind="stable")[:(support.size + 1) // 2]]
        key = tuple(np.sort(keep))
        if key in seen:
            return fit
        seen.add(key)
        try:
            g = _fit_one(data, cfg, _relaxed_start(work, cfg, np.sort(keep)), smooth)
        except NumericalError:
            return fit
        if not g.q_trace[-1] > fit.q_trace[-1]:
            return fit
        fit = g


def fit_from_starts(data: Dataset, cfg, starts: Sequence[SsqlassoState],
                    smooth: bool = True, pruning: bool = False) -> FitResult:
    """Run the EM from every start and keep the fit with the largest final
    log posterior (earliest start on ties). For the quantile method each
    start is first passed through :func:`anneal` unless ``smooth`` is false;
    with ``pruning`` each fit is followed by :func:`prune`.
    Starts whose EM fails numerically are dropped; if all fail, the last
    error is raised."""
    if not starts:
        raise ValueError("no starting states")
    best = None
    error = None
    seen: set = set()
    for st in starts:
        try:
            f = _fit_one(data, cfg, st, smooth)
        except NumericalError as exc:
            error = exc
            continue
        if pruning:
            f = prune(data, cfg, f, smooth, seen)
        if best is None or f.q_trace[-1] > best.q_trace[-1]:
            best = f
    if best is None:
        raise error
    return best


def fit_multistart(data: Dataset, cfg, pruning: bool = True, **kw) -> FitResult:
    """Fit one (s0, s1) cell from :func:`initial_states`."""
    return fit_from_starts(data, cfg, initial_states(data, cfg, **kw), pruning=pruning)


# -- grid scans ----------------------------------------------------------------

def _scan(data: Dataset, grid: TuningGrid, template, score_fn, warm: bool, starts,
          workers: int = 1, keep_fits: bool = False, restart_every: int = 1,
          pruning: bool = False):
    """Fit every admissible cell; return (score, fits-or-None, failures, best)."""
    adm = grid.admissible()
    if not adm.any():
        raise ValueError("no admissible (s0, s1) cell: every s0 >= s1")
    if starts is None:
        starts = initial_states(data, template)
    score = np.full(grid.shape, np.nan)
    fits = {}
    failures = []

    def cell(i, j, extra=None):
        cfg = replace(template, s0=float(grid.s0_values[i]), s1=float(grid.s1_values[j]))
        cand = list(starts) if extra is None else [extra] + list(starts)
        return fit_from_starts(data, cfg, cand, pruning=pruning)

    def record(i, j, f):
        score[i, j] = score_fn(f)
        fits[(i, j)] = f

    if warm:
        for j in range(grid.shape[1]):
            rows = np.flatnonzero(adm[:, j])
            prev = None
            for k, i in enumerate(rows):
                try:
                    # theta = 0 is absorbing, so a null predecessor carries
                    # nothing forward; restart instead
                    if prev is None or k % restart_every == 0 or not np.any(prev.beta):
                        f = cell(i, j, prev)
                    else:
                        cfg = replace(template, s0=float(grid.s0_values[i]),
                                      s1=float(grid.s1_values[j]))
                        f = fit_from_starts(data, cfg, [prev])
                except NumericalError as exc:
                    failures.append((float(grid.s0_values[i]), float(grid.s1_values[j]), str(exc)))
                    prev = None
                    continue
                record(i, j, f)
                prev = f.state
            # return pass: offer each cell its larger-s0 neighbour's mode
            for i_next, i in zip(rows[::-1], rows[::-1][1:]):
                if (i_next, j) not in fits or (i, j) not in fits:
                    continue
                cfg = replace(template, s0=float(grid.s0_values[i]), s1=float(grid.s1_values[j]))
                try:
                    f = fit_from_starts(data, cfg, [fits[(i_next, j)].state])
                except NumericalError:
                    continue
                if f.q_trace[-1] > fits[(i, j)].q_trace[-1]:
                    record(i, j, f)
    else:
        todo = list(zip(*np.nonzero(adm)))

        def job(ij):
            try:
                return ij, cell(*ij), None
            except NumericalError as exc:
                return ij, None, str(exc)

        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(job, todo))
        else:
            results = [job(ij) for ij in todo]
        for (i, j), f, err in results:
            if f is None:
                failures.append((float(grid.s0_values[i]), float(grid.s1_values[j]), err))
            else:
                record(i, j, f)
    finite = np.where(np.isfinite(score), score, np.inf)
    if not np.isfinite(finite).any():
        raise NumericalError("no cell produced a finite criterion value")
    i, j = np.unravel_index(int(np.argmin(finite)), finite.shape)
    best_fit = fits[(i, j)]
    return score, (fits if keep_fits else None), tuple(failures), (i, j), best_fit


def grid_search_sic(data: Dataset, grid: TuningGrid, template, warm: bool = True,
                    edf_rule: str = "support", tau=None, starts=None, workers: int = 1,
                    keep_fits: bool = False, restart_every: int = 5,
                    pruning: bool = False) -> TuningSurface:
    """Minimise SIC over the grid.

    ``tau`` defaults to the template's quantile level (0.5 for the Gaussian
    method). Within each s1 column cells are visited in ascending s0; in
    warm mode the previous cell's final state joins the starts.
    """
    tau = as_tau(tau if tau is not None else getattr(template, "tau", 0.5))

    def score_fn(f):
        return sic(data, f, tau, edf_rule).value

    score, fits, failures, (i, j), best_fit = _scan(data, grid, template, score_fn, warm,
                                                    starts, workers, keep_fits, restart_every, pruning)
    return TuningSurface(grid, score, (float(grid.s0_values[i]), float(grid.s1_values[j])),
                         best_fit, "sic", "warm" if warm else "cold", failures, fits)


def kfold_indices(n: int, k: int, rng) -> list:
    """Shuffled partition of range(n) into k nearly equal folds."""
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > n:
        raise ValueError(f"cannot split {n} observations into {k} folds")
    perm = np.random.default_rng(rng).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def cv_check_loss(data: Dataset, grid: TuningGrid, k: int, rng, template,
                  loss: str = "check", tau=None, warm: bool = True,
                  keep_fits: bool = False) -> TuningSurface:
    """k-fold cross-validation over the grid.

    ``loss='check'`` scores held-out points by the check loss at ``tau``
    (default: the template's level); ``loss='squared'`` by squared error.
    The score of a cell is the mean loss over all n held-out points, and
    the selected cell is refitted on the full data. If that refit fails
    numerically (the Gaussian posterior is unbounded along interpolating
    fits), the next best cell is taken; all failures are recorded.
    """
    tau = as_tau(tau if tau is not None else getattr(template, "tau", 0.5))
    if loss not in ("check", "squared"):
        raise ValueError(f"unknown CV loss {loss!r}")
    folds = kfold_indices(data.n, k, rng)
    total = np.zeros(grid.shape)
    everything = np.arange(data.n)
    failures = []
    for held in folds:
        train = data.subset(np.setdiff1d(everything, held))
        # raw arrays: a leave-one-out fold is too small for a Dataset
        yt, Zt, Xt = data.y[held], data.Z[held], data.X[held]

        def score_fn(f, yt=yt, Zt=Zt, Xt=Xt):
            r = yt - f.predict(Zt, Xt)
            return float(np.sum(check_loss(r, tau)) if loss == "check" else np.dot(r, r))

        score, _, fold_failures, _, _ = _scan(train, grid, template, score_fn, warm, None)
        failures.extend(fold_failures)
        total += score
    total /= data.n
    finite = np.where(np.isfinite(total), total, np.inf)
    if not np.isfinite(finite).any():
        raise NumericalError("no cell produced a finite cross-validation loss")
    best_fit = None
    for flat in np.argsort(finite, axis=None, kind="stable"):
        i, j = np.unravel_index(int(flat), finite.shape)
        if not np.isfinite(finite[i, j]):
            break
        cfg = replace(template, s0=float(grid.s0_values[i]), s1=float(grid.s1_values[j]))
        try:
            best_fit = fit_multistart(data, cfg)
            break
        except NumericalError as exc:
            failures.append((cfg.s0, cfg.s1, f"full-data refit: {exc}"))
    if best_fit is None:
        raise NumericalError("no cross-validated cell could be refitted on the full data")
    return TuningSurface(grid, total, (float(grid.s0_values[i]), float(grid.s1_values[j])),
                         best_fit, f"cv_{loss}", "warm" if warm else "cold", tuple(failures), None)


# -- plain LASSO ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LassoTuning:
    lambdas: np.ndarray
    score: np.ndarray
    best: float
    best_fit: FitResult
    criterion: str

    def rows(self):
        return [(float(l), float(v)) for l, v in zip(self.lambdas, self.score)]


def tune_lasso(data: Dataset, lambdas=None, criterion: str = "sic", tau: float = 0.5,
               k: int = 5, rng=None) -> LassoTuning:
    """Choose the LASSO penalty over a decreasing grid.

    ``criterion='sic'`` uses the quantile SIC at ``tau`` with the support
    edf; ``'cv'`` the k-fold mean held-out squared error. The default grid
    is :func:`ssqlasso.baselines.lambda_grid` on the full data.
    """
    tau = as_tau(tau)
    lams = bl.lambda_grid(data) if lambdas is None else np.asarray(lambdas, dtype=float).ravel()
    if criterion == "sic":
        path, apath = bl.lasso_path(data, lams, return_alpha=True)
        score = np.empty(lams.size)
        for g in range(lams.size):
            r = data.y - data.Z @ apath[g] - data.X @ path[g]
            edf = min(data.n, int(np.count_nonzero(path[g])) + data.q + 1)
            score[g] = sic_from_residuals(r, tau, data.y_scale, edf).value
    elif criterion == "cv":
        score = np.zeros(lams.size)
        everything = np.arange(data.n)
        for held in kfold_indices(data.n, k, rng):
            train = data.subset(np.setdiff1d(everything, held))
            path, apath = bl.lasso_path(train, lams, return_alpha=True)
            r = data.y[held][None, :] - apath @ data.Z[held].T - path @ data.X[held].T
            score += np.sum(r * r, axis=1)
        score /= data.n
    else:
        raise ValueError(f"unknown LASSO tuning criterion {criterion!r}")
    finite = np.where(np.isfinite(score), score, np.inf)
    if not np.isfinite(finite).any():
        raise NumericalError("no penalty produced a finite criterion value")
    best = float(lams[int(np.argmin(finite))])
    return LassoTuning(lams, score, best, bl.fit_lasso(data, bl.LassoConfig(lam=best)), criterion)


# -- solution path -------------------------------------------------------------

def ssqlasso_path(data: Dataset, s1_fixed: float, s0_grid: Sequence[float], template,
                  return_fits: bool = False):
    """beta trajectories over an ascending s0 grid at fixed s1.

    The smallest s0 is fitted from :func:`initial_states`; every later
    point is warm-started from its predecessor alone, so the trajectory
    follows one branch of modes.
    """
    grid = np.asarray(s0_grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValueError("empty s0 grid")
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("s0 grid must be strictly ascending")
    if np.any(grid <= 0) or np.any(grid >= s1_fixed):
        raise ValueError(f"every s0 must lie in (0, s1={s1_fixed})")
    fits = []
    prev = None
    for s0 in grid:
        cfg = replace(template, s0=float(s0), s1=float(s1_fixed))
        if prev is None:
            f = fit_multistart(data, cfg)
        else:
            f = _fit_fn(cfg)(data, cfg, init=prev)
        fits.append(f)
        prev = f.state
    path = np.vstack([f.beta for f in fits])
    return (path, fits) if return_fits else path
