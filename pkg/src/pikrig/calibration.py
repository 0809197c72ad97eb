"""Lengthscale and variance calibration by leave-one-out cross-validation.

For simple Kriging and co-Kriging the leave-one-out residuals come from
the virtual formulas (one factorization instead of n refits): with
a = K^-1 Z and d = diag(K^-1), the fold-i residual is a_i / d_i and the
fold-i predictive variance at unit process variance is 1 / d_i.  The MSE
criterion is then mean((a/d)^2) and the variance estimate solving
"mean standardized squared residual = 1" is sigma2 = mean(a^2 / d).

For co-Kriging the same quantities are computed on the stacked system
[Z; v] with the extended covariance, and only the primary n slots are
kept (a filter on the stack), normalized by n.

Constrained Lagrangian predictions have no virtual shortcut, so two
explicit criteria are provided: per-fold refitting
(:func:`loocv_lk_explicit`) and the all-points-retained interpolation
deviation (:func:`interpolation_error_criterion`), which exploits that
constrained predictions need not interpolate the observations.

The 1-d lengthscale search is a deterministic log-spaced grid scan
followed by golden-section refinement inside the best cell; ties shrink
the bracket symmetrically, so a flat criterion converges to the cell
midpoint (in log space).
"""

import logging
import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import pdist

from . import design
from . import predictors as _pred
from . import uq as _uq
from .predictors import ConditioningError, SolveConfig, make_spd_solver

__all__ = [
    "CalibrationResult",
    "loocv_mse_virtual",
    "sigma2_virtual",
    "loocv_ck_virtual",
    "loocv_lk_explicit",
    "interpolation_error_criterion",
    "sigma2_interpolation",
    "optimize_theta",
    "default_theta_bounds",
]

logger = logging.getLogger(__name__)

_SIGMA2_FLOOR = 1e-12


@dataclass
class CalibrationResult:
    """Search outcome: argmin lengthscale, variance estimate, history."""

    theta_hat: float
    sigma2_hat: float
    criterion_value: float
    trace: list


def _require_unit(k):
    if abs(k.sigma2 - 1.0) > 1e-12:
        raise ValueError(
            f"LOOCV criteria are defined at unit process variance; got sigma2={k.sigma2}"
        )


def _require_centered(obs):
    if obs.mean is not None:
        raise ValueError("LOOCV criteria expect a centered observation set")


def _virtual_parts(k, obs, cfg):
    """a = K^-1 Z, d = diag(K^-1), and whether jitter escalated.

    The virtual identities hold for the covariance actually requested; if
    the factorization only succeeded with escalated jitter the returned
    flag is True and criteria built on these parts are undefined.
    """
    K = design.gram(k, obs.points)
    solve, eta = make_spd_solver(K, cfg)
    Ki = solve(np.eye(obs.n))
    return Ki @ obs.values, np.diag(Ki), eta > cfg.nugget


def _floored_sigma2(val):
    if val <= _SIGMA2_FLOOR:
        warnings.warn(
            f"degenerate variance estimate {val:.3e}; floored at {_SIGMA2_FLOOR}",
            RuntimeWarning,
            stacklevel=3,
        )
        return _SIGMA2_FLOOR
    return float(val)


def loocv_mse_virtual(k_unit, obs, cfg=None):
    """Virtual LOOCV mean squared residual for centered simple Kriging.

    Returns nan when the gram factorization needed escalated jitter: the
    leave-one-out identity is only valid for the unregularized matrix,
    and returning a value there would let a lengthscale search exploit
    degenerate kernels.  The optimizer skips nan points.
    """
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    if obs.n < 2:
        raise ValueError("LOOCV needs at least 2 observations")
    a, d, escalated = _virtual_parts(k_unit, obs, cfg)
    if escalated:
        logger.info("LOOCV undefined at theta=%.6g (factorization escalated)", k_unit.theta)
        return math.nan
    return float(np.mean((a / d) ** 2))


def sigma2_virtual(k_unit, obs, theta_hat, cfg=None):
    """Variance making the standardized LOOCV criterion equal one at theta_hat."""
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    k = replace(k_unit, theta=float(theta_hat))
    a, d, escalated = _virtual_parts(k, obs, cfg)
    if escalated:
        warnings.warn(
            f"variance rule at theta={theta_hat:.6g} used escalated jitter",
            RuntimeWarning,
            stacklevel=2,
        )
    return _floored_sigma2(float(np.mean(a * a / d)))


def loocv_ck_virtual(k_unit, obs, ops, cfg=None):
    """Filtered virtual LOOCV for the co-Kriging stack; returns (mse, sigma2).

    Both returned callables take a candidate theta.  The stacked system
    [Z; v] is re-assembled per theta; only the first n (primary) slots of
    the per-slot residual and variance enter, normalized by n.  With an
    empty operator system they coincide with :func:`loocv_mse_virtual` /
    :func:`sigma2_virtual`.
    """
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    if obs.n < 2:
        raise ValueError("LOOCV needs at least 2 observations")
    if ops is None:
        ops = design.OperatorSystem([], np.zeros((0, 0)), np.zeros(0))
    n = obs.n

    def _parts(theta):
        k = replace(k_unit, theta=float(theta))
        Kplus, _, y = _pred.assemble_co_kriging(k, obs, ops, [])
        solve, eta = make_spd_solver(Kplus, cfg)
        Ki = solve(np.eye(Kplus.shape[0]))
        a = Ki @ y
        return a[:n], np.diag(Ki)[:n], eta > cfg.nugget

    def mse(theta):
        a, d, escalated = _parts(theta)
        if escalated:
            logger.info("filtered LOOCV undefined at theta=%.6g (escalated)", theta)
            return math.nan
        return float(np.mean((a / d) ** 2))

    def sigma2(theta):
        a, d, escalated = _parts(theta)
        if escalated:
            warnings.warn(
                f"variance rule at theta={theta:.6g} used escalated jitter",
                RuntimeWarning,
                stacklevel=2,
            )
        return _floored_sigma2(float(np.mean(a * a / d)))

    return mse, sigma2


def _locate_atoms(colloc_points, atoms):
    """Index of each atom inside the collocation list (exact (x, m) match)."""
    index = {(a.x, a.m): j for j, a in enumerate(colloc_points)}
    try:
        return np.array([index[(a.x, a.m)] for a in atoms])
    except KeyError as missing:
        raise ValueError(f"atom {missing} not among the collocation atoms") from None


def loocv_lk_explicit(k_unit, obs, ops_at_predictions, cfg=None):
    """Per-fold refit LOOCV for Lagrangian Kriging; returns (mse, sigma2).

    Fold i drops observation i, keeps the full constraint system,
    predicts the dropped atom (appended constraint-free if no equation
    touches it), and scores the residual; the variance rule standardizes
    by the fold's own predictive variance at unit process variance.
    """
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    if obs.n < 2:
        raise ValueError("LOOCV needs at least 2 observations")

    def _folds(theta, want_var):
        k = replace(k_unit, theta=float(theta))
        res = []
        escalated = False
        for i in range(obs.n):
            keep = [j for j in range(obs.n) if j != i]
            obs_i = design.ObservationSet(
                [obs.points[j] for j in keep], obs.values[keep]
            )
            ops_i = design.extend_atoms(ops_at_predictions, [obs.points[i]])
            (idx,) = _locate_atoms(ops_i.colloc_points, [obs.points[i]])
            if want_var:
                u = _uq.var_lk(k, obs_i, ops_i, cfg)
                res.append((obs.values[i] - u.mean[idx], u.variance[idx]))
                escalated = escalated or u.nugget_used > cfg.nugget
            else:
                w = _pred.lagrangian_kriging(k, obs_i, ops_i, cfg=cfg)
                res.append((obs.values[i] - w.predictions[idx], None))
                escalated = escalated or w.nugget_used > cfg.nugget
        return res, escalated

    def mse(theta):
        pairs, escalated = _folds(theta, want_var=False)
        if escalated:
            logger.info("fold LOOCV undefined at theta=%.6g (escalated)", theta)
            return math.nan
        errs = np.array([e for e, _ in pairs])
        return float(np.mean(errs ** 2))

    def sigma2(theta):
        pairs, escalated = _folds(theta, want_var=True)
        if escalated:
            warnings.warn(
                f"variance rule at theta={theta:.6g} used escalated jitter",
                RuntimeWarning,
                stacklevel=2,
            )
        vals = [e * e / max(v, _SIGMA2_FLOOR) for e, v in pairs]
        return _floored_sigma2(float(np.mean(vals)))

    return mse, sigma2


def interpolation_error_criterion(k_unit, obs, ops_at_predictions, cfg=None):
    """Mean squared deviation of constrained predictions at the observations.

    The Lagrangian fit keeps every observation (no folds); constraints may
    pull predictions at the observation atoms away from the observed
    values, and that deviation is the criterion.  Observation atoms not in
    the collocation set are appended constraint-free.  With no constraints
    the fit interpolates and the value is 0.
    """
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    ops = design.extend_atoms(ops_at_predictions, obs.points)
    w = _pred.lagrangian_kriging(k_unit, obs, ops, cfg=cfg)
    if w.nugget_used > cfg.nugget:
        logger.info(
            "interpolation criterion undefined at theta=%.6g (escalated)",
            k_unit.theta,
        )
        return math.nan
    idx = _locate_atoms(ops.colloc_points, obs.points)
    resid = w.predictions[idx] - obs.values
    return float(np.mean(resid ** 2))


def sigma2_interpolation(k_unit, obs, ops_at_predictions, theta_hat, cfg=None):
    """Variance rule matching the interpolation criterion, all points retained.

    Standardizes the all-points-retained deviations by the Lagrangian
    predictive variance at the observation atoms (unit process variance),
    mirroring the LOOCV variance rule without folds.
    """
    cfg = cfg if cfg is not None else SolveConfig()
    _require_unit(k_unit)
    _require_centered(obs)
    k = replace(k_unit, theta=float(theta_hat))
    ops = design.extend_atoms(ops_at_predictions, obs.points)
    u = _uq.var_lk(k, obs, ops, cfg)
    if u.nugget_used > cfg.nugget:
        warnings.warn(
            f"variance rule at theta={theta_hat:.6g} used escalated jitter",
            RuntimeWarning,
            stacklevel=2,
        )
    idx = _locate_atoms(ops.colloc_points, obs.points)
    resid = u.mean[idx] - obs.values
    denom = np.maximum(u.variance[idx], _SIGMA2_FLOOR)
    return _floored_sigma2(float(np.mean(resid ** 2 / denom)))


def default_theta_bounds(points):
    """[1e-2, 1e2] times the median pairwise distance of the locations."""
    pts = points.points if hasattr(points, "points") else list(points)
    xs = np.array([p.x for p in pts], dtype=float)
    if len(xs) < 2:
        raise ValueError("need at least 2 locations to scale the search bounds")
    med = float(np.median(pdist(xs)))
    if not np.isfinite(med) or med <= 0:
        raise ValueError(f"median pairwise distance {med} cannot scale bounds")
    return 1e-2 * med, 1e2 * med


def optimize_theta(criterion, bounds, budget=64, sigma2_rule=None):
    """Deterministic 1-d minimization of a lengthscale criterion.

    Log-spaced coarse grid (half the budget), then golden-section
    refinement in log space inside the cell around the grid argmin.
    Non-finite criterion values are skipped and logged; exact ties shrink
    the bracket from both sides.  ``sigma2_rule``, when given, is called
    at the optimum to fill ``sigma2_hat`` (default 1.0).
    """
    lo, hi = float(bounds[0]), float(bounds[1])
    if not (0 < lo < hi and np.isfinite(hi)):
        raise ValueError(f"bounds must satisfy 0 < lo < hi, got ({lo}, {hi})")
    budget = int(budget)
    if budget < 8:
        raise ValueError(f"budget must be at least 8, got {budget}")
    trace = []

    def ev(theta):
        theta = float(theta)
        try:
            val = float(criterion(theta))
        except ConditioningError as exc:
            logger.warning("criterion failed at theta=%.6g: %s", theta, exc)
            val = math.nan
        if not math.isfinite(val):
            logger.warning("criterion non-finite at theta=%.6g", theta)
            val = math.nan
        trace.append((theta, val))
        return val

    ngrid = max(4, budget // 2)
    grid = np.geomspace(lo, hi, ngrid)
    vals = [ev(t) for t in grid]
    finite = [i for i, v in enumerate(vals) if math.isfinite(v)]
    if not finite:
        raise RuntimeError("criterion was non-finite at every grid point")
    ib = min(finite, key=lambda i: vals[i])
    la = math.log(grid[ib - 1] if ib > 0 else grid[ib])
    lb = math.log(grid[ib + 1] if ib < ngrid - 1 else grid[ib])

    rho = (math.sqrt(5.0) - 1.0) / 2.0
    remaining = budget - ngrid
    used = 0
    if lb > la and remaining >= 2:
        x1 = lb - rho * (lb - la)
        x2 = la + rho * (lb - la)
        f1 = ev(math.exp(x1))
        f2 = ev(math.exp(x2))
        used = 2
        while used < remaining:
            v1 = f1 if math.isfinite(f1) else math.inf
            v2 = f2 if math.isfinite(f2) else math.inf
            if v1 < v2:
                lb, x2, f2 = x2, x1, f1
                x1 = lb - rho * (lb - la)
                f1 = ev(math.exp(x1))
                used += 1
            elif v2 < v1:
                la, x1, f1 = x1, x2, f2
                x2 = la + rho * (lb - la)
                f2 = ev(math.exp(x2))
                used += 1
            else:
                la, lb = x1, x2
                x1 = lb - rho * (lb - la)
                x2 = la + rho * (lb - la)
                f1 = ev(math.exp(x1))
                f2 = ev(math.exp(x2))
                used += 2

    mid = math.exp(0.5 * (la + lb))
    fmid = ev(mid)
    candidates = [(mid, fmid)] if math.isfinite(fmid) else []
    candidates += [(t, v) for t, v in trace if math.isfinite(v)]
    theta_hat, crit_val = min(candidates, key=lambda tv: tv[1])
    sigma2_hat = float(sigma2_rule(theta_hat)) if sigma2_rule is not None else 1.0
    return CalibrationResult(
        theta_hat=float(theta_hat),
        sigma2_hat=sigma2_hat,
        criterion_value=float(crit_val),
        trace=trace,
    )
