"""Estimating-equation evaluation, damped Newton roots, and variance estimators.

The estimator is a root of G_n(theta) = (n delta_n)^-1 sum_i g(delta_n,
X_i, X_{i-1}, theta).  Sandwich variance estimators studentize it: the
full d x d form at rate sqrt(n delta_n), and the block form for the
(2, 1)-split layout where the diffusion coordinate runs at sqrt(n).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CoefficientError, ConfigError, NoRootError, SingularJacobianError
from .estfun import EstimatingFunction
from .model import ParamBox
from .simulate import ObservationPath

__all__ = [
    "GnEvaluation",
    "EstimationResult",
    "eval_Gn",
    "newton_solve",
    "multi_start_solve",
    "estimate_variance",
    "estimate_block_variance",
    "psd_sqrt",
    "martingale_bias_note",
    "COND_LIMIT",
]

COND_LIMIT = 1e12


@dataclass
class GnEvaluation:
    value: np.ndarray  # G_n(theta), length d
    jacobian: np.ndarray  # (n delta_n)^-1 sum of dtheta g, d x d
    outer_sum: np.ndarray  # raw sum of g g^T, d x d
    jac_sum: np.ndarray  # raw sum of dtheta g, d x d


@dataclass
class EstimationResult:
    theta_hat: np.ndarray
    converged: bool
    residual_norm: float
    iterations: int
    vhat: Optional[np.ndarray] = None
    vhat_sqrt: Optional[np.ndarray] = None
    vhat_block: Optional[tuple] = None
    std_errors: Optional[np.ndarray] = None
    start_points_tried: int = 1
    n_distinct_roots: int = 0
    diagnostics: dict = field(default_factory=dict)


def eval_Gn(ef: EstimatingFunction, path: ObservationPath, theta) -> GnEvaluation:
    """Normalized estimating-function sum, its Jacobian, and the outer-product sum."""
    theta = np.asarray(theta, dtype=float).ravel()
    values = path.values
    if values.size < 2:
        raise ConfigError("path must contain at least two observations")
    n = path.scheme.n
    dn = path.scheme.delta_n
    y, x = values[1:], values[:-1]
    gv = ef.g(dn, y, x, theta)
    if np.any(~np.isfinite(gv)):
        i = int(np.argwhere(~np.isfinite(gv).all(axis=-1)).ravel()[0])
        raise CoefficientError(f"estimating function returned a non-finite value at observation pair i={i + 1}")
    jv = ef.dtheta_g(dn, y, x, theta)
    norm = 1.0 / (n * dn)
    return GnEvaluation(
        value=norm * gv.sum(axis=0),
        jacobian=norm * jv.sum(axis=0),
        outer_sum=gv.T @ gv,
        jac_sum=jv.sum(axis=0),
    )


def _inside(box: Optional[ParamBox], theta) -> bool:
    return True if box is None else box.contains(theta)


def newton_solve(
    ef: EstimatingFunction,
    path: ObservationPath,
    theta_start,
    tol: float = 1e-10,
    max_iter: int = 50,
    box: Optional[ParamBox] = None,
) -> EstimationResult:
    """Damped Newton iteration on ||G_n||_inf with bisection box projection.

    Stops when ||G_n||_inf <= tol; converged=False when the budget runs out
    or damping cannot reduce the residual.  A Jacobian with condition
    number above 1e12 raises SingularJacobianError carrying the iterate.
    """
    theta = np.asarray(theta_start, dtype=float).ravel().copy()
    if not _inside(box, theta):
        raise ConfigError("start point outside the open box")
    ev = eval_Gn(ef, path, theta)
    res = float(np.max(np.abs(ev.value)))
    if res <= tol:
        return EstimationResult(theta_hat=theta, converged=True, residual_norm=res, iterations=0)

    for it in range(1, max_iter + 1):
        J = ev.jacobian
        if not np.all(np.isfinite(J)) or np.linalg.cond(J) > COND_LIMIT:
            raise SingularJacobianError("singular jacobian", iterate=theta.copy())
        step = np.linalg.solve(J, ev.value)
        s = 1.0
        # bisect into the open box first, then insist on a residual decrease
        cand = theta - s * step
        guard = 0
        while not _inside(box, cand):
            s *= 0.5
            cand = theta - s * step
            guard += 1
            if guard > 80:
                return EstimationResult(theta_hat=theta, converged=False, residual_norm=res, iterations=it)
        while True:
            ev_cand = eval_Gn(ef, path, cand)
            res_cand = float(np.max(np.abs(ev_cand.value)))
            if np.isfinite(res_cand) and res_cand < res:
                break
            s *= 0.5
            cand = theta - s * step
            guard += 1
            if guard > 80:
                return EstimationResult(theta_hat=theta, converged=False, residual_norm=res, iterations=it)
        theta, ev, res = cand, ev_cand, res_cand
        if res <= tol:
            return EstimationResult(theta_hat=theta, converged=True, residual_norm=res, iterations=it)
    return EstimationResult(theta_hat=theta, converged=False, residual_norm=res, iterations=max_iter)


def _sobol_starts(box: ParamBox, count: int) -> np.ndarray:
    from scipy.stats import qmc

    sob = qmc.Sobol(d=box.d, scramble=False)
    if count & (count - 1) == 0:
        pts = sob.random_base2(int(math.log2(count)))
    else:
        pts = sob.random(count)
    return box.lows + pts * (box.highs - box.lows)


def multi_start_solve(
    ef: EstimatingFunction,
    path: ObservationPath,
    starts,
    tol: float = 1e-10,
    max_iter: int = 50,
    box: Optional[ParamBox] = None,
    k_shrink: float = 0.05,
) -> EstimationResult:
    """Newton from several starts; keeps the best root inside the compact sub-box.

    ``starts`` is a list of start points or an integer count of Sobol
    points in the box shrunk by ``k_shrink``.  Among converged roots in the
    sub-box, the smallest residual wins; residual ties within 1e-12 break
    by distance to the barycenter of all converged roots.  Distinct roots
    are counted with a pairwise spacing of 1e-6.
    """
    sub_box = box.shrink(k_shrink) if box is not None else None
    if isinstance(starts, int):
        if starts < 1:
            raise ConfigError("multi_start_solve needs at least one start")
        if sub_box is None:
            raise ConfigError("an integer start count requires a parameter box")
        start_pts = _sobol_starts(sub_box, starts)
    else:
        start_pts = [np.asarray(s, dtype=float).ravel() for s in starts]
        if len(start_pts) == 0:
            raise ConfigError("multi_start_solve needs at least one start")

    roots = []
    for s in start_pts:
        try:
            res = newton_solve(ef, path, s, tol=tol, max_iter=max_iter, box=box)
        except (SingularJacobianError, CoefficientError):
            continue
        if res.converged and _inside(sub_box, res.theta_hat):
            roots.append(res)

    if not roots:
        raise NoRootError("no root found: no start converged inside the compact sub-box")

    pts = np.array([r.theta_hat for r in roots])
    distinct = []
    for p in pts:
        if all(np.linalg.norm(p - q) > 1e-6 for q in distinct):
            distinct.append(p)
    barycenter = pts.mean(axis=0)
    best = min(roots, key=lambda r: (r.residual_norm, np.linalg.norm(r.theta_hat - barycenter)))
    ties = [r for r in roots if abs(r.residual_norm - best.residual_norm) <= 1e-12]
    if len(ties) > 1:
        best = min(ties, key=lambda r: np.linalg.norm(r.theta_hat - barycenter))
    best.start_points_tried = len(start_pts) if not isinstance(starts, int) else starts
    best.n_distinct_roots = len(distinct)
    return best


def psd_sqrt(V: np.ndarray, neg_tol: float = 1e-10) -> np.ndarray:
    """Unique PSD square root via symmetric eigendecomposition.

    Eigenvalues below -neg_tol raise; tiny negatives are clipped to zero.
    """
    Vs = 0.5 * (V + V.T)
    vals, vecs = np.linalg.eigh(Vs)
    if np.any(vals < -neg_tol):
        raise ConfigError(f"variance matrix has negative eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def estimate_variance(ef: EstimatingFunction, path: ObservationPath, theta_hat):
    """Full sandwich n delta_n (sum dg)^-1 (sum g g^T) (sum dg^T)^-1 and its PSD root."""
    ev = eval_Gn(ef, path, theta_hat)
    n, dn = path.scheme.n, path.scheme.delta_n
    J = ev.jac_sum
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) > COND_LIMIT:
        raise SingularJacobianError("singular jacobian sum in the variance estimator", iterate=np.asarray(theta_hat))
    Ji = np.linalg.inv(J)
    V = (n * dn) * Ji @ ev.outer_sum @ Ji.T
    V = 0.5 * (V + V.T)
    return V, psd_sqrt(V)


def estimate_block_variance(ef: EstimatingFunction, path: ObservationPath, theta_hat):
    """Block sandwich for the (2, 1) layout: (V1 2x2 at rate n delta_n, V2 scalar at rate n)."""
    if ef.coord_split is None:
        raise ConfigError("block variance needs an estimating function with a coordinate split")
    a_idx, b_idx = ef.coord_split
    a_idx = list(a_idx)
    theta = np.asarray(theta_hat, dtype=float).ravel()
    n, dn = path.scheme.n, path.scheme.delta_n
    y, x = path.values[1:], path.values[:-1]
    gv = ef.g(dn, y, x, theta)
    jv = ef.dtheta_g(dn, y, x, theta)

    ga = gv[:, a_idx]
    Ja = jv[:, a_idx][:, :, a_idx].sum(axis=0)
    if np.linalg.cond(Ja) > COND_LIMIT:
        raise SingularJacobianError("singular alpha-block jacobian", iterate=theta)
    Jai = np.linalg.inv(Ja)
    V1 = (n * dn) * Jai @ (ga.T @ ga) @ Jai.T
    V1 = 0.5 * (V1 + V1.T)

    gb = gv[:, b_idx]
    dgb = jv[:, b_idx, b_idx].sum()
    sum_gb2 = float(gb @ gb)
    if dgb == 0.0 or sum_gb2 == 0.0:
        raise ConfigError("zero-denominator in the beta-block variance (degenerate beta coordinate)")
    V2 = n * sum_gb2 / dgb**2
    return V1, V2


def block_std_errors(V1: np.ndarray, V2: float, n: int, delta_n: float) -> np.ndarray:
    """Per-coordinate standard errors under diag(sqrt(n dn), sqrt(n dn), sqrt(n)) rates."""
    t = n * delta_n
    return np.array([math.sqrt(V1[0, 0] / t), math.sqrt(V1[1, 1] / t), math.sqrt(V2 / n)])


def martingale_bias_note(ef: EstimatingFunction, n: int, delta_n: float, block: bool = False) -> Optional[str]:
    """Warning text when the non-martingale scaling condition looks violated."""
    if ef.exact_martingale:
        return None
    expo = 2.0 * (ef.kappa0 - 1.0) if block else 2.0 * ef.kappa0 - 1.0
    val = n * delta_n**expo
    if val > 0.1:
        kind = "n*delta_n^(2(kappa0-1))" if block else "n*delta_n^(2 kappa0 - 1)"
        return f"{kind} = {val:.3g} > 0.1: asymptotic bias of the normal limit may be visible"
    return None
