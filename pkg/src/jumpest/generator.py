"""Infinitesimal generator of the jump-diffusion and its iterates.

The generator acts on the y-argument of a smooth test function:

    (L_lam f)(t, y, x, theta) = a(y, lam) f_y + 0.5 b^2(y, lam) f_yy
        + int [f(t, y + c(y, z, lam), x, theta) - f(t, y, x, theta)] nu_lam(dz).

Jump integrals use Gauss-Hermite quadrature (order 64) for marks declared
Gaussian, adaptive composite Gauss-Legendre otherwise, and exact sums in
the counting case.  Node tables are cached per (measure, theta).
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainExitError, InsufficientSmoothnessError, QuadratureError
from .model import JumpDiffusionModel, LevyMeasure

__all__ = [
    "SmoothFunction",
    "GeneratorResult",
    "QuadratureConfig",
    "gauss_hermite_nodes",
    "levy_nodes",
    "levy_integrate",
    "levy_expectation",
    "apply_generator",
    "generator_grid",
    "iterate_generator",
    "conditional_moment",
]


@dataclass(frozen=True)
class QuadratureConfig:
    tol: float = 1e-10
    max_refine: int = 10


@dataclass(frozen=True)
class SmoothFunction:
    """Test function f(t, y, x, theta) with the y-derivatives the generator needs.

    ``eval``, ``dy`` and ``dy2`` are required; ``dt`` and ``dtheta`` unlock
    the time/parameter expansions where used.  All callables must broadcast
    over numpy arrays in y.
    """

    eval: Callable
    dy: Callable
    dy2: Callable
    dt: Optional[Callable] = None
    dtheta: Optional[Callable] = None

    @staticmethod
    def of_y(fn, d1, d2):
        """Lift a pure function of y (with derivatives fn, d1, d2) to f(t,y,x,theta)."""
        return SmoothFunction(
            eval=lambda t, y, x, theta: fn(y),
            dy=lambda t, y, x, theta: d1(y),
            dy2=lambda t, y, x, theta: d2(y),
            dt=lambda t, y, x, theta: np.zeros(np.shape(np.asarray(y))),
        )

    @staticmethod
    def polynomial(coeffs):
        """f(y) = sum_k coeffs[k] y^k as a SmoothFunction."""
        p = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
        dp = p.deriv()
        d2p = dp.deriv()
        return SmoothFunction.of_y(lambda y: p(y), lambda y: dp(y), lambda y: d2p(y))


@dataclass(frozen=True)
class GeneratorResult:
    value: np.ndarray
    quadrature_error_estimate: float

    def __float__(self):
        return float(self.value)


# ---------------------------------------------------------------------------
# quadrature node tables

_GH_CACHE: dict = {}
_NODE_CACHE: "OrderedDict" = OrderedDict()
_NODE_LOCK = threading.Lock()
_NODE_CACHE_MAX = 128


def gauss_hermite_nodes(order: int):
    """Nodes/weights for int h(u) exp(-u^2) du (physicists' convention)."""
    tab = _GH_CACHE.get(order)
    if tab is None:
        tab = np.polynomial.hermite.hermgauss(order)
        _GH_CACHE[order] = tab
    return tab


def _gauss_legendre_panel(order: int):
    tab = _GH_CACHE.get(("gl", order))
    if tab is None:
        tab = np.polynomial.legendre.leggauss(order)
        _GH_CACHE[("gl", order)] = tab
    return tab


def _lebesgue_nodes(levy: LevyMeasure, theta: np.ndarray, cfg: QuadratureConfig):
    """Nodes z_i, weights w_i with  sum w_i h(z_i) ~ int h(z) nu_theta(dz).

    Returns (nodes, weights, nodes_lo, weights_lo) where the _lo rule is a
    coarser companion used for the error estimate.
    """
    xi = levy.rate(theta)
    if levy.gaussian_params is not None:
        mean, sd = levy.gaussian_params(theta)
        u_hi, w_hi = gauss_hermite_nodes(64)
        u_lo, w_lo = gauss_hermite_nodes(40)
        s = math.sqrt(2.0) * sd
        return (
            mean + s * u_hi,
            xi * w_hi / math.sqrt(math.pi),
            mean + s * u_lo,
            xi * w_lo / math.sqrt(math.pi),
        )

    # generic absolutely continuous density: composite Gauss-Legendre on [-L, L]
    if levy.moment_hint is not None:
        m8 = float(levy.moment_hint(8, theta))
        L = max(1.0, (m8 / 1e-12) ** (1.0 / 8.0))
    else:
        L = 50.0
    u, w = _gauss_legendre_panel(32)

    def composite(panels):
        edges = np.linspace(-L, L, panels + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        half = 0.5 * (edges[1] - edges[0])
        nodes = (mid[:, None] + half * u[None, :]).ravel()
        weights = np.broadcast_to(half * w[None, :], (panels, u.size)).ravel()
        dens = levy.jump_density(nodes, theta)
        return nodes, xi * weights * dens

    panels = 8
    n_prev, w_prev = composite(panels)
    for _ in range(cfg.max_refine):
        n_next, w_next = composite(2 * panels)
        # compare total mass as the convergence proxy
        if abs(w_next.sum() - w_prev.sum()) <= cfg.tol * max(1.0, abs(xi)):
            return n_next, w_next, n_prev, w_prev
        panels *= 2
        n_prev, w_prev = n_next, w_next
    raise QuadratureError("quadrature failure: mark-density rule did not converge", partial=w_prev.sum())


def levy_nodes(levy: LevyMeasure, theta, cfg: QuadratureConfig = QuadratureConfig()):
    """Cached quadrature rule (nodes, weights, lo nodes, lo weights) for nu_theta."""
    theta = np.asarray(theta, dtype=float)
    key = (id(levy), theta.tobytes(), cfg.tol)
    with _NODE_LOCK:
        hit = _NODE_CACHE.get(key)
        if hit is not None:
            _NODE_CACHE.move_to_end(key)
            return hit
    if levy.kind == "counting":
        nodes = levy.atoms
        weights = levy.rate(theta) * levy.atom_probs(theta)
        rule = (nodes, weights, nodes, weights)
    else:
        rule = _lebesgue_nodes(levy, theta, cfg)
    with _NODE_LOCK:
        _NODE_CACHE[key] = rule
        if len(_NODE_CACHE) > _NODE_CACHE_MAX:
            _NODE_CACHE.popitem(last=False)
    return rule


def levy_integrate(h: Callable, theta, levy: LevyMeasure, cfg: QuadratureConfig = QuadratureConfig()) -> GeneratorResult:
    """int h(z) nu_theta(dz) = xi(theta) int h(z) p(z, theta) nu~(dz)."""
    nodes, weights, nodes_lo, weights_lo = levy_nodes(levy, theta, cfg)
    hv = np.asarray(h(nodes), dtype=float)
    if np.any(~np.isfinite(hv)):
        raise QuadratureError("quadrature failure: integrand not finite on the support")
    value = hv @ weights if hv.ndim == 1 else np.tensordot(hv, weights, axes=([-1], [0]))
    if nodes_lo is nodes:
        err = 0.0
    else:
        hv_lo = np.asarray(h(nodes_lo), dtype=float)
        value_lo = hv_lo @ weights_lo if hv_lo.ndim == 1 else np.tensordot(hv_lo, weights_lo, axes=([-1], [0]))
        err = float(np.max(np.abs(value - value_lo)))
    return GeneratorResult(value=value, quadrature_error_estimate=err)


def levy_expectation(h: Callable, theta, levy: LevyMeasure, cfg: QuadratureConfig = QuadratureConfig()):
    """Convenience: value array of levy_integrate (no error bookkeeping)."""
    return levy_integrate(h, theta, levy, cfg).value


# ---------------------------------------------------------------------------
# generator application


def apply_generator(
    f: SmoothFunction,
    t: float,
    y,
    x,
    theta_eval,
    lam,
    model: JumpDiffusionModel,
    cfg: QuadratureConfig = QuadratureConfig(),
) -> GeneratorResult:
    """Apply L_lam to f at (t, y, x), with f's own parameter slot at theta_eval.

    Broadcasts over array-valued y (x either scalar or matching y).
    """
    if f.dy is None or f.dy2 is None:
        raise InsufficientSmoothnessError("apply_generator needs dy and dy2")
    theta_eval = np.asarray(theta_eval, dtype=float)
    lam = model.require_theta(lam)
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.all(model.state_space.contains(y)):
        raise DomainExitError("generator evaluation point outside the state space")

    local = model.drift(y, lam) * f.dy(t, y, x, theta_eval) + 0.5 * model.diffusion_sq(y, lam) * f.dy2(t, y, x, theta_eval)

    nodes, weights, nodes_lo, weights_lo = levy_nodes(model.levy, lam, cfg)

    def jump_term(nz, wz):
        y_disp = y[..., None] + model.jump_coeff(y[..., None], nz, lam)
        inside = model.state_space.contains(y_disp)
        if not np.all(inside):
            bad = np.argwhere(~inside)
            z_bad = float(nz[bad[0][-1]])
            raise DomainExitError(f"jump displacement leaves the state space at z={z_bad!r}")
        fy = f.eval(t, y[..., None], x[..., None], theta_eval)
        fd = f.eval(t, y_disp, x[..., None], theta_eval)
        return np.tensordot(fd - fy, wz, axes=([-1], [0]))

    jump = jump_term(nodes, weights)
    if nodes_lo is nodes:
        err = 0.0
    else:
        err = float(np.max(np.abs(jump - jump_term(nodes_lo, weights_lo))))
    value = local + jump
    if np.any(~np.isfinite(np.asarray(value))):
        raise QuadratureError("quadrature failure: generator value not finite", partial=value)
    return GeneratorResult(value=value, quadrature_error_estimate=err)


def generator_grid(f: SmoothFunction, t, y, x, theta_eval, lam, model, cfg=QuadratureConfig()):
    """Value array of apply_generator on (possibly vector) y, x."""
    return apply_generator(f, t, y, x, theta_eval, lam, model, cfg).value


def iterate_generator(
    f: SmoothFunction,
    k: int,
    point,
    theta_eval,
    lam,
    model: JumpDiffusionModel,
    t: float = 0.0,
    cfg: QuadratureConfig = QuadratureConfig(),
    fd_step: float = 1e-4,
):
    """L_lam^k f at point = (y, x) for k in {0, 1, 2}.

    k = 2 applies the generator to the k = 1 result, taking the needed
    y-derivatives of L f by central finite differences (step
    fd_step * max(1, |y|), error O(step^2)).
    """
    y, x = point
    if k == 0:
        return np.asarray(f.eval(t, np.asarray(y, dtype=float), np.asarray(x, dtype=float), np.asarray(theta_eval, dtype=float)))
    if k == 1:
        return apply_generator(f, t, y, x, theta_eval, lam, model, cfg).value
    if k != 2:
        raise InsufficientSmoothnessError("iterate_generator supports k in {0, 1, 2}")

    def Lf(yv):
        return apply_generator(f, t, yv, x, theta_eval, lam, model, cfg).value

    y = np.asarray(y, dtype=float)
    h = fd_step * np.maximum(1.0, np.abs(y))
    u = SmoothFunction(
        eval=lambda tt, yv, xv, th: Lf(yv),
        dy=lambda tt, yv, xv, th: (Lf(yv + h) - Lf(yv - h)) / (2.0 * h),
        dy2=lambda tt, yv, xv, th: (Lf(yv + h) - 2.0 * Lf(yv) + Lf(yv - h)) / (h * h),
    )
    return apply_generator(u, t, y, x, theta_eval, lam, model, cfg).value


def conditional_moment(
    f: SmoothFunction,
    x,
    delta: float,
    k: int,
    lam,
    model: JumpDiffusionModel,
    theta_eval=None,
    cfg: QuadratureConfig = QuadratureConfig(),
):
    """k-truncated expansion of E(f(X_{t+delta}, X_t, theta) | X_t = x).

    Returns sum_{i<=k} delta^i / i! (L_lam^i f)(x, x); the remainder is
    O(delta^{k+1}) and is exercised by tests, not returned.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if theta_eval is None:
        theta_eval = lam
    total = np.asarray(iterate_generator(f, 0, (x, x), theta_eval, lam, model), dtype=float).copy()
    fact = 1.0
    for i in range(1, k + 1):
        fact *= i
        total = total + (delta**i / fact) * iterate_generator(f, i, (x, x), theta_eval, lam, model, cfg=cfg)
    return total
