"""Approximate martingale estimating functions g(t, y, x, theta).

A d-dimensional estimating function pairs with n observation pairs to form
the estimating equation; its defining property is that the one-step
conditional expectation of g is O(delta^kappa0), kappa0 >= 2.  Besides the
classic quadratic family, this module builds localized variants whose
diffusion coordinate vanishes (with derivatives) on every state reachable
by jumps, which is what rate-optimal estimation of the diffusion parameter
requires on models with atomic marks.

Conventions: g(t, y, x, theta) broadcasts over y, x and returns
shape + (d,); dtheta_g returns shape + (d, d) with [..., i, k] = d g_i / d theta_k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .generator import SmoothFunction, apply_generator
from .model import JumpDiffusionModel
from .rng import splitmix64
from .simulate import sample_transitions

__all__ = [
    "EstimatingFunction",
    "OrderReport",
    "make_quadratic_ef",
    "make_linear_drift_ef",
    "make_rate_optimal_ef",
    "make_baseline_quadratic_ef",
    "make_efficient_ef",
    "make_condition41_ef",
    "make_ou_martingale_ef",
    "make_ef",
    "verify_martingale_order",
    "check_lemma_conseq",
    "linear_transform_ef",
    "EF_NAMES",
]

EF_NAMES = (
    "quadratic",
    "linear_drift",
    "rate_optimal",
    "baseline_quadratic",
    "efficient",
    "condition41",
    "ou_martingale",
)


@dataclass(frozen=True)
class EstimatingFunction:
    """Vector estimating function with its derivatives and t-expansion."""

    name: str
    dim: int
    g: Callable
    dtheta_g: Callable
    dy_g: Callable
    dy2_g: Callable
    g0: Callable
    g1: Callable
    g2: Optional[Callable] = None
    kappa0: float = 2.0
    exact_martingale: bool = False
    coord_split: Optional[tuple] = None  # (alpha indices, beta index)

    def row(self, j: int) -> SmoothFunction:
        """Coordinate j of g(0, ., ., theta) as a generator-ready test function."""
        return SmoothFunction(
            eval=lambda t, y, x, th: self.g(0.0, y, x, th)[..., j],
            dy=lambda t, y, x, th: self.dy_g(0.0, y, x, th)[..., j],
            dy2=lambda t, y, x, th: self.dy2_g(0.0, y, x, th)[..., j],
        )


def _broadcast(y, x):
    return np.broadcast_arrays(np.asarray(y, dtype=float), np.asarray(x, dtype=float))


def _fd_dtheta(gfun, d, rel_step=1e-6):
    """Central finite differences in theta for estimating-function Jacobians."""

    def dtheta(t, y, x, theta):
        theta = np.asarray(theta, dtype=float)
        cols = []
        for k in range(d):
            h = rel_step * max(1.0, abs(theta[k]))
            e = np.zeros(d)
            e[k] = h
            cols.append((gfun(t, y, x, theta + e) - gfun(t, y, x, theta - e)) / (2.0 * h))
        return np.stack(cols, axis=-1)

    return dtheta


# ---------------------------------------------------------------------------
# smooth localization machinery (C^4 piecewise-polynomial steps)

_S9 = np.polynomial.Polynomial([0, 0, 0, 0, 0, 126, -420, 540, -315, 70])


def _step(u):
    u = np.clip(u, 0.0, 1.0)
    return _S9(u)


def _step_d1(u):
    uc = np.clip(u, 0.0, 1.0)
    v = 630.0 * uc**4 * (1.0 - uc) ** 4
    return np.where((u > 0.0) & (u < 1.0), v, 0.0)


def _step_d2(u):
    uc = np.clip(u, 0.0, 1.0)
    v = 2520.0 * uc**3 * (1.0 - uc) ** 3 * (1.0 - 2.0 * uc)
    return np.where((u > 0.0) & (u < 1.0), v, 0.0)


@dataclass(frozen=True)
class SmoothCutoff:
    """Even C^4 cutoff: 1 on |w| <= r0, 0 on |w| >= r1, monotone between."""

    r0: float
    r1: float

    def __post_init__(self):
        if not 0.0 < self.r0 < self.r1:
            raise ConfigError("cutoff needs 0 < r0 < r1")

    def _u(self, w):
        return (np.abs(w) - self.r0) / (self.r1 - self.r0)

    def val(self, w):
        return 1.0 - _step(self._u(np.asarray(w, dtype=float)))

    def d1(self, w):
        w = np.asarray(w, dtype=float)
        return -_step_d1(self._u(w)) * np.sign(w) / (self.r1 - self.r0)

    def d2(self, w):
        w = np.asarray(w, dtype=float)
        return -_step_d2(self._u(w)) / (self.r1 - self.r0) ** 2


@dataclass(frozen=True)
class AtomBump:
    """C^4 bump centred at ``center``: 1 within s0, 0 beyond s1."""

    center: float
    s0: float
    s1: float

    def _cut(self):
        return SmoothCutoff(self.s0, self.s1)

    def val(self, w):
        return self._cut().val(np.asarray(w, dtype=float) - self.center)

    def d1(self, w):
        return self._cut().d1(np.asarray(w, dtype=float) - self.center)

    def d2(self, w):
        return self._cut().d2(np.asarray(w, dtype=float) - self.center)


# ---------------------------------------------------------------------------
# quadratic family (conditional mean/variance matching rows)


def make_quadratic_ef(model: JumpDiffusionModel, m1=None, m2=None, m1_dtheta=None, m2_dtheta=None) -> EstimatingFunction:
    """Two-row estimating function from one-step mean and squared-increment rates.

    Row 1 is m1 (y - x - t a~), row 2 is m2 ((y - x - t a~)^2 - t btilde^2),
    where a~ is the conditional-mean rate and btilde^2 the one-step
    quadratic-variation coefficient of the model.  kappa0 = 2.  Default
    weights: m1 = d_alpha a~ / btilde^2, m2 = 1.
    """
    if model.d != 2 or model.d1 != 1 or model.d2 != 1:
        raise ConfigError("quadratic estimating function needs the (d1, d2) = (1, 1) layout")
    if "btilde_sq" not in model.meta:
        raise ConfigError(f"model {model.name!r} lacks a quadratic-variation coefficient")
    bt2 = model.meta["btilde_sq"]
    bt2_dth = model.meta["btilde_sq_dtheta"]
    atilde = model.drift  # built-in drift is already the conditional-mean rate
    atilde_dth = model.drift_dtheta

    default_weights = m1 is None and m2 is None
    if m1 is None:
        m1 = lambda x, th: atilde_dth(x, th)[..., 0] / bt2(x, th)
    if m2 is None:
        m2 = lambda x, th: np.ones(np.shape(np.asarray(x)))
    if m1_dtheta is None:
        if default_weights:
            # d/dtheta of -(x - m0)/beta^2; drift is -alpha (x - m0)
            def m1_dtheta(x, th):
                x = np.asarray(x, dtype=float)
                out = np.zeros(x.shape + (2,))
                out[..., 1] = -2.0 * atilde_dth(x, th)[..., 0] / (bt2(x, th) * th[1])
                return out

        else:
            m1_dtheta = _fd_dtheta(lambda t, y, x, th: m1(x, th), 2)
            m1_dtheta = (lambda f: (lambda x, th: f(0.0, None, x, th)))(m1_dtheta)
    if m2_dtheta is None:
        m2_dtheta = lambda x, th: np.zeros(np.shape(np.asarray(x)) + (2,))

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * atilde(x, theta)
        return np.stack([m1(x, theta) * e, m2(x, theta) * (e * e - t * bt2(x, theta))], axis=-1)

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * atilde(x, theta)
        return np.stack([m1(x, theta), 2.0 * m2(x, theta) * e], axis=-1)

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.stack([np.zeros(y.shape), 2.0 * m2(x, theta)], axis=-1)

    def dtheta_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * atilde(x, theta)
        da = atilde_dth(x, theta)
        row1 = m1_dtheta(x, theta) * e[..., None] - (m1(x, theta) * t)[..., None] * da
        row2 = (
            m2_dtheta(x, theta) * (e * e - t * bt2(x, theta))[..., None]
            + m2(x, theta)[..., None] * (-2.0 * t * e[..., None] * da - t * bt2_dth(x, theta))
        )
        return np.stack([row1, row2], axis=-2)

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        at = atilde(x, theta)
        return np.stack([-m1(x, theta) * at, m2(x, theta) * (-2.0 * at * (y - x) - bt2(x, theta))], axis=-1)

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        at = atilde(x, theta)
        return np.stack([np.zeros(y.shape), 2.0 * m2(x, theta) * at * at], axis=-1)

    return EstimatingFunction(
        name="quadratic",
        dim=2,
        g=g,
        dtheta_g=dtheta_g,
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
    )


def make_linear_drift_ef(model: JumpDiffusionModel) -> EstimatingFunction:
    """Stacked linear rows m_i (y - x - t abar) for drift-jump-only models.

    Weights m = d_alpha a / b^2; abar is the full conditional-mean rate
    (drift plus jump compensator), so kappa0 = 2 holds also when the marks
    have nonzero mean.
    """
    if model.d2 != 0:
        raise ConfigError("linear-drift estimating function needs d2 = 0")
    d = model.d

    def weights(x, theta):
        return model.drift_dtheta(x, theta) / model.diffusion_sq(x, theta)[..., None]

    def abar(x, theta):
        return model.drift(x, theta) + model.jump_mean_rate(x, theta)

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * abar(x, theta)
        return weights(x, theta) * e[..., None]

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.broadcast_to(weights(x, theta), y.shape + (d,)).copy()

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.zeros(y.shape + (d,))

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        return -weights(x, theta) * abar(x, theta)[..., None]

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        return np.zeros(y.shape + (d,))

    return EstimatingFunction(
        name="linear_drift",
        dim=d,
        g=g,
        dtheta_g=_fd_dtheta(g, d),
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
    )


# ---------------------------------------------------------------------------
# (d1, d2) = (2, 1) constructions on atomic-mark models


def _require_atom_21(model: JumpDiffusionModel, who: str) -> float:
    if model.d1 != 2 or model.d2 != 1:
        raise ConfigError(f"{who} needs the (d1, d2) = (2, 1) layout")
    atom = model.meta.get("symmetric_atoms")
    if model.levy.kind != "counting" or atom is None:
        raise ConfigError(f"{who} needs symmetric two-atom marks (counting measure)")
    if not (model.meta.get("linear_drift") and model.meta.get("const_diffusion")):
        raise ConfigError(f"{who} needs linear drift and constant diffusion")
    return float(atom)


def _alpha_weights(model):
    def weights(x, theta):
        return model.drift_dtheta(x, theta)[..., :2] / model.diffusion_sq(x, theta)[..., None]

    def weights_dtheta(x, theta):
        # rows m1 = -(x - a2)/beta^2, m2 = a1/beta^2 for the built-in OU drift
        x = np.asarray(x, dtype=float)
        b2 = model.diffusion_sq(x, theta)
        out = np.zeros(x.shape + (2, 3))
        out[..., 0, 1] = 1.0 / b2
        out[..., 0, 2] = 2.0 * (x - theta[1]) / (b2 * theta[2])
        out[..., 1, 0] = 1.0 / b2
        out[..., 1, 2] = -2.0 * theta[0] / (b2 * theta[2])
        return out

    return weights, weights_dtheta


def _local_quadratic_l2(model, x, theta):
    """Exact second generator iterate of psi(y - x) at the diagonal.

    Valid for linear drift, constant diffusion, symmetric two-atom marks,
    and psi == w^2 near zero, == 0 in neighbourhoods of every reachable
    displacement: L^2 psi = 2 a^2 + 2 b^2 a_x - 2 xi b^2.
    Cross-checked against the numeric generator iteration in the tests.
    """
    x = np.asarray(x, dtype=float)
    a = model.drift(x, theta)
    b2 = model.diffusion_sq(x, theta)
    xi = model.levy.rate(theta)
    return 2.0 * a * a + 2.0 * b2 * model.drift_dx(x, theta) - 2.0 * xi * b2


def _local_quadratic_l2_dtheta(model, x, theta):
    x = np.asarray(x, dtype=float)
    a = model.drift(x, theta)
    da = model.drift_dtheta(x, theta)
    db2 = model.diffusion_sq_dtheta(x, theta)
    ax = model.drift_dx(x, theta)
    b2 = model.diffusion_sq(x, theta)
    xi = model.levy.rate(theta)
    # d(a_x)/dtheta for the built-in OU drift a = -a1 (x - a2)
    dax = np.zeros(x.shape + (3,))
    dax[..., 0] = -1.0
    return (
        4.0 * a[..., None] * da
        + 2.0 * db2 * ax[..., None]
        + 2.0 * b2[..., None] * dax
        - 2.0 * xi * db2
    )


def make_rate_optimal_ef(model: JumpDiffusionModel, r0: float = 0.35, r1: float = 0.6) -> EstimatingFunction:
    """Estimating function whose diffusion row ignores jumps entirely.

    alpha rows: exact conditional-mean martingale rows with weights
    d_alpha a / b^2.  beta row: psi(y - x) - t b^2 - t^2/2 L2(x, theta)
    with psi(w) = w^2 inside |w| <= r0*atom and identically zero beyond
    r1*atom, so psi and its derivatives vanish at every displacement
    reachable by jumps.  The second-order t-term makes the beta row
    kappa0 = 3; the alpha rows are exact martingales.
    """
    atom = _require_atom_21(model, "rate-optimal estimating function")
    mu = model.meta.get("exact_cond_mean")
    if mu is None:
        raise ConfigError("rate-optimal estimating function needs an exact conditional mean")
    cut = SmoothCutoff(r0 * atom, r1 * atom)
    weights, weights_dtheta = _alpha_weights(model)

    def psi(w):
        return w * w * cut.val(w)

    def psi_d1(w):
        return 2.0 * w * cut.val(w) + w * w * cut.d1(w)

    def psi_d2(w):
        return 2.0 * cut.val(w) + 4.0 * w * cut.d1(w) + w * w * cut.d2(w)

    def mu_dtheta(t, x, theta):
        x = np.asarray(x, dtype=float)
        a1, a2 = theta[0], theta[1]
        e = np.exp(-a1 * t)
        out = np.zeros(x.shape + (3,))
        out[..., 0] = -t * (x - a2) * e
        out[..., 1] = 1.0 - e
        return out

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - mu(t, x, theta)
        w = weights(x, theta)
        beta_row = psi(y - x) - t * model.diffusion_sq(x, theta) - 0.5 * t * t * _local_quadratic_l2(model, x, theta)
        return np.concatenate([w * e[..., None], beta_row[..., None]], axis=-1)

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = np.broadcast_to(weights(x, theta), y.shape + (2,))
        return np.concatenate([w, psi_d1(y - x)[..., None]], axis=-1)

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.concatenate([np.zeros(y.shape + (2,)), psi_d2(y - x)[..., None]], axis=-1)

    def dtheta_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - mu(t, x, theta)
        dmu = mu_dtheta(t, x, theta)
        w = weights(x, theta)
        dw = weights_dtheta(x, theta)
        alpha_rows = dw * e[..., None, None] - w[..., :, None] * dmu[..., None, :]
        beta_row = -t * model.diffusion_sq_dtheta(x, theta) - 0.5 * t * t * _local_quadratic_l2_dtheta(model, x, theta)
        return np.concatenate([alpha_rows, beta_row[..., None, :]], axis=-2)

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        a = model.drift(x, theta)
        w = weights(x, theta)
        return np.concatenate([-w * a[..., None], -model.diffusion_sq(x, theta)[..., None]], axis=-1)

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        a1 = theta[0]
        a = model.drift(x, theta)
        w = weights(x, theta)
        return np.concatenate([w * (a1 * a)[..., None], -_local_quadratic_l2(model, x, theta)[..., None]], axis=-1)

    return EstimatingFunction(
        name="rate_optimal",
        dim=3,
        g=g,
        dtheta_g=dtheta_g,
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=3.0,
        coord_split=((0, 1), 2),
    )


def make_baseline_quadratic_ef(model: JumpDiffusionModel) -> EstimatingFunction:
    """Plain quadratic rows on a (2, 1) model; not jump-blind in the beta row.

    The squared-increment row uses the full quadratic-variation rate
    b^2 + xi E z^2, so jumps enter beta estimation and the diffusion rate
    stays at sqrt(n delta_n).  Mainly a contrast fixture for the condition
    checkers and rate studies.
    """
    atom = _require_atom_21(model, "baseline quadratic estimating function")
    weights, weights_dtheta = _alpha_weights(model)
    jm2 = float(model.meta["jump_m2"])

    def abar(x, theta):
        return model.drift(x, theta) + model.jump_mean_rate(x, theta)

    def qv(x, theta):
        return model.diffusion_sq(x, theta) + model.levy.rate(theta) * jm2

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * abar(x, theta)
        w = weights(x, theta)
        return np.concatenate([w * e[..., None], (e * e - t * qv(x, theta))[..., None]], axis=-1)

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - x - t * abar(x, theta)
        w = np.broadcast_to(weights(x, theta), y.shape + (2,))
        return np.concatenate([w, (2.0 * e)[..., None]], axis=-1)

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.concatenate([np.zeros(y.shape + (2,)), np.full(y.shape + (1,), 2.0)], axis=-1)

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        ab = abar(x, theta)
        w = weights(x, theta)
        return np.concatenate([-w * ab[..., None], (-2.0 * ab * (y - x) - qv(x, theta))[..., None]], axis=-1)

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        ab = abar(x, theta)
        w = weights(x, theta)
        return np.concatenate([np.zeros(y.shape + (2,)), (2.0 * ab * ab)[..., None]], axis=-1)

    return EstimatingFunction(
        name="baseline_quadratic",
        dim=3,
        g=g,
        dtheta_g=_fd_dtheta(g, 3),
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
        coord_split=((0, 1), 2),
    )


def make_efficient_ef(model: JumpDiffusionModel, r0: float = 0.35, r1: float = 0.6) -> EstimatingFunction:
    """Fully localized (2, 1) estimating function: every row is jump-blind.

    alpha rows m_j (rho(y - x) - t a) with rho(w) = w near 0 and == 0 at
    reachable displacements; beta row as in the rate-optimal construction.
    With weights d_alpha a / b^2 this matches the efficiency pattern for
    both blocks (identity scaling for alpha, beta^3 for the beta row).
    """
    atom = _require_atom_21(model, "efficient estimating function")
    cut = SmoothCutoff(r0 * atom, r1 * atom)
    weights, weights_dtheta = _alpha_weights(model)

    def rho(w):
        return w * cut.val(w)

    def rho_d1(w):
        return cut.val(w) + w * cut.d1(w)

    def rho_d2(w):
        return 2.0 * cut.d1(w) + w * cut.d2(w)

    def psi(w):
        return w * w * cut.val(w)

    def psi_d1(w):
        return 2.0 * w * cut.val(w) + w * w * cut.d1(w)

    def psi_d2(w):
        return 2.0 * cut.val(w) + 4.0 * w * cut.d1(w) + w * w * cut.d2(w)

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = weights(x, theta)
        a = model.drift(x, theta)
        alpha_rows = w * (rho(y - x) - t * a)[..., None]
        beta_row = psi(y - x) - t * model.diffusion_sq(x, theta) - 0.5 * t * t * _local_quadratic_l2(model, x, theta)
        return np.concatenate([alpha_rows, beta_row[..., None]], axis=-1)

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = weights(x, theta)
        return np.concatenate([w * rho_d1(y - x)[..., None], psi_d1(y - x)[..., None]], axis=-1)

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = weights(x, theta)
        return np.concatenate([w * rho_d2(y - x)[..., None], psi_d2(y - x)[..., None]], axis=-1)

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        a = model.drift(x, theta)
        w = weights(x, theta)
        return np.concatenate([-w * a[..., None], -model.diffusion_sq(x, theta)[..., None]], axis=-1)

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        return np.concatenate([np.zeros(y.shape + (2,)), -_local_quadratic_l2(model, x, theta)[..., None]], axis=-1)

    return EstimatingFunction(
        name="efficient",
        dim=3,
        g=g,
        dtheta_g=_fd_dtheta(g, 3),
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
        coord_split=((0, 1), 2),
    )


def make_condition41_ef(model: JumpDiffusionModel, r0: float = 0.35, r1: float = 0.6, jump_row_scale=None) -> EstimatingFunction:
    """Drift-jump efficient construction on atomic marks (d2 = 0), K = identity.

    Near the diagonal the function behaves like d_alpha a / b^2 (y - x);
    at each reachable displacement w it takes the value of the jump score
    d_alpha phi / phi, glued with disjoint C^4 bumps.  ``jump_row_scale``
    (a length-d1 vector) rescales the jump part per coordinate, which is a
    deliberate way to break the single-K consistency in tests.
    """
    if model.d2 != 0:
        raise ConfigError("condition-41 estimating function needs d2 = 0")
    if model.levy.kind != "counting":
        raise ConfigError("condition-41 estimating function needs counting-measure marks")
    tr = model.jump_transform
    if tr is None:
        raise ConfigError("condition-41 estimating function needs a jump transform")
    d = model.d1
    atoms = np.asarray(model.levy.atoms, dtype=float)
    gap = np.min(np.abs(atoms))
    cut = SmoothCutoff(r0 * gap, r1 * gap)
    spread = min(0.35 * gap, 0.45 * np.min(np.abs(np.subtract.outer(atoms, atoms))[~np.eye(atoms.size, dtype=bool)]) if atoms.size > 1 else 0.35 * gap)
    bumps = [AtomBump(float(w), 0.5 * spread, spread) for w in atoms]
    scale = np.ones(d) if jump_row_scale is None else np.asarray(jump_row_scale, dtype=float)

    def weights(x, theta):
        return model.drift_dtheta(x, theta) / model.diffusion_sq(x, theta)[..., None]

    def score(x, theta):
        # (n_atoms, d) jump scores at the displacement atoms
        ph = np.asarray([tr.phi(x, w, theta) for w in atoms], dtype=float)
        dph = np.asarray([tr.dalpha_phi(np.asarray(x), np.asarray(w), theta) for w in atoms], dtype=float)
        return dph / ph[..., None] * scale

    def rho(w):
        return w * cut.val(w)

    def rho_d1(w):
        return cut.val(w) + w * cut.d1(w)

    def rho_d2(w):
        return 2.0 * cut.d1(w) + w * cut.d2(w)

    def g0(y, x, theta):
        y, x = _broadcast(y, x)
        w = y - x
        out = weights(x, theta) * rho(w)[..., None]
        sc = score(0.0, theta)  # displacement scores are state-free for additive marks
        for i, b in enumerate(bumps):
            out = out + sc[i] * b.val(w)[..., None]
        return out

    def _lg0_diag(x, theta):
        # L_theta g(0, .)(x, x): rho'(0) = 1, rho''(0) = 0, bump terms vanish near 0
        x = np.asarray(x, dtype=float)
        a = model.drift(x, theta)
        w = weights(x, theta)
        sc = score(0.0, theta)
        probs = model.levy.rate(theta) * model.levy.atom_probs(theta)
        jump_sum = (sc * probs[:, None]).sum(axis=0)
        return w * a[..., None] + jump_sum

    def g(t, y, x, theta):
        return g0(y, x, theta) - t * np.broadcast_to(_lg0_diag(x, theta), _broadcast(y, x)[0].shape + (d,)).copy()

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = y - x
        out = weights(x, theta) * rho_d1(w)[..., None]
        sc = score(0.0, theta)
        for i, b in enumerate(bumps):
            out = out + sc[i] * b.d1(w)[..., None]
        return out

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        w = y - x
        out = weights(x, theta) * rho_d2(w)[..., None]
        sc = score(0.0, theta)
        for i, b in enumerate(bumps):
            out = out + sc[i] * b.d2(w)[..., None]
        return out

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        return -np.broadcast_to(_lg0_diag(x, theta), y.shape + (d,)).copy()

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        return np.zeros(y.shape + (d,))

    return EstimatingFunction(
        name="condition41",
        dim=d,
        g=g,
        dtheta_g=_fd_dtheta(g, d),
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
    )


def make_ou_martingale_ef(model: JumpDiffusionModel) -> EstimatingFunction:
    """Exact martingale rows from the closed-form conditional mean/variance.

    Rows: (y - mu, x (y - mu), (y - mu)^2 - V) with mu, V the exact one-step
    conditional moments of the mean-reverting additive-jump model.
    """
    mu = model.meta.get("exact_cond_mean")
    var = model.meta.get("exact_cond_var")
    if mu is None or var is None or model.d != 3:
        raise ConfigError("martingale estimating function needs the additive-jump model with exact moments")
    jm2 = float(model.meta["jump_m2"])

    def qv(theta):
        return theta[2] ** 2 + model.levy.rate(theta) * jm2

    def g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - mu(t, x, theta)
        return np.stack([e, x * e, e * e - var(t, x, theta)], axis=-1)

    def dy_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        e = y - mu(t, x, theta)
        return np.stack([np.ones(y.shape), x, 2.0 * e], axis=-1)

    def dy2_g(t, y, x, theta):
        y, x = _broadcast(y, x)
        return np.stack([np.zeros(y.shape), np.zeros(y.shape), np.full(y.shape, 2.0)], axis=-1)

    def g0(y, x, theta):
        return g(0.0, y, x, theta)

    def g1(y, x, theta):
        y, x = _broadcast(y, x)
        ab = model.drift(x, theta) + model.jump_mean_rate(x, theta)
        return np.stack([-ab, -x * ab, np.full(y.shape, -qv(theta))], axis=-1)

    def g2(y, x, theta):
        y, x = _broadcast(y, x)
        a1 = theta[0]
        ab = model.drift(x, theta) + model.jump_mean_rate(x, theta)
        # d2/dt2 of mu is a1^2 (x - mbar); of V is -2 a1 qv + ... (exact rows below FD-checked)
        d2mu = -a1 * ab
        return np.stack([-d2mu, -x * d2mu, np.full(y.shape, 2.0 * a1 * qv(theta))], axis=-1)

    return EstimatingFunction(
        name="ou_martingale",
        dim=3,
        g=g,
        dtheta_g=_fd_dtheta(g, 3),
        dy_g=dy_g,
        dy2_g=dy2_g,
        g0=g0,
        g1=g1,
        g2=g2,
        kappa0=2.0,
        exact_martingale=True,
        coord_split=((0, 1), 2),
    )


def make_ef(name: str, model: JumpDiffusionModel, **options) -> EstimatingFunction:
    """Construct an estimating function by name (CLI entry point)."""
    builders = {
        "quadratic": make_quadratic_ef,
        "linear_drift": make_linear_drift_ef,
        "rate_optimal": make_rate_optimal_ef,
        "baseline_quadratic": make_baseline_quadratic_ef,
        "efficient": make_efficient_ef,
        "condition41": make_condition41_ef,
        "ou_martingale": make_ou_martingale_ef,
    }
    if name not in builders:
        raise ConfigError(f"unknown estimating function {name!r}; expected one of {EF_NAMES}")
    return builders[name](model, **options)


def linear_transform_ef(ef: EstimatingFunction, M) -> EstimatingFunction:
    """Version M g of an estimating function (M invertible d x d)."""
    M = np.asarray(M, dtype=float)
    if M.shape != (ef.dim, ef.dim):
        raise ConfigError("transform matrix must be d x d")
    mt = M.T

    def apply_vec(fn):
        return lambda *args: fn(*args) @ mt

    def dtheta(t, y, x, theta):
        return np.einsum("ij,...jk->...ik", M, ef.dtheta_g(t, y, x, theta))

    return replace(
        ef,
        name=f"{ef.name}*M",
        g=apply_vec(ef.g),
        dtheta_g=dtheta,
        dy_g=apply_vec(ef.dy_g),
        dy2_g=apply_vec(ef.dy2_g),
        g0=apply_vec(ef.g0),
        g1=apply_vec(ef.g1),
        g2=None if ef.g2 is None else apply_vec(ef.g2),
        coord_split=None,
    )


# ---------------------------------------------------------------------------
# numerical order verification and the basic identities


@dataclass
class OrderReport:
    deltas: np.ndarray
    means: np.ndarray  # (n_deltas, d)
    ses: np.ndarray  # (n_deltas, d)
    norms: np.ndarray  # (n_deltas,)
    slope: float
    slope_se: float
    coord_slopes: np.ndarray
    coord_slope_ses: np.ndarray
    noise_dominated: np.ndarray  # (n_deltas,) bool: ||mean|| < 3 ||se||

    def to_dict(self):
        return {
            "deltas": self.deltas.tolist(),
            "means": self.means.tolist(),
            "ses": self.ses.tolist(),
            "norms": self.norms.tolist(),
            "slope": self.slope,
            "slope_se": self.slope_se,
            "coord_slopes": self.coord_slopes.tolist(),
            "coord_slope_ses": self.coord_slope_ses.tolist(),
            "noise_dominated": [bool(b) for b in self.noise_dominated],
        }


def _loglog_slope(xs, ys):
    lx, ly = np.log(xs), np.log(ys)
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    dof = max(1, len(xs) - 2)
    resid = ly - A @ coef
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(A.T @ A)
    return float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))


def verify_martingale_order(
    ef: EstimatingFunction,
    model: JumpDiffusionModel,
    theta,
    x: float,
    deltas: Sequence[float],
    mc_samples: int,
    seed: int,
    substeps_base: int = 32,
) -> OrderReport:
    """Monte Carlo estimate of the one-step conditional-mean order of g.

    For each delta, ||E(g(delta, X_delta, x, theta) | X_0 = x)|| is
    estimated from mc_samples simulated transitions (substeps scaled as
    substeps_base * max(deltas) / delta), using common random numbers
    across the delta ladder.  Returns log-log slopes with regression
    standard errors; rungs where the Monte Carlo error dominates are
    flagged, not suppressed.
    """
    deltas = np.asarray(deltas, dtype=float)
    if deltas.size < 3 or np.any(np.diff(deltas) >= 0):
        raise ConfigError("deltas must be a decreasing ladder with at least 3 values")
    theta = model.require_theta(theta)
    d0 = float(deltas.max())
    means = np.empty((deltas.size, ef.dim))
    ses = np.empty_like(means)
    for i, dl in enumerate(deltas):
        substeps = int(math.ceil(substeps_base * d0 / dl))
        y = sample_transitions(model, theta, x, float(dl), mc_samples, substeps, splitmix64(seed, 0))
        gv = ef.g(float(dl), y, x, theta)
        means[i] = gv.mean(axis=0)
        ses[i] = gv.std(axis=0, ddof=1) / math.sqrt(mc_samples)
    norms = np.linalg.norm(means, axis=1)
    se_norms = np.linalg.norm(ses, axis=1)
    noise = norms < 3.0 * se_norms
    slope, slope_se = _loglog_slope(deltas, np.maximum(norms, 1e-300))
    coord_slopes = np.empty(ef.dim)
    coord_ses = np.empty(ef.dim)
    for j in range(ef.dim):
        coord_slopes[j], coord_ses[j] = _loglog_slope(deltas, np.maximum(np.abs(means[:, j]), 1e-300))
    return OrderReport(
        deltas=deltas,
        means=means,
        ses=ses,
        norms=norms,
        slope=slope,
        slope_se=slope_se,
        coord_slopes=coord_slopes,
        coord_slope_ses=coord_ses,
        noise_dominated=noise,
    )


def check_lemma_conseq(ef: EstimatingFunction, model: JumpDiffusionModel, x_grid, thetas):
    """Residuals of the diagonal-zero and time-slope identities of g.

    Returns the max over the grid of |g(0, x, x, theta)| and of
    |g1(x, x, theta) + (L_theta g(0, theta))(x, x)|.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    r_diag = 0.0
    r_slope = 0.0
    for theta in thetas:
        theta = model.require_theta(theta)
        r_diag = max(r_diag, float(np.max(np.abs(ef.g0(x_grid, x_grid, theta)))))
        g1v = ef.g1(x_grid, x_grid, theta)
        for j in range(ef.dim):
            lg = apply_generator(ef.row(j), 0.0, x_grid, x_grid, theta, theta, model).value
            r_slope = max(r_slope, float(np.max(np.abs(g1v[..., j] + lg))))
    return {"diag_residual": r_diag, "slope_residual": r_slope}
