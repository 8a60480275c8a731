"""Scalar jump-diffusion model objects.

A model couples drift/diffusion/jump coefficient functions with a
finite-activity jump measure and the open boxes for states and parameters:

    dX_t = a(X_t, theta) dt + b(X_t, theta) dW_t + dJ_t,

where J is a compound Poisson process with total rate ``xi(theta)`` and
mark density ``p(z, theta)`` (w.r.t. Lebesgue or counting measure), and a
mark z hitting at state x moves the state by ``c(x, z, theta)``.

All coefficient callables are pure, numpy-broadcasting elementwise
functions; model objects are immutable after construction and safe to
share across workers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import CoefficientError, ConfigError

__all__ = [
    "ParameterVector",
    "StateSpace",
    "ParamBox",
    "LevyMeasure",
    "TransformedJumpDensity",
    "JumpDiffusionModel",
    "ValidationReport",
    "make_builtin_model",
    "validate_model",
    "finite_diff",
    "BUILTIN_MODELS",
]

BUILTIN_MODELS = ("ou_additive_jumps", "quadratic_ef_model", "driftjump_known_diffusion")


# ---------------------------------------------------------------------------
# parameter / state containers


@dataclass(frozen=True)
class ParameterVector:
    """theta = (alpha, beta) with a drift-jump block and a diffusion block."""

    alpha: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if self.d < 1:
            raise ConfigError("parameter vector must have dimension >= 1")

    @property
    def d1(self) -> int:
        return self.alpha.size

    @property
    def d2(self) -> int:
        return self.beta.size

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    @property
    def theta(self) -> np.ndarray:
        """Concatenated parameter as a flat array of length d."""
        return np.concatenate([self.alpha, self.beta])

    @staticmethod
    def from_array(theta, d1: int, d2: int) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != d1 + d2:
            raise ConfigError(f"expected {d1 + d2} parameters, got {theta.size}")
        return ParameterVector(theta[:d1], theta[d1:])


@dataclass(frozen=True)
class StateSpace:
    """Open interval (lower, upper); infinities allowed."""

    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigError("state space requires lower < upper")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x > self.lower) & (x < self.upper)

    @property
    def unbounded(self) -> bool:
        return math.isinf(self.lower) and math.isinf(self.upper)


@dataclass(frozen=True)
class ParamBox:
    """Open box for Theta = A x B with the (d1, d2) split."""

    lows: np.ndarray
    highs: np.ndarray
    d1: int
    d2: int

    def __post_init__(self):
        object.__setattr__(self, "lows", np.asarray(self.lows, dtype=float))
        object.__setattr__(self, "highs", np.asarray(self.highs, dtype=float))
        if self.lows.size != self.d1 + self.d2 or self.highs.size != self.lows.size:
            raise ConfigError("box bounds must have length d1 + d2")
        if not np.all(self.lows < self.highs):
            raise ConfigError("box requires lows < highs componentwise")

    @property
    def d(self) -> int:
        return self.d1 + self.d2

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float).ravel()
        return bool(np.all(theta > self.lows) & np.all(theta < self.highs))

    def shrink(self, fraction: float = 0.05) -> "ParamBox":
        """Compact sub-box K obtained by shrinking each side by ``fraction``."""
        span = self.highs - self.lows
        return ParamBox(self.lows + fraction * span, self.highs - fraction * span, self.d1, self.d2)

    def split(self, theta) -> ParameterVector:
        return ParameterVector.from_array(theta, self.d1, self.d2)


# ---------------------------------------------------------------------------
# jump measure


@dataclass(frozen=True)
class LevyMeasure:
    """Finite-activity jump measure nu_theta(dz) = xi(theta) p(z, theta) nu~(dz).

    ``kind`` selects the dominating measure nu~: "lebesgue" or "counting"
    (finite atom list).  ``gaussian_params``, when given, declares p(., theta)
    Gaussian so Gauss-Hermite quadrature applies; otherwise Lebesgue-case
    integrals use adaptive Gauss-Legendre on a range derived from
    ``moment_hint``.
    """

    kind: str
    total_rate: Callable
    jump_density: Callable
    jump_density_dtheta: Callable
    sampler: Callable
    atoms: Optional[np.ndarray] = None
    atom_probs: Optional[Callable] = None
    gaussian_params: Optional[Callable] = None
    moment_hint: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in ("lebesgue", "counting"):
            raise ConfigError(f"unknown dominating measure kind {self.kind!r}")
        if self.kind == "counting":
            atoms = np.asarray(self.atoms, dtype=float)
            if atoms.ndim != 1 or atoms.size == 0:
                raise ConfigError("counting measure needs a nonempty 1-d atom list")
            if np.unique(atoms).size != atoms.size:
                raise ConfigError("counting-measure atoms must be distinct")
            object.__setattr__(self, "atoms", atoms)

    def rate(self, theta) -> float:
        return float(self.total_rate(np.asarray(theta, dtype=float)))


@dataclass(frozen=True)
class TransformedJumpDensity:
    """Jump-size law transformed to observed displacements w = c(x, z, theta).

    ``phi(x, w, theta)`` is the density of displacements w.r.t. eta_x
    (Lebesgue on the open set ``support(x)``, or counting on a finite
    displacement list), normalized so that the total eta_x-mass is
    xi(theta).  ``density_nodes`` returns nodes/weights approximating
    integrals of the form  sum_i weight_i h(w_i) ~ int h(w) phi(x, w) eta_x(dw).
    """

    kind: str
    support: Callable
    phi: Callable
    dalpha_phi: Callable
    density_nodes: Callable
    inverse_c: Optional[Callable] = None
    dinverse_dw: Optional[Callable] = None


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class JumpDiffusionModel:
    """Immutable bundle of coefficients, jump measure, and spaces.

    Derivative callables return arrays with the parameter axis last, e.g.
    ``drift_dtheta(x, theta)`` has shape ``np.shape(x) + (d,)``.
    """

    name: str
    state_space: StateSpace
    param_box: ParamBox
    drift: Callable
    drift_dtheta: Callable
    drift_dx: Callable
    diffusion: Callable
    diffusion_sq_dtheta: Callable
    diffusion_dx: Callable
    diffusion_dx2: Callable
    jump_coeff: Callable
    jump_coeff_dtheta: Callable
    jump_coeff_dx: Callable
    levy: LevyMeasure
    jump_transform: Optional[TransformedJumpDensity] = None
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.param_box.d

    @property
    def d1(self) -> int:
        return self.param_box.d1

    @property
    def d2(self) -> int:
        return self.param_box.d2

    def diffusion_sq(self, x, theta):
        b = self.diffusion(x, theta)
        return b * b

    def require_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.d:
            raise ConfigError(f"model {self.name!r} expects {self.d} parameters, got {theta.size}")
        if not self.param_box.contains(theta):
            raise ConfigError(f"parameter {theta.tolist()} outside the open box of model {self.name!r}")
        return theta

    def jump_mean_rate(self, x, theta):
        """int c(x, z, theta) nu_theta(dz), the jump part of the mean drift."""
        fn = self.meta.get("jump_mean_rate")
        if fn is not None:
            return fn(x, theta)
        from .generator import levy_expectation  # local import: avoid cycle

        return levy_expectation(lambda z: self.jump_coeff(np.asarray(x)[..., None], z, theta), theta, self.levy)


# ---------------------------------------------------------------------------
# finite differences (fallback for user models; built-ins ship analytic ones)


def finite_diff(fn, x, order: int = 1):
    """Central finite difference of a scalar function of one argument.

    Step is cbrt(eps) * max(1, |x|); intended as a fallback only, accuracy
    is O(h^2).
    """
    x = np.asarray(x, dtype=float)
    h = np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(x))
    if order == 1:
        return (fn(x + h) - fn(x - h)) / (2.0 * h)
    if order == 2:
        return (fn(x + h) - 2.0 * fn(x) + fn(x - h)) / (h * h)
    raise ConfigError("finite_diff supports order 1 or 2")


# ---------------------------------------------------------------------------
# built-in models


def _gaussian_levy(rate: float, mean: float, sd: float, d: int) -> LevyMeasure:
    inv_norm = 1.0 / (sd * math.sqrt(2.0 * math.pi))

    def density(z, theta):
        z = np.asarray(z, dtype=float)
        return inv_norm * np.exp(-0.5 * ((z - mean) / sd) ** 2)

    def density_dtheta(z, theta):
        z = np.asarray(z, dtype=float)
        return np.zeros(z.shape + (d,))

    def sampler(theta, rng, size=None):
        return mean + sd * rng.standard_normal(size)

    def moment_hint(k, theta):
        # crude upper bound on E|z|^k for the truncation heuristics
        return (abs(mean) + sd * max(1.0, math.sqrt(k))) ** k * math.gamma(k / 2.0 + 1.0) * 2.0

    return LevyMeasure(
        kind="lebesgue",
        total_rate=lambda theta: rate,
        jump_density=density,
        jump_density_dtheta=density_dtheta,
        sampler=sampler,
        gaussian_params=lambda theta: (mean, sd),
        moment_hint=moment_hint,
    )


def _two_atom_levy(rate: float, atom: float, prob_fn, prob_dtheta_fn, d: int) -> LevyMeasure:
    atoms = np.array([atom, -atom], dtype=float)

    def atom_probs(theta):
        p = prob_fn(np.asarray(theta, dtype=float))
        return np.array([p, 1.0 - p])

    def density(z, theta):
        z = np.asarray(z, dtype=float)
        p = atom_probs(theta)
        out = np.zeros_like(z, dtype=float)
        out = np.where(z == atoms[0], p[0], out)
        out = np.where(z == atoms[1], p[1], out)
        return out

    def density_dtheta(z, theta):
        z = np.asarray(z, dtype=float)
        dp = prob_dtheta_fn(np.asarray(theta, dtype=float))  # (d,)
        out = np.zeros(z.shape + (d,))
        out[z == atoms[0]] = dp
        out[z == atoms[1]] = -dp
        return out

    def sampler(theta, rng, size=None):
        p = atom_probs(theta)[0]
        u = rng.random(size)
        return np.where(u < p, atoms[0], atoms[1])

    return LevyMeasure(
        kind="counting",
        total_rate=lambda theta: rate,
        jump_density=density,
        jump_density_dtheta=density_dtheta,
        sampler=sampler,
        atoms=atoms,
        atom_probs=atom_probs,
        moment_hint=lambda k, theta: abs(atom) ** k,
    )


def _identity_transform_lebesgue(levy: LevyMeasure, d1: int, scale_fn=None, scale_dtheta_fn=None):
    """Transform for c(x, z, theta) = kappa(theta) * z with Lebesgue marks.

    ``scale_fn`` defaults to 1 (c = z).  The displacement density is
    phi(x, w, theta) = xi(theta) p(w / kappa, theta) / |kappa|.
    """
    from .generator import gauss_hermite_nodes  # local import: avoid cycle

    if scale_fn is None:
        scale_fn = lambda theta: 1.0

    def phi(x, w, theta):
        kappa = scale_fn(theta)
        w = np.asarray(w, dtype=float)
        return levy.rate(theta) * levy.jump_density(w / kappa, theta) / abs(kappa)

    def dalpha_phi(x, w, theta):
        w = np.asarray(w, dtype=float)
        kappa = scale_fn(theta)
        dp = levy.jump_density_dtheta(w / kappa, theta)[..., :d1]
        return levy.rate(theta) / abs(kappa) * dp

    def support(x):
        return (-math.inf, math.inf)

    def density_nodes(x, theta):
        mean, sd = levy.gaussian_params(theta)
        kappa = scale_fn(theta)
        u, wts = gauss_hermite_nodes(64)
        nodes = kappa * (mean + math.sqrt(2.0) * sd * u)
        weights = levy.rate(theta) * wts / math.sqrt(math.pi)
        return nodes, weights

    def inverse_c(x, w, theta):
        return np.asarray(w, dtype=float) / scale_fn(theta)

    def dinverse_dw(x, w, theta):
        return np.full(np.shape(np.asarray(w)), 1.0 / scale_fn(theta))

    return TransformedJumpDensity(
        kind="lebesgue",
        support=support,
        phi=phi,
        dalpha_phi=dalpha_phi,
        density_nodes=density_nodes,
        inverse_c=inverse_c,
        dinverse_dw=dinverse_dw,
    )


def _identity_transform_counting(levy: LevyMeasure, d1: int):
    """Transform for c(x, z) = z with counting marks: W(x) = atom set."""

    def support(x):
        return levy.atoms.copy()

    def phi(x, w, theta):
        return levy.rate(theta) * levy.jump_density(w, theta)

    def dalpha_phi(x, w, theta):
        return levy.rate(theta) * levy.jump_density_dtheta(w, theta)[..., :d1]

    def density_nodes(x, theta):
        return levy.atoms.copy(), levy.rate(theta) * levy.atom_probs(theta)

    return TransformedJumpDensity(
        kind="counting",
        support=support,
        phi=phi,
        dalpha_phi=dalpha_phi,
        density_nodes=density_nodes,
    )


def _make_ou_additive(jump_law="gaussian", jump_rate=1.0, jump_mean=0.0, jump_sd=0.5, atom=1.0, atom_prob=0.5):
    """dX = -a1 (X - a2) dt + beta dW + dJ with additive marks, theta = (a1, a2, beta)."""
    d1, d2, d = 2, 1, 3
    if jump_law == "gaussian":
        levy = _gaussian_levy(jump_rate, jump_mean, jump_sd, d)
        jump_mean_z = jump_mean
        jump_m2 = jump_mean**2 + jump_sd**2
    elif jump_law == "two_atom":
        levy = _two_atom_levy(jump_rate, atom, lambda theta: atom_prob, lambda theta: np.zeros(d), d)
        jump_mean_z = atom * (2.0 * atom_prob - 1.0)
        jump_m2 = atom**2
    else:
        raise ConfigError(f"unknown jump_law {jump_law!r}")

    def drift(x, theta):
        x = np.asarray(x, dtype=float)
        return -theta[0] * (x - theta[1])

    def drift_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., 0] = -(x - theta[1])
        out[..., 1] = theta[0]
        return out

    def drift_dx(x, theta):
        return np.full(np.shape(np.asarray(x)), -theta[0])

    def diffusion(x, theta):
        return np.full(np.shape(np.asarray(x)), theta[2])

    def diffusion_sq_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., 2] = 2.0 * theta[2]
        return out

    zero_x = lambda x, theta: np.zeros(np.shape(np.asarray(x)))

    def jump_coeff(x, z, theta):
        x, z = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        return z.copy()

    def jump_coeff_dtheta(x, z, theta):
        shape = np.broadcast_shapes(np.shape(np.asarray(x)), np.shape(np.asarray(z)))
        return np.zeros(shape + (d,))

    def jump_coeff_dx(x, z, theta):
        shape = np.broadcast_shapes(np.shape(np.asarray(x)), np.shape(np.asarray(z)))
        return np.zeros(shape)

    box = ParamBox([0.05, -5.0, 0.05], [5.0, 5.0, 5.0], d1, d2)
    rate = jump_rate

    def exact_cond_mean(t, x, theta):
        # linear drift and parameter-free marks give the conditional mean in closed form
        a1, a2 = theta[0], theta[1]
        mbar = a2 + rate * jump_mean_z / a1
        return mbar + (np.asarray(x, dtype=float) - mbar) * np.exp(-a1 * np.asarray(t))

    def exact_cond_var(t, x, theta):
        a1, beta = theta[0], theta[2]
        qv = beta**2 + rate * jump_m2  # requires centred marks for exactness
        return qv * (1.0 - np.exp(-2.0 * a1 * np.asarray(t))) / (2.0 * a1)

    meta = {
        "jump_mean_rate": lambda x, theta: np.full(np.shape(np.asarray(x)), rate * jump_mean_z),
        "linear_drift": True,
        "const_diffusion": True,
        "jump_law": jump_law,
        "jump_m2": jump_m2,
        "exact_cond_mean": exact_cond_mean,
    }
    if jump_mean_z == 0.0:
        meta["exact_cond_var"] = exact_cond_var
    if jump_law == "two_atom" and atom_prob == 0.5:
        meta["symmetric_atoms"] = atom

    transform = (
        _identity_transform_lebesgue(levy, d1)
        if jump_law == "gaussian"
        else _identity_transform_counting(levy, d1)
    )

    return JumpDiffusionModel(
        name="ou_additive_jumps",
        state_space=StateSpace(),
        param_box=box,
        drift=drift,
        drift_dtheta=drift_dtheta,
        drift_dx=drift_dx,
        diffusion=diffusion,
        diffusion_sq_dtheta=diffusion_sq_dtheta,
        diffusion_dx=zero_x,
        diffusion_dx2=zero_x,
        jump_coeff=jump_coeff,
        jump_coeff_dtheta=jump_coeff_dtheta,
        jump_coeff_dx=jump_coeff_dx,
        levy=levy,
        jump_transform=transform,
        meta=meta,
    )


def _make_quadratic_ef_model(jump_rate=0.2, jump_sd=2.0, m0=0.0):
    """Linear-drift model whose one-step quadratic variation coefficient is beta^2.

    dX = -alpha (X - m0) dt + sigma0 beta dW + beta dJ, theta = (alpha, beta),
    with centred Gaussian marks and sigma0^2 = 1 - rate * sd^2 so that
    E((X_{t+D}-X_t)^2 | X_t) = D beta^2 + O(D^2).
    """
    d1, d2, d = 1, 1, 2
    gamma2 = jump_rate * jump_sd**2
    if gamma2 >= 1.0:
        raise ConfigError("quadratic_ef_model requires jump_rate * jump_sd^2 < 1")
    sigma0 = math.sqrt(1.0 - gamma2)
    levy = _gaussian_levy(jump_rate, 0.0, jump_sd, d)

    def drift(x, theta):
        return -theta[0] * (np.asarray(x, dtype=float) - m0)

    def drift_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., 0] = -(x - m0)
        return out

    def drift_dx(x, theta):
        return np.full(np.shape(np.asarray(x)), -theta[0])

    def diffusion(x, theta):
        return np.full(np.shape(np.asarray(x)), sigma0 * theta[1])

    def diffusion_sq_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape + (d,))
        out[..., 1] = 2.0 * theta[1] * sigma0**2
        return out

    zero_x = lambda x, theta: np.zeros(np.shape(np.asarray(x)))

    def jump_coeff(x, z, theta):
        x, z = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        return theta[1] * z

    def jump_coeff_dtheta(x, z, theta):
        x, z = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        out = np.zeros(z.shape + (d,))
        out[..., 1] = z
        return out

    def jump_coeff_dx(x, z, theta):
        shape = np.broadcast_shapes(np.shape(np.asarray(x)), np.shape(np.asarray(z)))
        return np.zeros(shape)

    box = ParamBox([0.05, 0.02], [5.0, 5.0], d1, d2)

    def exact_cond_mean(t, x, theta):
        return m0 + (np.asarray(x, dtype=float) - m0) * np.exp(-theta[0] * np.asarray(t))

    def exact_cond_var(t, x, theta):
        return theta[1] ** 2 * (1.0 - np.exp(-2.0 * theta[0] * np.asarray(t))) / (2.0 * theta[0])

    meta = {
        "jump_mean_rate": lambda x, theta: np.zeros(np.shape(np.asarray(x))),
        "linear_drift": True,
        "const_diffusion": True,
        "btilde": lambda x, theta: np.full(np.shape(np.asarray(x)), theta[1]),
        "btilde_sq": lambda x, theta: np.full(np.shape(np.asarray(x)), theta[1] ** 2),
        "btilde_sq_dtheta": lambda x, theta: np.stack(
            [np.zeros(np.shape(np.asarray(x))), np.full(np.shape(np.asarray(x)), 2.0 * theta[1])], axis=-1
        ),
        "sigma0": sigma0,
        "m0": m0,
        "exact_cond_mean": exact_cond_mean,
        "exact_cond_var": exact_cond_var,
        "jump_m2": jump_sd**2,
    }

    transform = _identity_transform_lebesgue(
        levy, d1, scale_fn=lambda theta: theta[1], scale_dtheta_fn=lambda theta: np.array([0.0, 1.0])
    )

    return JumpDiffusionModel(
        name="quadratic_ef_model",
        state_space=StateSpace(),
        param_box=box,
        drift=drift,
        drift_dtheta=drift_dtheta,
        drift_dx=drift_dx,
        diffusion=diffusion,
        diffusion_sq_dtheta=diffusion_sq_dtheta,
        diffusion_dx=zero_x,
        diffusion_dx2=zero_x,
        jump_coeff=jump_coeff,
        jump_coeff_dtheta=jump_coeff_dtheta,
        jump_coeff_dx=jump_coeff_dx,
        levy=levy,
        jump_transform=transform,
        meta=meta,
    )


def _make_driftjump_known_diffusion(jump_rate=1.0, atom=1.0, alpha_jumps=False):
    """dX = -alpha X dt + dW + dJ with two-atom marks {+atom, -atom}; known b = 1.

    With ``alpha_jumps`` the +atom probability is logistic(alpha - 1), so the
    scalar alpha drives both drift and jump law (d1 = 1, d2 = 0).
    """
    d1, d2, d = 1, 0, 1

    if alpha_jumps:
        prob_fn = lambda theta: 1.0 / (1.0 + math.exp(-(theta[0] - 1.0)))

        def prob_dtheta_fn(theta):
            s = prob_fn(theta)
            return np.array([s * (1.0 - s)])

    else:
        prob_fn = lambda theta: 0.5
        prob_dtheta_fn = lambda theta: np.zeros(d)

    levy = _two_atom_levy(jump_rate, atom, prob_fn, prob_dtheta_fn, d)

    def drift(x, theta):
        return -theta[0] * np.asarray(x, dtype=float)

    def drift_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        return (-x)[..., None]

    def drift_dx(x, theta):
        return np.full(np.shape(np.asarray(x)), -theta[0])

    one_x = lambda x, theta: np.ones(np.shape(np.asarray(x)))
    zero_x = lambda x, theta: np.zeros(np.shape(np.asarray(x)))

    def diffusion_sq_dtheta(x, theta):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (d,))

    def jump_coeff(x, z, theta):
        x, z = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(z, dtype=float))
        return z.copy()

    def jump_coeff_dtheta(x, z, theta):
        shape = np.broadcast_shapes(np.shape(np.asarray(x)), np.shape(np.asarray(z)))
        return np.zeros(shape + (d,))

    def jump_coeff_dx(x, z, theta):
        shape = np.broadcast_shapes(np.shape(np.asarray(x)), np.shape(np.asarray(z)))
        return np.zeros(shape)

    box = ParamBox([0.05], [5.0], d1, d2)

    def jump_mean_rate(x, theta):
        p = prob_fn(theta)
        return np.full(np.shape(np.asarray(x)), jump_rate * atom * (2.0 * p - 1.0))

    meta = {
        "jump_mean_rate": jump_mean_rate,
        "linear_drift": True,
        "const_diffusion": True,
        "alpha_jumps": alpha_jumps,
        "jump_m2": atom**2,
        "atom_prob_fn": prob_fn,
        "atom_prob_dtheta": prob_dtheta_fn,
    }
    if not alpha_jumps:
        meta["symmetric_atoms"] = atom

    return JumpDiffusionModel(
        name="driftjump_known_diffusion",
        state_space=StateSpace(),
        param_box=box,
        drift=drift,
        drift_dtheta=drift_dtheta,
        drift_dx=drift_dx,
        diffusion=one_x,
        diffusion_sq_dtheta=diffusion_sq_dtheta,
        diffusion_dx=zero_x,
        diffusion_dx2=zero_x,
        jump_coeff=jump_coeff,
        jump_coeff_dtheta=jump_coeff_dtheta,
        jump_coeff_dx=jump_coeff_dx,
        levy=levy,
        jump_transform=_identity_transform_counting(levy, d1),
        meta=meta,
    )


def make_builtin_model(name: str, **options) -> JumpDiffusionModel:
    """Construct a built-in reference model by name.

    Options (all keyword-only, with safe defaults):

    - ``ou_additive_jumps``: jump_law ("gaussian" | "two_atom"), jump_rate,
      jump_mean, jump_sd, atom, atom_prob.
    - ``quadratic_ef_model``: jump_rate, jump_sd, m0.
    - ``driftjump_known_diffusion``: jump_rate, atom, alpha_jumps.
    """
    if name == "ou_additive_jumps":
        return _make_ou_additive(**options)
    if name == "quadratic_ef_model":
        return _make_quadratic_ef_model(**options)
    if name == "driftjump_known_diffusion":
        return _make_driftjump_known_diffusion(**options)
    raise ConfigError(f"unknown built-in model {name!r}; expected one of {BUILTIN_MODELS}")


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    checks: list = field(default_factory=list)
    violations: list = field(default_factory=list)

    def add(self, name: str, margin: float, where, ok: bool):
        entry = {"check": name, "worst_margin": float(margin), "where": where, "ok": bool(ok)}
        self.checks.append(entry)
        if not ok:
            self.violations.append(entry)

    @property
    def ok(self) -> bool:
        return not self.violations


def validate_model(model: JumpDiffusionModel, grid: Sequence[float], theta_samples) -> ValidationReport:
    """Spot-check model regularity on a state grid and parameter samples.

    Checks b^2 > 0, boundedness of drift/diffusion difference quotients,
    and closure of the state space under sampled jumps.  Violations are
    reported, not raised; NaN from a coefficient raises CoefficientError.
    """
    grid = np.asarray(grid, dtype=float)
    if not np.all(model.state_space.contains(grid)):
        raise ConfigError("grid points must lie inside the state space")
    report = ValidationReport()
    rng = np.random.default_rng(0)

    for pv in theta_samples:
        theta = pv.theta if isinstance(pv, ParameterVector) else np.asarray(pv, dtype=float)
        if not model.param_box.contains(theta):
            raise ConfigError("parameter outside open box")

        b2 = model.diffusion_sq(grid, theta)
        if np.any(np.isnan(b2)):
            raise CoefficientError("nan in diffusion coefficient")
        i = int(np.argmin(b2))
        report.add("b2_positive", b2[i], {"x": float(grid[i]), "theta": theta.tolist()}, bool(b2[i] > 0.0))

        a = model.drift(grid, theta)
        if np.any(np.isnan(a)):
            raise CoefficientError("nan in drift coefficient")
        # sampled difference quotients as a Lipschitz smoke test
        if grid.size >= 2:
            dq_a = np.abs(np.diff(a) / np.diff(grid))
            dq_b = np.abs(np.diff(model.diffusion(grid, theta)) / np.diff(grid))
            bound = 1e6
            worst = float(max(dq_a.max(), dq_b.max()))
            report.add("lipschitz_quotients", bound - worst, {"theta": theta.tolist()}, worst < bound)

        # jump closure: x + c(x, z, theta) stays in the state space
        z = model.levy.sampler(theta, rng, size=16)
        moved = grid[:, None] + model.jump_coeff(grid[:, None], z[None, :], theta)
        if np.any(np.isnan(moved)):
            raise CoefficientError("nan in jump coefficient")
        inside = model.state_space.contains(moved)
        ok = bool(np.all(inside))
        where = None
        if not ok:
            j = np.argwhere(~inside)[0]
            where = {"x": float(grid[j[0]]), "z": float(z[j[1]]), "theta": theta.tolist()}
        report.add("jump_closure", float(np.mean(inside)), where, ok)

    return report
