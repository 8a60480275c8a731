"""Path simulation for the jump-diffusion under a true parameter.

Discretization: Euler-Maruyama between events with exact jump-time
placement; a jump splits its substep into two elementary intervals and the
state updates by c(x-, z, theta) instantaneously (cadlag).  Per-path
randomness comes from a private PCG64 stream seeded by
``splitmix64(base_seed, rep)`` and is consumed in a fixed, documented
order: jump count, jump times, marks (chronological), then one standard
normal per elementary interval in chronological order, drawn in fixed-size
blocks.  Batched execution performs identical per-path arithmetic, so
results are bitwise independent of batch composition and worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import CoefficientError, ConfigError, DomainExitError
from .model import JumpDiffusionModel
from .rng import rng_for, splitmix64

__all__ = [
    "DELTA0_CAP",
    "SamplingScheme",
    "ObservationPath",
    "SimulationFailure",
    "simulate_path",
    "simulate_many",
    "stationary_warmup",
    "sample_transitions",
]

DELTA0_CAP = 1.0
_NORMAL_BLOCK = 8192  # substeps per block when drawing Wiener normals


@dataclass(frozen=True)
class SamplingScheme:
    """n equidistant observation intervals of length delta_n; horizon T = n delta_n."""

    n: int
    delta_n: float

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("sampling scheme requires n >= 2")
        if not 0.0 < self.delta_n <= DELTA0_CAP:
            raise ConfigError(f"delta_n must lie in (0, {DELTA0_CAP}]")

    @property
    def horizon(self) -> float:
        return self.n * self.delta_n

    def times(self) -> np.ndarray:
        return self.delta_n * np.arange(self.n + 1)


@dataclass
class ObservationPath:
    scheme: SamplingScheme
    values: np.ndarray
    theta_true: Optional[np.ndarray] = None
    seed: int = 0
    jump_log: Optional[List[tuple]] = None  # (time, x_pre, z, jump_size)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.scheme.n + 1,):
            raise ConfigError("values must have length n + 1")


@dataclass
class SimulationFailure:
    seed: int
    rep: int
    error: str


# ---------------------------------------------------------------------------
# batched engine


def _simulate_batch(model, theta0, scheme, x0s, substeps, seeds, collect_jump_log=True):
    """Simulate len(seeds) paths; returns (obs matrix, jump_logs, failures dict)."""
    theta0 = model.require_theta(theta0)
    if substeps < 1:
        raise ConfigError("substeps must be a positive integer")
    R = len(seeds)
    n, dn, T = scheme.n, scheme.delta_n, scheme.horizon
    S = n * substeps
    h = dn / substeps
    sqrt_h = math.sqrt(h)
    xi = model.levy.rate(theta0)
    lo, hi = model.state_space.lower, model.state_space.upper
    check_box = not model.state_space.unbounded

    x0s = np.broadcast_to(np.asarray(x0s, dtype=float), (R,)).copy()
    if check_box and not np.all((x0s > lo) & (x0s < hi)):
        raise DomainExitError("initial state outside the state space")

    # per-path random ingredients, in the documented order:
    # jump count, jump times, marks (chronological), then Wiener normals
    rngs = []
    jt_list, jz_list, js_list = [], [], []
    for seed in seeds:
        rng = rng_for(seed)
        k = int(rng.poisson(xi * T))
        times = np.sort(T * rng.random(k))
        marks = np.asarray(model.levy.sampler(theta0, rng, size=k), dtype=float)
        rngs.append(rng)
        jt_list.append(times)
        jz_list.append(marks)
        js_list.append(np.minimum((times / h).astype(np.int64), S - 1))

    obs = np.empty((R, n + 1))
    obs[:, 0] = x0s
    X = x0s.copy()
    active = np.ones(R, dtype=bool)
    failures: dict = {}
    jump_logs: List[Optional[list]] = [[] if collect_jump_log else None for _ in range(R)]

    # flattened event table sorted by (substep, path, time)
    ev_sub = np.concatenate(js_list) if R else np.empty(0, dtype=np.int64)
    ev_path = np.concatenate([np.full(js.size, r, dtype=np.int64) for r, js in enumerate(js_list)])
    ev_t = np.concatenate(jt_list)
    ev_z = np.concatenate(jz_list)
    order = np.lexsort((ev_t, ev_path, ev_sub))
    ev_sub, ev_path, ev_t, ev_z = ev_sub[order], ev_path[order], ev_t[order], ev_z[order]
    ev_ptr = 0
    n_events = ev_sub.size

    row_idx = np.arange(R)
    block_start = 0
    norm_block = None
    block_col = None

    def fail(r, msg):
        active[r] = False
        failures[r] = msg
        X[r] = np.nan

    for s in range(S):
        if s == block_start:
            # draw this block's normals per path: one per substep plus one per jump
            block_end = min(block_start + _NORMAL_BLOCK, S)
            counts = np.full(R, block_end - block_start, dtype=np.int64)
            if n_events:
                in_block = (ev_sub >= block_start) & (ev_sub < block_end)
                np.add.at(counts, ev_path[in_block], 1)
            norm_block = np.empty((R, int(counts.max())))
            for r in range(R):
                norm_block[r, : counts[r]] = rngs[r].standard_normal(counts[r])
            block_col = np.zeros(R, dtype=np.int64)
            block_start = block_end

        # clean Euler step for every path (event paths overwritten below)
        zeta = norm_block[row_idx, block_col]
        X_new = X + model.drift(X, theta0) * h + model.diffusion(X, theta0) * sqrt_h * zeta
        consumed = np.ones(R, dtype=np.int64)

        if ev_ptr < n_events and ev_sub[ev_ptr] == s:
            q = ev_ptr
            while q < n_events and ev_sub[q] == s:
                q += 1
            t0 = s * h
            j = ev_ptr
            while j < q:
                r = int(ev_path[j])
                k = j
                while k < q and int(ev_path[k]) == r:
                    k += 1
                # redo path r's step with exact splits at its jump times
                xr = float(X[r])
                seg_t = t0
                ncons = 0
                for e in range(j, k):
                    tj = float(ev_t[e])
                    dt = tj - seg_t
                    zr = norm_block[r, block_col[r] + ncons]
                    xr = xr + float(model.drift(xr, theta0)) * dt + float(model.diffusion(xr, theta0)) * math.sqrt(dt) * zr
                    ncons += 1
                    z = float(ev_z[e])
                    jump = float(model.jump_coeff(xr, z, theta0))
                    if jump_logs[r] is not None:
                        jump_logs[r].append((tj, xr, z, jump))
                    xr = xr + jump
                    seg_t = tj
                dt = (t0 + h) - seg_t
                zr = norm_block[r, block_col[r] + ncons]
                xr = xr + float(model.drift(xr, theta0)) * dt + float(model.diffusion(xr, theta0)) * math.sqrt(dt) * zr
                ncons += 1
                X_new[r] = xr
                consumed[r] = ncons
                j = k
            ev_ptr = q

        X = X_new
        block_col = block_col + consumed

        bad = active & ~np.isfinite(X)
        if bad.any():
            for r in np.nonzero(bad)[0]:
                fail(int(r), "nan in coefficients")
        if check_box:
            out = active & ((X <= lo) | (X >= hi))
            if out.any():
                t_now = (s + 1) * h
                for r in np.nonzero(out)[0]:
                    fail(int(r), f"domain exit at t={t_now:.6g}")

        if (s + 1) % substeps == 0:
            obs[:, (s + 1) // substeps] = X

    return obs, jump_logs, failures


def simulate_path(model, theta0, scheme: SamplingScheme, x0: float, substeps: int, seed: int) -> ObservationPath:
    """One observed path X_0, X_{dn}, ..., X_{n dn}; deterministic given (seed, substeps)."""
    obs, logs, failures = _simulate_batch(model, theta0, scheme, x0, substeps, [seed])
    if 0 in failures:
        raise (CoefficientError if "nan" in failures[0] else DomainExitError)(failures[0])
    return ObservationPath(
        scheme=scheme,
        values=obs[0],
        theta_true=np.asarray(theta0, dtype=float),
        seed=int(seed),
        jump_log=logs[0],
    )


def simulate_many(model, theta0, scheme, x0, substeps, base_seed, reps: int):
    """reps independent paths; replication r uses seed splitmix64(base_seed, r).

    Per-replication errors are returned as SimulationFailure entries, never
    aborting the batch.  Output order is by replication index regardless of
    internal batching.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    seeds = [splitmix64(base_seed, r) for r in range(reps)]
    obs, logs, failures = _simulate_batch(model, theta0, scheme, x0, substeps, seeds)
    out: list = []
    for r in range(reps):
        if r in failures:
            out.append(SimulationFailure(seed=seeds[r], rep=r, error=failures[r]))
        else:
            out.append(
                ObservationPath(
                    scheme=scheme,
                    values=obs[r],
                    theta_true=np.asarray(theta0, dtype=float),
                    seed=seeds[r],
                    jump_log=logs[r],
                )
            )
    return out


def stationary_warmup(model, theta0, burn_in_time: float, substeps: int, seed: int, x0: Optional[float] = None) -> float:
    """State after simulating for burn_in_time, as an approximate stationary draw."""
    if burn_in_time < 0:
        raise ConfigError("burn_in_time must be nonnegative")
    if x0 is None:
        ss = model.state_space
        x0 = 0.0 if ss.unbounded else 0.5 * (ss.lower + ss.upper)
    if burn_in_time == 0.0:
        return float(x0)
    # chop the burn-in into steps of at most DELTA0_CAP
    n = max(2, int(math.ceil(burn_in_time / 0.5)))
    scheme = SamplingScheme(n=n, delta_n=burn_in_time / n)
    path = simulate_path(model, theta0, scheme, x0, substeps, seed)
    return float(path.values[-1])


# ---------------------------------------------------------------------------
# vectorized one-interval transition sampler (Monte Carlo oracle)


def sample_transitions(model, theta, x: float, delta: float, n_samples: int, substeps: int, seed: int, chunk: int = 250_000):
    """n_samples draws of X_delta given X_0 = x, via Euler with jumps.

    Jumps are applied at the end of their substep (a weak O(h) shortcut
    consistent with the Euler order; the path simulator places them
    exactly).  Single stream, fixed draw order, deterministic given seed.
    """
    theta = model.require_theta(theta)
    rng = rng_for(seed)
    h = delta / substeps
    sqrt_h = math.sqrt(h)
    xi = model.levy.rate(theta)
    out = np.empty(n_samples)
    done = 0
    while done < n_samples:
        m = min(chunk, n_samples - done)
        counts = rng.poisson(xi * delta, size=m) if xi > 0 else np.zeros(m, dtype=np.int64)
        total = int(counts.sum())
        ev_path = np.repeat(np.arange(m), counts)
        ev_sub = rng.integers(0, substeps, size=total)
        ev_z = np.asarray(model.levy.sampler(theta, rng, size=total), dtype=float)
        order = np.lexsort((ev_path, ev_sub))
        ev_path, ev_sub, ev_z = ev_path[order], ev_sub[order], ev_z[order]
        starts = np.searchsorted(ev_sub, np.arange(substeps), side="left")
        ends = np.searchsorted(ev_sub, np.arange(substeps), side="right")

        X = np.full(m, float(x))
        for s in range(substeps):
            zeta = rng.standard_normal(m)
            X = X + model.drift(X, theta) * h + model.diffusion(X, theta) * sqrt_h * zeta
            i0, i1 = starts[s], ends[s]
            if i1 > i0:
                p = ev_path[i0:i1]
                z = ev_z[i0:i1]
                # first jump of each path vectorized; rare repeats sequential
                first = np.ones(p.size, dtype=bool)
                first[1:] = p[1:] != p[:-1]
                X[p[first]] += model.jump_coeff(X[p[first]], z[first], theta)
                rest = ~first
                if rest.any():
                    for pj, zj in zip(p[rest], z[rest]):
                        X[pj] += float(model.jump_coeff(X[pj], zj, theta))
        if not np.all(np.isfinite(X)):
            raise CoefficientError("nan in coefficients during transition sampling")
        out[done : done + m] = X
        done += m
    return out
