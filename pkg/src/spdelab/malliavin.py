"""Discrete Malliavin derivative of the exponential-Euler scheme.

The derivative of the coefficients ``u_hat[j]`` with respect to the noise
increment ``dw[i, l]`` obeys the differentiated step::

    S_{j+1} = exp(-lambda dt) * ( S_j + P[(dt f'(u_j) + sigma'(u_j) B dW_j) s_j]
                                  + [i == j] P[sigma(u_j) w_l e^l] )

with ``s_j`` the tangent field on the collocation grid. Since ``dw[i, l]``
integrates the noise over ``[t_i, t_{i+1}]`` against an orthonormal
direction of ``L^2_Q``, the discrete ``H``-norm is the left-endpoint sum
``dt * sum_{i, l} (sum_k S[i, l, k] e^k(x))^2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .noise import NoiseGrid, bump, generate_batch
from .solver import DiffusionSpec, DivergenceError, DriftSpec, Scheme, SolverConfig, Trajectory, solve
from .spectral import Collocation, SpectralModel


class TangentUnavailable(ValueError):
    """The diffusion coefficient has no derivative; use the finite-difference probe."""


# ---------------------------------------------------------------- propagation


class TangentPropagator:
    """Carries ``S[p, i - first_step, l, k]`` for a batch of paths through the scheme."""

    def __init__(self, scheme: Scheme, n_paths: int, n_steps: int, first_step: int = 0):
        if not scheme.diffusion.differentiable:
            raise TangentUnavailable(
                f"sigma preset {scheme.diffusion.name!r} has no derivative; use finite_difference_tangent instead"
            )
        if not 0 <= first_step < n_steps:
            raise ValueError(f"first_step must lie in [0, {n_steps}), got {first_step}")
        self.scheme = scheme
        self.first_step = int(first_step)
        n = scheme.model.size
        self.S = np.zeros((n_paths, n_steps - first_step, n, n))
        # P[w_l e^l * sigma] needs e^l on the grid, scaled by the noise weight
        self._wbasis = scheme.colloc.basis * scheme.weights[:, None]  # (N, G)

    def advance(self, j: int, u_hat: np.ndarray, dw: np.ndarray) -> None:
        """Move the sensitivities from step ``j`` to ``j + 1`` along state ``u_hat`` (P, N)."""
        sc = self.scheme
        colloc = sc.colloc
        u = colloc.to_grid(u_hat)
        active = j - self.first_step
        if active > 0:
            noise = colloc.to_grid(sc.weights * dw)
            a = sc.dt * sc.drift.derivative(u) + sc.diffusion.derivative(u) * noise
            if np.any(a != 0):
                past = self.S[:, :active]
                s = colloc.to_grid(past)
                past += colloc.from_grid(a[:, None, None, :] * s)
        if active >= 0:
            sig = sc.diffusion(u)
            self.S[:, active] = colloc.from_grid(sig[:, None, :] * self._wbasis[None])
            self.S[:, : active + 1] *= sc.decay
        # rows >= active + 1 stay zero: no dependence on future increments

    def at_point(self, x) -> np.ndarray:
        """Contract against ``e^k(x)``: shape ``(P, W, N)``."""
        return self.S @ self.scheme.model.eigenfunctions(x).reshape(-1)


@dataclass(frozen=True, eq=False)
class TangentField:
    """Sensitivities of ``u_hat[step]`` to the increments ``dw[i, l]``, ``first_step <= i < n_total``.

    ``sensitivities[i - first_step, l, k] = d u_hat[step, k] / d dw[i, l]``;
    rows with ``i >= step`` are identically zero.
    """

    sensitivities: np.ndarray
    step: int
    dt: float
    model: SpectralModel
    first_step: int = 0

    @property
    def time(self) -> float:
        return self.step * self.dt

    def column(self, i: int, l: int) -> np.ndarray:
        if i < self.first_step or i - self.first_step >= self.sensitivities.shape[0]:
            raise IndexError(f"increment step {i} is not tracked")
        return self.sensitivities[i - self.first_step, l]

    def at_point(self, x) -> np.ndarray:
        return self.sensitivities @ self.model.eigenfunctions(x).reshape(-1)


def _check_pairing(trajectory: Trajectory, noise: NoiseGrid, config: SolverConfig):
    if trajectory.noise_identity != noise.identity:
        raise ValueError(f"trajectory was driven by {trajectory.noise_identity}, noise is {noise.identity}")
    if not math.isclose(trajectory.dt, noise.dt, rel_tol=1e-12) or trajectory.n_steps != config.n_steps:
        raise ValueError("trajectory, noise and config disagree on the time grid")


def propagate_tangent(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                      trajectory: Trajectory, noise: NoiseGrid, *, first_step: int = 0, steps=None):
    """Forward tangent along a solved path.

    Returns the :class:`TangentField` at the final step, or a dict
    ``{step: TangentField}`` when ``steps`` is given.
    """
    _check_pairing(trajectory, noise, config)
    scheme = Scheme(model, drift, diffusion, config.dt, config.collocation(model))
    prop = TangentPropagator(scheme, 1, config.n_steps, first_step)
    wanted = None if steps is None else set(int(s) for s in steps)
    snaps = {}
    if wanted is not None and 0 in wanted:
        snaps[0] = TangentField(prop.S[0].copy(), 0, config.dt, model, first_step)
    for j in range(config.n_steps):
        prop.advance(j, trajectory.coefficients[j][None], noise.increments[j][None])
        if wanted is not None and j + 1 in wanted:
            snaps[j + 1] = TangentField(prop.S[0].copy(), j + 1, config.dt, model, first_step)
    if wanted is None:
        return TangentField(prop.S[0], config.n_steps, config.dt, model, first_step)
    return snaps


def solve_with_tangent(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                       increments: np.ndarray, x, *, first_step: int = 0):
    """Batch of paths stepped together with their tangents.

    Returns ``(u_final (P, N), point_sensitivities (P, W, N), diverged (P,))``
    where the sensitivities are contracted at ``x`` at the final step.
    """
    scheme = Scheme(model, drift, diffusion, config.dt, config.collocation(model))
    n_paths = increments.shape[0]
    prop = TangentPropagator(scheme, n_paths, config.n_steps, first_step)
    u = np.broadcast_to(config.initial_coefficients(model, scheme.colloc), (n_paths, model.size)).copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(config.n_steps):
            prop.advance(j, u, increments[:, j])
            u = scheme.step(u, increments[:, j])
    bad = ~np.all(np.isfinite(u), axis=1)
    return u, prop.at_point(x), bad


def _final_state(scheme: Scheme, u0: np.ndarray, increments: np.ndarray) -> np.ndarray:
    u = u0
    for dw in increments:
        u = scheme.step(u, dw)
    return u


def finite_difference_tangent(config, model, drift, diffusion, noise: NoiseGrid, i: int, l: int,
                              h: float = 1e-5, *, extended: bool = True) -> np.ndarray:
    """Central difference of the final coefficients with respect to ``dw[i, l]``.

    With ``extended=True`` the two bumped solves run in ``np.longdouble`` so
    the rounding floor (about ``eps * |u| / h``) stays below the size of
    weakly excited high-mode columns.
    """
    if not (0 <= i < noise.n_steps and 0 <= l < noise.n_modes):
        raise IndexError(f"increment ({i}, {l}) out of range")
    if not extended:
        up = solve(config, model, drift, diffusion, bump(noise, i, l, h)).coefficients[-1]
        down = solve(config, model, drift, diffusion, bump(noise, i, l, -h)).coefficients[-1]
        return (up - down) / (2.0 * h)
    dtype = np.longdouble
    scheme = Scheme(model, drift, diffusion, config.dt, config.collocation(model), dtype=dtype)
    u0 = config.initial_coefficients(model, scheme.colloc).astype(dtype)
    inc = noise.increments[: config.n_steps].astype(dtype)
    hh = dtype(h)
    plus = inc.copy()
    plus[i, l] += hh
    minus = inc.copy()
    minus[i, l] -= hh
    diff = (_final_state(scheme, u0, plus) - _final_state(scheme, u0, minus)) / (2 * hh)
    return diff.astype(float)


# ---------------------------------------------------------------- norms


def window_blocks(dt: float, t: float, window) -> tuple[int, int]:
    """Increment blocks ``[t_i, t_{i+1}]`` contained in ``window``, as ``range(lo, hi)``."""
    a, b = (float(v) for v in window)
    eps = 1e-9
    if a < -eps * dt or b > t + eps * dt or a > b:
        raise ValueError(f"window [{a}, {b}] is not inside [0, {t}]")
    lo = max(0, math.ceil(a / dt - eps))
    hi = min(int(round(t / dt)), math.floor(b / dt + eps))
    return lo, max(lo, hi)


def h_norm_sq(tangent: TangentField, x, window=None) -> float:
    """``||Du(t, x)||^2`` over the time window (default ``[0, t]``), left-endpoint rule."""
    window = (0.0, tangent.time) if window is None else window
    lo, hi = window_blocks(tangent.dt, tangent.time, window)
    if hi > lo and lo < tangent.first_step:
        raise ValueError(f"window starts before the first tracked increment (step {tangent.first_step})")
    dx = tangent.at_point(x)
    return float(tangent.dt * np.sum(dx[lo - tangent.first_step : hi - tangent.first_step] ** 2))


def point_norms_sq(point_sens: np.ndarray, dt: float, block_counts) -> np.ndarray:
    """Trailing-window norms from contracted sensitivities ``(P, W, N)``.

    Column ``c`` holds ``||Du||^2_{H(t - k_c dt, t)}`` for ``k_c = block_counts[c]``.
    """
    per_block = np.sum(point_sens**2, axis=-1)  # (P, W)
    tail_cum = np.cumsum(per_block[:, ::-1], axis=1)
    idx = np.asarray(block_counts, dtype=int) - 1
    return dt * tail_cum[:, idx]


@dataclass
class HNormReport:
    t: float
    x: tuple[float, ...]
    full: float
    windows: list[tuple[float, float, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "point": {"t": self.t, "x": list(self.x)},
            "full_norm_sq": self.full,
            "windows": [{"a": a, "b": b, "norm_sq": v} for a, b, v in self.windows],
            "path": self.metadata,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def h_norm_report(tangent: TangentField, x, windows=(), metadata=None) -> HNormReport:
    xs = tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))
    rep = HNormReport(tangent.time, xs, h_norm_sq(tangent, x), metadata=dict(metadata or {}))
    for a, b in windows:
        rep.windows.append((float(a), float(b), h_norm_sq(tangent, x, (a, b))))
    return rep


def v0_norm_sq(model: SpectralModel, trajectory: Trajectory, diffusion: DiffusionSpec, t: float, x,
               window, colloc=None) -> float:
    """Discrete ``||v0(t, x)||^2`` over ``window`` with ``v0 = K_{t-s}(x, .) sigma(u(s, .))``.

    Each block ``i`` contributes ``dt * ||K_{t - t_i}(x, .) sigma(u_i)||^2_{L^2_Q}``,
    the injected part of the tangent before any drift or noise feedback.
    """
    j = int(round(t / trajectory.dt))
    if j < 0 or j > trajectory.n_steps or not math.isclose(j * trajectory.dt, t, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"t={t} is not a step of the trajectory")
    lo, hi = window_blocks(trajectory.dt, t, window)
    colloc = colloc or Collocation(model)
    ex = model.eigenfunctions(x).reshape(-1)
    lam = model.eigenvalues
    total = 0.0
    for i in range(lo, hi):
        kern = np.exp(-lam * (j - i) * trajectory.dt) * ex  # coefficients of K_{t - t_i}(x, .)
        phi = colloc.to_grid(kern) * diffusion(colloc.to_grid(trajectory.coefficients[i]))
        c = colloc.from_grid(phi)
        total += trajectory.dt * float(np.sum(model.q_eigenvalues * c**2))
    return total


# ---------------------------------------------------------------- scaling experiment


@dataclass
class ScalingResult:
    deltas: np.ndarray
    means: np.ndarray
    stderrs: np.ndarray
    slope: float
    n_paths: int
    n_diverged: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "mean", "stderr"])
            for d, m, s in zip(self.deltas, self.means, self.stderrs):
                w.writerow([repr(float(d)), repr(float(m)), repr(float(s))])
            w.writerow(["slope", repr(float(self.slope)), ""])


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


def windowed_scaling(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                     x, deltas, n_paths: int, *, master_seed: int = 0, chunk_size: int = 50) -> ScalingResult:
    """Monte Carlo means of ``||Du(t, x)||^2_{H(t - delta, t)}`` and their log-log slope.

    ``t`` is the final time of ``config``; each ``delta`` is rounded to a
    whole number of steps. Only increments inside the widest window are
    tracked by the tangent.
    """
    if n_paths < 100:
        raise ValueError(f"need at least 100 paths, got {n_paths}")
    t = config.t_final
    counts = np.array([max(1, int(round(d / config.dt))) for d in deltas])
    if np.any(counts * config.dt >= t * (1 + 1e-12)) or np.any(np.asarray(deltas, float) >= t):
        raise ValueError("every delta must be shorter than t")
    if counts.max() / counts.min() < 100 - 1e-9:
        raise ValueError("deltas must span at least two decades")
    order = np.argsort(counts)
    counts = counts[order]
    first = config.n_steps - int(counts.max())

    rows = []
    bad_total = 0
    for start in range(0, n_paths, chunk_size):
        idx = range(start, min(n_paths, start + chunk_size))
        inc = generate_batch(master_seed, idx, config.dt, config.n_steps, model.size)
        _, sens, bad = solve_with_tangent(config, model, drift, diffusion, inc, x, first_step=first)
        norms = point_norms_sq(sens, config.dt, counts)
        rows.append(norms[~bad])
        bad_total += int(bad.sum())
    vals = np.concatenate(rows, axis=0)
    if vals.shape[0] == 0:
        raise DivergenceError("every path diverged")
    means = vals.mean(axis=0)
    stderrs = vals.std(axis=0, ddof=1) / math.sqrt(vals.shape[0])
    ds = counts * config.dt
    return ScalingResult(ds, means, stderrs, loglog_slope(ds, means), vals.shape[0], bad_total)
