"""Dirichlet eigen-structure on the unit box and the series built from it.

The elliptic operator is the Dirichlet Laplacian on ``(0, 1)^d`` with
eigenpairs ``lambda_k = pi^2 |k|^2`` and ``e^k(x) = prod_i sqrt(2) sin(k_i pi x_i)``.
Every series here is truncated at the model's ``n_modes`` per axis.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import fft as sfft


def _frozen(a) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class SpectralModel:
    """Truncated spectral model of ``A`` together with the smoothing ``B = (I+A)^{-m}``.

    ``multipliers`` optionally replaces the diagonal of ``B`` by an arbitrary
    positive sequence (one entry per mode, canonical order).
    """

    dimension: int = 1
    n_modes: int = 16
    smoothing_exponent: int = 1
    multipliers: tuple[float, ...] | None = None

    indices: np.ndarray = field(init=False, repr=False, compare=False)
    eigenvalues: np.ndarray = field(init=False, repr=False, compare=False)
    noise_weights: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        if int(self.n_modes) != self.n_modes or self.n_modes < 1:
            raise ValueError(f"n_modes must be a positive integer, got {self.n_modes}")
        if int(self.smoothing_exponent) != self.smoothing_exponent or self.smoothing_exponent < 0:
            raise ValueError("smoothing_exponent must be a nonnegative integer")

        grid = itertools.product(range(1, self.n_modes + 1), repeat=self.dimension)
        # ascending eigenvalue, lexicographic multi-index on ties
        idx = sorted(grid, key=lambda k: (sum(ki * ki for ki in k), k))
        idx = np.array(idx, dtype=np.int64)
        lam = np.pi**2 * np.sum(idx.astype(float) ** 2, axis=1)

        if self.multipliers is None:
            weights = (1.0 + lam) ** (-float(self.smoothing_exponent))
        else:
            weights = np.asarray(self.multipliers, dtype=float)
            if weights.shape != lam.shape:
                raise ValueError(f"expected {lam.size} multipliers, got {weights.size}")
            if np.any(weights < 0) or not np.all(np.isfinite(weights)):
                raise ValueError("multipliers must be finite and nonnegative")

        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "eigenvalues", _frozen(lam))
        object.__setattr__(self, "noise_weights", _frozen(weights))

    @property
    def size(self) -> int:
        """Total number of retained modes ``N = n_modes ** dimension``."""
        return self.n_modes**self.dimension

    @property
    def q_eigenvalues(self) -> np.ndarray:
        return self.noise_weights**2

    def eigenfunctions(self, x) -> np.ndarray:
        """Evaluate all retained eigenfunctions at points ``x``.

        ``x`` has shape ``(..., d)`` (a bare scalar or 1-d array is accepted
        when ``d == 1``). Returns shape ``(..., N)``.
        """
        x = _as_points(x, self.dimension)
        out = np.ones(x.shape[:-1] + (self.size,))
        for axis in range(self.dimension):
            k = self.indices[:, axis]
            out = out * (np.sqrt(2.0) * np.sin(np.pi * x[..., axis, None] * k))
        return out

    def to_config(self) -> dict[str, str]:
        return {
            "dimension": str(self.dimension),
            "n_modes": str(self.n_modes),
            "m": str(self.smoothing_exponent),
        }

    @classmethod
    def from_config(cls, section) -> "SpectralModel":
        return cls(
            dimension=int(section.get("dimension", 1)),
            n_modes=int(section.get("n_modes", 16)),
            smoothing_exponent=int(section.get("m", 1)),
        )


def _as_points(x, dimension: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dimension == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dimension:
        raise ValueError(f"points must have trailing dimension {dimension}, got shape {x.shape}")
    return x


def eigen_pairs(model: SpectralModel) -> list[tuple[tuple[int, ...], float, Callable]]:
    """All ``(multi_index, eigenvalue, evaluator)`` triples in canonical order."""

    def make(k):
        kk = np.asarray(k, dtype=float)

        def e(x):
            x = _as_points(x, model.dimension)
            return np.prod(np.sqrt(2.0) * np.sin(np.pi * x * kk), axis=-1)

        return e

    return [
        (tuple(int(v) for v in k), float(lam), make(k))
        for k, lam in zip(model.indices, model.eigenvalues)
    ]


def kernel_eval(model: SpectralModel, t: float, x, y) -> np.ndarray:
    """Truncated heat kernel ``K_t(x, y) = sum_k exp(-lambda_k t) e^k(x) e^k(y)``."""
    if not t > 0:
        raise ValueError(f"kernel time must be positive, got {t}")
    ex = model.eigenfunctions(x)
    ey = model.eigenfunctions(y)
    return np.sum(np.exp(-model.eigenvalues * t) * ex * ey, axis=-1)


def kernel_matrix(model: SpectralModel, t: float, x, y) -> np.ndarray:
    """``K_t(x_i, y_j)`` for every pair of points; shape ``(len(x), len(y))``."""
    ex = model.eigenfunctions(x)
    ey = model.eigenfunctions(y)
    return (ex * np.exp(-model.eigenvalues * t)) @ ey.T


def _check_interior(model: SpectralModel, x) -> np.ndarray:
    p = _as_points(x, model.dimension)
    if np.any(p <= 0) or np.any(p >= 1):
        raise ValueError(f"point {x} is not in the open unit box")
    return p


def kernel_norm_sq(model: SpectralModel, x, delta: float) -> float:
    """``||K_.(x, .)||^2`` in ``L^2(0, delta; L^2_Q)`` as a closed-form series.

    Each mode contributes ``q_k (1 - exp(-2 delta lambda_k)) |e^k(x)|^2 / (2 lambda_k)``.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    p = _check_interior(model, x)
    lam = model.eigenvalues
    ek2 = model.eigenfunctions(p) ** 2
    terms = model.q_eigenvalues * (-np.expm1(-2.0 * delta * lam)) / (2.0 * lam) * ek2
    return float(np.sum(terms))


def c_x(model: SpectralModel, x) -> float:
    """Linear-rate constant ``sum_k q_k (1 + 2 lambda_k)^{-1} |e^k(x)|^2``."""
    p = _check_interior(model, x)
    lam = model.eigenvalues
    ek2 = model.eigenfunctions(p) ** 2
    return float(np.sum(model.q_eigenvalues / (1.0 + 2.0 * lam) * ek2))


@dataclass(frozen=True)
class KernelNormProfile:
    x: tuple[float, ...]
    deltas: np.ndarray
    values: np.ndarray
    c_x: float

    def ratios(self, beta: float) -> np.ndarray:
        return self.deltas**beta / np.sqrt(self.values)

    def to_csv(self, path, beta: float = 0.5) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["delta", "value", "c_x_delta", "ratio_beta"])
            for d, v, r in zip(self.deltas, self.values, self.ratios(beta)):
                w.writerow([repr(float(d)), repr(float(v)), repr(float(self.c_x * d)), repr(float(r))])


def kernel_norm_profile(model: SpectralModel, x, deltas: Sequence[float]) -> KernelNormProfile:
    deltas = np.asarray(sorted(float(d) for d in deltas))
    values = np.array([kernel_norm_sq(model, x, d) for d in deltas])
    xs = tuple(float(v) for v in np.atleast_1d(np.asarray(x, dtype=float)))
    return KernelNormProfile(x=xs, deltas=_frozen(deltas), values=_frozen(values), c_x=c_x(model, x))


@dataclass(frozen=True)
class ConditionVerdict:
    """Outcome of the small-window ratio test ``delta^beta / ||K||_{H(0,delta)} -> 0``."""

    beta: float
    deltas: np.ndarray
    ratios: np.ndarray
    monotone: bool
    tail_slope: float
    drop: float
    passed: bool

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def check_condition_88(
    profile: KernelNormProfile,
    beta: float,
    *,
    min_tail_slope: float = 0.05,
    min_decades: float = 3.0,
) -> ConditionVerdict:
    """Decide numerically whether ``delta^beta / ||K||_{H(0,delta)}`` vanishes as ``delta -> 0``.

    A limit cannot be taken on a finite grid, so the verdict is a trend
    heuristic: PASS requires the ratio to shrink monotonically as ``delta``
    decreases *and* the log-log slope over the smallest decade of the grid
    to stay at least ``min_tail_slope``. A ratio that flattens to a positive
    constant (the borderline ``beta = 1/2`` case) has tail slope near zero
    and fails. ``drop`` (smallest-delta ratio over largest-delta ratio) is
    reported for reference.
    """
    if len(profile.deltas) == 0:
        raise ValueError("empty kernel-norm profile")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    d = np.asarray(profile.deltas, dtype=float)
    if np.log10(d.max() / d.min()) < min_decades - 1e-9:
        raise ValueError(f"deltas must span at least {min_decades} decades")

    r = profile.ratios(beta)
    # ratio must decrease as delta decreases, i.e. increase along ascending delta
    monotone = bool(np.all(np.diff(r) > 0))
    tail = d <= 10.0 * d.min() * (1 + 1e-12)
    if tail.sum() < 2:
        tail[:2] = True
    slope = float(np.polyfit(np.log(d[tail]), np.log(r[tail]), 1)[0])
    drop = float(r[0] / r[-1])
    passed = monotone and slope >= min_tail_slope
    return ConditionVerdict(beta, d, r, monotone, slope, drop, passed)


def _floating(a) -> np.ndarray:
    # keep extended precision when the caller asks for it
    a = np.asarray(a)
    return a if a.dtype in (np.float64, np.longdouble) else a.astype(float)


class Collocation:
    """Pseudo-spectral transforms between mode coefficients and a sine grid.

    The grid has ``points_per_axis`` interior nodes ``p / (G + 1)`` per axis.
    Projection is the trapezoid rule, which is exact for products of sines
    whose summed frequency stays below ``2 (G + 1)``; with ``G >= 2 n_modes``
    a cubic of an ``n_modes`` field is therefore projected without aliasing.
    Transforms act on the trailing axis and broadcast over any leading ones.

    ``method="matrix"`` multiplies by the tabulated eigenfunctions (BLAS,
    fastest at desk scale); ``method="dst"`` uses the type-I sine transform,
    whose per-row arithmetic does not depend on how many paths are batched
    together and is used when strict reproducibility is requested.
    """

    def __init__(self, model: SpectralModel, points_per_axis: int | None = None, dealias: float = 2.0,
                 method: str = "matrix"):
        if method not in ("matrix", "dst"):
            raise ValueError(f"unknown transform method {method!r}")
        self.method = method
        if points_per_axis is None:
            points_per_axis = int(np.ceil(dealias * model.n_modes))
        if points_per_axis < model.n_modes:
            raise ValueError("collocation grid must have at least n_modes points per axis")
        self.model = model
        self.points_per_axis = int(points_per_axis)
        g = self.points_per_axis
        d = model.dimension
        self.h = 1.0 / (g + 1)
        self.size = g**d
        self._shape = (g,) * d
        self._axes = tuple(range(-d, 0))
        # flat position of each canonical mode inside the (g,)*d transform array
        self._flat = np.ravel_multi_index(tuple((model.indices - 1).T), self._shape)
        self._synth = (1.0 / np.sqrt(2.0)) ** d
        self._anal = (self.h / np.sqrt(2.0)) ** d

        ax = np.arange(1, g + 1) * self.h
        mesh = np.meshgrid(*([ax] * d), indexing="ij")
        self.nodes = np.stack([m.ravel() for m in mesh], axis=-1)
        self.basis = model.eigenfunctions(self.nodes).T  # (N, G^d)
        self._proj = np.ascontiguousarray(self.basis.T * self.h**d)

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = _floating(coeffs)
        if self.method == "matrix":
            return coeffs @ self.basis
        lead = coeffs.shape[:-1]
        full = np.zeros(lead + (self.size,), dtype=coeffs.dtype)
        full[..., self._flat] = coeffs
        full = full.reshape(lead + self._shape)
        vals = sfft.dstn(full, type=1, axes=self._axes)
        return vals.reshape(lead + (self.size,)) * self._synth

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        values = _floating(values)
        if self.method == "matrix":
            return values @ self._proj
        lead = values.shape[:-1]
        arr = values.reshape(lead + self._shape)
        c = sfft.dstn(arr, type=1, axes=self._axes).reshape(lead + (self.size,))
        return c[..., self._flat] * self._anal

    def sup_norm(self, coeffs: np.ndarray) -> np.ndarray:
        return np.max(np.abs(self.to_grid(coeffs)), axis=-1)
