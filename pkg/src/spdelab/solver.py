"""Mild-form time stepping for du + Au dt = f(u) dt + sigma(u) B dW.

The scheme is exponential Euler on the spectral truncation::

    u_{j+1,k} = exp(-lambda_k dt) * (u_{j,k} + P_k[dt f(u_j) + sigma(u_j) (B dW_j)])

where ``P_k`` is the collocation projection on the dealiased sine grid.
Besides the time stepper this module holds two independent routes to the
same discrete solution: a Picard iteration of the discrete mild map and a
kernel-quadrature evaluation of the random-field form.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .noise import NoiseGrid
from .spectral import Collocation, SpectralModel, _floating

DEFAULT_CLAMP = 1e6


class DivergenceError(RuntimeError):
    """A path produced non-finite coefficients."""


class PicardError(RuntimeError):
    def __init__(self, message, residuals):
        super().__init__(message)
        self.residuals = list(residuals)

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.inf


# ---------------------------------------------------------------- coefficients


@dataclass(frozen=True)
class DriftSpec:
    """Polynomial reaction term ``f`` (ascending coefficients), optionally clamped.

    With ``clamp = n`` the executed drift is ``f_n(z) = f(clip(z, -n, n))``,
    which equals ``f`` on ``[-n, n]`` and is constant beyond.
    """

    coefficients: tuple[float, ...] = (0.0,)
    clamp: float | None = DEFAULT_CLAMP
    odd_dissipative: bool = False

    def __post_init__(self):
        c = tuple(float(v) for v in self.coefficients) or (0.0,)
        object.__setattr__(self, "coefficients", c)
        if self.clamp is not None and not self.clamp > 0:
            raise ValueError(f"clamp level must be positive, got {self.clamp}")
        if self.odd_dissipative:
            trimmed = np.trim_zeros(np.array(c), "b")
            deg = len(trimmed) - 1
            if deg < 1 or deg % 2 == 0 or any(trimmed[0::2] != 0) or trimmed[-1] >= 0:
                raise ValueError("drift must be an odd polynomial of positive degree with negative leading coefficient")

    @property
    def poly_degree(self) -> int:
        return len(np.trim_zeros(np.array(self.coefficients), "b")) - 1

    @property
    def is_zero(self) -> bool:
        return not any(self.coefficients)

    @property
    def derivative_coefficients(self) -> tuple[float, ...]:
        return tuple(P.polyder(self.coefficients)) if len(self.coefficients) > 1 else (0.0,)

    def __call__(self, z):
        z = _floating(z)
        if self.clamp is not None:
            z = np.clip(z, -self.clamp, self.clamp)
        return P.polyval(z, self.coefficients)

    def derivative(self, z):
        z = _floating(z)
        d = P.polyval(z, self.derivative_coefficients) * np.ones_like(z)
        if self.clamp is not None:
            d = np.where(np.abs(z) <= self.clamp, d, 0.0)
        return d

    def lipschitz_bound(self) -> float:
        """Sup of ``|f_n'|`` over the clamp interval (infinite without a clamp)."""
        if self.clamp is None:
            return 0.0 if self.poly_degree < 2 else math.inf
        z = np.linspace(-self.clamp, self.clamp, 20001)
        return float(np.max(np.abs(P.polyval(z, self.derivative_coefficients) * np.ones_like(z))))


def truncate_drift(drift: DriftSpec, n: float) -> DriftSpec:
    """Same polynomial, clamped at level ``n``."""
    if not n > 0:
        raise ValueError(f"truncation level must be positive, got {n}")
    return replace(drift, clamp=float(n))


@dataclass(frozen=True)
class DiffusionSpec:
    """Scalar noise coefficient ``sigma`` with its declared bounds.

    ``derivative`` is ``None`` for merely Lipschitz coefficients; the tangent
    recursion refuses those.
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray] | None
    lipschitz: float
    lower_bound: float = 0.0
    constant_value: float | None = None

    def __call__(self, z):
        return self.func(_floating(z))

    @property
    def differentiable(self) -> bool:
        return self.derivative is not None

    def check_bounds(self, rng: np.random.Generator | None = None, span: float = 50.0, n: int = 20001) -> bool:
        """Sample the declared lower bound and Lipschitz constant."""
        rng = rng or np.random.default_rng(0)
        z = np.linspace(-span, span, n)
        ok_lower = bool(np.all(np.abs(self(z)) >= self.lower_bound - 1e-15))
        a, b = rng.uniform(-span, span, (2, n))
        lhs = np.abs(self(a) - self(b))
        ok_lip = bool(np.all(lhs <= self.lipschitz * np.abs(a - b) * (1 + 1e-12) + 1e-15))
        return ok_lower and ok_lip


@dataclass(frozen=True)
class _Fill:
    # module-level callables keep the presets picklable for worker processes
    value: float

    def __call__(self, z):
        return np.full(np.shape(z), self.value)


@dataclass(frozen=True)
class _AffineSine:
    amplitude: float

    def __call__(self, z):
        return 1.0 + self.amplitude * np.sin(z)


@dataclass(frozen=True)
class _AffineSineDerivative:
    amplitude: float

    def __call__(self, z):
        return self.amplitude * np.cos(z)


def _identity(z):
    return np.array(z, dtype=float)


def constant_sigma(value: float = 1.0) -> DiffusionSpec:
    v = float(value)
    return DiffusionSpec(
        name="constant",
        func=_Fill(v),
        derivative=_Fill(0.0),
        lipschitz=0.0,
        lower_bound=abs(v),
        constant_value=v,
    )


def affine_sine_sigma(amplitude: float = 0.5) -> DiffusionSpec:
    a = float(amplitude)
    return DiffusionSpec(
        name="affine_sine",
        func=_AffineSine(a),
        derivative=_AffineSineDerivative(a),
        lipschitz=abs(a),
        lower_bound=max(0.0, 1.0 - abs(a)),
    )


def identity_sigma() -> DiffusionSpec:
    return DiffusionSpec(
        name="identity",
        func=_identity,
        derivative=_Fill(1.0),
        lipschitz=1.0,
        lower_bound=0.0,
    )


def _zero_sigma() -> DiffusionSpec:
    return constant_sigma(0.0)


SIGMA_PRESETS: dict[str, Callable[..., DiffusionSpec]] = {
    "affine_sine": affine_sine_sigma,
    "constant": constant_sigma,
    "identity": identity_sigma,
    "zero": _zero_sigma,
}


def sigma_preset(name: str, value: float | None = None) -> DiffusionSpec:
    if name not in SIGMA_PRESETS:
        raise KeyError(f"unknown sigma preset {name!r}; choose from {sorted(SIGMA_PRESETS)}")
    if value is not None and name in ("constant", "affine_sine"):
        return SIGMA_PRESETS[name](value)
    return SIGMA_PRESETS[name]()


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class SolverConfig:
    """Time grid, collocation grid and initial datum.

    ``u0`` is either mode coefficients (canonical order, shorter sequences
    are zero padded) or a callable evaluated on the collocation nodes and
    projected.
    """

    dt: float
    n_steps: int
    u0: Sequence[float] | Callable | None = None
    dealias: float = 2.0
    grid_points: int | None = None
    transform: str = "matrix"

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive and finite, got {self.dt}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")
        if self.dealias < 1:
            raise ValueError("dealias factor must be at least 1")

    @property
    def t_final(self) -> float:
        return self.n_steps * self.dt

    def collocation(self, model: SpectralModel) -> Collocation:
        g = self.grid_points if self.grid_points is not None else int(math.ceil(self.dealias * model.n_modes))
        if g < self.dealias * model.n_modes:
            raise ValueError(f"collocation grid {g} below dealias factor x n_modes = {self.dealias * model.n_modes}")
        return Collocation(model, g, method=self.transform)

    def initial_coefficients(self, model: SpectralModel, colloc: Collocation | None = None) -> np.ndarray:
        if self.u0 is None:
            return np.zeros(model.size)
        if callable(self.u0):
            colloc = colloc or self.collocation(model)
            vals = np.asarray(self.u0(colloc.nodes if model.dimension > 1 else colloc.nodes[:, 0]), dtype=float)
            return colloc.from_grid(vals.reshape(-1))
        c = np.zeros(model.size)
        given = np.asarray(self.u0, dtype=float).ravel()
        if given.size > model.size:
            raise ValueError(f"u0 has {given.size} coefficients, model keeps {model.size}")
        c[: given.size] = given
        return c


# ---------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    coefficients: np.ndarray  # (n_steps + 1, N)
    dt: float
    model: SpectralModel
    noise_identity: tuple[int, int] = (0, 0)
    diverged: bool = False

    @property
    def n_steps(self) -> int:
        return self.coefficients.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def field(self, step: int, x) -> np.ndarray:
        """``u(t_step, x) = sum_k u_hat[step, k] e^k(x)``."""
        return self.model.eigenfunctions(x) @ self.coefficients[step]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "time", "mode", "coefficient"])
            for j, row in enumerate(self.coefficients):
                for k, v in enumerate(row):
                    w.writerow([j, repr(j * self.dt), k, repr(float(v))])

    def snapshot_csv(self, path, step: int, xs) -> None:
        xs = np.asarray(xs, dtype=float)
        vals = self.field(step, xs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "value"] if self.model.dimension == 1 else ["x1", "x2", "value"])
            for p, v in zip(xs.reshape(len(vals), -1), vals):
                w.writerow([*map(repr, map(float, p)), repr(float(v))])


@dataclass(frozen=True)
class StoppedPath:
    trajectory: Trajectory
    level: float
    stopping_step: int
    crossed: bool
    sup_norms: np.ndarray = field(repr=False)


# ---------------------------------------------------------------- scheme


class Scheme:
    """Precomputed pieces of one exponential-Euler discretisation.

    All methods act on the trailing mode axis and broadcast over leading
    (path) axes, so a batch of paths steps in lockstep.
    """

    def __init__(self, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec, dt: float,
                 colloc: Collocation, dtype=np.float64):
        self.model = model
        self.drift = drift
        self.diffusion = diffusion
        self.dtype = np.dtype(dtype)
        self.dt = self.dtype.type(dt)
        self.colloc = colloc
        lam = model.eigenvalues.astype(self.dtype)
        self.decay = np.exp(-lam * self.dt)
        self.weights = model.noise_weights.astype(self.dtype)

    def step(self, u_hat: np.ndarray, dw: np.ndarray) -> np.ndarray:
        u = self.colloc.to_grid(u_hat)
        noise = self.colloc.to_grid(self.weights * dw)
        g = self.dt * self.drift(u) + self.diffusion(u) * noise
        return self.decay * (u_hat + self.colloc.from_grid(g))

    def forcing(self, u_hat: np.ndarray, dw: np.ndarray) -> np.ndarray:
        """Projected increment ``P[dt f(u) + sigma(u) B dW]`` (no decay applied)."""
        u = self.colloc.to_grid(u_hat)
        noise = self.colloc.to_grid(self.weights * dw)
        return self.colloc.from_grid(self.dt * self.drift(u) + self.diffusion(u) * noise)


def step(model, drift, diffusion, u_hat, dw, dt, colloc: Collocation | None = None) -> np.ndarray:
    """One exponential-Euler step from coefficients ``u_hat`` with raw increments ``dw``."""
    u_hat = np.asarray(u_hat, dtype=float)
    dw = np.asarray(dw, dtype=float)
    if u_hat.shape[-1] != model.size or dw.shape[-1] != model.size:
        raise ValueError("coefficient and increment vectors must have one entry per mode")
    colloc = colloc or Collocation(model)
    return Scheme(model, drift, diffusion, dt, colloc).step(u_hat, dw)


def _check_noise(config: SolverConfig, model: SpectralModel, noise: NoiseGrid):
    if noise.n_modes != model.size:
        raise ValueError(f"noise has {noise.n_modes} modes, model has {model.size}")
    if noise.n_steps < config.n_steps:
        raise ValueError(f"noise has {noise.n_steps} steps, config needs {config.n_steps}")
    if not math.isclose(noise.dt, config.dt, rel_tol=1e-12):
        raise ValueError(f"noise dt {noise.dt} differs from solver dt {config.dt}")


def solve(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
          noise: NoiseGrid, *, raise_on_divergence: bool = False) -> Trajectory:
    """Full trajectory of one path, deterministic in the noise identity."""
    _check_noise(config, model, noise)
    colloc = config.collocation(model)
    scheme = Scheme(model, drift, diffusion, config.dt, colloc)
    out = np.empty((config.n_steps + 1, model.size))
    out[0] = config.initial_coefficients(model, colloc)
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(config.n_steps):
            out[j + 1] = scheme.step(out[j], noise.increments[j])
            if not np.all(np.isfinite(out[j + 1])):
                diverged = True
                out[j + 2:] = np.nan
                break
    if diverged and raise_on_divergence:
        raise DivergenceError(f"path {noise.identity} diverged")
    return Trajectory(out, config.dt, model, noise.identity, diverged)


def solve_batch(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                increments: np.ndarray, *, keep: str = "final"):
    """Step a stack of paths ``increments[p, j, k]`` together.

    ``keep="final"`` returns the final coefficients ``(P, N)``;
    ``keep="all"`` returns ``(P, n_steps + 1, N)``. A second return value
    flags diverged paths.
    """
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 3 or increments.shape[2] != model.size or increments.shape[1] < config.n_steps:
        raise ValueError(f"increments must have shape (P, >={config.n_steps}, {model.size})")
    colloc = config.collocation(model)
    scheme = Scheme(model, drift, diffusion, config.dt, colloc)
    u = np.broadcast_to(config.initial_coefficients(model, colloc), (increments.shape[0], model.size)).copy()
    hist = [u] if keep == "all" else None
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(config.n_steps):
            u = scheme.step(u, increments[:, j])
            if hist is not None:
                hist.append(u)
    if hist is not None:
        out = np.stack(hist, axis=1)
        bad = ~np.all(np.isfinite(out), axis=(1, 2))
        return out, bad
    return u, ~np.all(np.isfinite(u), axis=1)


def semigroup_mean(config: SolverConfig, model: SpectralModel, t: float, x) -> float:
    """``(S(t) u0)(x)`` for the truncated model: the exact mean when f = 0 and sigma is additive."""
    c = config.initial_coefficients(model)
    return float(model.eigenfunctions(x) @ (np.exp(-model.eigenvalues * t) * c))


# ---------------------------------------------------------------- localisation


def stopping_step(traj: Trajectory, n: float, colloc: Collocation | None = None) -> StoppedPath:
    """First step whose collocation sup-norm reaches ``n`` (``n_steps`` if none does)."""
    if not n > 0:
        raise ValueError(f"level must be positive, got {n}")
    colloc = colloc or Collocation(traj.model)
    sups = colloc.sup_norm(traj.coefficients)
    hits = np.nonzero(~(sups < n))[0]
    if hits.size:
        return StoppedPath(traj, float(n), int(hits[0]), True, sups)
    return StoppedPath(traj, float(n), traj.n_steps, False, sups)


# ---------------------------------------------------------------- Picard oracle


def _mild_map(scheme: Scheme, u0_hat: np.ndarray, v: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """Discrete mild map: ``w_j = S(t_j) u0 + sum_{i<j} S(t_j - t_i) g(v_i)``, summed explicitly."""
    m = v.shape[0] - 1
    g = scheme.forcing(v[:m], increments[:m])  # (M, N)
    lam = scheme.model.eigenvalues
    w = np.empty_like(v)
    w[0] = u0_hat
    for j in range(1, m + 1):
        lags = np.arange(j, 0, -1, dtype=float)  # t_j - t_i for i = 0..j-1
        kern = np.exp(-np.outer(lags, lam) * scheme.dt)
        w[j] = np.exp(-lam * j * scheme.dt) * u0_hat + np.sum(kern * g[:j], axis=0)
    return w


def solve_picard(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                 noise: NoiseGrid, max_iter: int = 200, tol: float = 1e-10, *,
                 initial: np.ndarray | None = None, return_residuals: bool = False):
    """Fixed point of the discrete mild map on a frozen noise path.

    Iterates ``v <- Phi(v)`` from ``initial`` (default: ``u0`` at every step)
    until the collocation sup-distance between iterates drops below ``tol``.
    Raises :class:`PicardError` carrying the residual history otherwise.
    """
    _check_noise(config, model, noise)
    if drift.clamp is None and drift.poly_degree > 1:
        raise ValueError("Picard iteration needs a globally Lipschitz (clamped) drift")
    colloc = config.collocation(model)
    scheme = Scheme(model, drift, diffusion, config.dt, colloc)
    u0_hat = config.initial_coefficients(model, colloc)
    m = config.n_steps
    inc = noise.increments[:m]
    v = np.tile(u0_hat, (m + 1, 1)) if initial is None else np.array(initial, dtype=float)
    residuals = []
    for _ in range(max_iter):
        w = _mild_map(scheme, u0_hat, v, inc)
        res = float(np.max(colloc.sup_norm(w - v)))
        residuals.append(res)
        v = w
        if not math.isfinite(res):
            break
        if res < tol:
            traj = Trajectory(v, config.dt, model, noise.identity)
            return (traj, residuals) if return_residuals else traj
    raise PicardError(f"Picard iteration did not reach tol={tol} (last residual {residuals[-1]:.3e})", residuals)


# ---------------------------------------------------------------- random-field oracle


def _quadrature(model: SpectralModel, colloc: Collocation, rule: str, n_points: int | None):
    d = model.dimension
    if rule == "eigen":
        return colloc.nodes, np.full(colloc.size, colloc.h**d)
    if rule != "trapezoid":
        raise ValueError(f"unknown quadrature rule {rule!r}")
    n = n_points if n_points is not None else 8 * model.n_modes
    if n < 2 * model.n_modes:
        raise ValueError(f"quadrature grid of {n} points per axis is too coarse for {model.n_modes} modes")
    ax = np.linspace(0.0, 1.0, n + 1)
    w1 = np.full(n + 1, 1.0 / n)
    w1[[0, -1]] *= 0.5
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=-1)
    wmesh = np.meshgrid(*([w1] * d), indexing="ij")
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=-1), axis=-1)
    return nodes, weights


def solve_random_field(config: SolverConfig, model: SpectralModel, drift: DriftSpec, diffusion: DiffusionSpec,
                       noise: NoiseGrid, points, *, quadrature: str = "eigen", n_quad: int | None = None) -> np.ndarray:
    """Evaluate ``u(t_j, x)`` at ``points`` from the kernel representation.

    For every step the three terms

        int K_{t_j}(x,y) u0(y) dy
        + sum_{i<j} dt int K_{t_j - t_i}(x,y) f(u(t_i,y)) dy
        + sum_{i<j} sum_k int K_{t_j - t_i}(x,y) sigma(u(t_i,y)) (B e^k)(y) dy dw_k(i)

    are summed by spatial quadrature; ``u(t_i, .)`` at the quadrature nodes
    comes from the same representation. ``quadrature="eigen"`` uses the
    collocation nodes (the eigen-projection the spectral solver uses);
    ``"trapezoid"`` uses a uniform grid of ``n_quad`` panels per axis
    (default ``8 * n_modes``). Returns shape ``(n_steps + 1, n_points)``.
    """
    _check_noise(config, model, noise)
    colloc = config.collocation(model)
    nodes, wq = _quadrature(model, colloc, quadrature, n_quad)
    pts = np.asarray(points, dtype=float)
    pts = pts.reshape(-1, model.dimension) if model.dimension > 1 else pts.reshape(-1, 1)
    e_nodes = model.eigenfunctions(nodes)  # (Q, N)
    e_pts = model.eigenfunctions(pts)  # (X, N)
    lam = model.eigenvalues
    m = config.n_steps
    dt = config.dt

    if callable(config.u0):
        arg = nodes if model.dimension > 1 else nodes[:, 0]
        u0_nodes = np.asarray(config.u0(arg), dtype=float).reshape(-1)
    else:
        u0_nodes = e_nodes @ config.initial_coefficients(model)

    # kernel matrices K_{s}(target, y_q) * w_q for s = lag * dt, lag = 0..m
    weighted = (e_nodes * wq[:, None]).T  # (N, Q)

    def kmat(e_target, lag):
        return (e_target * np.exp(-lam * lag * dt)) @ weighted

    k_nodes = [kmat(e_nodes, lag) for lag in range(m + 1)]
    k_pts = [kmat(e_pts, lag) for lag in range(m + 1)]
    b_ek = (e_nodes * model.noise_weights).T  # (N, Q): (B e^k)(y_q)

    u_nodes = np.empty((m + 1, nodes.shape[0]))
    out = np.empty((m + 1, pts.shape[0]))
    u_nodes[0] = u0_nodes
    out[0] = k_pts[0] @ u0_nodes
    sources = []
    for j in range(1, m + 1):
        i = j - 1
        ui = u_nodes[i]
        src = dt * drift(ui)
        sig = diffusion(ui)
        for k in range(model.size):
            src = src + sig * b_ek[k] * noise.increments[i, k]
        sources.append(src)
        acc_nodes = k_nodes[j] @ u0_nodes
        acc_pts = k_pts[j] @ u0_nodes
        for i2, s in enumerate(sources):
            acc_nodes = acc_nodes + k_nodes[j - i2] @ s
            acc_pts = acc_pts + k_pts[j - i2] @ s
        u_nodes[j] = acc_nodes
        out[j] = acc_pts
    return out
