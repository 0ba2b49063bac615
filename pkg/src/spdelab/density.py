"""Monte Carlo study of the law of u(t, x).

Absolute continuity cannot be decided from finitely many samples. What is
reported here are necessary-condition diagnostics: no repeated values, a
small maximal jump of the empirical CDF, a kernel density estimate that is
stable under bandwidth halving, and the empirical probability that the
Malliavin norm is small.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .malliavin import point_norms_sq, solve_with_tangent
from .noise import generate_batch
from .solver import DiffusionSpec, DivergenceError, DriftSpec, SolverConfig, solve_batch
from .spectral import SpectralModel

MIN_SAMPLES = 100


@dataclass(frozen=True)
class MonteCarloSetup:
    """Everything needed to produce one sample of ``u(t, x)`` per path (``t`` = final time)."""

    model: SpectralModel
    drift: DriftSpec
    diffusion: DiffusionSpec
    config: SolverConfig
    x: tuple[float, ...]

    @property
    def t(self) -> float:
        return self.config.t_final


@dataclass
class SampleSet:
    t: float
    x: tuple[float, ...]
    values: np.ndarray
    norms: np.ndarray | None = None
    seed: int = 0
    n_paths: int = 0
    n_diverged: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("sample values must be finite")
        if self.norms is not None:
            self.norms = np.asarray(self.norms, dtype=float)
            if self.norms.shape != self.values.shape:
                raise ValueError("Malliavin norms must pair one-to-one with samples")


def _run_chunk(setup: MonteCarloSetup, seed: int, start: int, stop: int, with_norms: bool):
    cfg, model = setup.config, setup.model
    inc = generate_batch(seed, range(start, stop), cfg.dt, cfg.n_steps, model.size)
    ex = model.eigenfunctions(setup.x).reshape(-1)
    if with_norms:
        u, sens, bad = solve_with_tangent(cfg, model, setup.drift, setup.diffusion, inc, setup.x)
        norms = np.sqrt(point_norms_sq(sens, cfg.dt, [sens.shape[1]])[:, 0])
    else:
        u, bad = solve_batch(cfg, model, setup.drift, setup.diffusion, inc)
        norms = None
    return u @ ex, norms, bad


def collect(setup: MonteCarloSetup, n_paths: int, *, master_seed: int = 0, with_norms: bool = False,
            chunk_size: int = 256, workers: int = 1) -> SampleSet:
    """Sample ``u(t, x)`` (and optionally ``||Du(t, x)||_H``) over paths ``0..n_paths-1``.

    Chunks may run in worker processes; results are reassembled in path
    order so the sample set does not depend on scheduling. Diverged paths
    are dropped and counted.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be positive, got {n_paths}")
    bounds = [(s, min(n_paths, s + chunk_size)) for s in range(0, n_paths, chunk_size)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_run_chunk, setup, master_seed, a, b, with_norms) for a, b in bounds]
            parts = [f.result() for f in futs]
    else:
        parts = [_run_chunk(setup, master_seed, a, b, with_norms) for a, b in bounds]

    values = np.concatenate([p[0] for p in parts])
    bad = np.concatenate([p[2] for p in parts]) | ~np.isfinite(values)
    norms = np.concatenate([p[1] for p in parts]) if with_norms else None
    if with_norms:
        bad |= ~np.isfinite(norms)
    if bad.all():
        raise DivergenceError(f"all {n_paths} paths diverged")
    return SampleSet(
        t=setup.t,
        x=tuple(setup.x),
        values=values[~bad],
        norms=None if norms is None else norms[~bad],
        seed=master_seed,
        n_paths=n_paths,
        n_diverged=int(bad.sum()),
    )


# ---------------------------------------------------------------- diagnostics


@dataclass
class AtomDiagnostic:
    max_multiplicity: int
    max_jump: float
    jump_threshold: float
    passed: bool
    digits: int = 12

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"


def _round_significant(values: np.ndarray, digits: int) -> np.ndarray:
    return np.array([float(f"{v:.{digits - 1}e}") for v in values])


def atom_test(samples, digits: int = 12) -> AtomDiagnostic:
    """Look for atoms: repeated values after rounding to ``digits`` significant digits.

    PASS when no value occurs more than twice and the largest jump of the
    empirical CDF is at most ``3 / sqrt(n)``.
    """
    v = np.asarray(getattr(samples, "values", samples), dtype=float)
    if v.size < MIN_SAMPLES:
        raise ValueError(f"atom test needs at least {MIN_SAMPLES} samples, got {v.size}")
    _, counts = np.unique(_round_significant(v, digits), return_counts=True)
    mult = int(counts.max())
    jump = mult / v.size
    thr = 3.0 / math.sqrt(v.size)
    return AtomDiagnostic(mult, jump, thr, mult <= 2 and jump <= thr, digits)


@dataclass
class NondegeneracyCurve:
    eps: np.ndarray
    probs: np.ndarray
    min_norm: float
    median_norm: float
    passed: bool

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "prob"])
            for e, p in zip(self.eps, self.probs):
                w.writerow([repr(float(e)), repr(float(p))])


def nondegeneracy_curve(samples, eps=None, *, decades: float = 4.0, n_eps: int = 41) -> NondegeneracyCurve:
    """Empirical ``P(||Du(t, x)||_H <= eps)`` on a decreasing grid of ``eps``.

    The default grid is geometric from the median norm down ``decades``
    decades. The grid always ends at or below half the smallest observed
    norm; PASS requires that smallest norm to be positive and the
    probability there to be exactly zero.
    """
    norms = getattr(samples, "norms", samples)
    if norms is None:
        raise ValueError("sample set carries no Malliavin norms")
    norms = np.asarray(norms, dtype=float)
    lo, med = float(norms.min()), float(np.median(norms))
    if eps is None:
        top = med if med > 0 else 1.0
        eps = np.geomspace(top, top * 10.0**-decades, n_eps)
    else:
        eps = np.asarray(eps, dtype=float)
        if np.any(np.diff(eps) >= 0):
            raise ValueError("eps grid must be strictly decreasing")
    if lo > 0 and eps[-1] > 0.5 * lo:
        eps = np.append(eps, 0.5 * lo)
    probs = np.array([np.mean(norms <= e) for e in eps])
    return NondegeneracyCurve(eps, probs, lo, med, bool(lo > 0 and probs[-1] == 0.0))


@dataclass
class KSResult:
    statistic: float
    threshold: float
    n: int
    reference: str

    @property
    def below_threshold(self) -> bool:
        return self.statistic < self.threshold


def _parse_reference(reference):
    if isinstance(reference, dict):
        kind = reference.get("kind", "normal")
        if kind != "normal":
            raise ValueError(f"unsupported reference kind {kind!r}")
        return "normal", float(reference["mean"]), float(reference["variance"])
    if isinstance(reference, tuple) and len(reference) == 3 and reference[0] == "normal":
        return "normal", float(reference[1]), float(reference[2])
    if isinstance(reference, str):
        s = reference.strip()
        if s.startswith("normal(") and s.endswith(")"):
            mean, var = (float(v) for v in s[7:-1].split(","))
            return "normal", mean, var
        data = np.loadtxt(s, delimiter=",", ndmin=1)
        return "empirical", np.asarray(data, dtype=float).ravel(), s
    if isinstance(reference, np.ndarray):
        return "empirical", reference.astype(float).ravel(), "array"
    raise ValueError(f"cannot interpret reference law {reference!r}")


def compare_to_reference(samples, reference) -> KSResult:
    """Kolmogorov-Smirnov distance to ``normal(mean, variance)`` or to an empirical sample.

    The attached threshold is the 5% asymptotic critical value
    ``1.36 / sqrt(n)`` (two-sample form for empirical references).
    """
    v = np.asarray(getattr(samples, "values", samples), dtype=float)
    ref = _parse_reference(reference)
    if ref[0] == "normal":
        _, mean, var = ref
        if not var > 0:
            raise ValueError("reference variance must be positive")
        stat = stats.kstest(v, stats.norm(loc=mean, scale=math.sqrt(var)).cdf).statistic
        return KSResult(float(stat), 1.36 / math.sqrt(v.size), v.size, f"normal({mean!r}, {var!r})")
    _, data, label = ref
    if data.size == 0:
        raise ValueError("empirical reference is empty")
    stat = stats.ks_2samp(v, data).statistic
    thr = 1.36 * math.sqrt((v.size + data.size) / (v.size * data.size))
    return KSResult(float(stat), thr, v.size, f"empirical:{label}")


# ---------------------------------------------------------------- density report


@dataclass
class DensityReport:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    mass: float
    atom_suspected: bool
    halving_distance: float = math.nan
    atoms: AtomDiagnostic | None = None
    nondegeneracy: NondegeneracyCurve | None = None
    comparison: KSResult | None = None
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "bandwidth": self.bandwidth,
            "mass": self.mass,
            "atom_suspected": self.atom_suspected,
            "halving_distance": self.halving_distance,
            "atoms": None if self.atoms is None else asdict(self.atoms),
            "nondegeneracy": None
            if self.nondegeneracy is None
            else {
                "min_norm": self.nondegeneracy.min_norm,
                "median_norm": self.nondegeneracy.median_norm,
                "verdict": self.nondegeneracy.verdict,
            },
            "comparison": None
            if self.comparison is None
            else {**asdict(self.comparison), "below_threshold": self.comparison.below_threshold},
            "notes": self.notes,
        }
        return json.dumps(doc, indent=2, sort_keys=True, default=float)

    def kde_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "density"])
            for g, d in zip(self.grid, self.density):
                w.writerow([repr(float(g)), repr(float(d))])


def _gauss_kde(v: np.ndarray, grid: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(grid)
    for start in range(0, v.size, 2048):
        z = (grid[:, None] - v[None, start : start + 2048]) / h
        out += np.exp(-0.5 * z * z).sum(axis=1)
    return out / (v.size * h * math.sqrt(2 * math.pi))


def normal_reference_bandwidth(v: np.ndarray) -> float:
    return float((4.0 / (3.0 * v.size)) ** 0.2 * np.std(v, ddof=1))


def kde(samples, bandwidth: float | str | None = None, *, grid_points: int = 512) -> DensityReport:
    """Gaussian kernel density estimate on ``[min - 3h, max + 3h]``.

    The default bandwidth is the normal-reference rule
    ``h = (4 / 3n)^{1/5} * std``; a float overrides it. A sample with zero
    spread is reported as a suspected atom and no estimate is formed.
    """
    v = np.asarray(getattr(samples, "values", samples), dtype=float)
    if v.size < MIN_SAMPLES:
        raise ValueError(f"KDE needs at least {MIN_SAMPLES} samples, got {v.size}")
    spread = float(np.std(v))
    if spread <= 1e-14 * max(1.0, float(np.max(np.abs(v)))):
        return DensityReport(np.empty(0), np.empty(0), 0.0, 0.0, True,
                             atoms=atom_test(v), notes=["degenerate sample variance: atom suspected"])
    if bandwidth is None or bandwidth in ("normal", "scott", "silverman"):
        h = normal_reference_bandwidth(v)
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
    grid = np.linspace(v.min() - 3 * h, v.max() + 3 * h, grid_points)
    dens = _gauss_kde(v, grid, h)
    half = _gauss_kde(v, grid, h / 2)
    mass = float(np.trapezoid(dens, grid))
    return DensityReport(
        grid=grid,
        density=dens,
        bandwidth=h,
        mass=mass,
        atom_suspected=False,
        halving_distance=float(np.max(np.abs(dens - half)) / np.max(dens)),
        atoms=atom_test(v),
    )
