"""Named experiments and the result bundle they produce.

Each experiment reads an :class:`~spdelab.config.ExperimentConfig`, writes
its CSV/JSON side files into the output directory and returns metrics plus
PASS/FAIL flags. Every FAIL carries the offending metric and threshold.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, param, parse_bool, parse_floats
from .density import (
    MonteCarloSetup,
    atom_test,
    collect,
    compare_to_reference,
    kde,
    nondegeneracy_curve,
)
from .malliavin import (
    finite_difference_tangent,
    h_norm_report,
    h_norm_sq,
    propagate_tangent,
    v0_norm_sq,
    windowed_scaling,
)
from .noise import generate
from .solver import (
    DivergenceError,
    DriftSpec,
    PicardError,
    constant_sigma,
    semigroup_mean,
    solve,
    solve_picard,
    solve_random_field,
    stopping_step,
    truncate_drift,
)
from .spectral import check_condition_88, kernel_norm_profile, kernel_norm_sq

SCHEMA = "spdelab.result/1"


@dataclass
class Flag:
    name: str
    passed: bool
    metric: float
    threshold: str

    def to_dict(self):
        return {"passed": bool(self.passed), "metric": _plain(self.metric), "threshold": self.threshold}


@dataclass
class ResultBundle:
    experiment: str
    config: dict
    metrics: dict = field(default_factory=dict)
    flags: list[Flag] = field(default_factory=list)
    files: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.flags)

    def flag(self, name, passed, metric, threshold):
        self.flags.append(Flag(name, bool(passed), metric, threshold))

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": __version__,
            "experiment": self.experiment,
            "config": self.config,
            "metrics": _plain(self.metrics),
            "flags": {f.name: f.to_dict() for f in self.flags},
            "passed": self.passed,
            "files": sorted(self.files),
            "wall_clock_s": self.wall_clock,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        lines = [f"{self.experiment}: {'PASS' if self.passed else 'FAIL'} ({self.wall_clock:.2f} s)"]
        for f in self.flags:
            lines.append(f"  [{'PASS' if f.passed else 'FAIL'}] {f.name}: {_fmt(f.metric)} (threshold {f.threshold})")
        return "\n".join(lines)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_plain(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        return float(v)
    return v


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v)


# ---------------------------------------------------------------- experiments


def _single_path(cfg: ExperimentConfig):
    noise = generate(cfg.seed, 0, cfg.solver.dt, cfg.solver.n_steps, cfg.model.size)
    traj = solve(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, noise)
    if traj.diverged:
        raise DivergenceError(f"path {noise.identity} produced non-finite coefficients")
    return noise, traj


def _field_points(cfg: ExperimentConfig, n: int):
    ax = np.linspace(0.0, 1.0, n)
    if cfg.model.dimension == 1:
        return ax
    g = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1)


def run_simulate(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    noise, traj = _single_path(cfg)
    colloc = cfg.solver.collocation(cfg.model)
    traj.to_csv(out / "trajectory.csv")
    traj.snapshot_csv(out / "snapshot.csv", traj.n_steps, _field_points(cfg, 65 if cfg.model.dimension == 1 else 17))
    bundle.files += ["trajectory.csv", "snapshot.csv"]
    bundle.metrics["u_tx"] = float(traj.field(traj.n_steps, cfg.x))
    bundle.metrics["sup_norm_final"] = float(colloc.sup_norm(traj.coefficients[-1]))

    linear = cfg.drift.is_zero and cfg.diffusion.constant_value == 0.0
    if param(cfg, "check_linear", parse_bool, linear):
        c0 = traj.coefficients[0]
        live = np.nonzero(c0)[0]
        exact = np.exp(-np.outer(traj.times, cfg.model.eigenvalues[live])) * c0[live]
        err = float(np.max(np.abs(traj.coefficients[:, live] - exact) / np.abs(exact))) if live.size else 0.0
        bundle.metrics["linear_max_rel_error"] = err
        bundle.flag("linear_exactness", err <= 1e-12, err, "<= 1e-12")

    if param(cfg, "random_field", parse_bool, False):
        rule = param(cfg, "quadrature", str, "eigen")
        n_quad = param(cfg, "n_quad", int, None)
        pts = _field_points(cfg, param(cfg, "points", int, 17))[1:-1] if cfg.model.dimension == 1 else \
            _field_points(cfg, param(cfg, "points", int, 9))
        rf = solve_random_field(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, noise, pts, quadrature=rule, n_quad=n_quad)
        ref = traj.coefficients @ cfg.model.eigenfunctions(pts).T
        rel = float(np.max(np.abs(rf - ref)) / np.max(np.abs(ref)))
        tol = param(cfg, "random_field_tol", float, 1e-10 if rule == "eigen" else 1e-4)
        bundle.metrics["random_field_rel_diff"] = rel
        bundle.flag("random_field_agreement", rel < tol, rel, f"< {tol:g} ({rule} quadrature)")

    if param(cfg, "picard", parse_bool, False):
        tol = param(cfg, "picard_tol", float, 1e-10)
        try:
            pic, res = solve_picard(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, noise,
                                    max_iter=param(cfg, "picard_max_iter", int, 200), tol=tol, return_residuals=True)
        except PicardError as exc:
            bundle.metrics["picard_residuals"] = exc.residuals
            bundle.flag("picard_converged", False, exc.residual, f"< {tol:g}")
        else:
            dist = float(np.max(colloc.sup_norm(pic.coefficients - traj.coefficients)))
            bundle.metrics["picard_residuals"] = res
            bundle.metrics["picard_sup_distance"] = dist
            agree = param(cfg, "picard_agreement", float, 1e-8)
            bundle.flag("picard_agreement", dist < agree, dist, f"< {agree:g}")


def _require_additive(cfg: ExperimentConfig):
    if not cfg.drift.is_zero or cfg.diffusion.constant_value in (None, 0.0):
        raise ConfigError("needs zero drift and a nonzero constant sigma (additive Gaussian case)", "diffusion", "preset")
    return cfg.diffusion.constant_value


def run_gaussian(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    from scipy import stats

    sig = _require_additive(cfg)
    t = cfg.solver.t_final
    setup = MonteCarloSetup(cfg.model, cfg.drift, cfg.diffusion, cfg.solver, cfg.x)
    ss = collect(setup, cfg.paths, master_seed=cfg.seed, chunk_size=cfg.chunk_size, workers=cfg.workers)
    mean = semigroup_mean(cfg.solver, cfg.model, t, cfg.x)
    var = sig**2 * kernel_norm_sq(cfg.model, cfg.x, t)
    s_var = float(np.var(ss.values, ddof=1))
    rel = s_var / var - 1.0
    tol = param(cfg, "variance_tol", float, 0.03)
    bundle.metrics.update(exact_mean=mean, exact_variance=var, sample_mean=float(ss.values.mean()),
                          sample_variance=s_var, n_samples=ss.values.size, n_diverged=ss.n_diverged)
    bundle.flag("variance", abs(rel) <= tol, rel, f"|rel| <= {tol:g}")
    se = math.sqrt(var / ss.values.size)
    z = (ss.values.mean() - mean) / se
    bundle.flag("mean", abs(z) <= 5.0, float(z), "|z| <= 5 standard errors")
    ks = compare_to_reference(ss, {"kind": "normal", "mean": mean, "variance": var})
    bundle.metrics["ks_statistic"] = ks.statistic
    bundle.flag("ks", ks.below_threshold, ks.statistic, f"< 1.36/sqrt(n) = {ks.threshold:.6g}")
    rep = kde(ss)
    exact = stats.norm(mean, math.sqrt(var)).pdf(rep.grid)
    dist = float(np.max(np.abs(rep.density - exact)) / np.max(exact))
    bundle.metrics.update(kde_bandwidth=rep.bandwidth, kde_mass=rep.mass, kde_rel_sup_distance=dist)
    bundle.flag("kde_sup_distance", dist < 0.05, dist, "< 0.05 of the exact peak density")
    rep.kde_csv(out / "kde.csv")
    bundle.files.append("kde.csv")


def run_malliavin(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    noise, traj = _single_path(cfg)
    tangent = propagate_tangent(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, traj, noise)
    t = cfg.solver.t_final
    half = round(cfg.solver.n_steps / 2) * cfg.solver.dt
    rep = h_norm_report(tangent, cfg.x, [(0.0, half), (half, t)], {"seed": cfg.seed, "path_index": 0})
    (out / "h_norm.json").write_text(rep.to_json())
    bundle.files.append("h_norm.json")
    full = rep.full
    parts = rep.windows[0][2] + rep.windows[1][2]
    bundle.metrics.update(h_norm_sq=full, h_norm_sq_windows=[w[2] for w in rep.windows])
    add_err = abs(full - parts) / full if full > 0 else abs(parts)
    bundle.flag("window_additivity", add_err <= 1e-12, add_err, "<= 1e-12 relative")

    if cfg.drift.is_zero and cfg.diffusion.constant_value not in (None, 0.0):
        series = cfg.diffusion.constant_value**2 * kernel_norm_sq(cfg.model, cfg.x, t)
        rel = full / series - 1.0
        tol = param(cfg, "identity_tol", float, 0.02)
        bundle.metrics["kernel_series"] = series
        bundle.flag("variance_identity", abs(rel) <= tol, rel, f"|rel| <= {tol:g}")

    c = cfg.diffusion.lower_bound
    if c > 0:
        tol = param(cfg, "v0_tol", float, 0.05)
        worst = math.inf
        for k in param(cfg, "v0_window_steps", lambda s: [int(v) for v in parse_floats(s)], [1, 4, 16]):
            if k > cfg.solver.n_steps:
                continue
            d = k * cfg.solver.dt
            v0 = v0_norm_sq(cfg.model, traj, cfg.diffusion, t, cfg.x, (t - d, t), cfg.solver.collocation(cfg.model))
            worst = min(worst, v0 / (c**2 * kernel_norm_sq(cfg.model, cfg.x, d)))
        bundle.metrics["v0_lower_bound_ratio"] = worst
        bundle.flag("v0_lower_bound", worst >= 1 - tol, worst, f">= 1 - {tol:g}")

    n_fd = param(cfg, "fd_samples", int, 100)
    if n_fd > 0:
        h = param(cfg, "fd_h", float, 1e-5)
        tol = param(cfg, "fd_tol", float, 1e-5)
        rng = np.random.default_rng(param(cfg, "fd_seed", int, 0))
        errs = []
        for _ in range(n_fd):
            i = int(rng.integers(cfg.solver.n_steps))
            l = int(rng.integers(cfg.model.size))
            fd = finite_difference_tangent(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, noise, i, l, h)
            col = tangent.column(i, l)
            errs.append(float(np.linalg.norm(fd - col) / np.linalg.norm(col)))
        bundle.metrics.update(fd_samples=n_fd, fd_max_rel_error=max(errs), fd_median_rel_error=float(np.median(errs)))
        bundle.flag("tangent_vs_fd", max(errs) < tol, max(errs), f"< {tol:g} (central, h={h:g})")


def run_kernel(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    deltas = param(cfg, "deltas", parse_floats, parse_floats("geom:1e-5:1e-1:9"))
    beta = param(cfg, "beta", float, 0.6)
    prof = kernel_norm_profile(cfg.model, cfg.x, deltas)
    prof.to_csv(out / "kernel_profile.csv", beta)
    bundle.files.append("kernel_profile.csv")
    slack = float(np.min(prof.values - prof.c_x * prof.deltas))
    ratio = float(np.max(prof.ratios(0.5) * math.sqrt(prof.c_x)))
    bundle.metrics.update(c_x=prof.c_x, deltas=prof.deltas, values=prof.values, min_slack=slack,
                          max_scaled_half_ratio=ratio)
    bundle.flag("lower_bound", slack >= -1e-12, slack, ">= -1e-12")
    bundle.flag("half_ratio_bound", ratio <= 1 + 1e-10, ratio, "<= 1 + 1e-10 (ratio times sqrt(C_x))")
    verdict = check_condition_88(prof, beta, min_tail_slope=param(cfg, "min_tail_slope", float, 0.05))
    border = check_condition_88(prof, 0.5)
    bundle.metrics.update(beta=beta, ratios=verdict.ratios, tail_slope=verdict.tail_slope, drop=verdict.drop,
                          borderline_half_verdict=border.verdict, borderline_half_tail_slope=border.tail_slope)
    bundle.flag("ratio_condition", verdict.passed, verdict.tail_slope, f"monotone and tail slope >= 0.05 (beta={beta:g})")


def run_scaling(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    steps = param(cfg, "window_steps", lambda s: [int(v) for v in parse_floats(s)], [1, 2, 5, 10, 20, 50, 100])
    eta = param(cfg, "eta", float, 0.05)
    deltas = [k * cfg.solver.dt for k in steps]
    kw = dict(master_seed=cfg.seed, chunk_size=param(cfg, "chunk_size", int, 50))
    add = windowed_scaling(cfg.solver, cfg.model, DriftSpec((0.0,), None), constant_sigma(1.0), cfg.x, deltas,
                           cfg.paths, **kw)
    res = windowed_scaling(cfg.solver, cfg.model, cfg.drift, cfg.diffusion, cfg.x, deltas, cfg.paths, **kw)
    add.to_csv(out / "scaling_additive.csv")
    res.to_csv(out / "scaling.csv")
    bundle.files += ["scaling_additive.csv", "scaling.csv"]
    bundle.metrics.update(deltas=res.deltas, additive_means=add.means, means=res.means, stderrs=res.stderrs,
                          additive_slope=add.slope, slope=res.slope, n_diverged=res.n_diverged)
    lo, hi = param(cfg, "additive_range", parse_floats, (0.9, 1.1))
    bundle.flag("additive_slope", lo <= add.slope <= hi, add.slope, f"in [{lo:g}, {hi:g}]")
    floor = 2 * (0.5 - eta) - 0.1
    bundle.flag("slope", res.slope >= floor, res.slope, f">= 2(1/2 - eta) - 0.1 = {floor:g}")
    mono = bool(np.all(np.diff(res.means) > 0) and np.all(np.diff(add.means) > 0))
    bundle.flag("monotone_in_delta", mono, float(mono), "means increase with delta")


def run_density(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    with_norms = param(cfg, "norms", parse_bool, True)
    setup = MonteCarloSetup(cfg.model, cfg.drift, cfg.diffusion, cfg.solver, cfg.x)
    ss = collect(setup, cfg.paths, master_seed=cfg.seed, with_norms=with_norms, chunk_size=cfg.chunk_size,
                 workers=cfg.workers)
    bundle.metrics.update(n_samples=ss.values.size, n_diverged=ss.n_diverged, sample_mean=float(ss.values.mean()),
                          sample_std=float(ss.values.std(ddof=1)))
    rep = kde(ss)
    atoms = rep.atoms
    bundle.metrics.update(max_multiplicity=atoms.max_multiplicity, max_cdf_jump=atoms.max_jump)
    bundle.flag("atom_test", atoms.passed, atoms.max_jump,
                f"multiplicity <= 2 and jump <= 3/sqrt(n) = {atoms.jump_threshold:.4g}")
    if not rep.atom_suspected:
        rep.kde_csv(out / "kde.csv")
        bundle.files.append("kde.csv")
        bundle.metrics.update(kde_mass=rep.mass, kde_bandwidth=rep.bandwidth, kde_halving_distance=rep.halving_distance)
        bundle.flag("kde_mass", abs(rep.mass - 1) <= 1e-3, rep.mass, "within 1e-3 of 1")
    else:
        bundle.flag("kde_mass", False, 0.0, "sample spread is degenerate")

    if with_norms:
        curve = nondegeneracy_curve(ss)
        rep.nondegeneracy = curve
        curve.to_csv(out / "nondegeneracy.csv")
        bundle.files.append("nondegeneracy.csv")
        bundle.metrics.update(min_norm=curve.min_norm, median_norm=curve.median_norm, eps=curve.eps, probs=curve.probs)
        bundle.flag("nondegeneracy", curve.passed, curve.min_norm, "min norm > 0 and curve reaches 0")

        if param(cfg, "control", parse_bool, True):
            ctrl = MonteCarloSetup(cfg.model, cfg.drift, constant_sigma(0.0), cfg.solver, cfg.x)
            n_ctrl = param(cfg, "control_paths", int, min(cfg.paths, 200))
            css = collect(ctrl, n_ctrl, master_seed=cfg.seed, with_norms=True, chunk_size=cfg.chunk_size)
            cc = nondegeneracy_curve(css)
            bundle.metrics.update(control_verdict=cc.verdict, control_min_prob=float(cc.probs.min()))
            ok = cc.verdict == "FAIL" and bool(np.all(cc.probs == 1.0))
            bundle.flag("control_degenerate", ok, float(cc.probs.min()), "sigma = 0 control must FAIL with P = 1")

    if param(cfg, "synthetic_atom", parse_bool, True):
        rng = np.random.default_rng(cfg.seed)
        n = max(ss.values.size, 100)
        synth = np.where(np.arange(n) % 2 == 0, 0.0, rng.standard_normal(n))
        sa = atom_test(synth)
        bundle.metrics["synthetic_atom_jump"] = sa.max_jump
        bundle.flag("synthetic_atom_detected", not sa.passed, sa.max_jump, "50% atom must FAIL the atom test")
    (out / "density_report.json").write_text(rep.to_json())
    bundle.files.append("density_report.json")


def run_localize(cfg: ExperimentConfig, out: Path, bundle: ResultBundle):
    levels = sorted(param(cfg, "levels", parse_floats, (3.0, 1e6)))
    level = param(cfg, "level", float, levels[0])
    if level not in levels:
        levels = sorted(levels + [level])
    ref_level = levels[-1]
    noise = generate(cfg.seed, 0, cfg.solver.dt, cfg.solver.n_steps, cfg.model.size)
    colloc = cfg.solver.collocation(cfg.model)
    runs = {}
    for n in levels:
        tr = solve(cfg.solver, cfg.model, truncate_drift(cfg.drift, n), cfg.diffusion, noise)
        runs[n] = (tr, stopping_step(tr, n, colloc))
    taus = [runs[n][1].stopping_step for n in levels]
    tau = runs[level][1].stopping_step
    a, b = runs[level][0].coefficients, runs[ref_level][0].coefficients
    agree = bool(np.array_equal(a[:tau], b[:tau]))
    bundle.metrics.update(levels=levels, stopping_steps=taus, tau=tau, n_steps=cfg.solver.n_steps,
                          agree_through_tau=bool(np.array_equal(a[: tau + 1], b[: tau + 1])))
    bundle.flag("agreement_before_tau", agree, float(tau), f"bitwise equal on steps < tau (level {level:g} vs {ref_level:g})")
    bundle.flag("stopped", tau < cfg.solver.n_steps, float(tau), f"tau < n_steps = {cfg.solver.n_steps}")
    bundle.flag("tau_monotone", all(np.diff(taus) >= 0), float(min(np.diff(taus), default=0)), "tau nondecreasing in level")
    if param(cfg, "require_interior", parse_bool, False):
        bundle.flag("tau_interior", 0 < tau < cfg.solver.n_steps, float(tau), f"0 < tau < {cfg.solver.n_steps}")
    with open(out / "stopping.csv", "w") as fh:
        fh.write("level,stopping_step,crossed\n")
        for n in levels:
            sp = runs[n][1]
            fh.write(f"{n!r},{sp.stopping_step},{int(sp.crossed)}\n")
    bundle.files.append("stopping.csv")


RUNNERS = {
    "simulate": run_simulate,
    "gaussian-check": run_gaussian,
    "malliavin-check": run_malliavin,
    "kernel-check": run_kernel,
    "scaling": run_scaling,
    "density": run_density,
    "localize": run_localize,
}

CATALOGUE = [
    ("simulate", "solver.dt, solver.n_steps", "mild solution stepping; linear exactness; random-field and Picard oracles agree"),
    ("gaussian-check", "solver.*, diffusion=constant, drift=0", "additive case: law of u(t,x) is Gaussian with the kernel-series variance"),
    ("malliavin-check", "solver.*, diffusion.preset", "tangent equation for Du; ||Du||_H^2 equals the additive variance"),
    ("kernel-check", "point.x, kernel.deltas, kernel.beta", "kernel-norm lower bound C_x*delta and the small-window ratio condition"),
    ("scaling", "solver.*, scaling.window_steps", "windowed norm E||Du||^2_H(t-delta,t) scales like delta^(1-2*eta)"),
    ("density", "solver.*, experiment.paths", "||Du(t,x)||_H > 0 a.s.; law of u(t,x) has no atoms"),
    ("localize", "drift.coefficients, localize.levels", "clamped drift solutions coincide with the unclamped one before T_n"),
]


def list_experiments() -> str:
    w0 = max(len(r[0]) for r in CATALOGUE)
    w1 = max(len(r[1]) for r in CATALOGUE)
    head = f"{'experiment':<{w0}}  {'required keys':<{w1}}  verifies"
    rows = [f"{n:<{w0}}  {k:<{w1}}  {s}" for n, k, s in CATALOGUE]
    return "\n".join([head, "-" * len(head)] + rows)


def run(cfg: ExperimentConfig) -> ResultBundle:
    """Run the configured experiment, write ``<out>/<name>.json`` and side files."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ResultBundle(cfg.name, cfg.echo)
    start = time.perf_counter()
    RUNNERS[cfg.name](cfg, out, bundle)
    bundle.wall_clock = time.perf_counter() - start
    (out / f"{cfg.name}.json").write_text(bundle.to_json())
    return bundle
