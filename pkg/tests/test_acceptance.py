"""Acceptance gate: one test per criterion, each running its shipped config.

Frozen reference values come from an independent adaptive time quadrature of
the kernel series (scipy.integrate.quad) rather than the closed form the
package uses.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from spdelab.config import load
from spdelab.experiments import run
from spdelab.spectral import SpectralModel, kernel_norm_sq

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# N = 64, m = 1, x = 0.5: integral over [0, 0.5] of sum_k q_k exp(-2 s lam_k) e_k(x)^2
KERNEL_NORM_SQ_HALF = 0.0008590049811906082
C_X_HALF = 0.0008176909000867499


def _run(config, tmp_path, budget):
    cfg = load(CONFIGS / config, out=str(tmp_path), workers=1)
    start = time.perf_counter()
    bundle = run(cfg)
    elapsed = time.perf_counter() - start
    return cfg, bundle, elapsed, elapsed < budget


def _report(n, title, checks):
    ok = all(v for _, v in checks)
    detail = "; ".join(f"{k}={'ok' if v else 'FAIL'}" for k, v in checks)
    ACCEPTANCE_LINES.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def test_oracle_values_frozen():
    model = SpectralModel(1, 64, 1)
    assert kernel_norm_sq(model, 0.5, 0.5) == pytest.approx(KERNEL_NORM_SQ_HALF, rel=1e-12)


def test_c01_linear_exactness(tmp_path):
    cfg, b, dt, fast = _run("simulate-linear.ini", tmp_path, 1.0)
    rows = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)
    mode1 = rows[rows[:, 2] == 0]
    exact = np.exp(-math.pi**2 * mode1[:, 1])
    err = float(np.max(np.abs(mode1[:, 3] / exact - 1)))
    _report(1, "linear exactness", [("rel<=1e-12", err <= 1e-12), ("flags", b.passed), ("runtime<1s", fast)])


def test_c02_gaussian_oracle(tmp_path):
    cfg, b, dt, fast = _run("gaussian-check.ini", tmp_path, 120.0)
    m = b.metrics
    rel = m["sample_variance"] / KERNEL_NORM_SQ_HALF - 1
    ks = b.flags[[f.name for f in b.flags].index("ks")]
    n = m["n_samples"]
    _report(2, "Gaussian oracle", [
        ("n=2e4", n == 20000),
        ("variance within 3%", abs(rel) <= 0.03),
        ("KS<1.36/sqrt(n)", ks.metric < 1.36 / math.sqrt(n)),
        ("runtime<2min", fast),
    ])


def test_c03_malliavin_variance_identity(tmp_path):
    cfg, b, dt, fast = _run("malliavin-additive.ini", tmp_path, 10.0)
    rel = b.metrics["h_norm_sq"] / KERNEL_NORM_SQ_HALF - 1
    _report(3, "Malliavin-variance identity", [("within 2%", abs(rel) <= 0.02), ("runtime<10s", fast)])


def test_c04_tangent_vs_fd(tmp_path):
    cfg, b, dt, fast = _run("malliavin-tangent.ini", tmp_path, 60.0)
    m = b.metrics
    _report(4, "tangent vs central FD", [
        (">=100 indices", m["fd_samples"] >= 100),
        ("N=16,M=128", cfg.model.size == 16 and cfg.solver.n_steps == 128),
        ("rel<1e-5", m["fd_max_rel_error"] < 1e-5),
        ("runtime<1min", fast),
    ])


def test_c05_kernel_criterion(tmp_path):
    cfg, b, dt, fast = _run("kernel-check.ini", tmp_path, 1.0)
    m = b.metrics
    d = np.asarray(m["deltas"])
    v = np.asarray(m["values"])
    slack = float(np.min(v - C_X_HALF * d))
    ratio = float(np.max(np.sqrt(d / v)))
    flags = {f.name: f for f in b.flags}
    _report(5, "kernel criterion", [
        ("1e-5..1e-1", math.isclose(d.min(), 1e-5) and math.isclose(d.max(), 1e-1)),
        ("slack>=-1e-12", slack >= -1e-12),
        ("ratio<=C^-1/2(1+1e-10)", ratio <= C_X_HALF**-0.5 * (1 + 1e-10)),
        ("beta=0.6 PASS", flags["ratio_condition"].passed),
        ("runtime<1s", fast),
    ])


def test_c06_windowed_scaling(tmp_path):
    cfg, b, dt, fast = _run("scaling.ini", tmp_path, 300.0)
    m = b.metrics
    d = np.asarray(m["deltas"])
    _report(6, "windowed scaling", [
        ("2 decades", d.max() / d.min() >= 100 - 1e-9),
        ("additive slope in [0.9,1.1]", 0.9 <= m["additive_slope"] <= 1.1),
        ("multiplicative slope>=0.8", m["slope"] >= 0.8),
        ("500 paths", cfg.paths == 500),
        ("runtime<5min", fast),
    ])


def test_c07_nondegeneracy(tmp_path):
    cfg, b, dt, fast = _run("density-nondegeneracy.ini", tmp_path, 300.0)
    m = b.metrics
    flags = {f.name: f for f in b.flags}
    _report(7, "non-degeneracy", [
        ("1e3 paths", cfg.paths == 1000),
        ("c=0.5", cfg.diffusion.lower_bound == 0.5),
        ("min norm>0", m["min_norm"] > 0),
        ("curve reaches 0", m["probs"][-1] == 0.0),
        ("control FAIL with P=1", m["control_verdict"] == "FAIL" and flags["control_degenerate"].passed),
        ("runtime<5min", fast),
    ])


def test_c08_localization(tmp_path):
    cfg, b, dt, fast = _run("localize.ini", tmp_path, 30.0)
    m = b.metrics
    taus = m["stopping_steps"]
    flags = {f.name: f for f in b.flags}
    _report(8, "localization", [
        ("tau_3 interior", 0 < m["tau"] < cfg.solver.n_steps),
        ("bitwise before tau_3", flags["agreement_before_tau"].passed),
        ("tau nondecreasing", all(a <= c for a, c in zip(taus, taus[1:]))),
        ("runtime<30s", fast),
    ])


def test_c09_oracle_equivalence(tmp_path):
    cfg, b, dt, fast = _run("oracles.ini", tmp_path, 60.0)
    m = b.metrics
    _report(9, "oracle equivalence", [
        ("random field<1e-10", m["random_field_rel_diff"] < 1e-10),
        ("Picard<1e-8", m["picard_sup_distance"] < 1e-8),
        ("runtime<1min", fast),
    ])


def test_c10_atom_diagnostics(tmp_path):
    cfg, b, dt, fast = _run("density-atoms.ini", tmp_path, 120.0)
    flags = {f.name: f for f in b.flags}
    _report(10, "atom diagnostics", [
        ("1e4 samples", b.metrics["n_samples"] == 10000),
        ("atom_test PASS", flags["atom_test"].passed),
        ("50% atom FAIL", flags["synthetic_atom_detected"].passed),
        ("runtime<2min", fast),
    ])
