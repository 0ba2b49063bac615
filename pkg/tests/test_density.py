import math

import numpy as np
import pytest
from scipy import stats

from spdelab.density import (
    MonteCarloSetup,
    SampleSet,
    atom_test,
    collect,
    compare_to_reference,
    kde,
    nondegeneracy_curve,
)
from spdelab.solver import DivergenceError, DriftSpec, SolverConfig, affine_sine_sigma, constant_sigma
from spdelab.spectral import SpectralModel

CUBIC = DriftSpec((0.0, 1.0, 0.0, -1.0), clamp=10.0)


def _setup(sigma=None):
    return MonteCarloSetup(SpectralModel(1, 8, 1), CUBIC, sigma or affine_sine_sigma(), SolverConfig(1e-3, 40, u0=(0.5,)), (0.5,))


def test_collect_deterministic_and_chunk_independent():
    a = collect(_setup(), 120, master_seed=3, with_norms=True, chunk_size=50)
    b = collect(_setup(), 120, master_seed=3, with_norms=True, chunk_size=120)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-13)
    np.testing.assert_allclose(a.norms, b.norms, rtol=1e-12)
    assert a.n_diverged == 0 and a.values.size == 120
    c = collect(_setup(), 120, master_seed=4)
    assert not np.allclose(a.values, c.values)


def test_collect_workers_match_serial():
    a = collect(_setup(), 100, master_seed=1, chunk_size=25, workers=2)
    b = collect(_setup(), 100, master_seed=1, chunk_size=25, workers=1)
    np.testing.assert_array_equal(a.values, b.values)


def test_collect_rejects():
    with pytest.raises(ValueError):
        collect(_setup(), 0)
    blow = MonteCarloSetup(SpectralModel(1, 4, 1), DriftSpec((0, 0, 0, 1.0), clamp=None), constant_sigma(0.0),
                           SolverConfig(0.01, 20, u0=(50.0,)), (0.5,))
    with pytest.raises(DivergenceError):
        collect(blow, 5)


def test_sample_set_minimum():
    with pytest.raises(ValueError):
        kde(np.zeros(10))


def test_kde_normalization_and_accuracy():
    v = np.random.default_rng(0).normal(1.0, 0.3, 20000)
    rep = kde(v)
    assert rep.mass == pytest.approx(1.0, abs=1e-3)
    exact = stats.norm(1.0, 0.3).pdf(rep.grid)
    assert np.max(np.abs(rep.density - exact)) / exact.max() < 0.05
    assert rep.bandwidth == pytest.approx((4 / (3 * v.size)) ** 0.2 * v.std(ddof=1), rel=1e-2)
    assert rep.grid[0] == pytest.approx(v.min() - 3 * rep.bandwidth)
    assert not rep.atom_suspected


def test_kde_degenerate_sample():
    rep = kde(np.full(200, 0.25))
    assert rep.atom_suspected
    assert not rep.atoms.passed


def test_atom_test():
    rng = np.random.default_rng(1)
    assert atom_test(rng.standard_normal(10000)).passed
    v = rng.standard_normal(10000)
    v[::2] = 0.0
    res = atom_test(v)
    assert not res.passed
    assert res.max_jump == pytest.approx(0.5, abs=1e-3)
    assert res.verdict == "FAIL"


def test_nondegeneracy_curve():
    rng = np.random.default_rng(2)
    ss = SampleSet(0.1, (0.5,), rng.standard_normal(500), norms=rng.uniform(0.5, 1.0, 500))
    curve = nondegeneracy_curve(ss)
    assert curve.passed
    assert curve.probs[-1] == 0.0
    assert np.all(np.diff(curve.probs) <= 0)
    zero = SampleSet(0.1, (0.5,), rng.standard_normal(500), norms=np.zeros(500))
    bad = nondegeneracy_curve(zero)
    assert not bad.passed and np.all(bad.probs == 1.0)


def test_nondegeneracy_from_simulation():
    ss = collect(_setup(), 200, master_seed=0, with_norms=True)
    assert nondegeneracy_curve(ss).passed
    ctrl = collect(_setup(constant_sigma(0.0)), 100, master_seed=0, with_norms=True)
    assert nondegeneracy_curve(ctrl).verdict == "FAIL"


def test_ks_calibration():
    # under the null the 1.36/sqrt(n) threshold holds about 95% of the time
    rng = np.random.default_rng(3)
    hits = sum(compare_to_reference(rng.standard_normal(200), ("normal", 0.0, 1.0)).below_threshold for _ in range(400))
    assert 0.91 <= hits / 400 <= 0.99


def test_ks_detects_shift():
    v = np.random.default_rng(4).standard_normal(2000)
    res = compare_to_reference(v, "normal(5, 1)")
    assert res.statistic > 0.9
    assert not res.below_threshold


def test_ks_reference_forms(tmp_path):
    v = np.random.default_rng(5).standard_normal(500)
    a = compare_to_reference(v, {"kind": "normal", "mean": 0.0, "variance": 1.0})
    b = compare_to_reference(v, "normal(0, 1)")
    assert a.statistic == b.statistic
    ref = np.random.default_rng(6).standard_normal(800)
    np.savetxt(tmp_path / "ref.csv", ref, delimiter=",")
    c = compare_to_reference(v, str(tmp_path / "ref.csv"))
    d = compare_to_reference(v, ref)
    assert c.statistic == pytest.approx(d.statistic)
    assert c.threshold == pytest.approx(1.36 * math.sqrt((500 + 800) / (500 * 800)))
    with pytest.raises(ValueError):
        compare_to_reference(v, ("normal", 0.0, 0.0))


def test_report_json_round_trip(tmp_path):
    rep = kde(np.random.default_rng(7).standard_normal(300))
    import json

    doc = json.loads(rep.to_json())
    assert doc["mass"] == pytest.approx(rep.mass)
    rep.kde_csv(tmp_path / "k.csv")
    assert (tmp_path / "k.csv").read_text().startswith("value,density")
