import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cbisim.analysis import (
    ScaledSample,
    atom_scan,
    convergence_diagnostic,
    gaussian_test,
    ks_one_sample,
    ks_two_sample,
    projection_statistic,
    qv_limit_check,
    relative_frequencies,
    scaled_quadratic_variation,
    survivor_mask,
    w_samples,
)
from cbisim.measures import DiscreteMeasure
from cbisim.model import CbiParams, ModelError, effective
from cbisim.moments import sigma_v
from cbisim.simulate import Ensemble, SimConfig, simulate_ensemble
from cbisim.spectral import EigenPair, left_eigenpair, spectral_summary

import models
from models import OMEGA


def simulate(p, x0, log_jumps=False, **kw):
    cfg = SimConfig(**{"T": 1.0, "dt": 0.01, "n_paths": 200, "seed": 3, **kw})
    eff = effective(p)
    return simulate_ensemble(p, eff, x0, cfg, log_jumps=log_jumps), spectral_summary(eff.Btilde)


def fake_ensemble(rows, T=1.0):
    rows = np.asarray(rows, float)
    return Ensemble(rows, SimConfig(T, T, rows.shape[0]), "x")


def test_w_samples_trivial_and_time_zero():
    ens, spec = simulate(models.trivial2(), [0, 0])
    assert np.all(w_samples(ens, spec) == 0)
    x = np.array([[1.0, 2.0], [0.5, 0.0]])
    got = w_samples(fake_ensemble(x), spec, T=0.0)
    np.testing.assert_array_equal(got, x @ spec.u)


def test_w_samples_mean_is_one_from_perron_start():
    p = CbiParams.build(c=[0.5, 0.5], beta=[0, 0], B=[[0.5, 1], [1, 0.5]])
    eff = effective(p)
    spec = spectral_summary(eff.Btilde)
    ens, _ = simulate(p, spec.utilde, T=3.0, dt=0.01, n_paths=10_000)
    w = w_samples(ens, spec)
    assert abs(w.mean() - 1) <= 3 * w.std(ddof=1) / np.sqrt(len(w))


def test_projection_statistic_trivial():
    ens, spec = simulate(models.trivial2(), [0, 0])
    ss = projection_statistic(ens, EigenPair(0.0, np.array([1.0, -1.0])), spec, None, "Thm31iii")
    assert np.all(ss.rows == 0) and not ss.survivor_mask.any()


def test_projection_statistic_zero_sigma_collapses():
    atom = DiscreteMeasure(np.array([[1.0, 1.0]]), np.array([1.0]))
    p = CbiParams.build(c=[0, 0], beta=[1, 1], B=[[1, 1], [1, 1]], mu=[atom, atom])
    eff = effective(p)
    spec = spectral_summary(eff.Btilde)
    pair = left_eigenpair(eff.Btilde, -1)
    assert np.linalg.norm(sigma_v(p, spec, pair).Sigma) == 0
    T = 3.0
    ens, _ = simulate(p, [2, 1], T=T, n_paths=500)
    ss = projection_statistic(ens, pair, spec, None, "Thm31iii")
    gap = spec.s / 2 - pair.lam.real
    envelope = 5 * np.exp(-gap * T) * max(1, abs(pair.project(np.array([2.0, 1.0]))))
    assert np.mean(np.abs(ss.rows).max(axis=1) < envelope) >= 0.99


def test_projection_statistic_regime_mismatch():
    ens, spec = simulate(models.symmetric(), [1, 1], n_paths=5)
    with pytest.raises(ModelError):
        projection_statistic(ens, EigenPair(2.0, np.array([1.0, -1.0])), spec, None, "Thm35iii")


def test_relative_frequencies_simple():
    empty = relative_frequencies(fake_ensemble(np.zeros((4, 2))))
    assert empty["n_survivors"] == 0 and empty["rows"].shape == (0, 2)
    one = relative_frequencies(fake_ensemble([[2.0, 1.0]]))
    np.testing.assert_allclose(one["rows"], [[2 / 3, 1 / 3]])


def test_gaussian_test_singular_target():
    rng = np.random.default_rng(0)
    rows = np.column_stack([rng.normal(0, np.sqrt(2), 10_000), np.zeros(10_000)])
    Sigma = np.diag([2.0, 0.0])
    rep = gaussian_test(rows, Sigma)
    assert rep.passed and rep.p_values["ks_range"] > 0.01
    assert rep.statistics["null_second_moment"] < 1e-3 * 2
    shifted = gaussian_test(rows + [1, 0], Sigma)
    assert shifted.passed is False


def test_gaussian_test_invertible_and_empty():
    rng = np.random.default_rng(1)
    Sigma = np.array([[1.0, 0.3], [0.3, 0.5]])
    rows = rng.multivariate_normal([0, 0], Sigma, 5000)
    assert gaussian_test(rows, Sigma).passed
    assert not gaussian_test(rows * 1.5, Sigma).passed
    rep = gaussian_test(ScaledSample(rows, np.zeros(5000, bool), "Thm35iii"), Sigma)
    assert rep.passed is None and "insufficient data" in rep.notes


def test_gaussian_test_zero_sigma():
    assert gaussian_test(np.full((100, 2), 1e-4), np.zeros((2, 2))).passed
    assert not gaussian_test(np.ones((100, 2)), np.zeros((2, 2))).passed
    with pytest.raises(ModelError):
        gaussian_test(np.ones((100, 2)), -np.eye(2))


def test_atom_scan():
    rep = atom_scan(np.full(5000, 3.0))
    assert rep.passed is False and rep.statistics["max_duplicate_frequency"] == 1.0
    rng = np.random.default_rng(2)
    assert atom_scan(rng.uniform(0, 2, 100_000)).passed
    assert atom_scan(rng.normal(size=(5000, 2))).passed
    half = np.where(rng.random(5000) < 0.5, 0.0, rng.uniform(0, 1, 5000))
    assert atom_scan(half).passed is False
    assert atom_scan(np.arange(10.0)).passed is None


def test_atom_scan_on_limit_samples():
    p = models.jumpy2()
    eff = effective(p)
    spec = spectral_summary(eff.Btilde)
    ens, _ = simulate(p, [1, 1], T=4.0, dt=0.02, n_paths=3000)
    assert atom_scan(w_samples(ens, spec)).passed


def test_convergence_deterministic_projection():
    p = models.deterministic_projection_model()
    ens, spec = simulate(p, [2, 1], n_paths=50, record="full", T=2.0)
    rep = convergence_diagnostic(ens, EigenPair(1.0, np.array([1.0, -1.0])), spec, checkpoints=[0.5, 1, 1.5, 2])
    assert rep.passed
    assert np.max(rep.statistics["mean_increment"]) <= 1e-12


def test_convergence_trivial():
    ens, spec = simulate(models.trivial2(), [0, 0], n_paths=20, record="full")
    rep = convergence_diagnostic(ens, left_eigenpair(effective(models.trivial2()).Btilde, 2), spec)
    assert rep.passed and np.all(rep.statistics["mean_increment"] == 0)


def test_convergence_decay_scalar_model():
    p = CbiParams.build(c=[1], beta=[1], B=[[2]])
    ens, spec = simulate(p, [1], n_paths=2000, record="full", T=4.0, dt=0.01)
    rep = convergence_diagnostic(ens, EigenPair(2.0, np.array([1.0])), spec, checkpoints=[1, 2, 3, 4], transient=1.0)
    assert rep.passed, rep.statistics


def test_qv_immigration_only_vanishes():
    nu = DiscreteMeasure(np.array([[1.0, 0.0]]), np.array([1.0]))
    p = CbiParams.build(c=[0, 0], beta=[0, 0], B=[[1, 1], [1, 1]], nu=nu)
    ens, spec = simulate(p, [0, 0], log_jumps=True, record="full", T=5.0, dt=0.02, n_paths=200)
    qv = scaled_quadratic_variation(ens, EigenPair(0.0, np.array([1.0, -1.0])), spec, p)
    assert np.abs(qv.mean(axis=0)).max() < 1e-3


def test_qv_trivial_is_zero():
    p = models.trivial2()
    ens, spec = simulate(p, [0, 0], log_jumps=True, record="full", n_paths=10)
    assert np.all(scaled_quadratic_variation(ens, EigenPair(0.0, np.array([1.0, -1.0])), spec, p) == 0)


def test_qv_circulant_matches_sigma():
    p = models.circulant()
    eff = effective(p)
    spec = spectral_summary(eff.Btilde)
    pair = EigenPair(OMEGA, np.array([1, OMEGA**2, OMEGA]))
    ens, _ = simulate(p, [1, 1, 1], log_jumps=True, record="full", T=6.0, dt=0.01, n_paths=300)
    rep = qv_limit_check(ens, pair, spec, p, sigma_v(p, spec, pair).Sigma)
    assert rep.passed, rep.statistics


def test_survivor_mask_threshold():
    ens, spec = simulate(models.symmetric(), [1, 1], n_paths=10)
    assert survivor_mask(ens, spec, threshold=0.0).all()
    assert not survivor_mask(ens, spec, threshold=np.inf).any()


def test_ks_wrappers():
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 2, 2000)
    assert ks_one_sample(x, stats.uniform(0, 2).cdf).passed
    assert not ks_one_sample(x, stats.uniform(0, 1).cdf).passed
    assert ks_two_sample(x, rng.uniform(0, 2, 2000)).passed
    assert not ks_two_sample(x, rng.uniform(1, 3, 2000)).passed
    assert ks_two_sample(x, x).to_json()["passed"] is True


@pytest.fixture(scope="module")
def circ():
    p = models.circulant()
    ens, spec = simulate(p, [1, 1, 1], T=4.0, dt=0.02, n_paths=600)
    return p, ens, spec


@settings(max_examples=25, deadline=None)
@given(st.floats(0.1, 10), st.booleans())
def test_gaussian_verdict_invariant_under_rescaling(circ, r, flip):
    p, ens, spec = circ
    pair = EigenPair(OMEGA, np.array([1, OMEGA**2, OMEGA]))
    base = gaussian_test(projection_statistic(ens, pair, spec, None, "Thm35iii"), sigma_v(p, spec, pair).Sigma)
    # real constants only: a complex phase rotates the frame of the per-coordinate KS tests
    scaled = pair.scaled(-r if flip else r)
    rep = gaussian_test(projection_statistic(ens, scaled, spec, None, "Thm35iii"), sigma_v(p, spec, scaled).Sigma)
    assert rep.passed == base.passed
    np.testing.assert_allclose(rep.statistics["whitened_cov"], base.statistics["whitened_cov"], rtol=1e-9, atol=1e-12)
    for k in base.p_values:
        assert rep.p_values[k] == pytest.approx(base.p_values[k], rel=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 200), st.floats(0, 200))
def test_survivor_mask_monotone(circ, a, b):
    _, ens, spec = circ
    lo, hi = sorted((a, b))
    assert not np.any(survivor_mask(ens, spec, hi) & ~survivor_mask(ens, spec, lo))
