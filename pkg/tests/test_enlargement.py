import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdglab.azema import azema_bundle
from bdglab.enlargement import (DEFAULT_ALPHA, TestReport, brownian_probe, critical_value,
                                decompose, martingale_test, mean_test, optional_stopping_test,
                                richardson, standard_probe_family)
from bdglab.errors import AlignmentError
from bdglab.experiments import PROBE_TIMES, simulate
from bdglab.paths import GridSpec, compensated_poisson, generate_brownian
from bdglab.random_times import realize

LAST_ZERO = "last_zero_before:1.0"


def test_default_alpha_is_three_sigma():
    assert critical_value(DEFAULT_ALPHA) == pytest.approx(3.0, abs=1e-12)


def test_bonferroni_raises_the_critical_value():
    assert critical_value(DEFAULT_ALPHA, 30) > critical_value(DEFAULT_ALPHA)


def test_report_serialization_keys():
    r = TestReport("x", 0.1, 0.05, 100, "pass", DEFAULT_ALPHA)
    assert set(r.to_dict()) == {"name", "statistic", "se", "n", "verdict", "alpha"}
    assert r.z == pytest.approx(2.0)


# --- decomposition -----------------------------------------------------------------

@pytest.fixture
def last_zero_setup(grid):
    ens = generate_brownian(grid, 41, 400)
    rs = realize(LAST_ZERO, ens)
    return ens, rs, azema_bundle(LAST_ZERO, ens, rs)


def test_decomposition_identity_is_exact(last_zero_setup):
    ens, rs, bundle = last_zero_setup
    dec = decompose(ens, bundle, rs)
    assert np.allclose(dec.stopped.values, dec.m_tilde + dec.drift, rtol=0, atol=1e-13)


def test_drift_is_frozen_after_rho(last_zero_setup):
    ens, rs, bundle = last_zero_setup
    dec = decompose(ens, bundle, rs)
    for row, k in enumerate(rs.rho_index):
        assert np.all(dec.drift[row, k:] == dec.drift[row, k])
        assert np.all(dec.stopped.values[row, k:] == ens.values[row, k])


def test_single_path_decomposition(last_zero_setup):
    ens, rs, _ = last_zero_setup
    path = ens[0]
    b = azema_bundle(LAST_ZERO, path, rs[0])
    dec = decompose(path, b, rs[0])
    assert dec.drift.shape == path.values.shape


@pytest.mark.parametrize("ident", ["deterministic:0.5", "first_hit_capped:0.4:1.0"])
def test_stopping_time_has_no_drift(ident, grid):
    ens = generate_brownian(grid, 42, 300)
    rs = realize(ident, ens)
    b = azema_bundle(ident, ens, rs)
    dec = decompose(ens, b, rs)
    assert np.all(dec.drift == 0.0)
    k = rs.rho_index
    expected = np.take_along_axis(ens.values, np.minimum(np.arange(ens.n_nodes)[None, :],
                                                         k[:, None]), axis=1)
    assert np.array_equal(dec.m_tilde, expected)


def test_independent_poisson_has_no_drift(grid):
    ens = generate_brownian(grid, 43, 200)
    rs = realize(LAST_ZERO, ens)
    b = azema_bundle(LAST_ZERO, ens, rs)
    N = compensated_poisson(2.0, grid, 44, 200)
    dec = decompose(N, b, rs)
    assert np.all(dec.drift == 0.0)
    assert np.array_equal(dec.m_tilde, dec.stopped.values)


def test_decompose_rejects_misaligned_inputs(last_zero_setup, small_grid):
    ens, rs, bundle = last_zero_setup
    other = generate_brownian(small_grid, 1, 400)
    with pytest.raises(AlignmentError):
        decompose(other, bundle, rs)


def test_decompose_rejects_capped_realizations(last_zero_setup):
    ens, rs, bundle = last_zero_setup
    idx = rs.rho_index.copy()
    idx[0] = -1
    with pytest.raises(AlignmentError, match="uncapped"):
        decompose(ens, bundle, idx)


def test_m_tilde_removes_the_mean_of_the_stopped_path():
    g = GridSpec(1.0, 256, 256, 1.0)
    r = simulate(LAST_ZERO, g, 45, 20_000, {"decomposition": {}})
    stopped, tilde = r["dec_b_stopped"], r["dec_b_tilde"]
    se = tilde.std(axis=0, ddof=1) / np.sqrt(len(tilde))
    assert np.all(np.abs(tilde.mean(axis=0)) < 3 * se)
    assert r["dec_identity_max"] < 1e-12
    assert r["dec_drift_after_max"] == 0.0
    assert stopped.shape == tilde.shape


# --- martingale test ----------------------------------------------------------------------

def _brownian_at(times, grid, seed, n):
    ens = generate_brownian(grid, seed, n)
    return ens.values[:, [grid.node(t) for t in times]]


def test_raw_brownian_passes(grid):
    X = _brownian_at(PROBE_TIMES, grid, 46, 20_000)
    r = martingale_test(X, PROBE_TIMES)
    assert r.verdict == "pass"
    assert r.details["n_bins_tested"] == 30


def test_too_few_paths_is_inconclusive(grid):
    X = _brownian_at(PROBE_TIMES, grid, 46, 2000)
    assert martingale_test(X).verdict == "inconclusive"


def test_no_bins_is_inconclusive():
    assert martingale_test(np.zeros((1, 3))).verdict == "inconclusive"


def test_argmax_stopped_path_fails():
    g = GridSpec(1.0, 256, 256, 1.0)
    r = simulate("argmax_before:1.0", g, 47, 20_000, {"martingale": {}})
    assert martingale_test(r["mt_stopped"], PROBE_TIMES).verdict == "fail"


def test_williams_stopped_path_passes():
    g = GridSpec(1.0, 256, 256, 2.0)
    r = simulate("pseudo_williams", g, 48, 20_000, {"martingale": {}})
    assert martingale_test(r["mt_stopped"], PROBE_TIMES).verdict == "pass"


def test_verdicts_reproducible_over_seeds():
    g = GridSpec(1.0, 64, 64, 1.0)
    passes = sum(martingale_test(_brownian_at(PROBE_TIMES, g, seed, 10_000)).verdict == "pass"
                 for seed in range(100, 110))
    assert passes >= 9


@settings(max_examples=20, deadline=None)
@given(shift=st.floats(-5, 5), scale=st.floats(0.1, 10))
def test_martingale_test_is_affine_invariant(shift, scale):
    X = _brownian_at(PROBE_TIMES, GridSpec(1.0, 16, 16, 1.0), 3, 10_000)
    a = martingale_test(X, min_paths=0)
    b = martingale_test(shift + scale * X, min_paths=0)
    assert a.details["worst_z"] == pytest.approx(b.details["worst_z"], rel=1e-6)


# --- optional stopping ----------------------------------------------------------------------

def test_richardson_cancels_a_sqrt_dt_term():
    exact, c = 0.5, 0.8
    dt = 1 / 1024
    fine = exact + c * np.sqrt(dt)
    coarse = exact + c * np.sqrt(4 * dt)
    assert richardson(fine, coarse, 4) == pytest.approx(exact, abs=1e-14)


def test_mean_test_detects_a_shift():
    x = np.random.default_rng(0).normal(0.1, 1.0, 20_000)
    assert mean_test(x, "shift").verdict == "fail"
    assert mean_test(x, "shift", target=0.1).verdict == "pass"


def test_probes_start_at_zero(small_grid):
    v = np.zeros((1, small_grid.n_steps + 1))
    for probe in standard_probe_family() + [brownian_probe()]:
        assert probe.value_at(v, small_grid, np.array([0]))[0] == 0.0


def test_conditional_probability_probe_at_one(small_grid):
    probe = standard_probe_family()[0]
    v = np.zeros((2, small_grid.n_steps + 1))
    v[0, -1], v[1, -1] = 0.3, -0.2
    out = probe.value_at(v, small_grid, np.array([small_grid.n_steps] * 2))
    assert out.tolist() == [0.5, -0.5]


def test_exit_probe_freezes_on_exit(small_grid):
    probe = standard_probe_family()[1]
    v = np.zeros((1, small_grid.n_steps + 1))
    v[0, 5:] = 0.7
    assert probe.freeze_index(v, small_grid)[0] == 5
    assert probe.stopped_value(v, small_grid, np.array([40]))[0] == 0.7


def test_exit_interval_must_contain_zero():
    with pytest.raises(ValueError):
        standard_probe_family(a=0.1, b=0.5)


@pytest.mark.parametrize("t0", [0.25, 0.5, 1.0])
def test_optional_stopping_at_fixed_times(t0, grid):
    ens = generate_brownian(grid, 49, 20_000)
    rs = realize(f"deterministic:{t0}", ens)
    family = standard_probe_family() + [brownian_probe()]
    reports = optional_stopping_test(family, rs, ens)
    assert [r.verdict for r in reports] == ["pass"] * 4


def test_unfrozen_probe_is_skipped_beyond_its_domain():
    g = GridSpec(2.0, 128, 128, 4.0)
    ens = generate_brownian(g, 50, 100)
    rs = realize("deterministic:1.5", ens)
    (rep,) = optional_stopping_test([brownian_probe(frozen_at_one=False)], rs, ens)
    assert rep.verdict == "skipped" and "t = 1" in rep.details["note"]


def test_optional_stopping_with_extrapolation(grid):
    ens = generate_brownian(grid, 51, 5000)
    rs = realize("deterministic:0.5", ens)
    coarse = ens.__class__.from_values(grid.coarsen(4), ens.values[:, ::4])
    rc = realize("deterministic:0.5", coarse)
    reports = optional_stopping_test(standard_probe_family(), rs, ens, coarse, rc)
    for r in reports:
        assert r.details["refinement_factor"] == 4
        assert r.verdict == "pass"
