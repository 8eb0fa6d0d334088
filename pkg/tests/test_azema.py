import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from bdglab.azema import (EPSILON, AzemaBundle, azema_bundle, bmo_functional,
                          closed_form_Z, doob_meyer_split, estimate_Z_empirical, infimum_I,
                          z_derivative, zero_after_probability)
from bdglab.errors import AlignmentError, UnsupportedTimeError
from bdglab.experiments import simulate
from bdglab.paths import GridSpec, PathBundle, generate_brownian
from bdglab.random_times import parse_time, realize

LAST_ZERO = "last_zero_before:1.0"


def _bundle(values, grid):
    return PathBundle.from_values(grid, np.asarray(values, float))


# --- closed forms ---------------------------------------------------------------

@pytest.mark.parametrize("x,t", [(0.3, 0.2), (-1.1, 0.5), (2.0, 0.9), (0.05, 0.99)])
def test_last_zero_closed_form_matches_reflection(x, t, small_grid):
    # P(no zero in (t, 1] | B_t = x) = 1 - 2 Phi(-|x| / sqrt(1 - t))
    k = small_grid.node(t)
    v = np.zeros(small_grid.n_steps + 1)
    v[k] = x
    Z = closed_form_Z(LAST_ZERO, _bundle(v, small_grid))
    s = np.sqrt(1 - k * small_grid.dt)
    assert Z[k] == pytest.approx(2 * norm.cdf(-abs(x) / s), rel=1e-12)


def test_last_zero_Z_is_one_on_the_zero_set(small_grid):
    ens = generate_brownian(small_grid, 3, 50)
    Z = closed_form_Z(LAST_ZERO, ens)
    assert np.all(Z[:, 0] == 1.0)
    v = ens.values.copy()
    v[:, 10] = 0.0
    assert np.all(closed_form_Z(LAST_ZERO, _bundle(v, small_grid))[:, 10] == 1.0)


def test_Z_vanishes_after_the_horizon():
    g = GridSpec(2.0, 128, 128, 4.0)
    ens = generate_brownian(g, 1, 20)
    Z = closed_form_Z("last_zero_before:1.0", ens)
    assert np.all(Z[:, g.node(1.0):] == 0.0)


def test_argmax_Z_is_one_at_a_new_maximum(small_grid):
    v = np.linspace(0, 1, small_grid.n_steps + 1)
    Z = closed_form_Z("argmax_before:1.0", _bundle(v, small_grid))
    assert np.all(Z[:-1] == 1.0) and Z[-1] == 0.0


@pytest.mark.parametrize("ident", ["deterministic:0.5", "first_hit:0.3",
                                   "first_hit_capped:0.3:1.0"])
def test_stopping_time_Z_is_an_indicator(ident, grid):
    ens = generate_brownian(grid, 7, 40)
    Z = closed_form_Z(ident, ens)
    assert set(np.unique(Z)) <= {0.0, 1.0}
    assert np.all(np.diff(Z, axis=1) <= 0)


def test_williams_Z_tracks_the_running_max(small_grid):
    v = np.array([0.0, 0.2, -0.1, 0.6, 0.4, 1.2] + [1.0] * (small_grid.n_steps - 5))
    Z = closed_form_Z("pseudo_williams", _bundle(v, small_grid))
    assert Z[:5] == pytest.approx([1.0, 0.8, 0.8, 0.4, 0.4])
    assert np.all(Z[5:] == 0.0)


def test_indicator_time_has_no_closed_form(small_grid):
    ens = generate_brownian(small_grid, 1, 4)
    with pytest.raises(UnsupportedTimeError):
        closed_form_Z("indicator:1.0", ens)


def test_derivative_is_zero_on_the_zero_set(small_grid):
    v = np.zeros(small_grid.n_steps + 1)
    assert np.all(z_derivative(LAST_ZERO, _bundle(v, small_grid)) == 0.0)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-2.5, 2.5), t=st.floats(0.0, 0.9))
def test_derivative_matches_finite_difference(x, t):
    g = GridSpec(1.0, 64, 64, 1.0)
    k = g.node(t)
    if abs(x) < 1e-3:
        return
    h = 1e-6
    vals = []
    for dx in (-h, 0.0, h):
        v = np.zeros(g.n_steps + 1)
        v[k] = x + dx
        vals.append(closed_form_Z(LAST_ZERO, _bundle(v, g))[k])
    v = np.zeros(g.n_steps + 1)
    v[k] = x
    d = z_derivative(LAST_ZERO, _bundle(v, g))[k]
    assert d == pytest.approx((vals[2] - vals[0]) / (2 * h), rel=1e-4, abs=1e-6)


# --- empirical estimator ------------------------------------------------------------

def test_empirical_estimate_matches_closed_form():
    """20 x 20 bins, 1e5 paths: bin frequencies agree with bin-averaged closed-form Z.

    Survival uses the bridge crossing probability so crossings between grid
    nodes are not missed. The 0.02 tolerance is checked in bins whose paired
    standard error is at most 0.005, where a 4 SE excursion stays inside it.
    """
    g = GridSpec(1.0, 256, 256, 1.0)
    est = None
    cf_sum = np.zeros((20, 20))
    sq_sum = np.zeros((20, 20))
    for s in range(0, 100_000, 5000):
        ens = generate_brownian(g, 5, path_ids=np.arange(s, s + 5000))
        surv = zero_after_probability(ens.values, g.dt)
        part = estimate_Z_empirical(ens, None, survival=surv)
        Z = closed_form_Z(LAST_ZERO, ens)
        for i, k in enumerate(part.t_nodes):
            si = np.searchsorted(part.state_edges, ens.values[:, k], side="right") - 1
            ok = (si >= 0) & (si < 20)
            cf_sum[i] += np.bincount(si[ok], weights=Z[ok, k], minlength=20)
            sq_sum[i] += np.bincount(si[ok], weights=(surv[ok, k] - Z[ok, k]) ** 2, minlength=20)
        est = part if est is None else est + part
    n = np.maximum(est.counts, 1)
    diff = est.estimate - cf_sum / n
    se = np.sqrt(np.maximum(sq_sum / n - diff ** 2, 0) / n)
    resolved = (est.counts >= 1000) & (se <= 0.005)
    assert resolved.sum() >= 150
    assert np.abs(diff[resolved]).max() < 0.02


def test_zero_after_probability_edge_cases():
    dt = 0.01
    v = np.array([[1.0, -1.0, -2.0], [5.0, 5.0, 5.0]])
    p = zero_after_probability(v, dt)
    assert p[0, 0] == 1.0
    assert p[0, 1] == pytest.approx(np.exp(-2 * 2.0 / dt))
    assert p[1, 0] == pytest.approx(0.0, abs=1e-300)
    assert np.all(p[:, -1] == 0.0)


def test_coin_flip_time_gives_one_half(small_grid):
    ens = generate_brownian(small_grid, 2, 20_000)
    coin = np.random.default_rng(0).integers(0, 2, len(ens))
    rho = np.where(coin == 1, np.inf, 0.0)
    est = estimate_Z_empirical(ens, rho, t_bins=4, state_bins=4)
    p = est.estimate[est.counts >= 500]
    se = est.standard_error[est.counts >= 500]
    assert np.all(np.abs(p - 0.5) < 4 * se)


def test_deterministic_estimate_is_exact(grid):
    ens = generate_brownian(grid, 9, 2000)
    rs = realize("deterministic:0.5", ens)
    est = estimate_Z_empirical(ens, rs, t_bins=10, state_bins=5)
    e = est.estimate
    mids = 0.5 * (est.t_edges[:-1] + est.t_edges[1:])
    for i, t in enumerate(mids):
        row = e[i][est.counts[i] > 0]
        assert np.all(row == (1.0 if t < 0.5 else 0.0))


def test_merge_equals_single_run(small_grid):
    ens = generate_brownian(small_grid, 4, 1000)
    rs = realize(LAST_ZERO, ens)
    whole = estimate_Z_empirical(ens, rs)
    a = estimate_Z_empirical(_sub(ens, slice(0, 400)), rs.rho_index[:400] * small_grid.dt)
    b = estimate_Z_empirical(_sub(ens, slice(400, 1000)), rs.rho_index[400:] * small_grid.dt)
    merged = a + b
    assert np.array_equal(merged.counts, whole.counts)
    assert np.array_equal(merged.survivors, whole.survivors)


def _sub(ens, sl):
    from bdglab.paths import Ensemble
    return Ensemble.from_values(ens.grid, ens.values[sl])


def test_merge_rejects_different_binning(small_grid):
    ens = generate_brownian(small_grid, 4, 100)
    rs = realize(LAST_ZERO, ens)
    with pytest.raises(AlignmentError):
        estimate_Z_empirical(ens, rs, t_bins=10) + estimate_Z_empirical(ens, rs, t_bins=5)


def test_csv_export(tmp_path, small_grid):
    ens = generate_brownian(small_grid, 4, 500)
    est = estimate_Z_empirical(ens, realize(LAST_ZERO, ens), t_bins=3, state_bins=4)
    out = tmp_path / "z.csv"
    est.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "t_bin,state_bin,t_lo,t_hi,state_lo,state_hi,count,estimate"
    assert len(lines) == 1 + 12


def test_lookup_returns_nan_outside_the_bins(small_grid):
    ens = generate_brownian(small_grid, 4, 500)
    est = estimate_Z_empirical(ens, realize(LAST_ZERO, ens), state_range=(-1, 1))
    assert np.isnan(est.lookup([0.5], [5.0]))[0]


def test_bundle_falls_back_to_the_empirical_estimate(small_grid):
    ens = generate_brownian(small_grid, 4, 500)
    est = estimate_Z_empirical(ens, realize(LAST_ZERO, ens))
    with pytest.warns(RuntimeWarning, match="empirical"):
        b = azema_bundle("indicator:1.0", ens, ensemble_estimate=est)
    assert b.source == "empirical" and b.mu is None


def test_bundle_without_estimate_raises(small_grid):
    ens = generate_brownian(small_grid, 4, 5)
    with pytest.raises(UnsupportedTimeError):
        azema_bundle("indicator:1.0", ens)


# --- Doob-Meyer split ---------------------------------------------------------------

def test_split_identity_is_exact(grid):
    ens = generate_brownian(grid, 12, 200)
    Z = closed_form_Z(LAST_ZERO, ens)
    mu, A, qv = doob_meyer_split(LAST_ZERO, ens, Z)
    assert np.allclose(mu - A, Z, rtol=0, atol=1e-12)
    assert np.all(np.diff(qv, axis=1) >= 0)
    assert np.all(A[:, 0] == 0.0)


def test_split_rejects_misaligned_Z(grid):
    ens = generate_brownian(grid, 12, 3)
    with pytest.raises(AlignmentError):
        doob_meyer_split(LAST_ZERO, ens, np.zeros((3, 5)))


def test_increasing_part_nondecreasing_and_total_mass_one():
    # the negative-increment fraction shrinks with dt: ~1.6% at n=256, ~0.2% at n=1024
    g = GridSpec(1.0, 1024, 1024, 1.0)
    r = simulate(LAST_ZERO, g, 21, 100_000, {"doob_meyer": {}})
    assert r["a_negative_steps"] / r["a_steps"] < 0.01
    assert r["a_final"].mean() == pytest.approx(1.0, abs=0.02)


# --- infimum and BMO functional -----------------------------------------------------------

def test_I_is_in_unit_interval_for_the_last_zero(grid):
    ens = generate_brownian(grid, 13, 2000)
    rs = realize(LAST_ZERO, ens)
    b = azema_bundle(LAST_ZERO, ens, rs)
    assert np.all((b.I_rho > 0) & (b.I_rho <= 1))


@pytest.mark.parametrize("ident", ["deterministic:1.0", "first_hit_capped:0.5:1.0"])
def test_I_is_one_for_stopping_times(ident, grid):
    ens = generate_brownian(grid, 14, 500)
    rs = realize(ident, ens)
    b = azema_bundle(ident, ens, rs)
    assert np.all(b.I_rho[~rs.capped] == 1.0)


def test_I_is_nan_on_capped_paths():
    Z = np.array([[1.0, 0.7, 0.4, 0.0, 0.0]] * 3)
    I = infimum_I(Z, np.array([3, 0, -1]))
    assert I[0] == 0.4 and I[1] == 1.0 and np.isnan(I[2])


def test_bmo_functional_floors_small_Z():
    Z = np.array([[1.0, 0.0, 0.5, 0.0]])
    qv = np.array([[0.0, 1.0, 2.0, 3.0]])
    J, floored = bmo_functional(AzemaBundle(Z, None, None, qv), np.array([3]))
    assert floored == 1
    assert J[0] == pytest.approx(1.0 + 1.0 / EPSILON ** 2 + 4.0)


def test_bmo_functional_is_zero_for_stopping_times(grid):
    ens = generate_brownian(grid, 15, 300)
    rs = realize("deterministic:1.0", ens)
    b = azema_bundle("deterministic:1.0", ens, rs)
    J, _ = bmo_functional(b, rs)
    assert np.all(J == 0.0)

