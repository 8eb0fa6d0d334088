import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdglab.errors import AlignmentError, ConfigurationError
from bdglab.paths import (Ensemble, GridSpec, IntegrandSpec, PathBundle, coarsen,
                          compensated_poisson, extend_until_hit, generate_brownian, integrate,
                          quadratic_variation, qv_refinement_factor, running_max_abs,
                          stochastic_integral)


@pytest.mark.parametrize("kwargs", [
    {"n_steps": 100}, {"n_steps": 0}, {"horizon": 0.0}, {"horizon": -1.0},
    {"hard_cap": 0.5}, {"extension_chunk": 0},
])
def test_grid_validation(kwargs):
    with pytest.raises(ConfigurationError):
        GridSpec(**kwargs)


def test_grid_basics():
    g = GridSpec(1.0, 1024, 512, 8.0)
    assert g.dt == 1 / 1024
    assert g.cap_steps == 8192
    assert g.node(0.5) == 512
    assert g.coarsen(4).n_steps == 256 and g.coarsen(4).extension_chunk == 128
    assert g.refine(2).n_steps == 2048


def test_brownian_is_reproducible_and_path_local(grid):
    a = generate_brownian(grid, seed=42, n_paths=10)
    b = generate_brownian(grid, seed=42, path_ids=[7])
    np.testing.assert_array_equal(a.values[7], b.values[0])
    c = generate_brownian(grid, seed=43, n_paths=10)
    assert not np.allclose(a.values, c.values)
    assert np.all(a.values[:, 0] == 0)


def test_brownian_terminal_variance():
    g = GridSpec(1.0, 64, 64, 1.0)
    v = generate_brownian(g, 1, n_paths=100_000).values[:, -1]
    assert v.var() == pytest.approx(1.0, abs=0.03)
    assert abs(v.mean()) < 0.01


def test_quadratic_variation_of_brownian_is_time(grid):
    e = generate_brownian(grid, 0, n_paths=2000)
    assert e.qv[:, -1].mean() == pytest.approx(1.0, abs=0.01)
    np.testing.assert_allclose(e.qv, quadratic_variation(e.values))
    assert np.all(np.diff(e.running_max_abs, axis=1) >= 0)


def test_qv_refinement_factor_near_two():
    g = GridSpec(1.0, 512, 512, 1.0)
    e = generate_brownian(g, 9, n_paths=20_000)
    assert 1.5 <= qv_refinement_factor(e) <= 3.0


def test_running_max_abs_values():
    np.testing.assert_array_equal(running_max_abs(np.array([0.0, -1, 0.5, 2, -3])),
                                  [0, 1, 1, 2, 3])


def test_extend_until_hit(grid):
    p, capped = extend_until_hit(grid, 3, 5, level=1.0)
    base = generate_brownian(grid, 3, path_ids=[5]).values[0]
    np.testing.assert_array_equal(p.values[:base.size], base)
    if not capped:
        assert np.any(p.values >= 1.0)
        if len(p) > grid.n_steps + 1:
            # extension stops in the chunk holding the first passage
            first = np.flatnonzero(p.values >= 1.0)[0]
            assert len(p) - 1 - grid.extension_chunk < first
    else:
        assert len(p) - 1 == grid.cap_steps


def test_extend_until_hit_caps():
    g = GridSpec(1.0, 16, 16, 1.0)
    found_capped = False
    for pid in range(50):
        p, capped = extend_until_hit(g, 0, pid, level=3.0)
        if capped:
            found_capped = True
            assert len(p) == g.cap_steps + 1
    assert found_capped


def test_extension_chunks_do_not_change_the_path():
    a, _ = extend_until_hit(GridSpec(1.0, 64, 64, 8.0), 2, 1, level=2.0)
    b, _ = extend_until_hit(GridSpec(1.0, 64, 64, 8.0), 2, 1, level=2.5)
    m = min(len(a), len(b))
    np.testing.assert_array_equal(a.values[:m], b.values[:m])


def test_coarsen_keeps_nested_nodes(grid):
    e = generate_brownian(grid, 1, n_paths=3)
    c = coarsen(e, 4)
    np.testing.assert_array_equal(c.values, e.values[:, ::4])
    assert c.grid.n_steps == grid.n_steps // 4


def test_constant_integrand_scales_the_driver(grid):
    e = generate_brownian(grid, 4, n_paths=5)
    m = stochastic_integral(IntegrandSpec.constant(2.5), e)
    np.testing.assert_allclose(m.values, 2.5 * e.values, atol=1e-12)
    np.testing.assert_allclose(m.qv, 6.25 * e.qv, rtol=1e-10, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_integral_is_linear(a, b):
    g = GridSpec(1.0, 32, 32, 1.0)
    x = generate_brownian(g, 2, n_paths=4).values
    w1 = np.cos(x[:, :-1])
    w2 = np.tanh(x[:, :-1])
    lhs, _ = integrate(a * w1 + b * w2, x)
    r1, _ = integrate(w1, x)
    r2, _ = integrate(w2, x)
    np.testing.assert_allclose(lhs, a * r1 + b * r2, atol=1e-10)


def test_integrand_uses_left_endpoints():
    g = GridSpec(1.0, 4, 4, 1.0)
    x = np.array([0.0, 1.0, 3.0, 2.0, 4.0])
    m = stochastic_integral(IntegrandSpec.function_of_state("identity"), PathBundle.from_values(g, x))
    # sum x_k (x_{k+1} - x_k)
    assert m.values[-1] == pytest.approx(0 * 1 + 1 * 2 + 3 * -1 + 2 * 2)


def test_function_of_z_needs_aligned_aux(grid):
    e = generate_brownian(grid, 1, n_paths=2)
    spec = IntegrandSpec.function_of_Z(1.0, 0.1)
    with pytest.raises(AlignmentError):
        stochastic_integral(spec, e)
    with pytest.raises(AlignmentError):
        stochastic_integral(spec, e, aux=np.ones((2, 10)))
    m = stochastic_integral(spec, e, aux=np.zeros_like(e.values))
    np.testing.assert_allclose(m.values, e.values / 0.1, atol=1e-10)


@pytest.mark.parametrize("kwargs", [
    {"form": "nope"}, {"form": "function_of_Z", "alpha": -1.0}, {"form": "function_of_Z", "c": 0.0},
    {"form": "function_of_state", "name": "exp"},
])
def test_integrand_validation(kwargs):
    with pytest.raises(ConfigurationError):
        IntegrandSpec(**kwargs)


def test_compensated_poisson_zero_rate(grid):
    m = compensated_poisson(0.0, grid, 1, n_paths=10)
    assert np.all(m.values == 0) and np.all(m.bracket == 0)
    assert m.kind == "jump"


def test_compensated_poisson_negative_rate(grid):
    with pytest.raises(ConfigurationError):
        compensated_poisson(-1.0, grid, 1)


def test_compensated_poisson_moments():
    g = GridSpec(1.0, 256, 256, 1.0)
    m = compensated_poisson(2.0, g, 5, n_paths=20_000)
    assert m.bracket[:, -1].mean() == pytest.approx(2.0, abs=0.05)
    assert m.values[:, -1].mean() == pytest.approx(0.0, abs=0.05)
    # bracket is the jump count and the compensated path drifts down between jumps
    np.testing.assert_allclose(m.values, m.bracket - 2.0 * g.times()[None, :])
    assert np.all(m.qv == 0)


def test_ensemble_indexing(grid):
    e = generate_brownian(grid, 0, n_paths=3)
    assert len(e) == 3 and e.n_nodes == grid.n_steps + 1
    p = e[1]
    assert isinstance(p, PathBundle) and len(p) == e.n_nodes
    assert len(list(e)) == 3
    assert isinstance(Ensemble.from_values(grid, e.values), Ensemble)
