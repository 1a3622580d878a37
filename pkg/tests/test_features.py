import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from surfrann.features import (Activation, LayerConfigError, activations, eval_jet, eval_linear_combination,
                               load_layer, make_layer, make_rng, save_layer)


def test_tanh_derivative_chain():
    z = np.linspace(-6, 6, 101)
    r0, r1, r2, r3 = Activation.TANH.derivatives(z, 3)
    assert np.allclose(r1, 1 - r0**2)
    assert np.allclose(r2, -2 * r0 * r1)
    assert np.allclose(r3, -2 * r1**2 - 2 * r0 * r2)
    h = 1e-5
    fd = (Activation.TANH.derivatives(z + h, 2)[2] - Activation.TANH.derivatives(z - h, 2)[2]) / (2 * h)
    assert np.allclose(r3, fd, atol=1e-8)


def test_single_neuron_bias_rule():
    L = make_layer(2, 1, (1.0, 1.0), [[0, 2 * np.pi], [0, 2 * np.pi]], seed=7)
    assert np.all(np.abs(L.weights) <= 1.0)
    assert np.all((L.anchors >= 0) & (L.anchors <= 2 * np.pi))
    assert L.biases[0] == pytest.approx(-(L.weights[0] @ L.anchors[0]), abs=1e-15)


def test_per_coordinate_ranges_and_determinism():
    box = [[0, 1], [-1.5, 1.5], [-1.5, 1.5], [-1.5, 1.5]]
    L = make_layer(4, 2000, (0.6, 0.6, 0.6, 0.6), box, seed=3)
    assert np.all(np.abs(L.weights) <= 0.6)
    L2 = make_layer(4, 2000, 0.6, box, seed=3)
    assert np.array_equal(L.weights, L2.weights) and np.array_equal(L.biases, L2.biases)
    L3 = make_layer(4, 2000, 0.6, box, seed=4)
    assert not np.array_equal(L.weights, L3.weights)
    mixed = make_layer(4, 500, (16.0, 1.0, 1.0, 1.0), box, seed=0)
    assert np.abs(mixed.weights[:, 0]).max() > 1.0 and np.abs(mixed.weights[:, 1:]).max() <= 1.0


def test_zero_extent_anchor_axis_allowed():
    L = make_layer(2, 10, 1.0, [[0, 0], [-1, 1]], seed=0)
    assert np.all(L.anchors[:, 0] == 0)


@pytest.mark.parametrize("kw", [dict(width=0), dict(r=-1.0), dict(r=np.inf), dict(box=[[1, 0], [0, 1]])])
def test_invalid_layer_settings(kw):
    with pytest.raises(LayerConfigError):
        make_layer(2, kw.get("width", 3), kw.get("r", 1.0), kw.get("box", [[0, 1], [0, 1]]))


def test_trivial_jets():
    from surfrann.features import RandomFeatureLayer
    L = RandomFeatureLayer(np.array([[1.0, 0.0]]), np.zeros(1), np.zeros((1, 2)), np.ones(2))
    j = eval_jet(L, [[0.0, 0.0]])
    assert j.values[0, 0] == 0 and np.array_equal(j.grad[0, 0], [1, 0]) and np.all(j.hess == 0)
    L0 = RandomFeatureLayer(np.zeros((1, 2)), np.array([0.5]), np.zeros((1, 2)), np.ones(2))
    j = eval_jet(L0, np.random.default_rng(0).random((5, 2)))
    assert np.allclose(j.values, 0.46211715726000974) and np.all(j.grad == 0)


def test_finite_difference_oracle_100_configs():
    """Analytic gradient/Hessian vs central differences (step 1e-5) at 100 random configurations."""
    rng = np.random.default_rng(2024)
    h = 1e-5
    worst_g = worst_h = 0.0
    for k in range(100):
        d = int(rng.integers(1, 5))
        L = make_layer(d, 8, rng.uniform(0.2, 3.0, d), np.tile([-1.0, 1.0], (d, 1)), seed=k)
        x = rng.uniform(-1, 1, (1, d))
        j = eval_jet(L, x)
        g_fd = np.empty((L.width, d))
        h_fd = np.empty((L.width, d, d))
        for a in range(d):
            e = np.zeros(d)
            e[a] = h
            p, m = eval_jet(L, x + e), eval_jet(L, x - e)
            g_fd[:, a] = (p.values[0] - m.values[0]) / (2 * h)
            h_fd[:, :, a] = (p.grad[0] - m.grad[0]) / (2 * h)
        worst_g = max(worst_g, np.linalg.norm(j.grad[0] - g_fd) / np.linalg.norm(j.grad[0]))
        worst_h = max(worst_h, np.linalg.norm(j.hess[0] - h_fd) / max(np.linalg.norm(j.hess[0]), 1e-300))
        assert np.array_equal(j.hess, np.swapaxes(j.hess, 2, 3))
    assert worst_g <= 1e-6
    assert worst_h <= 1e-4


@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_linear_combination_is_linear(seed, d):
    rng = make_rng(seed, 1)
    L = make_layer(d, 20, 2.0, np.tile([-1.0, 1.0], (d, 1)), seed=seed)
    x = rng.uniform(-1, 1, (7, d))
    c1, c2 = rng.standard_normal((2, 20))
    u1, g1, h1 = eval_linear_combination(L, c1, x)
    u2, g2, h2 = eval_linear_combination(L, c2, x)
    u, g, hh = eval_linear_combination(L, c1 + c2, x)
    assert np.allclose(u, u1 + u2, rtol=0, atol=1e-13)
    assert np.allclose(g, g1 + g2, rtol=0, atol=1e-12)
    assert np.allclose(hh, h1 + h2, rtol=0, atol=1e-12)
    z = eval_linear_combination(L, np.zeros(20), x)
    assert np.all(z[0] == 0) and np.all(z[1] == 0)
    j = eval_jet(L, x)
    e = np.zeros(20)
    e[3] = 1.0
    u3, g3, h3 = eval_linear_combination(L, e, x)
    assert np.allclose(u3, j.values[:, 3]) and np.allclose(g3, j.grad[:, 3]) and np.allclose(h3, j.hess[:, 3])


@given(st.integers(0, 1000))
def test_feature_bounds(seed):
    L = make_layer(3, 50, 2.0, np.tile([-1.0, 1.0], (3, 1)), seed=seed)
    x = make_rng(seed, 9).uniform(-5, 5, (20, 3))
    j = eval_jet(L, x)
    assert np.all(np.abs(j.values) <= 1.0)
    bound = np.abs(L.weights).sum(axis=1)
    assert np.all(np.abs(j.grad).max(axis=2) <= bound[None, :] + 1e-15)


def test_roundtrip_bitwise(tmp_path):
    L = make_layer(3, 40, (1.0, 2.0, 0.5), np.tile([-1.0, 1.0], (3, 1)), seed=11, index=4)
    save_layer(L, tmp_path / "l.npz")
    L2 = load_layer(tmp_path / "l.npz")
    x = np.random.default_rng(1).random((10, 3))
    for a, b in zip(activations(L, x), activations(L2, x)):
        assert np.array_equal(a, b)
    assert (L2.seed, L2.index) == (11, 4)


def test_point_shape_checked():
    L = make_layer(2, 3, 1.0, [[0, 1], [0, 1]])
    with pytest.raises(ValueError):
        eval_jet(L, np.zeros((4, 3)))
    with pytest.raises(ValueError):
        eval_linear_combination(L, np.zeros(4), np.zeros((1, 2)))
