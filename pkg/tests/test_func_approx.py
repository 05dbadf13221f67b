import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import fd_gradient
from potec.errors import ContractViolation, NumericError
from potec.func_approx import AdamConfig, AdamState, Mlp, adam_step, mlp_forward, mlp_param_gradient, n_params

sizes = st.lists(st.integers(1, 5), min_size=2, max_size=4)


def test_param_count_and_layout():
    m = Mlp.init((3, 4, 2), seed=0)
    assert m.n_params == n_params((3, 4, 2)) == 3 * 4 + 4 + 4 * 2 + 2
    (W1, b1), (W2, b2) = m.layers()
    assert W1.shape == (3, 4) and b2.shape == (2,)
    assert np.all(b1 == 0)


def test_forward_single_and_batch_agree():
    m = Mlp.init((3, 5, 2), seed=1)
    X = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_allclose(mlp_forward(m, X)[2], m.forward(X[2]))


def test_forward_rejects_wrong_width():
    with pytest.raises(ContractViolation):
        Mlp.init((3, 2), seed=0).forward(np.zeros(4))


def test_zero_net_outputs_zero():
    assert np.all(Mlp.zeros((2, 3, 4)).forward(np.ones((5, 2))) == 0)


@given(sizes, st.integers(0, 10_000))
def test_param_gradient_matches_finite_differences(layer_sizes, seed):
    rng = np.random.default_rng(seed)
    m = Mlp(tuple(layer_sizes), rng.normal(0, 0.7, n_params(layer_sizes)))
    X = rng.standard_normal((3, layer_sizes[0]))
    U = rng.standard_normal((3, layer_sizes[-1]))
    g = mlp_param_gradient(m, X, U)
    fd = fd_gradient(lambda p: float(np.sum(U * m.with_params(p).forward(X))), m.params)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-12) + 1e-9


@given(sizes, st.integers(0, 10_000))
def test_per_sample_gradients_sum_to_batch_gradient(layer_sizes, seed):
    rng = np.random.default_rng(seed)
    m = Mlp.init(tuple(layer_sizes), seed)
    X = rng.standard_normal((5, layer_sizes[0]))
    U = rng.standard_normal((5, layer_sizes[-1]))
    np.testing.assert_allclose(m.per_sample_param_gradient(X, U).sum(axis=0), m.param_gradient(X, U), atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_param_gradient_is_linear_in_upstream(seed, k):
    rng = np.random.default_rng(seed)
    m = Mlp.init((2, 3, 3), seed)
    X = rng.standard_normal((4, 2))
    U = rng.standard_normal((4, 3))
    np.testing.assert_allclose(m.param_gradient(X, k * U), k * m.param_gradient(X, U), atol=1e-10)


def test_upstream_shape_checked():
    m = Mlp.init((2, 3), seed=0)
    with pytest.raises(ContractViolation):
        m.param_gradient(np.zeros((2, 2)), np.zeros((3, 3)))


def test_save_load_roundtrip(tmp_path):
    m = Mlp.init((3, 4, 2), seed=2)
    m.save(tmp_path / "net.txt")
    back = Mlp.load(tmp_path / "net.txt")
    assert back.layer_sizes == m.layer_sizes
    assert np.array_equal(back.params, m.params)


def test_adam_zero_lr_is_noop():
    p = np.array([1.0, -2.0])
    new, state = adam_step(p, np.array([0.3, 0.1]), AdamState.zeros(2), AdamConfig(lr=0.0, weight_decay=0.1))
    assert np.array_equal(new, p) and state.t == 1


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(grad)
    p = np.zeros(3)
    new, _ = adam_step(p, np.array([2.0, -0.5, 1e-3]), AdamState.zeros(3), AdamConfig(lr=0.1))
    np.testing.assert_allclose(new, [-0.1, 0.1, -0.1], rtol=1e-4)


def test_adam_minimizes_quadratic():
    p, s = np.array([3.0, -4.0]), AdamState.zeros(2)
    for _ in range(3000):
        p, s = adam_step(p, 2 * p, s, AdamConfig(lr=0.01))
    assert np.linalg.norm(p) < 1e-2


def test_adam_rejects_nonfinite():
    with pytest.raises(NumericError):
        adam_step(np.zeros(2), np.array([np.nan, 0.0]), AdamState.zeros(2), AdamConfig())
