import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from larnn import cell
from larnn import tensor as T
from larnn.errors import ContractError, DimensionError, NumericError


def _run(p, x, training=False):
    state = cell.initial_state(p, x.shape[0])
    hs = []
    for t in range(x.shape[1]):
        h, state = cell.step(p, state, T.Tensor(x[:, t]), training)
        hs.append(h.data)
    return np.stack(hs, axis=1), state


def test_vanilla_zero_weights_and_bias():
    p = cell.init_params(0, 3, 5, mode="vanilla")
    p.W_x.data[:] = 0
    p.W_h.data[:] = 0
    p.b.data[:] = 0
    h, state = cell.step(p, cell.initial_state(p, 2), T.Tensor(np.ones((2, 3))))
    # f = i = o = 0.5, g = 0 → c = 0, h = 0.5 · tanh(0) = 0
    npt.assert_array_equal(h.data, 0.0)
    npt.assert_array_equal(state.c.data, 0.0)


def test_vanilla_hand_computed():
    p = cell.init_params(0, 1, 1, mode="vanilla")
    p.W_x.data[:] = [[0.5, -0.5, 1.0, 2.0]]
    p.W_h.data[:] = 0
    p.b.data[:] = [1.0, 0.0, 0.0, 0.0]
    h, state = cell.step(p, cell.initial_state(p, 1), T.Tensor([[1.0]]))
    sig = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
    c = sig(-0.5) * np.tanh(2.0)
    assert state.c.data[0, 0] == pytest.approx(c, rel=1e-14)
    assert h.data[0, 0] == pytest.approx(sig(1.0) * np.tanh(c), rel=1e-14)


def test_residual_with_zero_coupling_equals_bnlstm():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 6, 3))
    base = cell.init_params(7, 3, 8, mode="bnlstm")
    lar = cell.init_params(7, 3, 8, window=4, mode="larnn_residual", heads=4)
    lar.W_ac.data[:] = 0.0
    for training in (False, True):
        h1, _ = _run(base, x, training)
        h2, _ = _run(lar, x, training)
        assert np.array_equal(h1, h2)


def test_same_seed_same_outputs():
    x = np.random.default_rng(1).normal(size=(3, 5, 2))
    for mode in cell.MODES:
        kw = dict(window=3, heads=2) if mode.startswith("larnn") else {}
        a, _ = _run(cell.init_params(4, 2, 4, mode=mode, **kw), x, True)
        b, _ = _run(cell.init_params(4, 2, 4, mode=mode, **kw), x, True)
        assert np.array_equal(a, b), mode


def test_forget_bias_and_cell_gamma():
    p = cell.init_params(0, 3, 5, window=4, mode="larnn_residual", heads=1)
    npt.assert_array_equal(p.b.data[:5], cell.FORGET_BIAS)
    npt.assert_array_equal(p.b.data[5:], 0.0)
    npt.assert_array_equal(p.bn_cell.gamma.data, cell.CELL_BN_GAMMA)
    npt.assert_array_equal(p.bn_out.gamma.data, 1.0)
    assert np.abs(p.W_x.data).max() <= 1 / np.sqrt(5)


def test_vanilla_parameter_count():
    assert cell.parameter_count(cell.init_params(0, 9, 42, mode="vanilla")) == 8736


@pytest.mark.parametrize("mode", cell.MODES)
def test_shapes_and_queue(mode):
    kw = dict(window=3, heads=2) if mode.startswith("larnn") else {}
    p = cell.init_params(0, 2, 4, mode=mode, **kw)
    hs, state = _run(p, np.random.default_rng(0).normal(size=(5, 4, 2)))
    assert hs.shape == (5, 4, 4)
    if mode.startswith("larnn"):
        assert len(state.queue) == 3
        assert state.weights.shape == (5, 2, 3)
        npt.assert_array_equal(state.queue.entries[0].data, state.c.data)
    else:
        assert state.queue is None and state.weights is None


def test_layer_mode_uses_three_gate_blocks():
    p = cell.init_params(0, 3, 4, window=4, mode="larnn_layer", heads=2)
    assert p.W_x.shape == (3, 12) and p.W_a.shape == (3 + 8, 4)
    assert len(p.bn_gates) == 3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_gates_in_unit_interval(seed, training):
    rng = np.random.default_rng(seed)
    p = cell.init_params(seed % 1000, 2, 4, mode="vanilla")
    x = T.Tensor(rng.uniform(-5, 5, (3, 2)))
    state = cell.initial_state(p, 3)
    h, new = cell.step(p, state, x, training)
    # vanilla: |c| <= |c_prev| + 1 and |h| < 1
    assert np.all(np.abs(new.c.data) <= 1.0)
    assert np.all(np.abs(h.data) < 1.0)


def test_step_does_not_modify_inputs():
    rng = np.random.default_rng(3)
    p = cell.init_params(0, 2, 4, window=3, mode="larnn_residual", heads=2)
    state = cell.initial_state(p, 2)
    _, state = cell.step(p, state, T.Tensor(rng.normal(size=(2, 2))))
    x = rng.normal(size=(2, 2))
    xt = T.Tensor(x.copy())
    before = (state.h.data.copy(), state.c.data.copy(), [e.data.copy() for e in state.queue.entries])
    cell.step(p, state, xt, training=True)
    npt.assert_array_equal(xt.data, x)
    npt.assert_array_equal(state.h.data, before[0])
    npt.assert_array_equal(state.c.data, before[1])
    for e, b in zip(state.queue.entries, before[2]):
        npt.assert_array_equal(e.data, b)


def test_errors():
    with pytest.raises(ContractError):
        cell.init_params(0, 2, 4, mode="gru")
    with pytest.raises(ContractError):
        cell.init_params(0, 2, 4, window=0, mode="larnn_layer")
    p = cell.init_params(0, 2, 4, mode="bnlstm")
    with pytest.raises(DimensionError):
        cell.step(p, cell.initial_state(p, 2), T.Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError):
        cell.step(p, cell.initial_state(p, 3), T.Tensor(np.zeros((2, 2))))


def test_non_finite_gate_raises():
    p = cell.init_params(0, 2, 4, mode="vanilla")
    with pytest.raises(NumericError):
        cell.step(p, cell.initial_state(p, 1), T.Tensor([[np.nan, 0.0]]))
