import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidiff.neuron import (LifParams, LifState, first_spike_time, heaviside, is_spike, lif_sequence, lif_step,
                           smooth_spikes, surrogate_grad)
from lidiff.tensor import Tensor, default_dtype, grad_check, tsum

P = LifParams(tau=2.0, u_th=1.0, u_reset=0.0)


def run_steps(xs, params=P):
    state = LifState.fresh((), params, dtype=np.float64)
    spikes, mems = [], []
    for x in xs:
        s = lif_step(Tensor(np.float64(x)), state, params)
        spikes.append(float(s.data))
        mems.append(float(state.u.data))
    return spikes, mems


def test_resting_neuron():
    spikes, mems = run_steps([0.0])
    assert spikes == [0.0] and mems == [0.0]


def test_threshold_is_inclusive():
    # H = 0 + (2 - 0) / 2 = 1.0 -> fires, resets to 0
    spikes, mems = run_steps([2.0])
    assert spikes == [1.0] and mems == [0.0]


def test_subthreshold_geometric_approach():
    spikes, mems = run_steps([0.5] * 12)
    assert mems[:3] == [0.25, 0.375, 0.4375]
    assert spikes == [0.0] * 12
    assert all(m < 0.5 for m in mems)


def test_period_two_firing():
    x = np.full((8, 1), 1.5)
    s, u = lif_sequence(Tensor(x), P, return_membrane=True)
    assert s.data[:, 0].tolist() == [0, 1, 0, 1, 0, 1, 0, 1]
    # t=1: H=0.75 kept; t=2: H=0.75+(1.5-0.75)/2=1.125 fires and resets
    assert u[0, 0] == 0.75 and u[1, 0] == 0.0


def test_sequence_all_zero():
    assert np.all(lif_sequence(Tensor(np.zeros((5, 3, 2))), P).data == 0)


def test_sequence_t1_equals_single_step():
    x = np.random.default_rng(0).uniform(0, 3, (1, 6))
    state = LifState.fresh((6,), P, dtype=np.float64)
    step = lif_step(Tensor(x[0]), state, P)
    np.testing.assert_array_equal(lif_sequence(Tensor(x), P).data[0], step.data)


def test_sequence_matches_step_loop():
    x = np.random.default_rng(1).uniform(-1, 3, (6, 4, 3))
    state = LifState.fresh((4, 3), P, dtype=np.float64)
    steps = np.stack([lif_step(Tensor(x[t]), state, P).data for t in range(6)])
    np.testing.assert_array_equal(lif_sequence(Tensor(x), P).data, steps)


def test_sequence_needs_a_step():
    with pytest.raises(ValueError):
        lif_sequence(Tensor(np.zeros((0, 3))), P)


def test_step_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        lif_step(Tensor(np.zeros(3)), LifState.fresh((4,), P), P)


def test_step_non_finite_membrane():
    with pytest.raises(FloatingPointError):
        lif_step(Tensor(np.array([np.nan])), LifState.fresh((1,), P), P)


def test_params_validation():
    with pytest.raises(ValueError):
        LifParams(tau=0.5)
    with pytest.raises(ValueError):
        LifParams(u_th=0.0, u_reset=0.0)
    with pytest.raises(ValueError):
        LifParams(surrogate_width=0)


def test_surrogate_grad_closed_form():
    assert surrogate_grad(0.0, 2.0) == 1.0
    assert surrogate_grad(1e6, 2.0) < 1e-10
    v = 0.3
    assert surrogate_grad(v, 2.0) == pytest.approx(2.0 / (2 * (1 + (np.pi * 2.0 * v / 2) ** 2)))


@given(v=st.floats(-50, 50), w=st.floats(0.1, 10))
def test_surrogate_grad_even(v, w):
    assert surrogate_grad(v, w) == surrogate_grad(-v, w)


def test_hard_reset_is_exact():
    x = np.random.default_rng(2).uniform(0, 4, (10, 50))
    s, u = lif_sequence(Tensor(x), LifParams(u_reset=-0.25), return_membrane=True)
    assert np.all(u[s.data == 1] == np.float32(-0.25))


@settings(max_examples=60)
@given(st.lists(st.floats(0, 3, width=32), min_size=1, max_size=12), st.data())
def test_first_spike_monotone_in_input(xs, data):
    x = np.array(xs)
    bump = np.array(data.draw(st.lists(st.floats(0, 2, width=32), min_size=len(xs), max_size=len(xs))))
    early = first_spike_time(x[:, None] + bump[:, None], P)
    late = first_spike_time(x[:, None], P)
    assert early[0] <= late[0]


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_outputs_are_binary(seed):
    x = np.random.default_rng(seed).normal(0, 2, (4, 5))
    assert is_spike(lif_sequence(Tensor(x), P))


def test_heaviside_backward_uses_surrogate():
    v = Tensor(np.array([0.0, 0.5, -2.0]), requires_grad=True)
    heaviside(v, 2.0).backward(np.ones(3))
    np.testing.assert_allclose(v.grad, [surrogate_grad(a, 2.0) for a in (0.0, 0.5, -2.0)])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_smoothed_forward(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64), smooth_spikes():
        x = Tensor(rng.uniform(-1, 3, (5, 6)), requires_grad=True)
        rep = grad_check(lambda: tsum(lif_sequence(x, P)), [x], eps=1e-6, tol=1e-3, floor=1e-6)
    assert rep.max_rel_error < 1e-3, rep


def test_fused_and_stepwise_gradients_agree():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 3, (4, 5))
    w = rng.normal(size=(4, 5))
    a = Tensor(x.copy(), requires_grad=True)
    tsum(lif_sequence(a, P) * Tensor(w)).backward()
    b = Tensor(x.copy(), requires_grad=True)
    state = LifState.fresh((5,), P, dtype=np.float64)
    total = None
    for t in range(4):
        term = tsum(lif_step(b[t], state, P) * Tensor(w[t]))
        total = term if total is None else total + term
    total.backward()
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-10, atol=1e-12)
