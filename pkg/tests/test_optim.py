import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from micfer.optim import Adam, AdamState, adam_update
from micfer.tensor import Tensor
from oracles import adam_first_step

vals = st.floats(-100, 100, allow_nan=False)


def _step(p0, g, lr=0.1, **hyper):
    p = Tensor(np.array([p0]), name="p")
    state = AdamState.for_param(p, **hyper)
    adam_update(p, np.array([g]), state, lr)
    return p.data[0], state


def test_zero_grad_is_fixed_point():
    p, _ = _step(1.0, 0.0)
    assert p == 1.0


def test_first_step_closed_form():
    p, state = _step(1.0, 1.0, lr=0.1)
    assert p == pytest.approx(0.9, abs=1e-8)
    assert p == pytest.approx(adam_first_step(1.0, 1.0, 0.1), abs=1e-15)
    assert state.t == 1


def test_weight_decay_acts_as_gradient():
    p_wd, _ = _step(1.0, 0.0, weight_decay=0.1)
    p_grad, _ = _step(1.0, 0.1)
    assert p_wd < 1.0
    assert p_wd == p_grad


def test_nan_gradient_names_parameter():
    p = Tensor(np.zeros(2), name="layer.w")
    with pytest.raises(FloatingPointError, match="layer.w"):
        adam_update(p, np.array([0.0, np.nan]), AdamState.for_param(p), 0.1)


def test_shape_mismatch_and_bad_lr():
    p = Tensor(np.zeros(2))
    with pytest.raises(ValueError):
        adam_update(p, np.zeros(3), AdamState.for_param(p), 0.1)
    with pytest.raises(ValueError):
        adam_update(p, np.zeros(2), AdamState.for_param(p), 0.0)


def test_optimizer_minimizes_quadratic():
    p = Tensor(np.array([3.0, -2.0]))
    opt = Adam([p], lr=0.05)
    for _ in range(500):
        opt.step({p: 2 * p.data})
    np.testing.assert_allclose(p.data, 0.0, atol=1e-2)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=vals), st.integers(1, 20))
def test_zero_grad_fixed_point_over_many_steps(p0, steps):
    p = Tensor(p0)
    opt = Adam([p], lr=0.01)
    for _ in range(steps):
        opt.step({})
    np.testing.assert_array_equal(p.data, p0)


@given(vals.filter(lambda g: abs(g) > 1e-3), st.floats(1e-4, 1.0))
def test_first_step_moves_by_lr_against_gradient(g, lr):
    p, _ = _step(0.0, g, lr=lr)
    assert p == pytest.approx(-lr * np.sign(g), rel=1e-6)
