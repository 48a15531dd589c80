import numpy as np
import pytest

from mmrag import tensor as T
from mmrag.optim import OptimizerState, adam_step, zero_grads
from mmrag.tensor import NumericError


def test_zero_gradient_leaves_params_unchanged():
    p = T.parameter(np.array([1.5, -2.0], dtype=np.float32))
    before = p.data.copy()
    adam_step({"w": p}, OptimizerState(lr=0.1))
    assert np.array_equal(p.data, before)


def test_one_step_matches_hand_formula():
    # scalar w=2, grad=0.5, lr=0.1, defaults b1=0.9 b2=0.999 eps=1e-8
    # m1=0.05, v1=2.5e-4; mhat=0.5, vhat=0.25
    # w' = 2 - 0.1 * 0.5 / (0.5 + 1e-8)
    p = T.parameter(np.array([2.0], dtype=np.float64), dtype=np.float64)
    p.grad[:] = 0.5
    adam_step({"w": p}, OptimizerState(lr=0.1))
    want = 2.0 - 0.1 * 0.5 / (np.sqrt(0.25) + 1e-8)
    assert abs(p.data[0] - want) < 1e-12


def test_determinism_100_steps_bit_identical():
    def run():
        r = np.random.default_rng(7)
        p = T.parameter(r.normal(size=(4, 3)).astype(np.float32))
        st = OptimizerState(lr=1e-3)
        for i in range(100):
            zero_grads({"w": p})
            with T.tape() as tp:
                loss = T.tmean(T.mul(p, p))
            T.backward(loss, tp)
            adam_step({"w": p}, st)
        return p.data.copy()

    assert np.array_equal(run(), run())


def test_non_finite_gradient_names_parameter():
    p = T.parameter(np.ones(2))
    p.grad[0] = np.nan
    with pytest.raises(NumericError, match="bad_param"):
        adam_step({"bad_param": p}, OptimizerState(lr=0.1))


def test_step_counter_strictly_increases():
    p = T.parameter(np.ones(1))
    st = OptimizerState(lr=0.1)
    for want in (1, 2, 3):
        adam_step({"w": p}, st)
        assert st.step == want


def test_moment_shapes_match_params():
    p = T.parameter(np.ones((3, 2)))
    p.grad[:] = 0.1
    st = OptimizerState(lr=0.1)
    adam_step({"w": p}, st)
    assert st.m["w"].shape == (3, 2)
    assert st.v["w"].shape == (3, 2)
