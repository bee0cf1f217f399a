import numpy as np
import pytest

from gnnopf.optim import OptimizerState, optimizer_step


def test_sgd_zero_gradient_is_fixed_point():
    p = [np.arange(6.0).reshape(2, 3)]
    new, state = optimizer_step(p, [np.zeros((2, 3))], OptimizerState(), kind="sgd", lr=0.5)
    assert np.array_equal(new[0], p[0]) and state.step == 1


def test_sgd_example():
    new, _ = optimizer_step([np.array([1.0])], [np.array([2.0])], OptimizerState(), kind="sgd", lr=0.1)
    assert new[0][0] == pytest.approx(0.8, abs=1e-15)


def test_adam_first_step_has_size_lr():
    rng = np.random.default_rng(0)
    g = rng.normal(size=(4, 4))
    p = rng.normal(size=(4, 4))
    new, state = optimizer_step([p], [g], OptimizerState(), kind="adam", lr=1e-3)
    np.testing.assert_allclose(np.abs(new[0] - p), 1e-3, rtol=1e-6)
    assert state.step == 1 and len(state.m) == 1


def test_adam_zero_gradient_does_not_move():
    p = [np.ones(3)]
    new, _ = optimizer_step(p, [np.zeros(3)], OptimizerState(), kind="adam")
    assert np.array_equal(new[0], p[0])


def test_does_not_mutate_inputs():
    p, g = [np.ones(3)], [np.full(3, 2.0)]
    state = OptimizerState()
    optimizer_step(p, g, state)
    assert np.array_equal(p[0], np.ones(3)) and state.step == 0 and state.m == []


def test_errors():
    with pytest.raises(ValueError):
        optimizer_step([np.ones(2)], [np.ones(3)], OptimizerState())
    with pytest.raises(ValueError):
        optimizer_step([np.ones(2)], [np.ones(2)], OptimizerState(), kind="rmsprop")
