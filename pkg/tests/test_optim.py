import numpy as np
import pytest

from nanohtnet.errors import DimensionError
from nanohtnet.optim import AdamState, adam_step


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    out = adam_step(p, {"w": np.zeros(2)}, AdamState(), 0.1)
    np.testing.assert_array_equal(out["w"], p["w"])


def test_first_step_is_lr_times_sign():
    p = {"w": np.zeros(3)}
    g = np.array([1e-3, -5.0, 2.0])
    out = adam_step(p, {"w": g}, AdamState(eps=1e-12), 0.01)
    np.testing.assert_allclose(out["w"], -0.01 * np.sign(g), rtol=1e-6)


def test_missing_gradient_carried_over():
    p = {"a": np.ones(2), "b": np.ones(2)}
    out = adam_step(p, {"a": np.ones(2)}, AdamState(), 0.1)
    assert out["b"] is p["b"]


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamState(), 0.1)


def test_quadratic_bowl_converges():
    target = np.array([3.0, -1.5, 0.25])
    scale = np.array([1.0, 10.0, 0.1])
    p = {"w": np.zeros(3)}
    state = AdamState()
    for step in range(2000):
        lr = 0.1 * 0.997 ** step
        p = adam_step(p, {"w": 2 * scale * (p["w"] - target)}, state, lr)
    np.testing.assert_allclose(p["w"], target, atol=1e-6)


def test_dtype_preserved():
    p = {"w": np.ones(4, dtype=np.float32)}
    out = adam_step(p, {"w": np.ones(4, dtype=np.float32)}, AdamState(), 1e-3)
    assert out["w"].dtype == np.float32
