"""AdamW update rule and cosine schedule against hand evaluations."""

import numpy as np
import pytest

from deformseg.errors import NumericalError
from deformseg.optim import AdamW, cosine_lr
from deformseg.tensor import Tensor


def make_param(value=1.0, grad=1.0):
    p = Tensor(np.array([value]), requires_grad=True, dtype=np.float64)
    p.grad = np.array([grad], dtype=p.dtype)
    return p


def test_first_step_without_decay():
    p = make_param(1.0, 1.0)
    opt = AdamW([([p], 1.0)], weight_decay=0.0)
    opt.step(lr=0.1)
    # bias-corrected m_hat = v_hat = 1 -> w = 1 - 0.1 * 1/(1 + eps)
    assert abs(p.data[0] - 0.9) < 1e-8


def test_first_step_with_decoupled_decay():
    p = make_param(1.0, 1.0)
    opt = AdamW([([p], 1.0)], weight_decay=0.5)
    opt.step(lr=0.1)
    # decay first: w = 1 * (1 - 0.1*0.5) = 0.95, then the Adam step of ~0.1
    assert abs(p.data[0] - 0.85) < 1e-8


def test_zero_gradient_is_a_no_op():
    p = make_param(1.0, 0.0)
    opt = AdamW([([p], 1.0)], weight_decay=0.0)
    opt.step(lr=0.1)
    assert p.data[0] == 1.0


def test_group_multiplier_scales_update():
    p_slow = make_param(1.0, 1.0)
    p_fast = make_param(1.0, 1.0)
    opt = AdamW([([p_slow], 0.1), ([p_fast], 1.0)], weight_decay=0.0)
    opt.step(lr=0.1)
    assert abs(p_fast.data[0] - 0.9) < 1e-8
    assert abs(p_slow.data[0] - 0.99) < 1e-8


def test_two_steps_match_reference_formula():
    p = make_param(1.0, 1.0)
    opt = AdamW([([p], 1.0)], weight_decay=0.0)
    opt.step(0.1)
    p.grad = np.array([2.0], dtype=p.dtype)
    opt.step(0.1)
    # steps replayed by hand
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = v = 0.0
    w = 1.0
    for t, g in ((1, 1.0), (2, 2.0)):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= 0.1 * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    assert abs(p.data[0] - w) < 1e-12


def test_nan_gradient_aborts():
    p = make_param(1.0, np.nan)
    opt = AdamW([([p], 1.0)])
    with pytest.raises(NumericalError):
        opt.step(0.1)


def test_duplicate_and_frozen_params_rejected():
    p = make_param()
    with pytest.raises(ValueError, match="more than one group"):
        AdamW([([p], 1.0), ([p], 0.1)])
    frozen = Tensor(np.zeros(2), requires_grad=False)
    with pytest.raises(ValueError, match="frozen"):
        AdamW([([frozen], 1.0)])


def test_cosine_schedule_values():
    assert cosine_lr(0, 100, 2e-4) == pytest.approx(2e-4)
    assert cosine_lr(100, 100, 2e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(50, 100, 2e-4) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 2e-4)
    with pytest.raises(ValueError):
        cosine_lr(5, 4, 2e-4)
