import math

import pytest
import torch

from avlse.cmkt import align_loss
from avlse.numerics import (
    AdamState,
    EmaState,
    NonFiniteGradientError,
    NumericsError,
    adam_step,
    backward,
    ema_update,
    grad_check,
)


def _param(value):
    return torch.nn.Parameter(torch.tensor(value, dtype=torch.float64))


def test_backward_polynomial():
    p = _param(3.0)
    backward(p**2)
    assert p.grad.item() == 6.0


def test_backward_accumulates():
    p = _param(3.0)
    backward(p**2)
    backward(p**2)
    assert p.grad.item() == 12.0


def test_backward_constant_loss_leaves_no_gradient():
    p = _param(1.0)
    backward(torch.tensor(2.0, dtype=torch.float64) + torch.tensor(3.0, dtype=torch.float64))
    assert p.grad is None


def test_backward_rejects_non_scalar():
    p = torch.nn.Parameter(torch.ones(3, dtype=torch.float64))
    with pytest.raises(NumericsError):
        backward(p * 2)


def test_backward_names_op_producing_nan():
    p = _param(-1.0)
    with pytest.raises(NonFiniteGradientError) as info:
        backward(torch.sqrt(p))
    assert "Sqrt" in info.value.op_name


def test_cosine_alignment_gradients_match_finite_differences(gen):
    Z = torch.randn(4, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    Zf = torch.randn(4, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    rep = grad_check(lambda: align_loss(Z, Zf), {"Z": Z, "Zf": Zf})
    assert rep.passed(1e-4)


def test_adam_zero_gradient_keeps_parameters():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=torch.float64))
    p.grad = torch.zeros_like(p)
    adam_step({"p": p}, AdamState())
    assert torch.equal(p.detach(), torch.tensor([1.0, -2.0], dtype=torch.float64))


def test_adam_first_step_is_learning_rate():
    p = _param(0.0)
    p.grad = torch.tensor(1.0, dtype=torch.float64)
    st = AdamState(learning_rate=1e-4)
    adam_step({"p": p}, st)
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    assert p.item() == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)
    assert st.step_count == 1
    assert p.grad.item() == 0.0


def test_adam_two_steps_match_hand_arithmetic():
    p = _param(0.0)
    st = AdamState(learning_rate=0.1)
    for g in (1.0, 3.0):
        p.grad = torch.tensor(g, dtype=torch.float64)
        adam_step({"p": p}, st)
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    second = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p.item() == pytest.approx(-0.1 / (1 + 1e-8) - second, rel=1e-12)


def test_adam_rejects_mismatched_moment():
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    p.grad = torch.ones(3, dtype=torch.float64)
    st = AdamState(step_count=1, first_moment={"p": torch.zeros(2)}, second_moment={"p": torch.zeros(2)})
    with pytest.raises(NumericsError):
        adam_step({"p": p}, st)


def test_ema_single_update():
    p = _param(1.0)
    ema = EmaState(0.999, {"p": torch.tensor(0.0, dtype=torch.float64)})
    ema_update(ema, {"p": p})
    assert ema.shadow["p"].item() == pytest.approx(0.001, abs=1e-15)


def test_ema_fixed_point():
    p = _param(0.37)
    ema = EmaState.from_params({"p": p})
    ema_update(ema, {"p": p})
    assert ema.shadow["p"].item() == 0.37


def test_ema_two_updates_closed_form():
    p = _param(2.5)
    ema = EmaState(0.999, {"p": torch.tensor(0.0, dtype=torch.float64)})
    ema_update(ema, {"p": p})
    ema_update(ema, {"p": p})
    assert abs(ema.shadow["p"].item() - (1 - 0.999**2) * 2.5) < 1e-15


@pytest.mark.parametrize("decay", [0.0, 1.0, -0.5, 1.5])
def test_ema_rejects_decay_outside_open_interval(decay):
    with pytest.raises(ValueError):
        EmaState(decay)


def test_grad_check_linear_layer(gen):
    torch.manual_seed(0)
    lin = torch.nn.Linear(6, 3).double()
    x = torch.randn(5, 6, dtype=torch.float64, generator=gen)
    w = torch.randn(5, 3, dtype=torch.float64, generator=gen)
    rep = grad_check(lambda: (lin(x) * w).sum(), lin)
    assert rep.worst < 1e-6


def test_grad_check_constant_function():
    p = _param(1.0)
    rep = grad_check(lambda: torch.tensor(4.0, dtype=torch.float64), {"p": p})
    assert rep.max_rel_error["p"] == 0.0
    assert rep.analytic_max["p"] == 0.0


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    p = torch.nn.Parameter(torch.tensor([0.5, 2.0], dtype=torch.float64))
    rep = grad_check(lambda: Wrong.apply(p).sum(), {"p": p})
    assert not rep.passed(1e-4)
