"""Differentiation, optimisation and weight-averaging primitives.

Reverse-mode differentiation is delegated to ``torch.autograd``; the optimiser
and EMA are written out explicitly so their arithmetic can be checked by hand.
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Sequence

import torch

DTYPE = torch.float64


class NumericsError(RuntimeError):
    pass


class NonFiniteGradientError(NumericsError):
    def __init__(self, op_name: str, message: str = ""):
        self.op_name = op_name
        super().__init__(f"non-finite value produced while differentiating {op_name!r}. {message}".strip())


def named_parameters(module_or_params) -> Dict[str, torch.nn.Parameter]:
    if isinstance(module_or_params, torch.nn.Module):
        return dict(module_or_params.named_parameters())
    if isinstance(module_or_params, Mapping):
        return dict(module_or_params)
    return {str(i): p for i, p in enumerate(module_or_params)}


def backward(loss: torch.Tensor, check_nan: bool = True) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``.grad``.

    Repeated calls without zeroing accumulate. With ``check_nan`` the backward
    pass runs under anomaly detection so a NaN is attributed to the op that
    produced it.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise NumericsError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        # constant loss: nothing reachable, every gradient stays zero
        return
    if not check_nan:
        loss.backward()
        return
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            with torch.autograd.detect_anomaly(check_nan=True):
                loss.backward()
    except RuntimeError as err:
        msg = str(err)
        m = re.search(r"Function '(\w+)' returned nan", msg)
        if m is None:
            raise
        raise NonFiniteGradientError(m.group(1)) from err


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad.zero_()


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: Dict[str, torch.Tensor] = field(default_factory=dict)
    second_moment: Dict[str, torch.Tensor] = field(default_factory=dict)

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        out = {f"adam.m.{k}": v for k, v in self.first_moment.items()}
        out.update({f"adam.v.{k}": v for k, v in self.second_moment.items()})
        return out


@torch.no_grad()
def adam_step(params, state: AdamState) -> AdamState:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    named = named_parameters(params)
    state.step_count += 1
    k = state.step_count
    bc1 = 1.0 - state.beta1**k
    bc2 = 1.0 - state.beta2**k
    for name, p in named.items():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = torch.zeros_like(p)
            v = torch.zeros_like(p)
        elif m.shape != p.shape or v.shape != p.shape:
            raise NumericsError(f"Adam moment shape {tuple(m.shape)} does not match parameter {name} {tuple(p.shape)}")
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        state.first_moment[name] = m
        state.second_moment[name] = v
        denom = (v / bc2).sqrt_().add_(state.epsilon)
        p.addcdiv_(m / bc1, denom, value=-state.learning_rate)
        if p.grad is not None:
            p.grad.zero_()
    return state


@dataclass
class EmaState:
    decay: float = 0.999
    shadow: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"EMA decay must lie in (0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params, decay: float = 0.999) -> "EmaState":
        return cls(decay=decay, shadow={k: v.detach().clone() for k, v in named_parameters(params).items()})

    def copy_to(self, module: torch.nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                p.copy_(self.shadow[name])


@torch.no_grad()
def ema_update(ema: EmaState, params) -> EmaState:
    if not 0.0 < ema.decay < 1.0:
        raise ValueError(f"EMA decay must lie in (0, 1), got {ema.decay}")
    for name, p in named_parameters(params).items():
        s = ema.shadow.get(name)
        if s is None:
            ema.shadow[name] = p.detach().clone()
            continue
        if s.shape != p.shape:
            raise NumericsError(f"EMA shadow shape {tuple(s.shape)} does not match parameter {name} {tuple(p.shape)}")
        # decay*s + (1-decay)*p, written so that s == p is an exact fixed point
        s.add_(p.detach() - s, alpha=1.0 - ema.decay)
    return ema


@dataclass
class GradCheckReport:
    max_rel_error: Dict[str, float]
    analytic_max: Dict[str, float]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst <= tolerance


def _rel_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 0.0) -> float:
    scale = max(analytic.abs().max().item(), numeric.abs().max().item()) if analytic.numel() else 0.0
    scale = max(scale, floor)
    if scale == 0.0:
        return 0.0
    return (analytic - numeric).abs().max().item() / scale


def grad_check(
    fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor] | torch.nn.Module,
    step: float = 1e-5,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
    zero_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of the scalar ``fn()`` against central differences.

    ``fn`` must be deterministic. The relative error per parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` and is 0 when
    both gradients vanish. The denominator is floored at ``zero_floor * max(1, |fn()|)``
    so structurally zero gradients (a bias ahead of a normalisation) are not
    judged on round-off noise. ``max_entries`` subsamples large tensors.
    """
    named = named_parameters(params)
    for p in named.values():
        p.grad = None
    loss = fn()
    floor = zero_floor * max(1.0, abs(loss.item()))
    if loss.requires_grad:
        loss.backward()
    analytic = {k: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for k, p in named.items()}
    for p in named.values():
        p.grad = None

    errors: Dict[str, float] = {}
    amax: Dict[str, float] = {}
    with torch.no_grad():
        for name, p in named.items():
            flat = p.view(-1)
            n = flat.numel()
            if max_entries is not None and n > max_entries:
                idx: List[int] = torch.randperm(n, generator=generator)[:max_entries].tolist()
            else:
                idx = list(range(n))
            numeric = torch.zeros(len(idx), dtype=p.dtype)
            for j, i in enumerate(idx):
                orig = flat[i].item()
                flat[i] = orig + step
                up = fn().item()
                flat[i] = orig - step
                down = fn().item()
                flat[i] = orig
                numeric[j] = (up - down) / (2 * step)
            a = analytic[name].view(-1)[idx]
            errors[name] = _rel_error(a, numeric, floor)
            amax[name] = a.abs().max().item() if len(idx) else 0.0
    return GradCheckReport(errors, amax)
