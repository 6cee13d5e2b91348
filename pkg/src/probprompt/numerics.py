"""Differentiable building blocks shared by every model component.

All tensors are float64; gradients come from torch autograd. This module also
hosts the finite-difference oracle that the test suite uses to audit autograd
on every composed loss.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch
from torch import Tensor, nn

from .errors import DegenerateError, DeterminismError, DimensionError, EmptyContextError, NonFiniteError, StateError

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def randn(shape, generator: torch.Generator, scale: float = 1.0) -> Tensor:
    return torch.randn(tuple(shape), generator=generator, dtype=DTYPE) * scale


def check_finite(name: str, value: Tensor) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteError(f"non-finite values in {name}")


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if torch.any(norm == 0):
        raise DegenerateError("cannot normalize a zero vector")
    return x / norm


class AttentionWeights(nn.Module):
    """Query/key/value/output projections of a single-head attention block."""

    def __init__(self, dim: int, generator: torch.Generator | None = None, scale: float | None = None):
        super().__init__()
        gen = generator if generator is not None else make_generator(0)
        s = scale if scale is not None else 1.0 / math.sqrt(dim)
        self.dim = dim
        self.w_q = nn.Parameter(randn((dim, dim), gen, s))
        self.w_k = nn.Parameter(randn((dim, dim), gen, s))
        self.w_v = nn.Parameter(randn((dim, dim), gen, s))
        self.w_o = nn.Parameter(randn((dim, dim), gen, s))

    def forward(self, queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
        return attention(queries, keys, values, self)


def attention(queries: Tensor, keys: Tensor, values: Tensor, weights: AttentionWeights) -> Tensor:
    """Scaled dot-product attention with learned projections.

    Works on ``(..., m, D)`` queries against ``(..., n, D)`` keys/values with
    matching leading dimensions; row vectors are multiplied on the right by
    the projection matrices.
    """
    d = weights.dim
    if queries.shape[-1] != d or keys.shape[-1] != d or values.shape[-1] != d:
        raise DimensionError(
            f"attention expects last dim {d}, got {queries.shape[-1]}, {keys.shape[-1]}, {values.shape[-1]}"
        )
    if keys.shape[-2] != values.shape[-2]:
        raise DimensionError("keys and values must have the same number of rows")
    if keys.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context")
    if queries.shape[-2] == 0:
        raise DimensionError("attention needs at least one query")
    q = queries @ weights.w_q
    k = keys @ weights.w_k
    v = values @ weights.w_v
    scores = q @ k.transpose(-1, -2) / math.sqrt(d)
    return (torch.softmax(scores, dim=-1) @ v) @ weights.w_o


class MLP(nn.Module):
    """Two-layer perceptron with a ReLU hidden layer."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, generator: torch.Generator):
        super().__init__()
        self.w1 = nn.Parameter(randn((d_in, d_hidden), generator, 1.0 / math.sqrt(d_in)))
        self.b1 = nn.Parameter(torch.zeros(d_hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(randn((d_hidden, d_out), generator, 1.0 / math.sqrt(d_hidden)))
        self.b2 = nn.Parameter(torch.zeros(d_out, dtype=DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return torch.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **hyper) -> "AdamWState":
        state = cls(**hyper)
        for name, p in params.items():
            state.exp_avg[name] = torch.zeros_like(p, dtype=DTYPE)
            state.exp_avg_sq[name] = torch.zeros_like(p, dtype=DTYPE)
        return state


@torch.no_grad()
def adamw_step(params: Mapping[str, Tensor], state: AdamWState) -> None:
    """Apply one decoupled-weight-decay Adam update in place.

    Gradients are left untouched; the caller zeroes them.
    """
    if state.lr <= 0 or state.eps <= 0 or state.weight_decay < 0:
        raise StateError("AdamW hyperparameters must be positive")
    missing = [n for n in params if n not in state.exp_avg]
    if missing:
        raise StateError(f"AdamW state not initialized for {missing}")
    state.step += 1
    beta1, beta2 = state.betas
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        p.mul_(1.0 - state.lr * state.weight_decay)
        m = state.exp_avg[name]
        v = state.exp_avg_sq[name]
        m.lerp_(g, 1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is not None:
            p.grad = None


# ---------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    passed: bool
    step: float
    tol: float

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-8,
    rel_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd against central differences, element by element.

    ``loss_fn`` must be a closure over ``params`` returning a scalar tensor and
    must be deterministic (random draws frozen by the caller). The perturbation
    for an element ``x`` is ``step * max(1, |x|)``. The relative error of an
    element is ``|a - n| / max(|a|, |n|, floor, rel_floor * |loss|)``. The
    loss-relative floor keeps central-difference round-off (a few
    ``ulp(loss) / step``) on near-zero gradients from reading as a relative
    failure; ``rel_floor=0`` gives the bare absolute floor.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tensors = dict(params)
    for p in tensors.values():
        if not p.requires_grad:
            raise ValueError("grad_check needs tensors with requires_grad=True")
        p.grad = None
    with torch.enable_grad():
        loss = loss_fn()
        loss.backward()
    analytic = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)) for n, p in tensors.items()
    }
    with torch.no_grad():
        f_a = loss_fn().item()
        f_b = loss_fn().item()
        if f_a != f_b:
            raise DeterminismError(f"loss_fn returned {f_a!r} then {f_b!r} for identical inputs")
        scale = max(floor, rel_floor * abs(f_a))
        report: dict[str, float] = {}
        for name, p in tensors.items():
            flat = p.data.view(-1)
            grad = analytic[name].view(-1)
            worst = 0.0
            for i in range(flat.numel()):
                x = flat[i].item()
                h = step * max(1.0, abs(x))
                flat[i] = x + h
                f_plus = loss_fn().item()
                x_plus = flat[i].item()
                flat[i] = x - h
                f_minus = loss_fn().item()
                x_minus = flat[i].item()
                flat[i] = x
                numeric = (f_plus - f_minus) / (x_plus - x_minus)
                a = grad[i].item()
                rel = abs(a - numeric) / max(abs(a), abs(numeric), scale)
                worst = max(worst, rel)
            report[name] = worst
    for p in tensors.values():
        p.grad = None
    return GradCheckReport(report, all(v < tol for v in report.values()), step, tol)
