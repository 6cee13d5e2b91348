"""Per-prompt Gaussians: mean and spread decoders, sampling, fusion.

The mean of prompt ``t`` is an MLP of its query plus self-attention over
all of the RoI's template queries. The spread is a softplus of an MLP of the
query plus a visual term, by default cross-attention to the RoI's visual
tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DegenerateError, EmptyContextError, SizeError
from .numerics import DTYPE, MLP, AttentionWeights, attention, make_generator, randn

FUSION_STRATEGIES = ("maxpool", "add", "concat_mlp", "mlp")
IMAGE_TEXT_FUSIONS = ("cross_attention", "add", "concat")


class PromptDecoders(nn.Module):
    def __init__(self, dim: int, image_text_fusion: str = "cross_attention", seed: int = 0):
        super().__init__()
        if image_text_fusion not in IMAGE_TEXT_FUSIONS:
            raise ValueError(f"unknown image-text fusion {image_text_fusion!r}")
        gen = make_generator(seed)
        self.dim = dim
        self.image_text_fusion = image_text_fusion
        self.phi_mu = MLP(dim, dim, dim, gen)
        self.self_attn_mu = AttentionWeights(dim, gen)
        self.phi_sigma = MLP(dim, dim, dim, gen)
        if image_text_fusion == "cross_attention":
            self.cross_attn_sigma = AttentionWeights(dim, gen)
        elif image_text_fusion == "concat":
            self.concat_proj = nn.Parameter(randn((2 * dim, dim), gen, 1.0 / math.sqrt(2 * dim)))


def decode_mean(q: Tensor, prompt_set: Tensor, dec: PromptDecoders) -> Tensor:
    """mu = phi_mu(q) + SelfAttn(q; prompt_set) for ``(..., k, D)`` queries."""
    if prompt_set.shape[-2] == 0:
        raise EmptyContextError("empty prompt set")
    return dec.phi_mu(q) + attention(q, prompt_set, prompt_set, dec.self_attn_mu)


def std_preactivation(q: Tensor, visual: Tensor, dec: PromptDecoders) -> Tensor:
    if visual.shape[-2] == 0:
        raise EmptyContextError("empty visual token set")
    base = dec.phi_sigma(q)
    if dec.image_text_fusion == "cross_attention":
        return base + attention(q, visual, visual, dec.cross_attn_sigma)
    pooled = visual.mean(dim=-2, keepdim=True).expand_as(base)
    if dec.image_text_fusion == "add":
        return base + pooled
    return torch.cat([base, pooled], dim=-1) @ dec.concat_proj


def decode_std(q: Tensor, visual: Tensor, dec: PromptDecoders) -> Tensor:
    """Strictly positive spread; ``visual`` is ``(..., n_F, D)`` and broadcasts over ``k``."""
    return F.softplus(std_preactivation(q, visual, dec))


@dataclass
class GaussianPromptParams:
    mu: Tensor
    sigma: Tensor


@dataclass
class PromptSamples:
    z: Tensor
    eps: Tensor

    @property
    def n_samples(self) -> int:
        return self.z.shape[-2]


def sample_reparam(mu: Tensor, sigma: Tensor, n_samples: int, generator: torch.Generator | None = None, eps: Tensor | None = None) -> PromptSamples:
    """Draw ``n_samples`` rows per Gaussian as ``mu + sigma * eps``.

    Output has shape ``(..., n_samples, D)``. Pass ``eps`` to replay draws.
    """
    if n_samples < 1:
        raise SizeError("n_samples must be >= 1")
    shape = (*mu.shape[:-1], n_samples, mu.shape[-1])
    if eps is None:
        gen = generator if generator is not None else make_generator(0)
        eps = torch.randn(shape, generator=gen, dtype=DTYPE)
    elif tuple(eps.shape) != shape:
        raise SizeError(f"eps has shape {tuple(eps.shape)}, expected {shape}")
    return PromptSamples(mu.unsqueeze(-2) + sigma.unsqueeze(-2) * eps, eps)


class PromptFusion(nn.Module):
    """Collapse ``(..., R, D)`` sampled prompt rows into one unit-norm vector."""

    def __init__(self, strategy: str, dim: int, n_rows: int | None = None, seed: int = 0):
        super().__init__()
        if strategy not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {strategy!r}")
        self.strategy = strategy
        gen = make_generator(seed)
        if strategy == "concat_mlp":
            if n_rows is None:
                raise ValueError("concat_mlp needs the number of rows")
            self.n_rows = n_rows
            self.proj = MLP(n_rows * dim, dim, dim, gen)
        elif strategy == "mlp":
            self.w = nn.Parameter(randn((dim, dim), gen, 1.0 / math.sqrt(dim)))
            self.b = nn.Parameter(torch.zeros(dim, dtype=DTYPE))

    def forward(self, rows: Tensor) -> Tensor:
        return fuse_prompts(rows, self)


def _maxpool(rows: Tensor) -> Tensor:
    # argmax returns the first maximal index, so ties route to the lowest row
    idx = rows.detach().argmax(dim=-2, keepdim=True)
    return rows.gather(-2, idx).squeeze(-2)


def fuse_prompts(rows: Tensor, fusion: PromptFusion) -> Tensor:
    if rows.shape[-2] == 0:
        raise SizeError("fusion needs at least one row")
    s = fusion.strategy
    if s == "maxpool":
        pooled = _maxpool(rows)
    elif s == "add":
        pooled = rows.sum(dim=-2)
    elif s == "concat_mlp":
        if rows.shape[-2] != fusion.n_rows:
            raise SizeError(f"concat_mlp built for {fusion.n_rows} rows, got {rows.shape[-2]}")
        pooled = fusion.proj(rows.flatten(-2))
    else:
        pooled = torch.relu(rows @ fusion.w + fusion.b).mean(dim=-2)
    norm = pooled.norm(dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise DegenerateError(f"{s} fusion produced a zero vector")
    return pooled / norm
