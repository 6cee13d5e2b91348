"""Training objectives for both stages."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import torch
from torch import Tensor, nn

from .errors import DimensionError, DomainError, NormalizationError, SizeError
from .numerics import DTYPE


class Temperature(nn.Module):
    """Learnable contrastive temperature stored as log(1/tau)."""

    def __init__(self, tau_init: float = 0.07):
        super().__init__()
        self.log_inv_tau = nn.Parameter(torch.tensor(math.log(1.0 / tau_init), dtype=DTYPE))

    @property
    def tau(self) -> float:
        return math.exp(-self.log_inv_tau.item())


def cosine_similarity_matrix(e_txt: Tensor, e_img: Tensor) -> Tensor:
    if e_txt.shape != e_img.shape:
        raise DimensionError(f"embedding shapes differ: {tuple(e_txt.shape)} vs {tuple(e_img.shape)}")
    a = e_txt / e_txt.norm(dim=-1, keepdim=True)
    b = e_img / e_img.norm(dim=-1, keepdim=True)
    return a @ b.T


def contrastive_from_similarity(sim: Tensor, log_inv_tau: Tensor) -> tuple[Tensor, Tensor]:
    """Text-anchored InfoNCE over a square similarity matrix.

    Returns the mean loss and the per-anchor losses.
    """
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise DimensionError("similarity matrix must be square")
    if n < 2:
        raise SizeError("contrastive loss needs at least two pairs")
    logits = sim * torch.exp(log_inv_tau)
    per_pair = torch.logsumexp(logits, dim=1) - logits.diagonal()
    return per_pair.mean(), per_pair


def contrastive_loss(e_txt: Tensor, e_img: Tensor, log_inv_tau) -> tuple[Tensor, Tensor]:
    if isinstance(log_inv_tau, Temperature):
        log_inv_tau = log_inv_tau.log_inv_tau
    return contrastive_from_similarity(cosine_similarity_matrix(e_txt, e_img), torch.as_tensor(log_inv_tau, dtype=DTYPE))


def diversity_loss(p_tilde: Tensor, tol: float = 1e-10) -> Tensor:
    """Mean squared Frobenius distance of each Gram matrix from identity.

    ``p_tilde`` is ``(K, n, D)`` with unit-norm rows.
    """
    if p_tilde.ndim == 2:
        p_tilde = p_tilde.unsqueeze(0)
    norms = p_tilde.detach().norm(dim=-1)
    if torch.any((norms - 1).abs() > tol):
        raise NormalizationError("diversity_loss expects unit-norm rows")
    gram = p_tilde @ p_tilde.transpose(-1, -2)
    eye = torch.eye(gram.shape[-1], dtype=gram.dtype)
    return ((gram - eye) ** 2).sum(dim=(-1, -2)).mean()


def kl_to_standard_normal(mu: Tensor, sigma: Tensor) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)), summed over the last dimension."""
    if torch.any(sigma <= 0):
        raise DomainError("sigma must be strictly positive")
    return 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * torch.log(sigma)).sum(dim=-1)


@dataclass
class LossBreakdown:
    l_contrast: float = 0.0
    l_div: float = 0.0
    kl_mean: float = 0.0
    l_prompt: float = 0.0
    l_stage1: float = 0.0
    alpha: float = 0.0
    l_mse: float = 0.0
    l_3d: float = 0.0
    lam: float = 0.0
    l_stage2: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def stage1_loss(l_contrast, l_div, kl_mean, alpha: float):
    """Return ``(l_prompt, l_stage1)``; works on tensors and floats alike."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    l_prompt = l_div + kl_mean
    return l_prompt, l_contrast + alpha * l_prompt


def distill_mse(student: Tensor, teacher: Tensor) -> Tensor:
    if student.shape != teacher.shape:
        raise DimensionError(f"student {tuple(student.shape)} vs teacher {tuple(teacher.shape)}")
    return ((student - teacher.detach()) ** 2).mean()


def stage2_loss(l_mse, l_3d, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l_mse + lam * l_3d
