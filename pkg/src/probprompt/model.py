"""Stage-1 prompt/image model and the stage-2 student with its box head."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .apb import PromptBank
from .config import RunConfig
from .encoders import Vocabulary, build_visual_tokens, load_embedding_file, save_embedding_file
from .errors import ParseError
from .mgpm import PromptDecoders, PromptFusion, decode_mean, decode_std, fuse_prompts, sample_reparam
from .numerics import DTYPE, MLP, check_finite, l2_normalize, make_generator, randn
from .objective import Temperature, contrastive_loss, diversity_loss, kl_to_standard_normal, stage1_loss


@dataclass
class Draws:
    """Random choices for one forward pass, frozen so the pass can be replayed."""

    subset: Tensor  # (N, k) template indices
    eps: Tensor  # (N, k, n_samples, D); zeros when sampling is off


@dataclass
class Stage1Output:
    e_txt: Tensor
    e_img: Tensor
    mu: Tensor
    sigma: Tensor
    l_contrast: Tensor
    l_div: Tensor
    kl_mean: Tensor
    l_prompt: Tensor
    l_stage1: Tensor

    def check_finite(self) -> None:
        for name in ("e_txt", "e_img", "mu", "sigma", "l_contrast", "l_div", "kl_mean", "l_stage1"):
            check_finite(name, getattr(self, name))


class Stage1Model(nn.Module):
    def __init__(self, cfg: RunConfig, categories):
        super().__init__()
        self.cfg = cfg
        d, dv, seed = cfg.dim, cfg.dim_v, cfg.seed
        self.vocab = Vocabulary(list(categories), d, seed)
        self.bank = PromptBank(categories, cfg.n_prompts, cfg.prompt_length, d, cfg.init_scale, seed)
        gen = make_generator(seed + 1)
        self.obj_proj = nn.Parameter(randn((dv, d), gen, 1.0 / dv))
        self.visual_proj = nn.Parameter(randn((dv, d), gen, 1.0 / dv))
        self.image_encoder = MLP(dv, d, d, gen)
        self.decoders = PromptDecoders(d, cfg.image_text_fusion, seed + 2)
        self.fusion = PromptFusion(cfg.fusion, d, cfg.k_sample * cfg.n_samples, seed + 3)
        self.temperature = Temperature(cfg.tau_init)

    def draw(self, n: int, rng: np.random.Generator, gen: torch.Generator, sampling: bool | None = None) -> Draws:
        cfg = self.cfg
        subset = np.stack([rng.choice(cfg.n_prompts, size=cfg.k_sample, replace=False) for _ in range(n)])
        shape = (n, cfg.k_sample, cfg.n_samples, cfg.dim)
        sampling = cfg.gaussian_sampling if sampling is None else sampling
        eps = torch.randn(shape, generator=gen, dtype=DTYPE) if sampling else torch.zeros(shape, dtype=DTYPE)
        return Draws(torch.as_tensor(subset, dtype=torch.long), eps)

    def image_embeddings(self, features: Tensor) -> Tensor:
        return l2_normalize(self.image_encoder(features))

    def gaussians(self, features: Tensor, contexts: Tensor, categories, subset: Tensor) -> tuple[Tensor, Tensor]:
        obj = features @ self.obj_proj
        q_all = self.bank.queries(categories, obj)
        idx = subset.unsqueeze(-1).expand(-1, -1, q_all.shape[-1])
        q_sel = q_all.gather(1, idx)
        visual = build_visual_tokens(features, contexts, self.visual_proj).tokens
        mu = decode_mean(q_sel, q_all, self.decoders)
        sigma = decode_std(q_sel, visual, self.decoders)
        return mu, sigma

    def forward(self, features: Tensor, contexts: Tensor, categories, draws: Draws, alpha: float | None = None) -> Stage1Output:
        alpha = self.cfg.alpha if alpha is None else alpha
        mu, sigma = self.gaussians(features, contexts, categories, draws.subset)
        z = sample_reparam(mu, sigma, self.cfg.n_samples, eps=draws.eps).z
        e_txt = fuse_prompts(z.flatten(1, 2), self.fusion)
        e_img = self.image_embeddings(features)
        l_contrast, _ = contrastive_loss(e_txt, e_img, self.temperature.log_inv_tau)
        l_div = diversity_loss(l2_normalize(mu))
        kl_mean = kl_to_standard_normal(mu, sigma).mean()
        l_prompt, l_stage1 = stage1_loss(l_contrast, l_div, kl_mean, alpha)
        return Stage1Output(e_txt, e_img, mu, sigma, l_contrast, l_div, kl_mean, l_prompt, l_stage1)

    @torch.no_grad()
    def eval_text_embeddings(self, features: Tensor, contexts: Tensor, categories, subset: Tensor) -> Tensor:
        """Deterministic text embeddings: every sample sits at the mean."""
        mu, _ = self.gaussians(features, contexts, categories, subset)
        rows = mu.unsqueeze(2).expand(-1, -1, self.cfg.n_samples, -1).flatten(1, 2)
        return fuse_prompts(rows, self.fusion)


class Stage2Model(nn.Module):
    """Linear student encoder plus a residual box head (zero-initialised)."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        gen = make_generator(cfg.seed + 101)
        self.student = nn.Parameter(randn((cfg.dim_v, cfg.dim), gen, 1.0 / cfg.dim_v))
        self.head_w = nn.Parameter(torch.zeros(cfg.dim, 7, dtype=DTYPE))
        self.head_b = nn.Parameter(torch.zeros(7, dtype=DTYPE))

    def forward(self, features: Tensor) -> Tensor:
        return features @ self.student

    def boxes(self, embeddings: Tensor, anchors: Tensor) -> Tensor:
        """Anchor boxes ``(N, 7)`` adjusted by the head: shifts, log-scales, yaw offset."""
        delta = embeddings @ self.head_w + self.head_b
        center = anchors[:, 0:3] + delta[:, 0:3]
        dims = anchors[:, 3:6] * torch.exp(delta[:, 3:6])
        yaw = anchors[:, 6:7] + delta[:, 6:7]
        return torch.cat([center, dims, yaw], dim=1)


# ---------------------------------------------------------------------------
# Checkpoints: the bank in its own file, every other parameter as rows keyed
# ``<name>/<row>`` in a per-parameter embedding file.


def save_checkpoint(model: nn.Module, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, p in model.named_parameters():
        if name.startswith("bank."):
            continue
        value = p.detach()
        shapes[name] = list(value.shape)
        rows = value.reshape(-1, value.shape[-1]) if value.ndim else value.reshape(1, 1)
        save_embedding_file(directory / f"{name}.emb", [(f"{name}/{i}", r.tolist()) for i, r in enumerate(rows)], dim=rows.shape[1])
    if isinstance(getattr(model, "bank", None), PromptBank):
        model.bank.save(directory / "bank.emb")
    (directory / "manifest.json").write_text(json.dumps({"parameters": shapes}, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(model: nn.Module, directory) -> nn.Module:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, shape in manifest["parameters"].items():
            if name not in params:
                raise ParseError(f"checkpoint parameter {name!r} not in model")
            _, matrix = load_embedding_file(directory / f"{name}.emb")
            params[name].copy_(torch.as_tensor(matrix, dtype=DTYPE).reshape(shape))
        if (directory / "bank.emb").exists() and isinstance(getattr(model, "bank", None), PromptBank):
            loaded = PromptBank.load(directory / "bank.emb")
            model.bank.positions = loaded.positions
            for c in loaded.categories:
                model.bank.descriptors[c].copy_(loaded.descriptors[c])
    return model
