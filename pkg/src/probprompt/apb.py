"""Adaptive prompt bank: learnable scenario descriptors per category.

Every category owns ``n_prompts`` templates of ``length`` descriptor tokens.
An RoI's object token (a learned projection of its visual feature) is
inserted into each template at a position drawn once when the bank is built.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .encoders import PromptQuery, Vocabulary, load_embedding_file, save_embedding_file, toy_encode_tokens
from .errors import CategoryError, SizeError
from .numerics import DTYPE, make_generator, randn


class PromptBank(nn.Module):
    def __init__(self, categories, n_prompts: int = 32, length: int = 4, dim: int = 32, init_scale: float = 0.02, seed: int = 0):
        super().__init__()
        categories = list(categories)
        if len(set(categories)) != len(categories):
            raise ValueError("duplicate category names")
        if n_prompts < 1 or length < 1:
            raise SizeError("n_prompts and length must be >= 1")
        if init_scale < 0:
            raise ValueError("init_scale must be >= 0")
        self.categories = categories
        self.n_prompts = n_prompts
        self.length = length
        self.dim = dim
        gen = make_generator(seed)
        rng = np.random.default_rng(seed)
        self.descriptors = nn.ParameterDict(
            {c: nn.Parameter(randn((n_prompts, length, dim), gen, init_scale)) for c in categories}
        )
        self.positions = {c: [int(p) for p in rng.integers(0, length + 1, size=n_prompts)] for c in categories}

    def _check(self, category: str) -> None:
        if category not in self.descriptors:
            raise CategoryError(f"category {category!r} not in prompt bank")

    def templates(self, category: str, obj_token: Tensor) -> list[Tensor]:
        """The ``n_prompts`` token sequences of length ``length + 1``."""
        self._check(category)
        desc = self.descriptors[category]
        out = []
        for t, pos in enumerate(self.positions[category]):
            out.append(torch.cat([desc[t, :pos], obj_token.unsqueeze(0), desc[t, pos:]], dim=0))
        return out

    def queries(self, categories: list[str], obj_tokens: Tensor) -> Tensor:
        """Mean-pooled template queries for a batch, shape ``(N, n_prompts, D)``.

        Equivalent to encoding every template with the toy encoder; the mean
        does not depend on where the object token sits.
        """
        for c in set(categories):
            self._check(c)
        sums = torch.stack([self.descriptors[c].sum(dim=1) for c in categories])
        return (sums + obj_tokens.unsqueeze(1)) / (self.length + 1)

    def save(self, path) -> None:
        path = Path(path)
        rows = []
        for c in self.categories:
            desc = self.descriptors[c].detach()
            for t in range(self.n_prompts):
                for a in range(self.length):
                    rows.append((f"cat/{c}/t{t}/a{a}", desc[t, a].tolist()))
        save_embedding_file(path, rows, dim=self.dim)
        sidecar = {"n_prompts": self.n_prompts, "length": self.length, "positions": self.positions}
        path.with_suffix(".positions.json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PromptBank":
        path = Path(path)
        keys, matrix = load_embedding_file(path)
        sidecar = json.loads(path.with_suffix(".positions.json").read_text(encoding="utf-8"))
        categories = list(sidecar["positions"])
        bank = cls(categories, sidecar["n_prompts"], sidecar["length"], matrix.shape[1], init_scale=0.0)
        bank.positions = {c: [int(p) for p in v] for c, v in sidecar["positions"].items()}
        index = {k: i for i, k in enumerate(keys)}
        with torch.no_grad():
            for c in categories:
                for t in range(bank.n_prompts):
                    for a in range(bank.length):
                        bank.descriptors[c][t, a] = torch.as_tensor(matrix[index[f"cat/{c}/t{t}/a{a}"]], dtype=DTYPE)
        return bank


@dataclass
class InstancePromptSet:
    roi: tuple
    obj_token: Tensor
    templates: list[Tensor]
    positions: list[int]
    queries: list[PromptQuery]

    @property
    def q(self) -> Tensor:
        return torch.stack([pq.q for pq in self.queries])


def instantiate_prompts(bank: PromptBank, category: str, feature: Tensor, o_projection: Tensor, vocab: Vocabulary, roi=()) -> InstancePromptSet:
    bank._check(category)
    obj = feature @ o_projection
    templates = bank.templates(category, obj)
    queries = [toy_encode_tokens(list(tpl), vocab, source=(roi, t)) for t, tpl in enumerate(templates)]
    return InstancePromptSet(roi, obj, templates, list(bank.positions[category]), queries)


def sample_prompt_subset(prompts, k: int, rng: np.random.Generator) -> np.ndarray:
    """``k`` distinct template indices, uniform without replacement.

    ``prompts`` is an :class:`InstancePromptSet` or the template count.
    """
    n_prompts = len(prompts.queries) if isinstance(prompts, InstancePromptSet) else int(prompts)
    if k > n_prompts:
        raise SizeError(f"cannot sample {k} of {n_prompts} prompts")
    return rng.choice(n_prompts, size=k, replace=False)
