"""Frozen stand-in encoders and the plain-text embedding file format.

The toy text encoder looks discrete tokens up in a seeded unit-norm table and
passes continuous tokens (learnable descriptors, object tokens) through
unchanged; a prompt's query vector is the mean of its token rows.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import torch
from torch import Tensor

from .errors import DimensionError, EmptyInputError, NonFiniteError, ParseError, VocabularyError
from .numerics import DTYPE, make_generator, randn

Token = Union[int, Tensor]


class Vocabulary:
    """Frozen token table with unit-norm rows."""

    def __init__(self, tokens: Sequence[str], dim: int, seed: int = 0):
        if len(set(tokens)) != len(tokens):
            raise VocabularyError("duplicate tokens in vocabulary")
        self.ids = {tok: i for i, tok in enumerate(tokens)}
        self.dim = dim
        self.seed = seed
        table = randn((len(tokens), dim), make_generator(seed))
        self.table = table / table.norm(dim=1, keepdim=True)

    def __len__(self):
        return len(self.ids)

    def id(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None


@dataclass
class PromptQuery:
    q: Tensor
    tokens: Tensor
    source: tuple = ()


def toy_encode_tokens(tokens: Sequence[Token], vocab: Vocabulary, source: tuple = ()) -> PromptQuery:
    """Encode a token sequence: table lookup for ids, pass-through for vectors."""
    if len(tokens) == 0:
        raise EmptyInputError("cannot encode an empty token list")
    rows = []
    for tok in tokens:
        if isinstance(tok, Tensor):
            if tok.shape != (vocab.dim,):
                raise DimensionError(f"continuous token has shape {tuple(tok.shape)}, expected ({vocab.dim},)")
            rows.append(tok)
        else:
            idx = int(tok)
            if not 0 <= idx < len(vocab):
                raise VocabularyError(f"token id {idx} outside vocabulary of size {len(vocab)}")
            rows.append(vocab.table[idx])
    seq = torch.stack(rows)
    return PromptQuery(seq.mean(dim=0), seq, source)


@dataclass
class VisualTokens:
    tokens: Tensor
    source: tuple = ()


def build_visual_tokens(roi_feature: Tensor, scene_context: Tensor, projection: Tensor, source: tuple = ()) -> VisualTokens:
    """Project the RoI feature and its scene context into two D-dim tokens.

    ``projection`` has shape ``(D_v, D)``. Leading batch dimensions on the
    features are kept, giving ``(..., 2, D)`` tokens.
    """
    if roi_feature.shape[-1] != projection.shape[0] or scene_context.shape[-1] != projection.shape[0]:
        raise DimensionError(
            f"projection expects features of dim {projection.shape[0]}, "
            f"got {roi_feature.shape[-1]} and {scene_context.shape[-1]}"
        )
    return VisualTokens(torch.stack([roi_feature @ projection, scene_context @ projection], dim=-2), source)


# ---------------------------------------------------------------------------
# Embedding file: JSON header line, then ``key,v1,...,vD`` rows.


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_embedding_file(path, entries: Mapping[str, Sequence[float]] | Sequence[tuple[str, Sequence[float]]], dim: int | None = None) -> None:
    items = list(entries.items()) if isinstance(entries, Mapping) else list(entries)
    if dim is None:
        if not items:
            raise DimensionError("dim is required for an empty embedding file")
        dim = len(items[0][1])
    lines = [json.dumps({"dim": int(dim), "count": len(items)})]
    for key, vec in items:
        if "," in key or "\n" in key:
            raise ParseError(f"key {key!r} contains a reserved character")
        values = np.asarray(vec, dtype=np.float64).reshape(-1)
        if values.size != dim:
            raise DimensionError(f"row {key!r} has {values.size} values, expected {dim}")
        if not np.isfinite(values).all():
            raise NonFiniteError(f"row {key!r} has non-finite values")
        lines.append(",".join([key] + [_fmt(v) for v in values]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embedding_file(path) -> tuple[list[str], np.ndarray]:
    """Return ``(keys, matrix)`` with one row per key."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text:
        raise ParseError("missing header", line=1)
    try:
        header = json.loads(text[0])
        dim = int(header["dim"])
        count = int(header["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed header: {exc}", line=1) from None
    if dim < 1 or count < 0:
        raise ParseError("header dim must be >= 1 and count >= 0", line=1)
    keys: list[str] = []
    rows: list[list[float]] = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        key, *fields = line.split(",")
        if len(fields) != dim:
            raise DimensionError(f"line {lineno}: row {key!r} has {len(fields)} values, expected {dim}")
        try:
            values = [float(v) for v in fields]
        except ValueError:
            raise ParseError("non-numeric value", line=lineno, field=key) from None
        if not all(math.isfinite(v) for v in values):
            raise NonFiniteError(f"line {lineno}: row {key!r} has non-finite values")
        keys.append(key)
        rows.append(values)
    if len(keys) != count:
        raise ParseError(f"header count {count} does not match {len(keys)} rows", line=1)
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return keys, matrix


def as_tensor(x) -> Tensor:
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)
