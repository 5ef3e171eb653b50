"""Sparse, dense and sequence field embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .schema import PAD

POOLING = ("mean", "sum", "max", "concat")


@dataclass(frozen=True)
class FieldSlot:
    """One node of an entity's feature graph and the table that embeds it."""

    name: str
    kind: str
    table: str | None = None  # embedding table name (sparse/sequence)
    vocab_size: int | None = None


def init_table(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(rows, dim))


def embed_sparse(table: Tensor, index) -> Tensor:
    idx = np.asarray(index, dtype=np.int64)
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        bad = idx[(idx < 0) | (idx >= rows)].ravel()[0]
        raise IndexError(f"embedding index {int(bad)} out of range [0, {rows})")
    return ag.take_rows(table, idx)


def embed_scenario(table: Tensor, scenario_id) -> Tensor:
    return embed_sparse(table, scenario_id)


def embed_dense(weight: Tensor, value) -> Tensor:
    v = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("dense feature value is not finite")
    return ag.mul(Tensor(v[..., None]), weight) if v.ndim else ag.mul(weight, float(v))


def pool_sequence(
    items,
    strategy: str = "mean",
    mask: np.ndarray | None = None,
    dim: int | None = None,
    max_len: int | None = None,
) -> Tensor:
    """Pool a (..., L, d) stack of item vectors along L.

    ``mask`` marks valid positions (all valid when omitted). A list of vectors
    is accepted too; for ``concat`` it is padded/truncated to ``max_len``.
    Empty input pools to zeros of the strategy's output size.
    """
    if strategy not in POOLING:
        raise ValueError(f"unknown pooling strategy {strategy!r}")
    if isinstance(items, (list, tuple)):
        items = _stack_list(items, dim, strategy, max_len)
        if items is None:
            out_dim = dim * (max_len or 1) if strategy == "concat" else dim
            return Tensor(np.zeros(out_dim))
    items = ag.as_tensor(items)
    if mask is None:
        mask = np.ones(items.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if strategy == "max":
        return ag.masked_max(items, mask[..., None], axis=-2)
    masked = ag.mul(items, Tensor(mask[..., None].astype(np.float64)))
    if strategy == "concat":
        return ag.reshape(masked, (*items.shape[:-2], items.shape[-2] * items.shape[-1]))
    total = ag.tsum(masked, axis=-2)
    if strategy == "sum":
        return total
    count = np.maximum(mask.sum(axis=-1, keepdims=True), 1).astype(np.float64)
    return ag.div(total, Tensor(count))


def _stack_list(items: Sequence, dim, strategy, max_len):
    vecs = [ag.as_tensor(v) for v in items]
    if strategy == "concat":
        if max_len is None:
            raise ValueError("concat pooling needs max_len")
        vecs = vecs[-max_len:]
    if not vecs:
        if dim is None:
            raise ValueError("pooling an empty list needs dim")
        return None
    out = ag.stack(vecs, axis=0)
    if strategy == "concat" and len(vecs) < max_len:
        pad = Tensor(np.zeros((max_len - len(vecs), out.shape[-1])))
        out = ag.concat([out, pad], axis=0)
    return out


def embed_sequence(table: Tensor, ids: np.ndarray, strategy: str) -> Tensor:
    """Pool PAD-padded id rows of shape (B, L) through ``table``."""
    ids = np.asarray(ids, dtype=np.int64)
    mask = ids != PAD
    vecs = embed_sparse(table, np.where(mask, ids, 0))
    return pool_sequence(vecs, strategy, mask=mask)


def embed_entity(slots: Sequence[FieldSlot], batch: dict, params: dict, prefix: str, strategy: str) -> Tensor:
    """Embed every field of a batch of entities into a (B, N_f, d) tensor.

    ``batch[name]`` holds ids (sparse), values (dense) or PAD-padded id rows
    (sequence). Dense fields use ``params[f"{prefix}.dense.{name}"]``;
    concat-pooled sequences are mapped back to d by
    ``params[f"{prefix}.concat.{name}"]``.
    """
    out = []
    for slot in slots:
        if slot.kind == "sparse":
            vec = embed_sparse(params[slot.table], batch[slot.name])
        elif slot.kind == "dense":
            vec = embed_dense(params[f"{prefix}.dense.{slot.name}"], batch[slot.name])
        else:
            vec = embed_sequence(params[slot.table], batch[slot.name], strategy)
            if strategy == "concat":
                vec = ag.linear(vec, params[f"{prefix}.concat.{slot.name}"])
        out.append(vec)
    return ag.stack(out, axis=-2)
