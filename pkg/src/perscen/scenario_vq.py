"""Scenario-aware preference recognition with a shared VQ codebook."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Tensor
from .embedding import pool_sequence


@dataclass
class MLP:
    """One hidden ReLU layer; weights stored as (out, in)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x) -> Tensor:
        return ag.linear(ag.relu(ag.linear(x, self.w1, self.b1)), self.w2, self.b2)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]


@dataclass
class Codebook:
    codes: Tensor  # (C, d_z)
    beta: float = 0.25

    @property
    def size(self) -> int:
        return self.codes.shape[0]


def init_codebook(rng: np.random.Generator, size: int, dim: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(dim), size=(size, dim))


def encode_scenario_sequence(seq, proj: MLP, pooling: str = "mean", mask=None, max_len: int | None = None) -> Tensor:
    """z = MLP_proj(POOLING(seq)); ``seq`` is (..., L, d) or a list of vectors."""
    dim = proj.in_dim if pooling != "concat" else proj.in_dim // (max_len or 1)
    pooled = pool_sequence(seq, pooling, mask=mask, dim=dim, max_len=max_len)
    return proj(pooled)


def quantize(z, codebook) -> tuple[np.ndarray, np.ndarray]:
    """Nearest code index (ties -> lowest) and the code values, per row of z."""
    codes = codebook.codes.data if isinstance(codebook, Codebook) else ag.as_tensor(codebook).data
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    zd = ag.as_tensor(z).data
    single = zd.ndim == 1
    z2 = zd.reshape(1, -1) if single else zd
    if z2.shape[1] != codes.shape[1]:
        raise ValueError(f"z has dim {z2.shape[1]} but codes have dim {codes.shape[1]}")
    idx = _kernels.nearest_code(z2, codes)
    if single:
        return int(idx[0]), codes[idx[0]].copy()
    return idx, codes[idx]


def quantize_margin(z: np.ndarray, codes: np.ndarray) -> float:
    """Smallest gap between the best and second-best squared distance."""
    if codes.shape[0] < 2:
        return np.inf
    z2 = np.atleast_2d(z)
    dist = ((z2[:, None, :] - codes[None]) ** 2).sum(-1)
    srt = np.sort(dist, axis=1)
    return float((srt[:, 1] - srt[:, 0]).min())


def residual_preference(z, code) -> Tensor:
    """p = z + c_j; the code is a constant here, so dp/dz is the identity."""
    z = ag.as_tensor(z)
    c = code.data if isinstance(code, Tensor) else np.asarray(code, dtype=np.float64)
    if c.shape[-1] != z.shape[-1]:
        raise ValueError(f"residual: z dim {z.shape[-1]} != code dim {c.shape[-1]}")
    return ag.add(z, Tensor(c))


def vq_loss(z, code, beta: float) -> Tensor:
    """||sg[z] - c||^2 + beta * ||z - sg[c]||^2, summed over rows.

    ``code`` should be a tensor gathered from the codebook (e.g. ``codes[j]``)
    so the first term updates the codebook.
    """
    z, code = ag.as_tensor(z), ag.as_tensor(code)
    codebook_term = ag.tsum(ag.square(ag.sub(ag.detach(z), code)))
    commitment = ag.tsum(ag.square(ag.sub(z, ag.detach(code))))
    return ag.add(codebook_term, ag.mul(commitment, float(beta)))


def encode_scenario_context(e_s, scen: MLP) -> Tensor:
    return scen(e_s)


def fuse_preferences(p_us, p_s, fusion: MLP) -> Tensor:
    p_us, p_s = ag.as_tensor(p_us), ag.as_tensor(p_s)
    if p_us.shape[-1] + p_s.shape[-1] != fusion.in_dim:
        raise ValueError(
            f"fusion expects input {fusion.in_dim}, got {p_us.shape[-1]} + {p_s.shape[-1]}"
        )
    return fusion(ag.concat([p_us, p_s], axis=-1))
