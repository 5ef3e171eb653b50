"""Entity-specific feature graphs and the lightweight GNN over them.

Shapes: field embeddings are (B, N, d); adjacencies are (B, N, N). Unbatched
(N, d) / (N, N) inputs are accepted by the single-entity helpers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import autograd as ag
from .autograd import Tensor


@dataclass
class GeneratorParams:
    """Per-field MLPs stacked on a leading field axis.

    w1: (N, H, N*d + N), b1: (N, H), w2: (N, N, H), b2: (N, N)
    """

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def n_fields(self) -> int:
        return self.w1.shape[0]


@dataclass
class AdjacencyStack:
    raw: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    topk_margin: float = np.inf


@dataclass
class FeatureGraphOutput:
    hidden: list  # h^(0..L), each (B, N, d)
    adjacency: AdjacencyStack


def generate_base_adjacency(fields: Tensor, gen: GeneratorParams) -> Tensor:
    """Row m of A^(1) is MLP_m([e_1, ..., e_N, one_hot(m)])."""
    fields = ag.as_tensor(fields)
    single = fields.ndim == 2
    if single:
        fields = ag.reshape(fields, (1, *fields.shape))
    b, n, d = fields.shape
    if gen.n_fields != n or gen.w1.shape[2] != n * d + n:
        raise ValueError(f"generator expects {gen.n_fields} fields with input {gen.w1.shape[2]}, got {n}x{d}")
    flat = ag.reshape(fields, (b, n * d))
    eye = np.eye(n)
    rows = []
    for m in range(n):
        x = ag.concat([flat, Tensor(np.broadcast_to(eye[m], (b, n)))], axis=1)
        hidden = ag.relu(ag.linear(x, gen.w1[m], gen.b1[m]))
        rows.append(ag.linear(hidden, gen.w2[m], gen.b2[m]))
    adj = ag.stack(rows, axis=1)
    return ag.reshape(adj, (n, n)) if single else adj


def compose_higher_order(prev, base) -> Tensor:
    """A^(l) = A^(l-1) @ A^(1)."""
    prev, base = ag.as_tensor(prev), ag.as_tensor(base)
    if prev.shape[-2:] != base.shape[-2:] or prev.shape[-1] != prev.shape[-2]:
        raise ValueError(f"compose: incompatible shapes {prev.shape} and {base.shape}")
    return ag.bmm(prev, base)


def refine_adjacency(adj, k_sparse: int, return_margin: bool = False):
    """Row softmax, per-row top-k with renormalisation, then (A + A^T) / 2.

    The top-k mask is a constant for differentiation. With ``return_margin``
    also returns the smallest gap between the k-th and (k+1)-th largest
    softmax value over all rows (inf when nothing is dropped).
    """
    if k_sparse < 1:
        raise ValueError("k_sparse must be >= 1")
    adj = ag.as_tensor(adj)
    n = adj.shape[-1]
    probs = ag.softmax(adj, axis=-1)
    flat = probs.data.reshape(-1, n)
    mask = _kernels.topk_mask(flat, k_sparse).reshape(probs.shape)
    kept = ag.mul(probs, Tensor(mask.astype(np.float64)))
    rowsum = ag.tsum(kept, axis=-1, keepdims=True)
    normed = ag.div(kept, rowsum)
    axes = (*range(adj.ndim - 2), adj.ndim - 1, adj.ndim - 2)
    out = ag.mul(ag.add(normed, ag.transpose(normed, axes)), 0.5)
    if not return_margin:
        return out
    margin = np.inf
    if k_sparse < n:
        srt = -np.sort(-flat, axis=1)
        margin = float((srt[:, k_sparse - 1] - srt[:, k_sparse]).min())
    return out, margin


def gnn_layer(h_prev, h0, adj, weight) -> Tensor:
    """h_m^(l) = h_m^(l-1) * sum_n adj[m, n] * (W h_n^(0))."""
    h_prev, h0, adj, weight = (ag.as_tensor(t) for t in (h_prev, h0, adj, weight))
    if h_prev.shape != h0.shape:
        raise ValueError(f"gnn_layer: h_prev {h_prev.shape} != h0 {h0.shape}")
    n, d = h0.shape[-2:]
    if adj.shape[-2:] != (n, n) or weight.shape != (d, d):
        raise ValueError(f"gnn_layer: adjacency {adj.shape} / weight {weight.shape} do not fit {n}x{d} fields")
    transformed = ag.linear(h0, weight)
    return ag.mul(h_prev, ag.bmm(adj, transformed))


def run_feature_graph(
    fields: Tensor,
    gen: GeneratorParams | None,
    gnn_weights: list,
    layers: int,
    k_sparse: int,
    base_adjacency: Tensor | None = None,
) -> FeatureGraphOutput:
    """Full stack: A^(1), powers, refinement, and ``layers`` GNN layers.

    Layer l consumes the refined adjacency of order l-1; the first layer uses
    refine(A^(1)). ``base_adjacency`` (N, N) replaces the generator with one
    matrix shared by every entity.
    """
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if len(gnn_weights) != layers:
        raise ValueError(f"expected {layers} GNN weights, got {len(gnn_weights)}")
    fields = ag.as_tensor(fields)
    if base_adjacency is None:
        base = generate_base_adjacency(fields, gen)
    else:
        base = ag.mul(Tensor(np.ones(fields.shape[:-2] + (1, 1))), base_adjacency)
    stack = AdjacencyStack()
    current = base
    for layer in range(layers):
        if layer:
            current = compose_higher_order(current, base)
        refined, margin = refine_adjacency(current, k_sparse, return_margin=True)
        stack.raw.append(current)
        stack.refined.append(refined)
        if layer < layers - 1 or layers == 1:
            stack.topk_margin = min(stack.topk_margin, margin)
    hidden = [fields]
    for layer in range(layers):
        adj = stack.refined[max(layer - 1, 0)]
        hidden.append(gnn_layer(hidden[-1], fields, adj, gnn_weights[layer]))
    return FeatureGraphOutput(hidden, stack)
