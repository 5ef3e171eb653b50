"""Progressive scenario-aware GLU stack and the final gated fusion."""

from __future__ import annotations

from dataclasses import dataclass

from . import autograd as ag
from .autograd import Tensor


@dataclass
class GluLayerParams:
    """Weights stored as (out, in): w_r1/w_r3 take [h, g_prev], w_r2/w_r4 take p_hat."""

    w_r1: Tensor
    w_r2: Tensor
    w_r3: Tensor
    w_r4: Tensor


@dataclass
class FusionParams:
    g_proj: Tensor  # (D_match, D_g)
    w_o: Tensor  # (1, 2 * D_match)


def glu_layer(h_l, g_prev, p_hat, params: GluLayerParams) -> Tensor:
    x = ag.concat([ag.as_tensor(h_l), ag.as_tensor(g_prev)], axis=-1)
    p_hat = ag.as_tensor(p_hat)
    raw = ag.add(ag.linear(x, params.w_r1), ag.linear(p_hat, params.w_r2))
    gate = ag.add(ag.linear(x, params.w_r3), ag.linear(p_hat, params.w_r4))
    return ag.mul(raw, ag.sigmoid(gate))


def glu_preactivations(h_l, g_prev, p_hat, params: GluLayerParams):
    """Raw and gate pre-activations (numpy) for saturation diagnostics."""
    x = ag.concat([ag.as_tensor(h_l), ag.as_tensor(g_prev)], axis=-1)
    raw = ag.linear(x, params.w_r1).data + ag.linear(p_hat, params.w_r2).data
    gate = ag.linear(x, params.w_r3).data + ag.linear(p_hat, params.w_r4).data
    return raw, gate


def flatten_fields(h: Tensor) -> Tensor:
    h = ag.as_tensor(h)
    return ag.reshape(h, (*h.shape[:-2], h.shape[-2] * h.shape[-1]))


def run_glu_stack(hidden: list, p_hat, params: list) -> Tensor:
    """g^(0) = flat(h^(0)); g^(l) = GLU(flat(h^(l)), g^(l-1), p_hat)."""
    if len(hidden) != len(params) + 1:
        raise ValueError(f"hidden stack has {len(hidden) - 1} layers but {len(params)} GLU layers given")
    g = flatten_fields(hidden[0])
    for h, layer in zip(hidden[1:], params):
        g = glu_layer(flatten_fields(h), g, p_hat, layer)
    return g


def fusion_gate(g_l, p_hat, params: FusionParams) -> Tensor:
    g_proj = ag.linear(g_l, params.g_proj)
    return ag.sigmoid(ag.linear(ag.concat([g_proj, ag.as_tensor(p_hat)], axis=-1), params.w_o))


def final_fusion(g_l, p_hat, params: FusionParams) -> Tensor:
    """alpha = sigmoid(W_o [g', p_hat]); e = alpha * g' + (1 - alpha) * p_hat."""
    p_hat = ag.as_tensor(p_hat)
    g_proj = ag.linear(g_l, params.g_proj)
    if g_proj.shape[-1] != p_hat.shape[-1]:
        raise ValueError(f"projected GLU state dim {g_proj.shape[-1]} != p_hat dim {p_hat.shape[-1]}")
    alpha = ag.sigmoid(ag.linear(ag.concat([g_proj, p_hat], axis=-1), params.w_o))
    return ag.add(ag.mul(alpha, g_proj), ag.mul(ag.sub(1.0, alpha), p_hat))
