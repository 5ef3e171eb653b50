"""User and item towers, parameter layout and matching scores."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TrainConfig, rng_for
from .data import BEHAVIOR_SLOT
from .embedding import FieldSlot, embed_entity, embed_scenario, embed_sparse, init_table
from .feature_graph import AdjacencyStack, GeneratorParams, run_feature_graph
from .scenario_vq import (
    MLP,
    Codebook,
    encode_scenario_sequence,
    encode_scenario_context,
    fuse_preferences,
    init_codebook,
    quantize,
    quantize_margin,
    residual_preference,
    vq_loss,
)
from .schema import PAD, FeatureSchema
from .transfer import FusionParams, GluLayerParams, final_fusion, flatten_fields, run_glu_stack


def entity_slots(schema: FeatureSchema, entity: str) -> list[FieldSlot]:
    slots = []
    for f in schema.fields(entity):
        table = f"{entity}.emb.{f.name}" if f.kind != "dense" else None
        slots.append(FieldSlot(f.name, f.kind, table, f.vocab_size))
    if entity == "user":
        # item ids in histories share the item-id table
        slots.append(FieldSlot(BEHAVIOR_SLOT, "sequence", f"item.emb.{schema.item[0].name}", schema.n_items))
    return slots


def _mlp_shapes(prefix: str, d_in: int, hidden: int, d_out: int) -> dict:
    return {
        f"{prefix}.w1": (hidden, d_in),
        f"{prefix}.b1": (hidden,),
        f"{prefix}.w2": (d_out, hidden),
        f"{prefix}.b2": (d_out,),
    }


def param_shapes(schema: FeatureSchema, cfg: TrainConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape for every learnable block under ``cfg``."""
    shapes: dict[str, tuple[int, ...]] = {}
    d = cfg.d
    seq_in = d * cfg.max_len if cfg.pooling == "concat" else d
    for entity in ("user", "item"):
        for f in schema.fields(entity):
            if f.kind == "dense":
                shapes[f"{entity}.dense.{f.name}"] = (d,)
            else:
                shapes[f"{entity}.emb.{f.name}"] = (f.vocab_size, d)
    shapes["scenario.emb"] = (schema.n_scenarios, d)

    for entity in ("user", "item"):
        slots = entity_slots(schema, entity)
        n = len(slots)
        d_h = n * d
        if cfg.pooling == "concat":
            for s in slots:
                if s.kind == "sequence":
                    shapes[f"{entity}.concat.{s.name}"] = (d, d * cfg.max_len)
        if cfg.no_gnn:
            shapes.update(_mlp_shapes(f"{entity}.mlp", d_h, cfg.hidden_pref, d_h))
        else:
            if cfg.shared_graph:
                shapes[f"{entity}.graph.shared_adj"] = (n, n)
            else:
                h = cfg.hidden_gen
                shapes[f"{entity}.gen.w1"] = (n, h, n * d + n)
                shapes[f"{entity}.gen.b1"] = (n, h)
                shapes[f"{entity}.gen.w2"] = (n, n, h)
                shapes[f"{entity}.gen.b2"] = (n, n)
            for layer in range(cfg.layers):
                shapes[f"{entity}.gnn.{layer}"] = (d, d)
        if not cfg.no_glu:
            for layer in range(cfg.layers):
                g_in = d_h + (d_h if layer == 0 else cfg.d_glu)
                shapes[f"{entity}.glu.{layer}.w_r1"] = (cfg.d_glu, g_in)
                shapes[f"{entity}.glu.{layer}.w_r2"] = (cfg.d_glu, cfg.d_match)
                shapes[f"{entity}.glu.{layer}.w_r3"] = (cfg.d_glu, g_in)
                shapes[f"{entity}.glu.{layer}.w_r4"] = (cfg.d_glu, cfg.d_match)
        g_dim = d_h if cfg.no_glu else cfg.d_glu
        shapes[f"{entity}.fusion.g_proj"] = (cfg.d_match, g_dim)
        shapes[f"{entity}.fusion.w_o"] = (1, 2 * cfg.d_match)

    if not cfg.no_spec_sequence:
        shapes.update(_mlp_shapes("pref.proj", seq_in, cfg.hidden_pref, cfg.d_z))
    shapes.update(_mlp_shapes("pref.scen", d, cfg.hidden_pref, cfg.d_z))
    shapes.update(_mlp_shapes("pref.fusion", 2 * cfg.d_z, cfg.hidden_pref, cfg.d_match))
    if cfg.use_vq:
        shapes["vq.codebook"] = (cfg.codebook_size, cfg.d_z)
    shapes.update(_mlp_shapes("item.scen", d, cfg.hidden_pref, cfg.d_match))
    return shapes


def _init_block(rng: np.random.Generator, name: str, shape: tuple[int, ...]) -> np.ndarray:
    if name == "vq.codebook":
        return init_codebook(rng, *shape)
    if ".emb." in name or name == "scenario.emb":
        return init_table(rng, shape[0], shape[1])
    if ".dense." in name:
        return init_table(rng, 1, shape[0])[0]
    bound = 1.0 / np.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


def init_params(schema: FeatureSchema, cfg: TrainConfig) -> dict[str, Tensor]:
    """Initialise every block; values are rounded to float32 so checkpoints are exact."""
    rng = rng_for(cfg.seed, "init")
    params = {}
    fan_in = 1
    for name, shape in param_shapes(schema, cfg).items():
        if name.rsplit(".", 1)[-1] in ("b1", "b2"):
            # biases follow their weight block, which precedes them in the layout
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        else:
            value = _init_block(rng, name, shape)
            fan_in = shape[-1]
        value = np.asarray(value, dtype=np.float32).astype(np.float64)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


@dataclass
class TowerOutput:
    embedding: Tensor
    vq_loss: Tensor | None = None
    p_hat: Tensor | None = None
    z: Tensor | None = None
    code_index: np.ndarray | None = None
    hidden: list = field(default_factory=list)
    adjacency: AdjacencyStack | None = None
    topk_margin: float = np.inf
    vq_margin: float = np.inf


class Perscen:
    """Two-tower model; parameters live in ``self.params`` (name -> Tensor)."""

    def __init__(self, schema: FeatureSchema, config: TrainConfig, params: dict[str, Tensor] | None = None):
        self.schema = schema
        self.config = config
        self.user_slots = entity_slots(schema, "user")
        self.item_slots = entity_slots(schema, "item")
        self.params = params if params is not None else init_params(schema, config)
        expected = param_shapes(schema, config)
        missing = [k for k in expected if k not in self.params]
        if missing:
            raise KeyError(f"missing parameter blocks: {missing}")

    # -- parameter views -------------------------------------------------------
    def _mlp(self, prefix: str) -> MLP:
        p = self.params
        return MLP(p[f"{prefix}.w1"], p[f"{prefix}.b1"], p[f"{prefix}.w2"], p[f"{prefix}.b2"])

    def generator(self, entity: str) -> GeneratorParams:
        p = self.params
        return GeneratorParams(p[f"{entity}.gen.w1"], p[f"{entity}.gen.b1"], p[f"{entity}.gen.w2"], p[f"{entity}.gen.b2"])

    def glu_params(self, entity: str) -> list[GluLayerParams]:
        p = self.params
        return [
            GluLayerParams(*(p[f"{entity}.glu.{l}.{w}"] for w in ("w_r1", "w_r2", "w_r3", "w_r4")))
            for l in range(self.config.layers)
        ]

    def fusion_params(self, entity: str) -> FusionParams:
        return FusionParams(self.params[f"{entity}.fusion.g_proj"], self.params[f"{entity}.fusion.w_o"])

    @property
    def codebook(self) -> Codebook | None:
        if "vq.codebook" not in self.params:
            return None
        return Codebook(self.params["vq.codebook"], self.config.beta)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- towers ----------------------------------------------------------------
    def _shared_preferences(self, entity: str, inputs: dict):
        cfg = self.config
        slots = self.user_slots if entity == "user" else self.item_slots
        fields = embed_entity(slots, inputs, self.params, entity, cfg.pooling)
        if cfg.no_gnn:
            flat = flatten_fields(fields)
            mixed = ag.reshape(self._mlp(f"{entity}.mlp")(flat), fields.shape)
            return [fields] + [mixed] * cfg.layers, None
        gnn = [self.params[f"{entity}.gnn.{l}"] for l in range(cfg.layers)]
        shared = self.params.get(f"{entity}.graph.shared_adj") if cfg.shared_graph else None
        out = run_feature_graph(
            fields, None if cfg.shared_graph else self.generator(entity), gnn, cfg.layers,
            cfg.k_sparse_for(len(slots)), base_adjacency=shared,
        )
        return out.hidden, out.adjacency

    def _transfer(self, entity: str, hidden: list, p_hat: Tensor) -> Tensor:
        if self.config.no_glu:
            g_last = flatten_fields(hidden[-1])
        else:
            g_last = run_glu_stack(hidden, p_hat, self.glu_params(entity))
        return final_fusion(g_last, p_hat, self.fusion_params(entity))

    def user_tower(self, inputs: dict, scenarios, scenario_seq: np.ndarray) -> TowerOutput:
        """Scenario-aware user vectors.

        ``inputs`` maps user slot names to batch arrays; ``scenario_seq`` holds
        each row's PAD-padded history in its scenario.
        """
        cfg = self.config
        hidden, adjacency = self._shared_preferences("user", inputs)
        e_s = embed_scenario(self.params["scenario.emb"], scenarios)
        p_s = encode_scenario_context(e_s, self._mlp("pref.scen"))
        out = TowerOutput(embedding=None, hidden=hidden, adjacency=adjacency)
        if adjacency is not None:
            out.topk_margin = adjacency.topk_margin
        batch = e_s.shape[0]
        if cfg.no_spec_sequence:
            p_us = Tensor(np.zeros((batch, cfg.d_z)))
        else:
            seq = np.asarray(scenario_seq, dtype=np.int64)
            mask = seq != PAD
            item_table = self.params[f"item.emb.{self.schema.item[0].name}"]
            vecs = embed_sparse(item_table, np.where(mask, seq, 0))
            z = encode_scenario_sequence(vecs, self._mlp("pref.proj"), cfg.pooling, mask=mask)
            out.z = z
            if cfg.use_vq:
                book = self.codebook
                idx, codes = quantize(z, book)
                picked = ag.take_rows(book.codes, idx)
                p_us = residual_preference(z, codes)
                out.vq_loss = vq_loss(z, picked, book.beta)
                out.code_index = idx
                out.vq_margin = quantize_margin(z.data, book.codes.data)
            else:
                p_us = z
        p_hat = fuse_preferences(p_us, p_s, self._mlp("pref.fusion"))
        out.p_hat = p_hat
        out.embedding = self._transfer("user", hidden, p_hat)
        return out

    def item_tower(self, inputs: dict, scenarios) -> TowerOutput:
        """Item vectors; they depend only on (item, scenario)."""
        hidden, adjacency = self._shared_preferences("item", inputs)
        e_s = embed_scenario(self.params["scenario.emb"], scenarios)
        p_hat = self._mlp("item.scen")(e_s)
        out = TowerOutput(embedding=self._transfer("item", hidden, p_hat), p_hat=p_hat,
                          hidden=hidden, adjacency=adjacency)
        if adjacency is not None:
            out.topk_margin = adjacency.topk_margin
        return out

    # -- convenience over prepared data ---------------------------------------
    def users(self, data, users, scenarios) -> TowerOutput:
        users = np.asarray(users, dtype=np.int64)
        scenarios = np.broadcast_to(np.asarray(scenarios, dtype=np.int64), users.shape)
        return self.user_tower(data.user_inputs(users), scenarios, data.scenario_sequences(users, scenarios))

    def items(self, data, items, scenarios) -> TowerOutput:
        items = np.asarray(items, dtype=np.int64)
        scenarios = np.broadcast_to(np.asarray(scenarios, dtype=np.int64), items.shape)
        return self.item_tower(data.item_inputs(items), scenarios)


def match_score(e_u, e_v) -> Tensor:
    """sigmoid(<e_u, e_v>) over the last axis."""
    e_u, e_v = ag.as_tensor(e_u), ag.as_tensor(e_v)
    if e_u.shape[-1] != e_v.shape[-1]:
        raise ValueError(f"match_score: dims {e_u.shape[-1]} and {e_v.shape[-1]} differ")
    return ag.sigmoid(ag.tsum(ag.mul(e_u, e_v), axis=-1))
