"""Losses, negative sampling, Adam and the training loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import TrainConfig, rng_for
from .model import Perscen, match_score
from .schema import Interaction

log = logging.getLogger(__name__)

EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ScoredPair:
    user_id: int
    item_id: int
    scenario_id: int
    label: int
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score {self.score} is not in (0, 1)")


def sample_negatives(positive: Interaction, item_pool: Sequence[int], n: int, rng: np.random.Generator) -> list[Interaction]:
    """``n`` label-0 copies of ``positive`` with items drawn uniformly from the pool minus the positive item."""
    pool = np.asarray([i for i in item_pool if i != positive.item_id], dtype=np.int64)
    if pool.size == 0:
        raise ValueError("item pool has no item other than the positive")
    picks = pool[rng.integers(0, pool.size, size=n)]
    return [Interaction(positive.user_id, int(i), positive.scenario_id, positive.timestamp, 0) for i in picks]


def sample_negative_items(positives: np.ndarray, n_items: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised uniform draw over ``range(n_items)`` minus each row's positive item."""
    if n_items < 2:
        raise ValueError("need at least two items to sample negatives")
    draws = rng.integers(0, n_items - 1, size=(len(positives), n))
    return draws + (draws >= np.asarray(positives)[:, None])


def task_loss(scores, labels) -> Tensor:
    """Summed binary cross-entropy with scores clamped to [EPS, 1 - EPS].

    ``scores`` may be a tensor of probabilities or a list of ScoredPair.
    """
    if isinstance(scores, (list, tuple)) and scores and isinstance(scores[0], ScoredPair):
        labels = np.array([p.label for p in scores], dtype=np.float64)
        scores = Tensor(np.array([p.score for p in scores]))
    scores = ag.as_tensor(scores)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.data.size == 0:
        raise ValueError("task_loss needs a non-empty batch")
    p = ag.clip(scores, EPS, 1.0 - EPS)
    ll = ag.add(ag.mul(Tensor(labels), ag.log(p)), ag.mul(Tensor(1.0 - labels), ag.log(ag.sub(1.0, p))))
    return ag.mul(ag.tsum(ll), -1.0)


def total_loss(task, vq) -> Tensor:
    return ag.add(task, vq) if vq is not None else ag.as_tensor(task)


class Adam:
    """Adam with bias-corrected moments and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, self.weight_decay, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update


@dataclass
class StepResult:
    task: float
    vq: float
    total: float
    pairs: int


def batch_loss(model: Perscen, data, rows, negatives: np.ndarray | None) -> tuple[Tensor, Tensor, Tensor | None, dict]:
    """Loss over a batch of log rows plus sampled negatives for the positive ones.

    ``negatives`` is (n_pos, n) for the rows with label 1 (in row order).
    """
    users_out = model.users(data, rows.user, rows.scenario)
    pair_row = np.arange(len(rows))
    pair_item = rows.item
    pair_label = rows.label.astype(np.float64)
    if negatives is not None and negatives.size:
        pos_rows = np.flatnonzero(rows.label == 1)
        pair_row = np.concatenate([pair_row, np.repeat(pos_rows, negatives.shape[1])])
        pair_item = np.concatenate([pair_item, negatives.reshape(-1)])
        pair_label = np.concatenate([pair_label, np.zeros(negatives.size)])
    items_out = model.items(data, pair_item, rows.scenario[pair_row])
    e_u = ag.take_rows(users_out.embedding, pair_row)
    scores = match_score(e_u, items_out.embedding)
    task = task_loss(scores, pair_label)
    vq = users_out.vq_loss
    aux = {
        "pairs": len(pair_row),
        "topk_margin": min(users_out.topk_margin, items_out.topk_margin),
        "vq_margin": users_out.vq_margin,
    }
    return total_loss(task, vq), task, vq, aux


def first_nonfinite(params: dict[str, Tensor]) -> str | None:
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)) or (t.grad is not None and not np.all(np.isfinite(t.grad))):
            return name
    return None


@dataclass
class TrainResult:
    model: Perscen
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_valid: float | None = None


def snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Copy of the parameter values rounded to float32 precision."""
    return {k: t.data.astype(np.float32).astype(np.float64) for k, t in params.items()}


def train(
    model: Perscen,
    data,
    config: TrainConfig | None = None,
    log_fn: Callable[[dict], None] | None = None,
    validate: Callable[[Perscen], float] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Mini-batch training with per-epoch validation and early stopping.

    ``validate`` returns a score to maximise (Recall@K on the validation split
    by default). The best epoch's parameters, rounded to float32, are loaded
    back into ``model`` before returning.
    """
    cfg = config or model.config
    rows_all = data.training_rows()
    n_items = data.schema.n_items
    opt = Adam(model.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    if validate is None and len(data.splits.valid):
        from .retrieval import validation_recall

        def validate(m):
            return validation_recall(m, data, max(cfg.eval_ks))

    result = TrainResult(model)
    best = snapshot(model.params)
    best_score = -np.inf
    bad_epochs = 0
    step = 0
    shuffle_rng = rng_for(cfg.seed, "shuffle")
    neg_rng = rng_for(cfg.seed, "negatives")
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(rows_all))
        for start in range(0, len(order), cfg.batch_size):
            rows = rows_all[order[start : start + cfg.batch_size]]
            pos_items = rows.item[rows.label == 1]
            negatives = sample_negative_items(pos_items, n_items, cfg.negatives_per_positive, neg_rng)
            model.zero_grad()
            loss, task, vq, aux = batch_loss(model, data, rows, negatives)
            if not np.isfinite(loss.data):
                bad = first_nonfinite(model.params) or "<loss>"
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}; first bad block: {bad}")
            loss.backward()
            bad = first_nonfinite(model.params)
            if bad is not None:
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch} step {step} in block {bad}")
            opt.step()
            record = {
                "epoch": epoch,
                "step": step,
                "task_loss": float(task.data) / aux["pairs"],
                "vq_loss": float(vq.data) / len(rows) if vq is not None else 0.0,
                "total_loss": float(loss.data),
                "valid_recall": None,
            }
            result.history.append(record)
            if log_fn:
                log_fn(record)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        score = validate(model) if validate is not None else None
        summary = {"epoch": epoch, "step": step, "task_loss": None, "vq_loss": None,
                   "total_loss": None, "valid_recall": score}
        result.history.append(summary)
        if log_fn:
            log_fn(summary)
        log.info("epoch %d done, valid recall %s", epoch, score)
        if score is None or score > best_score:
            best_score = score if score is not None else best_score
            best = snapshot(model.params)
            result.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break
        if max_steps is not None and step >= max_steps:
            break
    for name, value in best.items():
        model.params[name].data = value.copy()
    result.best_valid = None if best_score == -np.inf else float(best_score)
    return result


def jsonl_logger(path):
    fh = open(path, "w", encoding="utf-8")

    def write(record: dict) -> None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()

    write.close = fh.close
    return write
