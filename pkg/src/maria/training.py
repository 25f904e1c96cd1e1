"""Adam training with dropout regularizers and validation early stopping."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import MultimodalDataset
from .masking import regularize
from .metrics import UndefinedMetricError, auc
from .model import LateFusion

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 300
    patience: int = 25
    seed: int = 0
    apply_prob: float = 0.5
    regularize: bool = True
    class_weighting: bool = False

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in [0, max_epochs]")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValueError("apply_prob must lie in [0, 1]")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_auc: list[float | None] = field(default_factory=list)
    best_epoch: int = -1
    members: list["TrainReport"] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[nx.Tensor], grads: list[np.ndarray | None], state: AdamState, lr: float):
    """One bias-corrected Adam update, in place."""
    if not state.m:
        state.m = [np.zeros_like(p.values) for p in params]
        state.v = [np.zeros_like(p.values) for p in params]
    state.step += 1
    c1 = 1.0 - BETA1**state.step
    c2 = 1.0 - BETA2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = 0.0
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * np.square(g)
        p.values = p.values - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


# ---------------------------------------------------------------------- loops


def _class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    return np.where(counts > 0, labels.size / (n_classes * np.maximum(counts, 1)), 0.0)


def _eval_loss(model, ds: MultimodalDataset, idx: np.ndarray, weights) -> tuple[float, float | None]:
    with nx.no_grad():
        logits = model.forward(ds.batch(idx))
        loss = nx.cross_entropy(logits, ds.labels[idx], weights).item()
    try:
        score = auc(nx.softmax(logits.values), ds.labels[idx])
    except UndefinedMetricError:
        score = None
    return loss, score


def _fit(model, ds: MultimodalDataset, train_idx, val_idx, cfg: TrainConfig,
         rng: np.random.Generator) -> TrainReport:
    train_idx = np.asarray(train_idx, dtype=np.intp)
    val_idx = np.asarray(val_idx, dtype=np.intp)
    if train_idx.size == 0:
        raise ValueError("empty training split")
    if (ds.subset(train_idx).observed_counts() == 0).any():
        raise ValueError("every training sample needs at least one observed feature")
    weights = _class_weights(ds.labels[train_idx], ds.n_classes) if cfg.class_weighting else None
    params = model.parameters()
    state = AdamState()
    report = TrainReport()
    best_loss, best_state, since_best = math.inf, model.state_dict(), 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(train_idx)
        total, seen = 0.0, 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = ds.batch(idx)
            if cfg.regularize and cfg.apply_prob > 0:
                batch = type(batch)(batch.values, regularize(batch.observed, cfg.apply_prob, rng))
            loss = nx.cross_entropy(model.forward(batch), ds.labels[idx], weights)
            if not np.isfinite(loss.values):
                nx.current_tape().clear()
                raise DivergenceError(f"non-finite loss {loss.item()} at epoch {epoch}, batch start {start}")
            nx.backward(loss)
            adam_step(params, [p.grad for p in params], state, cfg.learning_rate)
            model.zero_grad()
            total += loss.item() * idx.size
            seen += idx.size
        report.train_loss.append(total / seen)
        if val_idx.size:
            val_loss, val_auc = _eval_loss(model, ds, val_idx, weights)
        else:
            val_loss, val_auc = report.train_loss[-1], None
        report.val_loss.append(val_loss)
        report.val_auc.append(val_auc)
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, model.state_dict(), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
    model.load_state_dict(best_state)
    report.wall_time = time.perf_counter() - t0
    log.debug("trained %d epochs, best %d (val loss %.4f)", report.epochs_run, report.best_epoch, best_loss)
    return report


def train(model, dataset: MultimodalDataset, split, cfg: TrainConfig = TrainConfig()):
    """Fit ``model`` on ``split = (train_idx, val_idx[, ...])``.

    Regularizers act on per-batch copies of the observed flags, so
    ``dataset`` is never modified. The parameters with the lowest
    validation loss are restored before returning ``(model, report)``.
    """
    train_idx, val_idx = (np.asarray(s, dtype=np.intp) for s in split[:2])
    rng = np.random.default_rng(cfg.seed)
    if not isinstance(model, LateFusion):
        return model, _fit(model, dataset, train_idx, val_idx, cfg, rng)

    report = TrainReport()
    t0 = time.perf_counter()
    for i, member in enumerate(model.members):
        single = dataset.single(i)
        present = single.modalities[0].present
        tr, va = train_idx[present[train_idx]], val_idx[present[val_idx]]
        member_rng = np.random.default_rng([cfg.seed, i])
        report.members.append(_fit(member, single, tr, va, cfg, member_rng))
    report.wall_time = time.perf_counter() - t0
    return model, report
