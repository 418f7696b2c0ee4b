"""AdamW with cosine annealing, the minibatch training loop and batched inference."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core.nn import Parameter
from .core.rng import Rng
from .core.tensor import NumericError, Tensor, get_dtype, no_grad
from .data import DataError, Dataset, augment_pair, to_float
from .metrics import average_accuracy
from .model import TFormer, multi_label_loss

log = logging.getLogger(__name__)

SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    decoupled: bool = True
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    schedule: str = "cosine"
    augment: bool = True
    max_shift: int = 4
    eval_batch_size: int = 128

    def validate(self) -> None:
        from .backbone import ConfigError

        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("epochs and batch sizes must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def learning_rate(epoch: int, cfg: TrainConfig) -> float:
    """Cosine annealing from ``lr`` at epoch 0 towards 0 at epoch ``epochs``."""
    if cfg.schedule == "constant":
        return cfg.lr
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


class AdamW:
    """Adam with decoupled (default) or L2-coupled weight decay."""

    def __init__(self, params: list[Parameter], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = True):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and self.decoupled:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _inputs(model: TFormer, data: Dataset, idx: np.ndarray, derm=None, cli=None):
    cfg, dtype = model.config, get_dtype()
    derm = data.derm[idx] if derm is None else derm
    cli = data.cli[idx] if cli is None else cli
    return (
        Tensor(to_float(derm, dtype)) if cfg.use_derm else None,
        Tensor(to_float(cli, dtype)) if cfg.use_cli else None,
        Tensor(data.meta[idx]) if cfg.use_meta else None,
    )


def predict(model: TFormer, data: Dataset, batch_size: int = 128) -> np.ndarray:
    """Argmax classes ``[N, num_labels]`` over the whole dataset."""
    out = []
    with no_grad():
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            pred, _ = model(*_inputs(model, data, idx))
            out.append(pred.classes)
    return np.concatenate(out) if out else np.zeros((0, data.schema.num_labels), dtype=np.int64)


def evaluate(model: TFormer, data: Dataset, batch_size: int = 128) -> tuple[float, np.ndarray]:
    """``(avg, preds)``: mean per-label accuracy and the predictions."""
    preds = predict(model, data, batch_size)
    return average_accuracy(preds, data.labels, data.schema), preds


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_avg: float = -1.0
    best_state: dict[str, np.ndarray] = field(default_factory=dict)


LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_avg")


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            # repr keeps the full binary value so reruns compare bitwise
            w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_avg"])])


def train(model: TFormer, data: Dataset, cfg: TrainConfig, rng: Rng, log_path=None) -> TrainResult:
    """Minibatch training with per-epoch validation.

    The parameters with the highest validation avg (earliest epoch on ties)
    are loaded back into ``model`` at the end.
    """
    cfg.validate()
    train_idx = data.indices("train")
    if train_idx.size == 0:
        raise DataError("train split is empty")
    val = data.subset("val")
    opt = AdamW(model.parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay, cfg.decoupled)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        lr = learning_rate(epoch, cfg)
        erng = rng.split(f"epoch{epoch}")
        order = train_idx[erng.split("order").permutation(train_idx.size)]
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, order.size, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            derm, cli = data.derm[idx], data.cli[idx]
            if cfg.augment:
                derm, cli = augment_pair(derm, cli, erng.split(f"aug{b}"), cfg.max_shift)
            pred, _ = model(*_inputs(model, data, idx, derm, cli))
            loss = multi_label_loss(pred, data.labels[idx], data.schema)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr)
            total += value * idx.size
            seen += idx.size
        val_avg, _ = evaluate(model, val, cfg.eval_batch_size)
        row = {"epoch": epoch, "lr": lr, "train_loss": total / seen, "val_avg": val_avg}
        result.rows.append(row)
        log.info("epoch %d lr %.3g loss %.4f val_avg %.4f", epoch, lr, row["train_loss"], val_avg)
        if val_avg > result.best_val_avg:
            result.best_epoch, result.best_val_avg = epoch, val_avg
            result.best_state = copy.deepcopy(model.state_dict())
        if log_path is not None:
            write_log(result.rows, log_path)
    model.load_state_dict(result.best_state)
    return result


def train_loss_curve(result: TrainResult) -> np.ndarray:
    return np.array([r["train_loss"] for r in result.rows])


__all__ = [
    "AdamW", "LOG_COLUMNS", "TrainConfig", "TrainResult", "evaluate", "learning_rate",
    "predict", "train", "train_loss_curve", "write_log",
]
