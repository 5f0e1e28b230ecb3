"""Training loop, evaluation loop, and their configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DatasetIndex, augment, load_pair
from .errors import ContractError, DatasetError, NumericError
from .losses import combined_loss
from .metrics import ConfusionCounts, MetricsReport, compute_metrics, confusion_counts
from .network import NetworkConfig, build_network, forward, is_buffer, save_weights
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import Graph, Tensor, backward, grads_by_name

CSV_HEADER = "epoch,lr,train_loss,val_miou,val_dsc,val_acc,val_sen,val_spe"


@dataclass
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    schedule_period: int = 50
    batch_size: int = 8
    epochs: int = 1
    loss_weight: float = 0.6
    seed: int = 0
    augment: bool = True
    max_steps: int | None = None  # optional hard cap on optimizer steps

    def validate(self):
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ContractError("loss_weight must lie in [0, 1]")
        if self.lr_min > self.lr_max:
            raise ContractError("lr_min must not exceed lr_max")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")


@dataclass
class TrainResult:
    weights: dict[str, Tensor]        # best by validation mIoU
    last_weights: dict[str, Tensor]
    history: list[dict]
    best_epoch: int
    steps: int


class _PairCache:
    """Load-once cache of normalized (image, mask) arrays."""

    def __init__(self, dataset: DatasetIndex):
        self.dataset = dataset
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def get(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if i not in self._cache:
            self._cache[i] = load_pair(self.dataset, i)
        return self._cache[i]


def _clone_weights(weights: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.array.copy()) for k, v in weights.items()}


def train_step(weights: dict[str, Tensor], cfg: NetworkConfig, images: np.ndarray,
               masks: np.ndarray, loss_weight: float) -> tuple[float, dict[str, Tensor]]:
    """Forward/backward on one batch; returns (loss value, gradients by name)."""
    graph = Graph()
    taped = {
        name: (t if is_buffer(name) else graph.parameter(t, name))
        for name, t in weights.items()
    }
    pred = forward(taped, cfg, Tensor(images), training=True)
    loss = combined_loss(pred, Tensor(masks), loss_weight)
    value = loss.item()
    grads = grads_by_name(graph, backward(graph, loss))
    return value, grads


def _evaluate_cached(weights, cfg, cache: _PairCache, indices, batch_size: int = 4) -> MetricsReport:
    counts = ConfusionCounts()
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        images = np.stack([cache.get(i)[0] for i in chunk])
        masks = np.stack([cache.get(i)[1] for i in chunk])
        pred = forward(weights, cfg, Tensor(images), training=False)
        counts = counts + confusion_counts(pred.array, masks)
    return compute_metrics(counts)


def evaluate(weights: dict[str, Tensor], cfg: NetworkConfig, dataset: DatasetIndex,
             split: str = "val", batch_size: int = 4) -> MetricsReport:
    """Micro-averaged metrics over every pixel of a split."""
    indices = dataset.indices(split)
    if not indices:
        raise DatasetError(f"split {split!r} is empty")
    return _evaluate_cached(weights, cfg, _PairCache(dataset), indices, batch_size)


def train_loop(net_cfg: NetworkConfig, train_cfg: TrainConfig, dataset: DatasetIndex,
               run_dir=None, log=None) -> TrainResult:
    """Run the full recipe.

    Each epoch shuffles the training indices (seeded), batches, augments,
    and takes AdamW steps at the cosine-annealed rate for that epoch.
    Validation metrics are computed every epoch (on the training split when
    no validation split exists) and the best-mIoU weights are kept.  When
    ``run_dir`` is given, writes metrics.csv and weights.bin there.
    """
    net_cfg.validate()
    train_cfg.validate()
    train_idx = dataset.indices("train")
    if not train_idx:
        raise DatasetError("training split is empty")
    val_idx = dataset.splits.get("val") or train_idx

    weights = build_network(net_cfg, seed=train_cfg.seed)
    opt = AdamWState()
    shuffle_rng = np.random.default_rng(train_cfg.seed)
    aug_rng = np.random.default_rng(train_cfg.seed + 1)
    cache = _PairCache(dataset)

    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_miou = -1.0
    best_epoch = -1
    best_weights = _clone_weights(weights)
    steps = 0
    stop = False

    for epoch in range(train_cfg.epochs):
        lr = cosine_lr(epoch, train_cfg.lr_max, train_cfg.lr_min, train_cfg.schedule_period)
        order = [train_idx[i] for i in shuffle_rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            chunk = order[start : start + train_cfg.batch_size]
            batch = [cache.get(i) for i in chunk]
            if train_cfg.augment:
                batch = [augment(img, mask, aug_rng) for img, mask in batch]
            images = np.stack([b[0] for b in batch])
            masks = np.stack([b[1] for b in batch])
            value, grads = train_step(weights, net_cfg, images, masks, train_cfg.loss_weight)
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}, batch {start // train_cfg.batch_size}"
                )
            adamw_step(opt, weights, grads, lr, train_cfg.weight_decay)
            losses.append(value)
            steps += 1
            if train_cfg.max_steps is not None and steps >= train_cfg.max_steps:
                stop = True
                break

        report = _evaluate_cached(weights, net_cfg, cache, val_idx)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_miou": report.miou,
            "val_dsc": report.dsc,
            "val_acc": report.acc,
            "val_sen": report.sen,
            "val_spe": report.spe,
        }
        history.append(row)
        if log is not None:
            log(
                f"epoch={epoch} lr={lr:.6g} train_loss={row['train_loss']:.6f} "
                f"val_miou={report.miou:.4f}"
            )
        if report.miou > best_miou:
            best_miou = report.miou
            best_epoch = epoch
            best_weights = _clone_weights(weights)
        if stop:
            break

    if run_dir is not None:
        with open(run_dir / "metrics.csv", "w") as f:
            f.write(CSV_HEADER + "\n")
            for row in history:
                f.write(
                    f"{row['epoch']},{row['lr']:.10g},{row['train_loss']:.10g},"
                    f"{row['val_miou']:.6f},{row['val_dsc']:.6f},{row['val_acc']:.6f},"
                    f"{row['val_sen']:.6f},{row['val_spe']:.6f}\n"
                )
        save_weights(best_weights, run_dir / "weights.bin")

    return TrainResult(best_weights, weights, history, best_epoch, steps)
