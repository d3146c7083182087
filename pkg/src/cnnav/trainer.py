"""SGD training, evaluation and the four-variant ablation runner."""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneConfig
from .data import Dataset, batch_indices
from .engine import Tape, Tensor, backward, softmax_cross_entropy
from .model import VARIANTS, Model, build_model, infer_model, param_lr_group
from .navigation import NavConfig, combine_predictions, compute_loss

__all__ = [
    "TrainConfig",
    "MetricsRow",
    "TrainResult",
    "AblationResult",
    "NonFiniteError",
    "sgd_step",
    "SGD",
    "train",
    "evaluate",
    "evaluate_checkpoint",
    "run_ablation",
    "write_metrics_csv",
    "METRICS_HEADER",
]

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "split", "variant", "seed", "loss", "accuracy", "acc_head1", "acc_head2", "acc_head3", "wall_ms"]


class NonFiniteError(FloatingPointError):
    """A loss or gradient went NaN/Inf during training."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr_backbone: float = 0.001
    lr_other: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "constant"
    seed: int = 0
    variant: str = "full"
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if min(self.lr_backbone, self.lr_other, self.momentum, self.weight_decay) < 0:
            raise ValueError("learning rates, momentum and weight decay must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    per_head_accuracy: Tuple[float, float, float]
    wall_ms: int = 0
    variant: str = ""
    seed: int = 0

    def as_record(self) -> list:
        heads = ["" if math.isnan(a) else repr(float(a)) for a in self.per_head_accuracy]
        return [self.epoch, self.split, self.variant, self.seed, repr(float(self.loss)), repr(float(self.accuracy)), *heads, self.wall_ms]


def write_metrics_csv(rows: Sequence[MetricsRow], dest, timing: bool = True) -> None:
    """Write metrics rows to a path or text stream; ``timing=False`` drops the wall-clock column."""
    if hasattr(dest, "write"):
        _write_metrics(rows, dest, timing)
    else:
        with open(dest, "w", newline="") as fh:
            _write_metrics(rows, fh, timing)


def _write_metrics(rows, fh, timing):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(METRICS_HEADER if timing else METRICS_HEADER[:-1])
    for r in rows:
        rec = r.as_record()
        w.writerow(rec if timing else rec[:-1])


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float, momentum: float, weight_decay: float):
    """In-place SGD update: ``v = m*v + g + wd*p``; ``p -= lr*v``. Returns (param, velocity)."""
    if not (param.shape == grad.shape == velocity.shape):
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    dt = param.dtype.type
    velocity *= dt(momentum)
    velocity += grad
    if weight_decay:
        velocity += dt(weight_decay) * param
    param -= dt(lr) * velocity
    return param, velocity


class SGD:
    """Momentum SGD with a per-parameter learning rate."""

    def __init__(self, params: Dict[str, Tensor], lrs: Dict[str, float], momentum: float, weight_decay: float):
        if set(lrs) != set(params):
            raise ValueError("every parameter needs exactly one learning rate")
        self.params = params
        self.base_lrs = dict(lrs)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.scale = 1.0
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            sgd_step(p.data, g, self.velocity[k], self.base_lrs[k] * self.scale, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def group_learning_rates(model: Model, cfg: TrainConfig) -> Dict[str, float]:
    # the baseline runs the whole network at the backbone rate
    if model.variant == "baseline":
        return {k: cfg.lr_backbone for k in model.params}
    return {k: cfg.lr_backbone if param_lr_group(k) == "backbone" else cfg.lr_other for k in model.params}


def _lr_scale(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return 0.5 * (1.0 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
    return 1.0


# --------------------------------------------------------------------------
# train / evaluate
# --------------------------------------------------------------------------


def _loss(outputs, labels) -> Tensor:
    if len(outputs.logits) == 1:
        return softmax_cross_entropy(outputs.logits[0], labels)
    return compute_loss(outputs, labels)


def _head_hits(outputs, labels) -> np.ndarray:
    hits = np.full(3, np.nan)
    for i, z in enumerate(outputs.logits):
        hits[i] = np.sum(np.argmax(z.data, axis=1) == labels)
    return hits


def evaluate(model: Model, dataset: Dataset, split: str = "test", batch_size: int = 64, epoch: int = 0) -> MetricsRow:
    """Accuracy of the combined prediction (batch norm in eval mode)."""
    idx_all = dataset.split(split)
    loss_sum, correct, heads = 0.0, 0, np.zeros(3)
    t0 = time.perf_counter()
    for idx in batch_indices(idx_all, batch_size):
        x = Tensor(dataset.images[idx].astype(next(iter(model.params.values())).dtype))
        y = dataset.labels[idx]
        out = model.forward(x, train=False)
        loss_sum += float(_loss(out, y).data) * len(idx)
        correct += int(np.sum(combine_predictions(out) == y))
        heads += _head_hits(out, y)
    n = max(len(idx_all), 1)
    return MetricsRow(
        epoch=epoch,
        split=split,
        loss=loss_sum / n,
        accuracy=correct / n,
        per_head_accuracy=tuple(heads / n),
        wall_ms=int(1000 * (time.perf_counter() - t0)),
        variant=model.variant,
    )


def evaluate_checkpoint(state: Dict[str, np.ndarray], dataset: Dataset, split: str = "test", batch_size: int = 64) -> MetricsRow:
    model = infer_model(state, dataset.images.shape[-1])
    return evaluate(model, dataset, split, batch_size)


@dataclass
class TrainResult:
    model: Model
    best_state: Dict[str, np.ndarray]
    best_epoch: int
    history: List[MetricsRow] = field(default_factory=list)

    @property
    def final_state(self) -> Dict[str, np.ndarray]:
        return self.model.state_dict()

    def final_row(self, split: str = "test") -> MetricsRow:
        return [r for r in self.history if r.split == split][-1]


def _check_finite(tape: Tape, loss: Tensor, model: Model, step: str) -> None:
    if np.isfinite(loss.data).all():
        return
    where = tape.first_non_finite() or "loss"
    raise NonFiniteError(f"non-finite loss at {step}; first non-finite tensor: {where}")


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    backbone: Optional[BackboneConfig] = None,
    nav: Optional[NavConfig] = None,
    model: Optional[Model] = None,
) -> TrainResult:
    """Train one variant; deterministic given ``cfg.seed``.

    The train row of each epoch reports the running loss and accuracy of the
    training pass itself (batch norm in train mode); the test row comes from
    :func:`evaluate`. The state with the best test accuracy is kept
    (earliest epoch wins ties).
    """
    if model is None:
        backbone = backbone or BackboneConfig(input_size=dataset.images.shape[-1], num_classes=dataset.num_classes)
        model = build_model(cfg.variant, backbone, nav, seed=cfg.seed)
    opt = SGD(model.params, group_learning_rates(model, cfg), cfg.momentum, cfg.weight_decay)
    dtype = next(iter(model.params.values())).dtype
    history: List[MetricsRow] = []
    best_acc, best_epoch, best_state = -1.0, 0, model.state_dict()

    for epoch in range(1, cfg.epochs + 1):
        opt.scale = _lr_scale(cfg, epoch)
        t0 = time.perf_counter()
        loss_sum, correct, heads, seen = 0.0, 0, np.zeros(3), 0
        for step, idx in enumerate(batch_indices(dataset.train_idx, cfg.batch_size, shuffle_seed=[cfg.seed, epoch])):
            x = Tensor(dataset.images[idx].astype(dtype))
            y = dataset.labels[idx]
            opt.zero_grad()
            with Tape() as tape:
                out = model.forward(x, train=True)
                loss = _loss(out, y)
            _check_finite(tape, loss, model, f"epoch {epoch} step {step}")
            backward(tape, loss)
            for k, p in model.params.items():
                if p.grad is not None and not np.isfinite(p.grad).all():
                    raise NonFiniteError(f"non-finite gradient for {k} at epoch {epoch} step {step}")
            opt.step()
            loss_sum += float(loss.data) * len(idx)
            correct += int(np.sum(combine_predictions(out) == y))
            heads += _head_hits(out, y)
            seen += len(idx)
        seen = max(seen, 1)
        history.append(
            MetricsRow(epoch, "train", loss_sum / seen, correct / seen, tuple(heads / seen),
                       int(1000 * (time.perf_counter() - t0)), cfg.variant, cfg.seed)
        )
        row = evaluate(model, dataset, "test", cfg.eval_batch_size, epoch)
        row.seed = cfg.seed
        history.append(row)
        if row.accuracy > best_acc:
            best_acc, best_epoch, best_state = row.accuracy, epoch, model.state_dict()
        log.info(
            "%s seed=%d epoch %d: train loss %.4f acc %.3f | test loss %.4f acc %.3f",
            cfg.variant, cfg.seed, epoch, history[-2].loss, history[-2].accuracy, row.loss, row.accuracy,
        )
    return TrainResult(model, best_state, best_epoch, history)


# --------------------------------------------------------------------------
# ablation
# --------------------------------------------------------------------------


@dataclass
class AblationResult:
    rows: List[Tuple[str, int, float]]
    histories: Dict[Tuple[str, int], List[MetricsRow]]

    def medians(self) -> Dict[str, float]:
        out = {}
        for v in VARIANTS:
            accs = [a for var, _, a in self.rows if var == v]
            if accs:
                out[v] = float(np.median(accs))
        return out

    def table(self) -> List[Tuple[str, str, float]]:
        """Per-seed rows followed by one median row per variant."""
        rows = [(v, str(s), a) for v, s, a in self.rows]
        rows += [(v, "median", m) for v, m in self.medians().items()]
        return rows

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("variant\tseed\ttest_accuracy\n")
            for v, s, a in self.table():
                fh.write(f"{v}\t{s}\t{a:.6f}\n")


def run_ablation(
    dataset: Dataset,
    base: TrainConfig,
    seeds: Sequence[int],
    backbone: Optional[BackboneConfig] = None,
    nav: Optional[NavConfig] = None,
    threads: Optional[int] = None,
    variants: Sequence[str] = VARIANTS,
) -> AblationResult:
    """Train every variant for every seed; report final-epoch test accuracy.

    ``threads`` defaults to ``$CNNAV_THREADS`` (1 if unset). Runs share only the
    read-only dataset and configs.
    """
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    if threads is None:
        threads = int(os.environ.get("CNNAV_THREADS", "1"))
    jobs = [(v, s) for s in seeds for v in variants]

    def run(job):
        v, s = job
        cfg = TrainConfig(**{**base.__dict__, "variant": v, "seed": s})
        res = train(dataset, cfg, backbone, nav)
        return job, res.final_row("test").accuracy, res.history

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    rows = sorted(((v, s, acc) for (v, s), acc, _ in results), key=lambda r: (VARIANTS.index(r[0]), r[1]))
    return AblationResult(rows, {job: hist for job, _, hist in results})
