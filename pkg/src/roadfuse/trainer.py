"""Training loop: cross-entropy from logits, AdamW with decoupled decay,
seeded minibatch shuffling, online augmentation, and early stopping on
validation accuracy. Evaluation applies no augmentation (resize/crop only).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import augment as aug
from . import fusion
from . import tensor as T
from .augment import AugmentConfig
from .dataio import Dataset
from .encoders import EncoderConfig
from .fusion import FusionConfig
from .metrics import ConfusionMatrix, MetricsReport, metrics_from_confusion
from .tensor import Tensor


class NumericError(RuntimeError):
    """Training hit a non-finite value (divergence or broken gradient)."""


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 2e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 42
    mode: str = fusion.MODE_FUSED
    class_weights: tuple | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.mode not in fusion.MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.class_weights is not None and len(self.class_weights) != self.fusion.n_classes:
            raise ValueError("class_weights length must equal n_classes")


# -- loss ------------------------------------------------------------------------


def cross_entropy(logits, labels, class_weights=None) -> Tensor:
    """Mean negative log-likelihood of the labels, stably from logits.

    Equals -log softmax(logits)[label] per sample, computed via
    log-sum-exp so large logits never overflow.
    """
    lt = logits if isinstance(logits, Tensor) else Tensor(logits)
    if lt.ndim == 1:
        lt = T.reshape(lt, (1, lt.data.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = lt.data.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0,{k})")
    m = lt.data.max(axis=-1, keepdims=True)
    shifted = lt - Tensor(m)
    lse = T.log(T.reduce_sum(T.exp(shifted), axis=-1)) + Tensor(m[:, 0])
    losses = lse - T.gather_rows(lt, labels)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=lt.data.dtype)[labels]
        return T.scale(T.reduce_sum(losses * Tensor(w)), 1.0 / float(w.sum()))
    return T.reduce_mean(losses)


# -- optimizer --------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float = 1e-3,
               weight_decay: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, t: int = 1) -> None:
    """One AdamW update: bias-corrected moment estimates for the adaptive
    step, with the weight decay applied decoupled (directly on theta)."""
    if t < 1:
        raise ValueError("step count t must be >= 1")
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * p.data


class EarlyStopper:
    """Track the best validation score; stop after `patience` epochs
    without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = None
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        if self.best is None or value > self.best:
            self.best = value
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# -- batching ----------------------------------------------------------------------


def _assemble(records, dataset: Dataset, cfg: TrainConfig, epoch: int, ordinals=None):
    """Load (and for training, augment) a list of records into batch arrays."""
    train_time = ordinals is not None
    images, imus, labels = [], [], []
    for j, rec in enumerate(records):
        sample = dataset.load(rec)
        if train_time:
            rng = aug.sample_rng(cfg.seed, cfg.augment.seed, epoch, ordinals[j])
            images.append(aug.augment_image(sample.image, cfg.augment, rng))
            if cfg.mode == fusion.MODE_FUSED:
                imus.append(aug.augment_imu(sample.imu, cfg.augment, rng))
        else:
            images.append(aug.preprocess_image(sample.image, cfg.augment))
            if cfg.mode == fusion.MODE_FUSED:
                imus.append(sample.imu)
        labels.append(dataset.manifest.label_index(rec.label))
    image_batch = np.stack(images)
    imu_batch = np.stack(imus) if imus else None
    return image_batch, imu_batch, np.asarray(labels, dtype=np.int64)


def predict_batch(params: dict, images: np.ndarray, imus, enc_cfg: EncoderConfig,
                  fus_cfg: FusionConfig, mode: str):
    """Forward a batch without recording gradients.

    Returns (predicted indices, probabilities, per-sample gate matrix or None).
    """
    with T.no_grad():
        out = fusion.forward_full(Tensor(images), None if imus is None else Tensor(imus),
                                  params, enc_cfg, fus_cfg, mode=mode)
    probs = out.y.data
    gates = None if out.gate is None else out.gate.data
    return np.argmax(probs, axis=-1), probs, gates


def evaluate(params: dict, records, dataset: Dataset, cfg: TrainConfig,
             mode: str | None = None) -> MetricsReport:
    """Confusion matrix and derived metrics over a split, no augmentation."""
    mode = mode or cfg.mode
    classes = dataset.classes
    true_idx, pred_idx, conditions = [], [], []
    eval_batch = max(cfg.batch_size, 32)
    for start in range(0, len(records), eval_batch):
        chunk = records[start:start + eval_batch]
        images, imus, labels = _assemble(chunk, dataset, cfg, epoch=0)
        if mode == fusion.MODE_VISION_ONLY:
            imus = None
        preds, _, _ = predict_batch(params, images, imus, cfg.encoder, cfg.fusion, mode)
        true_idx.extend(labels.tolist())
        pred_idx.extend(preds.tolist())
        conditions.extend(rec.condition for rec in chunk)
    confusion = ConfusionMatrix.from_pairs(true_idx, pred_idx, classes)
    report = metrics_from_confusion(confusion)
    by_condition: dict = {}
    for t_i, p_i, cond in zip(true_idx, pred_idx, conditions):
        entry = by_condition.setdefault(cond, {"correct": 0, "count": 0})
        entry["count"] += 1
        entry["correct"] += int(t_i == p_i)
    report.per_condition = {
        cond: {"accuracy": entry["correct"] / entry["count"], "count": entry["count"]}
        for cond, entry in sorted(by_condition.items())
    }
    return report


# -- training loop --------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict
    log: list
    best_val_acc: float
    best_epoch: int
    aborted: bool
    wall_time: float


def _snapshot(params: dict) -> dict:
    return {name: Tensor(p.data.copy(), requires_grad=True) for name, p in params.items()}


def train(cfg: TrainConfig, dataset: Dataset, train_records=None,
          val_records=None) -> TrainResult:
    """Train per config; returns the best-validation-accuracy parameters.

    Aborts (returning the last good snapshot) if the loss or a gradient
    goes non-finite.
    """
    train_records = dataset.split("train") if train_records is None else train_records
    val_records = dataset.split("val") if val_records is None else val_records
    if not train_records or not val_records:
        raise ValueError("train and val splits must be non-empty")

    params = fusion.init_model_params(cfg.encoder, cfg.fusion, cfg.seed, mode=cfg.mode)
    state = AdamWState()
    stopper = EarlyStopper(cfg.patience)
    best = _snapshot(params)
    best_acc = float("-inf")
    best_epoch = 0
    log: list = []
    aborted = False
    step = 0
    started = time.time()

    for epoch in range(1, cfg.max_epochs + 1):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(train_records))
        epoch_losses = []
        epoch_gates = []
        try:
            for lo in range(0, len(order), cfg.batch_size):
                picks = order[lo:lo + cfg.batch_size]
                batch = [train_records[i] for i in picks]
                images, imus, labels = _assemble(batch, dataset, cfg, epoch, ordinals=picks)
                out = fusion.forward_full(Tensor(images),
                                          None if imus is None else Tensor(imus),
                                          params, cfg.encoder, cfg.fusion, mode=cfg.mode)
                loss = cross_entropy(out.logits, labels, cfg.class_weights)
                T.backward(loss)
                step += 1
                grads = {name: p.grad for name, p in params.items()}
                adamw_step(params, grads, state, lr=cfg.lr, weight_decay=cfg.weight_decay,
                           t=step)
                for p in params.values():
                    p.grad = None
                epoch_losses.append(float(loss.data))
                if out.gate is not None:
                    epoch_gates.append(float(out.gate.data.mean()))
        except (T.NonFiniteError, NumericError):
            aborted = True

        if aborted:
            break

        val_acc = evaluate(params, val_records, dataset, cfg).accuracy
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                 "val_acc": val_acc,
                 "mean_gate": float(np.mean(epoch_gates)) if epoch_gates else None}
        log.append(entry)
        if stopper.update(val_acc):
            best = _snapshot(params)
            best_acc = val_acc
            best_epoch = epoch
        if stopper.should_stop:
            break

    return TrainResult(params=best, log=log, best_val_acc=best_acc,
                       best_epoch=best_epoch, aborted=aborted,
                       wall_time=time.time() - started)
