"""Alternating adversarial training.

Each mini-batch runs two phases on one encoder forward pass:

A. adversary step: with the features held fixed, one Adam step on the
   adversary head to minimize its block cross-entropy ``CE_adv``;
B. main step: with the (just updated) adversary frozen, one Adam step on the
   encoder and classifier to minimize ``CE_cls - lam * CE_adv``.

The encoder does not change during phase A, so its forward pass (dropout masks
included) is shared by both phases. ``lam = 0`` reduces phase B to ordinary
classifier training while the adversary keeps measuring leakage.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensorops as ops
from .errors import ConfigError, NumericError
from .model import ModelState, encoder_backward, encoder_forward, predict_batches


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.0
    batch_size: int = 50
    max_epochs: int = 200
    early_stop_patience: float = 20
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    train_adversary: bool = True

    def validate(self, n_train=None):
        if self.lam < 0 or not math.isfinite(self.lam):
            raise ConfigError(f"lam must be a finite non-negative number, got {self.lam}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if n_train is not None and self.batch_size > n_train:
            raise ConfigError(f"batch_size {self.batch_size} exceeds training set size {n_train}")
        if self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ConfigError("max_epochs and early_stop_patience must be positive")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_classifier_loss: float
    train_adversary_loss: float
    val_classifier_loss: float
    val_classifier_acc: float
    val_adversary_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0

    def best(self) -> EpochRecord:
        return self.records[self.best_epoch]

    def to_jsonl(self, with_timing=True):
        lines = []
        for r in self.records:
            d = asdict(r)
            if not with_timing:
                d.pop("seconds")
            lines.append(json.dumps(d, sort_keys=True))
        return "\n".join(lines) + ("\n" if lines else "")

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            records = [EpochRecord(**json.loads(line)) for line in fh if line.strip()]
        best = min(range(len(records)), key=lambda i: records[i].val_classifier_loss) if records else -1
        return cls(records, best)


def shuffle_rng(seed, epoch):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(1, int(epoch))))


def leakage(state: ModelState, epochs) -> float:
    """Fraction of epochs whose adversary argmax (first index on ties) is the true block."""
    if len(epochs) == 0:
        return float("nan")
    _, _, adv_logp = predict_batches(state.eval(), epochs.data)
    return float(np.mean(adv_logp.argmax(axis=1) == epochs.blocks - 1))


def validation_metrics(state: ModelState, val):
    _, cls_logp, adv_logp = predict_batches(state.eval(), val.data)
    idx = np.arange(len(val))
    return dict(
        loss=float(-cls_logp[idx, val.labels].astype(np.float64).mean()),
        acc=float(np.mean(cls_logp.argmax(axis=1) == val.labels)),
        adv_acc=float(np.mean(adv_logp.argmax(axis=1) == val.blocks - 1)),
    )


def _adam(params, cfg):
    for p in params:
        ops.adam_step(p, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        p.zero_grad()


def train_step(state: ModelState, x, labels, blocks, cfg: TrainConfig, step, on_phase=None):
    """One alternating update on a batch. ``blocks`` are 0-based here. Returns (CE_cls, CE_adv)."""
    adv_w = state.params["adv.dense"]
    cls_w = state.params["cls.dense"]
    main_params = state.group("enc.") + [cls_w]
    f, ctx = encoder_forward(state, x, train=True, step=step)

    # phase A: adversary only
    adv_loss, d_adv = ops.softmax_xent(f @ adv_w.value, blocks)
    if cfg.train_adversary:
        adv_w.grad += f.T @ d_adv
        _adam([adv_w], cfg)
    if on_phase is not None:
        on_phase("adversary", state)

    # phase B: encoder + classifier against the frozen adversary
    cls_loss, d_cls = ops.softmax_xent(f @ cls_w.value, labels)
    cls_w.grad += f.T @ d_cls
    df = d_cls @ cls_w.value.T
    if cfg.lam:
        adv_loss_b, d_adv_b = ops.softmax_xent(f @ adv_w.value, blocks)
        df = df - cfg.lam * (d_adv_b @ adv_w.value.T)
    encoder_backward(state, ctx, df.astype(f.dtype, copy=False))
    _adam(main_params, cfg)
    if on_phase is not None:
        on_phase("main", state)
    return cls_loss, adv_loss


def phase_b_objective(cls_loss, adv_loss, lam):
    """Scalar minimized by the encoder/classifier: CE_cls - lam * CE_adv."""
    return cls_loss - lam * adv_loss


def train(model: ModelState, train_set, val_set, cfg: TrainConfig, on_phase=None, on_epoch=None,
          log_fn=None):
    """Train ``model`` in place; returns ``(best_model, log)`` with the best-validation-loss weights."""
    cfg.validate(len(train_set))
    if len(val_set) == 0:
        raise ConfigError("validation set is empty")
    n_blocks = model.spec.n_blocks
    for name, part in (("train", train_set), ("validation", val_set)):
        if part.blocks.min() < 1 or part.blocks.max() > n_blocks:
            raise ConfigError(f"{name} block IDs must lie in 1..{n_blocks}")
    model.lam = cfg.lam
    log = TrainLog()
    best_state = model.copy()
    best_loss = math.inf
    since_best = 0
    step = 0
    n = len(train_set)
    x_all = train_set.data.astype(model.dtype, copy=False)
    y_all = train_set.labels
    b_all = train_set.blocks - 1

    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        model.train()
        order = shuffle_rng(cfg.seed, epoch).permutation(n) if cfg.shuffle else np.arange(n)
        cls_sum = adv_sum = 0.0
        for j, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            cls_loss, adv_loss = train_step(model, x_all[idx], y_all[idx], b_all[idx], cfg, step, on_phase)
            if not (math.isfinite(cls_loss) and math.isfinite(adv_loss)):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {j} "
                                   f"(classifier {cls_loss}, adversary {adv_loss})")
            cls_sum += cls_loss * idx.size
            adv_sum += adv_loss * idx.size
            step += 1
        val = validation_metrics(model, val_set)
        if not math.isfinite(val["loss"]):
            raise NumericError(f"non-finite validation loss after epoch {epoch}")
        rec = EpochRecord(epoch, cls_sum / n, adv_sum / n, val["loss"], val["acc"], val["adv_acc"],
                          time.perf_counter() - t0)
        log.records.append(rec)
        if val["loss"] < best_loss:
            best_loss = val["loss"]
            best_state = model.copy()
            log.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if log_fn is not None:
            log_fn(rec)
        if on_epoch is not None:
            on_epoch(rec, model)
        if since_best >= cfg.early_stop_patience:
            break
    log.steps = step
    best_state.mode = "infer"
    best_state.meta.update(best_epoch=log.best_epoch, epochs_run=len(log.records))
    return best_state, log
