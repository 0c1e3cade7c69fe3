"""Minibatch Adam training with validation tracking."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .annotation import sample_training_segments
from .audio_features import fit_standardizer
from .dataset import build_segments
from .errors import EmptyDataset, InvalidConfig, MissingGradient, NumericError, TooFewFolds
from .losses import total_loss
from .model import CRNN, Checkpoint, ModelConfig, init_params

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "step", "class_loss", "dist_loss", "conf_loss", "total")


@dataclass
class TrainConfig:
    batch_size: int = 4
    epochs: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    segment_stride: int | None = None  # None -> T // 2
    grad_clip: float | None = 5.0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        if self.segment_stride is not None and self.segment_stride < 1:
            raise InvalidConfig("segment_stride must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params``."""
    missing = [k for k in params if k not in grads or grads[k] is None]
    if missing:
        raise MissingGradient(f"no gradient for {missing[:3]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m = state.m[k]
        v = state.v[k]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    log_rows: list[tuple] = field(default_factory=list)
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_val_loss: list[float] = field(default_factory=list)


def _evaluate_loss(model: CRNN, xs, ys, batch_size: int) -> float:
    total = 0.0
    for i in range(0, len(xs), batch_size):
        pred = model.forward(xs[i : i + batch_size], mode="infer")
        total += total_loss(ys[i : i + batch_size], pred).total
    model.leaves = {}
    return total / max(len(xs), 1)


def train(
    recordings,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    class_names=None,
    hop_s: float = 0.02,
    train_ids=None,
    val_ids=None,
) -> TrainResult:
    """Train on the ``train`` split (or ``train_ids``), validate on ``val``.

    The best checkpoint is the one with the lowest per-segment validation
    loss (training loss when there is no validation data).
    """
    model_cfg.validate()
    train_cfg.validate()
    if train_ids is None:
        train_ids = [r.recording_id for r in recordings if r.split == "train"]
    if val_ids is None:
        val_ids = [r.recording_id for r in recordings if r.split == "val"]
    train_recs = [r for r in recordings if r.recording_id in set(train_ids)]
    val_recs = [r for r in recordings if r.recording_id in set(val_ids)]
    if not train_recs:
        raise EmptyDataset("no training recordings")

    T = model_cfg.T
    stride = train_cfg.segment_stride or max(T // 2, 1)
    standardizer = fit_standardizer([r.features for r in train_recs])
    starts = sample_training_segments([(r.recording_id, r.n_frames) for r in train_recs], T, stride)
    xs, ys = build_segments(train_recs, starts, standardizer, T, model_cfg.n_classes, hop_s)
    if val_recs:
        vstarts = sample_training_segments([(r.recording_id, r.n_frames) for r in val_recs], T, T)
        vxs, vys = build_segments(val_recs, vstarts, standardizer, T, model_cfg.n_classes, hop_s)

    model = CRNN(model_cfg, init_params(model_cfg, train_cfg.seed))
    adam = AdamState()
    meta = {"seed": train_cfg.seed, "train_config": train_cfg.to_dict(), "train_ids": sorted(train_ids)}
    names = list(class_names or [str(c) for c in range(model_cfg.n_classes)])

    def snapshot(epoch):
        return Checkpoint(
            model_cfg, model.params.copy(), standardizer, {}, names, dict(meta, epoch=epoch)
        )

    result = TrainResult(final=snapshot(0), best=snapshot(0))
    best_loss = np.inf
    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, 0, epoch]).permutation(len(xs))
        ep_total = 0.0
        for i in range(0, len(order), train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            step += 1
            rng = np.random.default_rng([train_cfg.seed, 1, step])
            pred = model.forward(xs[idx], mode="train", rng=rng)
            lb = total_loss(ys[idx], pred)
            ad.backward(lb.tensor)
            grads = model.gradients()
            clip_global_norm(grads, train_cfg.grad_clip)
            adam_step(model.params.weights, grads, adam, train_cfg)
            bad = [k for k, v in model.params.weights.items() if not np.all(np.isfinite(v))]
            if bad:
                raise NumericError(f"non-finite parameters after step {step}: {bad[:3]}")
            ep_total += lb.total
            result.log_rows.append((epoch, step, lb.class_loss, lb.dist_loss, lb.conf_loss, lb.total))
        model.leaves = {}
        train_loss = ep_total / len(xs)
        result.epoch_train_loss.append(train_loss)
        if val_recs:
            val_loss = _evaluate_loss(model, vxs, vys, train_cfg.batch_size)
            result.epoch_val_loss.append(val_loss)
            result.log_rows.append((epoch, "val", np.nan, np.nan, np.nan, val_loss))
        else:
            val_loss = train_loss
        log.info("epoch %d train %.4f val %.4f", epoch, train_loss, val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            result.best = snapshot(epoch)
    result.final = snapshot(train_cfg.epochs)
    return result


def loso_folds(recordings) -> list[tuple[list[str], list[str]]]:
    """Leave-one-recording-out folds over the ``train`` split."""
    ids = [r.recording_id for r in recordings if r.split == "train"]
    return [([i for i in ids if i != held], [held]) for held in ids]


def train_cv(recordings, model_cfg: ModelConfig, train_cfg: TrainConfig, folds=None, **kw) -> list[Checkpoint]:
    """One model per fold; each fold's held-out recordings serve as its validation set."""
    folds = loso_folds(recordings) if folds is None else folds
    if len(folds) < 2:
        raise TooFewFolds(f"cross-validation needs >= 2 folds, got {len(folds)}")
    ckpts = []
    for k, (tr, va) in enumerate(folds):
        if set(tr) & set(va):
            raise ValueError(f"fold {k}: validation recordings leak into training")
        res = train(recordings, model_cfg, train_cfg, train_ids=tr, val_ids=va, **kw)
        res.best.meta["fold"] = k
        res.best.meta["val_ids"] = sorted(va)
        ckpts.append(res.best)
    return ckpts


def write_loss_log(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(LOG_HEADER) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)
