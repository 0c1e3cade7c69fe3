"""End-to-end glue: synthesize, train, tune, detect, evaluate."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from .annotation import load_label_map
from .config import RunConfig
from .dataset import load_dataset
from .decoder import framewise_activity, predict_segments
from .metrics import ValItem, aggregate, decode_baseline, decode_confidence, evaluate, tune_median_windows, tune_thresholds
from .model import CRNN, Checkpoint, save_checkpoint
from .synthgen import emit_dataset
from .trainer import train, write_loss_log

log = logging.getLogger(__name__)


def predict_recordings(checkpoints, recordings, hop: int | None = None) -> dict:
    """``{recording_id: [segment predictions of model 1, model 2, ...]}``."""
    out = {r.recording_id: [] for r in recordings}
    for ck in checkpoints:
        model = CRNN(ck.model_cfg, ck.params)
        for rec in recordings:
            feats = ck.standardizer.apply(rec.features.values)
            out[rec.recording_id].append(predict_segments(model, feats, ck.model_cfg.T, hop))
    return out


def baseline_activity(models_preds, n_frames: int) -> np.ndarray:
    return np.mean([framewise_activity(sp, n_frames) for sp in models_preds], axis=0)


def tune_decoders(checkpoints, val_recs, cfg: RunConfig, preds=None, baseline=True) -> dict:
    """Grid-search decoder thresholds on validation recordings."""
    T = checkpoints[0].model_cfg.T
    C = checkpoints[0].model_cfg.n_classes
    hop_s = cfg.features.hop_s
    preds = preds or predict_recordings(checkpoints, val_recs, cfg.decoder.segment_hop)
    items = [ValItem(preds[r.recording_id], r.n_frames, r.annotation.events) for r in val_recs]
    alpha, beta, f1 = tune_thresholds(items, C, T, cfg=cfg.match, hop_s=hop_s, roi=cfg.decoder.roi)
    out = {"alpha": alpha.tolist(), "beta": beta.tolist(), "val_f1": f1.tolist()}
    if baseline:
        b_items = [(baseline_activity(preds[r.recording_id], r.n_frames), r.annotation.events) for r in val_recs]
        b_alpha, windows, b_f1 = tune_median_windows(b_items, C, cfg=cfg.match, hop_s=hop_s)
        out.update(
            baseline_alpha=b_alpha.tolist(), median_windows=[int(w) for w in windows], baseline_val_f1=b_f1.tolist()
        )
    return out


def detect(checkpoints, recordings, thresholds: dict, cfg: RunConfig, baseline=False, preds=None) -> dict:
    """``{recording_id: [DetectedEvent, ...]}`` using either decoder."""
    T = checkpoints[0].model_cfg.T
    preds = preds or predict_recordings(checkpoints, recordings, cfg.decoder.segment_hop)
    out = {}
    for rec in recordings:
        mp = preds[rec.recording_id]
        if baseline:
            act = baseline_activity(mp, rec.n_frames)
            out[rec.recording_id] = decode_baseline(act, thresholds["baseline_alpha"], thresholds["median_windows"])
        else:
            out[rec.recording_id] = decode_confidence(
                mp, rec.n_frames, thresholds["alpha"], thresholds["beta"], T, cfg.decoder.roi
            )
    return out


def score(recordings, detections, n_classes, cfg: RunConfig):
    refs = {r.recording_id: r.annotation.events for r in recordings}
    per_class = evaluate(refs, detections, n_classes, cfg.match, cfg.features.hop_s)
    return per_class, aggregate(per_class)


def metrics_dict(per_class, agg, class_names) -> dict:
    return {
        "per_class": {
            name: {"f1": 100 * m.f1, "er": 100 * m.er, "tp": m.tp, "fp": m.fp, "fn": m.fn}
            for name, m in zip(class_names, per_class)
        },
        **{k: 100 * v for k, v in dataclasses.asdict(agg).items()},
    }


def run_experiment(cfg: RunConfig, workdir, write_files: bool = True) -> dict:
    """Synthesize a dataset, train, tune both decoders on ``val`` and score train/test.

    Returns the run summary; with ``write_files`` the dataset, checkpoints,
    loss log and ``summary.json`` land in ``workdir``.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    manifest = emit_dataset(cfg.synth, workdir / "data")
    labels = load_label_map(workdir / "data" / "labels.txt")
    names = sorted(labels, key=labels.get)
    recs = load_dataset(manifest, labels, cfg.features)
    model_cfg = dataclasses.replace(cfg.model, n_classes=len(names))

    result = train(recs, model_cfg, cfg.train, names, cfg.features.hop_s)
    ck = result.best
    by_split = {s: [r for r in recs if r.split == s] for s in ("train", "val", "test")}
    preds = predict_recordings([ck], recs, cfg.decoder.segment_hop)
    ck.thresholds = tune_decoders([ck], by_split["val"], cfg, preds)

    summary = {
        "config_sha256": cfg.digest(),
        "seed": cfg.train.seed,
        "best_epoch": ck.meta["epoch"],
        "epoch_train_loss": result.epoch_train_loss,
        "epoch_val_loss": result.epoch_val_loss,
        "thresholds": ck.thresholds,
        "results": {},
    }
    for split in ("train", "test"):
        for decoder, is_base in (("proposed", False), ("baseline", True)):
            dets = detect([ck], by_split[split], ck.thresholds, cfg, baseline=is_base, preds=preds)
            per_class, agg = score(by_split[split], dets, len(names), cfg)
            summary["results"].setdefault(split, {})[decoder] = metrics_dict(per_class, agg, names)
    test = summary["results"]["test"]
    summary["comparison"] = {
        "overall_f1_proposed_minus_baseline": test["proposed"]["overall_f1"] - test["baseline"]["overall_f1"],
        "average_f1_proposed_minus_baseline": test["proposed"]["average_f1"] - test["baseline"]["average_f1"],
    }
    if write_files:
        save_checkpoint(ck, workdir / "best.paed")
        final = result.final
        final.thresholds = ck.thresholds
        save_checkpoint(final, workdir / "final.paed")
        write_loss_log(workdir / "loss.csv", result.log_rows)
        (workdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    summary["checkpoint"] = ck
    return summary
