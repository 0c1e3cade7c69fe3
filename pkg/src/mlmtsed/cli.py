"""Command-line front end: ``mlmtsed <command> [options]``.

Commands read and write only files: WAV/annotation corpora described by a
manifest, ``.lmel`` feature caches, ``.paed`` checkpoints, detection and
confidence CSVs, and a JSON run summary. Figures are written as PNGs next
to the CSVs they illustrate.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .annotation import load_label_map, load_manifest
from .audio_features import build_mel_filterbank, compute_logmel, load_wav, save_feature_cache
from .config import RunConfig, bundled_config, load_run_config
from .dataset import load_dataset
from .decoder import confidence_from_models, extract_events, normalize_confidence, write_confidence_csv
from .decoder import read_detections_csv, write_detections_csv
from .errors import ConfigError, ConfigMismatch, MissingInput, SedError, UnknownLabel
from .metrics import Interval, aggregate, evaluate, format_table
from .model import load_checkpoint, save_checkpoint
from .pipeline import baseline_activity, detect, metrics_dict, predict_recordings, run_experiment, tune_decoders
from .plotting import plot_class_metrics, plot_confidence, plot_loss_curve
from .synthgen import emit_dataset
from .trainer import train, train_cv, write_loss_log

log = logging.getLogger("mlmtsed")


# config ----------------------------------------------------------------------


def _parse_overrides(items) -> dict:
    """``["train.lr=0.001", ...]`` -> ``{"train": {"lr": 0.001}}`` (values parsed as JSON when possible)."""
    out: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.setdefault(section, {})[name] = value
    return out


def resolve_config(args) -> RunConfig:
    path = args.config
    if path is None:
        default = bundled_config("desk")
        path = default if default.exists() else None
    return load_run_config(path, _parse_overrides(args.set))


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# shared loading --------------------------------------------------------------


def _labels_path(args) -> Path:
    return Path(args.labels) if args.labels else Path(args.manifest).parent / "labels.txt"


def _load_recordings(args, cfg: RunConfig, splits):
    labels = load_label_map(_labels_path(args))
    names = sorted(labels, key=labels.get)
    recs = load_dataset(args.manifest, labels, cfg.features, args.cache, splits)
    return recs, names


def _load_models(paths, names):
    ckpts = [load_checkpoint(p) for p in paths]
    for p, ck in zip(paths, ckpts):
        if ck.class_names and list(ck.class_names) != list(names):
            raise ConfigMismatch(f"{p}: trained for classes {ck.class_names}, label map has {names}")
        if ck.model_cfg != ckpts[0].model_cfg:
            raise ConfigMismatch(f"{p}: model configuration differs from {paths[0]}")
    return ckpts


def _thresholds(args, ckpts) -> dict:
    if getattr(args, "thresholds", None):
        path = Path(args.thresholds)
        if not path.exists():
            raise MissingInput(f"thresholds file not found: {path}")
        return json.loads(path.read_text(encoding="utf-8"))
    th = ckpts[0].thresholds
    if not th:
        raise ConfigError(f"{args.model[0]} has no tuned thresholds; run `mlmtsed tune` first or pass --thresholds")
    return th


def _write_metrics_csv(path, per_class, agg, names) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "f1", "er", "tp", "fp", "fn"])
        for name, m in zip(names, per_class):
            w.writerow([name, f"{100 * m.f1:.4f}", f"{100 * m.er:.4f}", m.tp, m.fp, m.fn])
        w.writerow(["average", f"{100 * agg.average_f1:.4f}", f"{100 * agg.average_er:.4f}", "", "", ""])
        w.writerow(["overall", f"{100 * agg.overall_f1:.4f}", f"{100 * agg.overall_er:.4f}", "", "", ""])


# commands --------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> int:
    manifest = emit_dataset(cfg.synth, args.out)
    print(manifest)
    return 0


def cmd_features(args, cfg: RunConfig) -> int:
    fb = build_mel_filterbank(cfg.features)
    cache = Path(args.cache)
    cache.mkdir(parents=True, exist_ok=True)
    for entry in load_manifest(args.manifest):
        spec = compute_logmel(load_wav(entry.audio_path), cfg.features, fb, entry.recording_id)
        save_feature_cache(cache / f"{entry.recording_id}.lmel", spec)
        log.info("%s: %d frames", entry.recording_id, spec.n_frames)
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    recs, names = _load_recordings(args, cfg, ("train", "val"))
    model_cfg = dataclasses.replace(cfg.model, n_classes=len(names))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cv:
        for k, ck in enumerate(train_cv(recs, model_cfg, cfg.train, class_names=names, hop_s=cfg.features.hop_s)):
            save_checkpoint(ck, out / f"model_fold{k:02d}.paed")
        return 0
    result = train(recs, model_cfg, cfg.train, names, cfg.features.hop_s)
    save_checkpoint(result.best, out / "model.paed")
    save_checkpoint(result.final, out / "final.paed")
    write_loss_log(out / "loss.csv", result.log_rows)
    if result.epoch_train_loss:
        plot_loss_curve(out / "loss.png", result.epoch_train_loss, result.epoch_val_loss)
    print(out / "model.paed")
    return 0


def cmd_tune(args, cfg: RunConfig) -> int:
    recs, names = _load_recordings(args, cfg, (args.split,))
    if not recs:
        raise MissingInput(f"manifest has no {args.split!r} recordings to tune on")
    ckpts = _load_models(args.model, names)
    th = tune_decoders(ckpts, recs, cfg, baseline=not args.no_baseline)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src, ck in zip(args.model, ckpts):
        ck.thresholds = th
        save_checkpoint(ck, out / Path(src).name)
    (out / "thresholds.json").write_text(json.dumps(th, indent=2, sort_keys=True), encoding="utf-8")
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    recs, names = _load_recordings(args, cfg, (args.split,))
    ckpts = _load_models(args.model, names)
    th = _thresholds(args, ckpts)
    if args.baseline and "median_windows" not in th:
        raise ConfigError("thresholds carry no baseline (median-window) settings; rerun tune without --no-baseline")
    dets = detect(ckpts, recs, th, cfg, baseline=args.baseline)
    hop = cfg.features.hop_s
    rows = [
        (rid, names[e.class_id], round(e.onset_s(hop), 6), round(e.offset_s(hop), 6), round(e.peak_score, 6))
        for rid in sorted(dets)
        for e in dets[rid]
    ]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_detections_csv(args.out, rows)
    print(args.out)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    recs, names = _load_recordings(args, cfg, (args.split,))
    det_path = Path(args.detections)
    if not det_path.exists():
        raise MissingInput(f"detections not found: {det_path}")
    index = {n: i for i, n in enumerate(names)}
    hyps: dict = {r.recording_id: [] for r in recs}
    for rid, cname, on, off, _ in read_detections_csv(det_path):
        if cname not in index:
            raise UnknownLabel(f"{det_path}: unknown class {cname!r}")
        if rid in hyps:
            hyps[rid].append(Interval(index[cname], on, off))
    refs = {r.recording_id: r.annotation.events for r in recs}
    per_class = evaluate(refs, hyps, len(names), cfg.match, cfg.features.hop_s)
    agg = aggregate(per_class)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "config_sha256": cfg.digest(),
        "seed": cfg.train.seed,
        "split": args.split,
        "detections_sha256": _sha256(det_path),
        "metrics": metrics_dict(per_class, agg, names),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    table = format_table(per_class, names, agg)
    (out / "metrics.txt").write_text(table + "\n", encoding="utf-8")
    _write_metrics_csv(out / "metrics.csv", per_class, agg, names)
    plot_class_metrics(out / "metrics.png", names, {args.label: summary["metrics"]["per_class"]})
    print(table)
    return 0


def cmd_export_confidence(args, cfg: RunConfig) -> int:
    recs, names = _load_recordings(args, cfg, (args.split,))
    if args.recording:
        recs = [r for r in recs if r.recording_id in set(args.recording)]
        missing = set(args.recording) - {r.recording_id for r in recs}
        if missing:
            raise MissingInput(f"recordings not in the {args.split!r} split: {sorted(missing)}")
    ckpts = _load_models(args.model, names)
    th = _thresholds(args, ckpts)
    T = ckpts[0].model_cfg.T
    hop = cfg.features.hop_s
    preds = predict_recordings(ckpts, recs, cfg.decoder.segment_hop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in recs:
        mp = preds[rec.recording_id]
        track = normalize_confidence(confidence_from_models(mp, rec.n_frames, th["alpha"], T, cfg.decoder.roi))
        write_confidence_csv(out / f"{rec.recording_id}_confidence.csv", track, names, hop)
        dets = extract_events(track, th["beta"])
        plot_confidence(
            out / f"{rec.recording_id}_confidence.png",
            track.scores,
            names,
            hop,
            beta=th["beta"],
            activity=baseline_activity(mp, rec.n_frames),
            references=[(e.class_id, e.onset_s, e.offset_s) for e in rec.annotation.events],
            detections=[(e.class_id, e.onset_s(hop), e.offset_s(hop)) for e in dets],
        )
    return 0


def cmd_run(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    summary = run_experiment(cfg, out)
    ck = summary.pop("checkpoint")
    names = ck.class_names
    plot_loss_curve(out / "loss.png", summary["epoch_train_loss"], summary["epoch_val_loss"])
    for split, by_decoder in summary["results"].items():
        with open(out / f"metrics_{split}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["decoder", "class", "f1", "er", "tp", "fp", "fn"])
            for dec, m in by_decoder.items():
                for name in names:
                    pc = m["per_class"][name]
                    w.writerow([dec, name, f"{pc['f1']:.4f}", f"{pc['er']:.4f}", pc["tp"], pc["fp"], pc["fn"]])
                for agg in ("average", "overall"):
                    w.writerow([dec, agg, f"{m[agg + '_f1']:.4f}", f"{m[agg + '_er']:.4f}", "", "", ""])
        plot_class_metrics(out / f"metrics_{split}.png", names, {d: m["per_class"] for d, m in by_decoder.items()})
    for split in summary["results"]:
        r = summary["results"][split]
        print(
            f"{split:5s} proposed avg F1 {r['proposed']['average_f1']:5.1f}  overall F1 {r['proposed']['overall_f1']:5.1f}"
            f" | baseline avg F1 {r['baseline']['average_f1']:5.1f}  overall F1 {r['baseline']['overall_f1']:5.1f}"
        )
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "train": cmd_train,
    "tune": cmd_tune,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "export-confidence": cmd_export_confidence,
    "run": cmd_run,
}


# argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON (default: the bundled desk config)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", required=True, help="manifest.tsv (audio, annotation, split)")
    data.add_argument("--labels", help="label map (default: labels.txt next to the manifest)")
    data.add_argument("--cache", help="directory of .lmel feature caches")

    models = argparse.ArgumentParser(add_help=False)
    models.add_argument("--model", nargs="+", required=True, help="one checkpoint, or one per CV fold")

    p = argparse.ArgumentParser(prog="mlmtsed", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--out", required=True)

    s = sub.add_parser("features", parents=[common], help="compute log-mel caches")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cache", required=True)

    s = sub.add_parser("train", parents=[common, data], help="train on the train split, validate on val")
    s.add_argument("--out", required=True)
    s.add_argument("--cv", action="store_true", help="leave-one-recording-out models instead of one")

    s = sub.add_parser("tune", parents=[common, data, models], help="grid-search decoder thresholds")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True, help="directory for tuned checkpoints and thresholds.json")
    s.add_argument("--no-baseline", action="store_true", help="skip the median-filter search")

    s = sub.add_parser("detect", parents=[common, data, models], help="write detections CSV")
    s.add_argument("--split", default="test")
    s.add_argument("--thresholds", help="thresholds JSON (default: the ones stored in the checkpoint)")
    s.add_argument("--baseline", action="store_true", help="threshold + median-filter decoding")
    s.add_argument("--out", required=True)

    s = sub.add_parser("evaluate", parents=[common, data], help="score a detections CSV")
    s.add_argument("--detections", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--label", default="detections", help="legend name in the figure")
    s.add_argument("--out", required=True)

    s = sub.add_parser("export-confidence", parents=[common, data, models], help="confidence tracks as CSV + PNG")
    s.add_argument("--split", default="test")
    s.add_argument("--recording", nargs="+")
    s.add_argument("--thresholds")
    s.add_argument("--out", required=True)

    s = sub.add_parser("run", parents=[common], help="synth, train, tune and score both decoders")
    s.add_argument("--out", required=True)
    return p


def _error_line(code: str, exit_code: int, message: str) -> str:
    return json.dumps({"error": code, "exit": exit_code, "message": message})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = resolve_config(args)
        if args.print_config:
            print(cfg.to_json())
            return 0
        limit = contextlib.nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limit = threadpool_limits(args.threads)
        with limit:
            return COMMANDS[args.command](args, cfg)
    except SedError as exc:
        print(_error_line(exc.code, exc.exit_code, str(exc)), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(_error_line("MissingInput", MissingInput.exit_code, str(exc)), file=sys.stderr)
        return MissingInput.exit_code


if __name__ == "__main__":
    sys.exit(main())
