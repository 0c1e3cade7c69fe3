"""Event-wise F1 / error rate, event matching and threshold searches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .decoder import (
    DetectedEvent,
    active_runs,
    baseline_decode,
    confidence_from_models,
    extract_events,
    median_filter_binary,
    normalize_confidence,
)
from .errors import EmptyValidation, NoClasses

ALPHA_GRID = np.round(np.arange(101) * 0.01, 2)
BETA_GRID = np.round(np.arange(21) * 0.05, 2)
MEDIAN_WINDOWS = np.arange(1, 257, 6)


class Interval(NamedTuple):
    class_id: int
    onset_s: float
    offset_s: float


@dataclass
class MatchConfig:
    onset_collar_s: float = 0.2
    offset_collar_s: float = 0.2
    offset_ratio: float = 0.5

    def __post_init__(self):
        if self.onset_collar_s <= 0 or self.offset_collar_s <= 0:
            raise ValueError("collars must be positive")

    def offset_tolerance(self, ref_duration: float) -> float:
        return max(self.offset_collar_s, self.offset_ratio * ref_duration)


@dataclass
class ClassMetrics:
    tp: int = 0
    fn: int = 0
    fp: int = 0

    @property
    def n_ref(self) -> int:
        return self.tp + self.fn

    @property
    def f1(self) -> float:
        den = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / den if den else 0.0

    @property
    def er(self) -> float:
        # no reference events: every insertion counts as one error
        return (self.fp + self.fn) / self.n_ref if self.n_ref else float(self.fp)

    def __add__(self, other: ClassMetrics) -> ClassMetrics:
        return ClassMetrics(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp)


@dataclass
class Aggregate:
    average_f1: float
    average_er: float
    overall_f1: float
    overall_er: float


def to_intervals(events, hop_s: float = 0.02) -> list[Interval]:
    out = []
    for e in events:
        if isinstance(e, DetectedEvent):
            out.append(Interval(e.class_id, e.onset_frame * hop_s, e.offset_frame * hop_s))
        else:
            out.append(Interval(e.class_id, e.onset_s, e.offset_s))
    return out


def _match_class(refs, hyps, cfg: MatchConfig) -> int:
    """Greedy matches in onset order; ``refs``/``hyps`` are (onset, offset) pairs."""
    refs = sorted(refs)
    hyps = sorted(hyps)
    used = [False] * len(hyps)
    tp = 0
    for r_on, r_off in refs:
        tol = cfg.offset_tolerance(r_off - r_on)
        for j, (h_on, h_off) in enumerate(hyps):
            if used[j]:
                continue
            if abs(h_on - r_on) <= cfg.onset_collar_s and abs(h_off - r_off) <= tol:
                used[j] = True
                tp += 1
                break
    return tp


def match_events(ref, hyp, n_classes: int | None = None, cfg: MatchConfig | None = None, hop_s: float = 0.02):
    """Per-class ``ClassMetrics`` for one recording.

    A hypothesis matches a reference of the same class when the onsets lie
    within the onset collar and the offsets within
    ``max(offset_collar, offset_ratio * ref_duration)``.
    """
    cfg = cfg or MatchConfig()
    ref, hyp = to_intervals(ref, hop_s), to_intervals(hyp, hop_s)
    if n_classes is None:
        n_classes = 1 + max([e.class_id for e in ref + hyp], default=-1)
    out = []
    for c in range(n_classes):
        r = [(e.onset_s, e.offset_s) for e in ref if e.class_id == c]
        h = [(e.onset_s, e.offset_s) for e in hyp if e.class_id == c]
        tp = _match_class(r, h, cfg)
        out.append(ClassMetrics(tp=tp, fn=len(r) - tp, fp=len(h) - tp))
    return out


def evaluate(refs: dict, hyps: dict, n_classes: int, cfg: MatchConfig | None = None, hop_s: float = 0.02):
    """Pool per-class counts over recordings. ``refs``/``hyps`` map recording id -> events."""
    totals = [ClassMetrics() for _ in range(n_classes)]
    for rec_id, ref in refs.items():
        per = match_events(ref, hyps.get(rec_id, []), n_classes, cfg, hop_s)
        totals = [a + b for a, b in zip(totals, per)]
    return totals


def aggregate(per_class) -> Aggregate:
    """Macro (class-averaged) and micro (pooled-count) F1 and ER."""
    per_class = list(per_class)
    if not per_class:
        raise NoClasses("aggregate needs at least one class")
    pooled = ClassMetrics()
    for m in per_class:
        pooled = pooled + m
    return Aggregate(
        average_f1=float(np.mean([m.f1 for m in per_class])),
        average_er=float(np.mean([m.er for m in per_class])),
        overall_f1=pooled.f1,
        overall_er=pooled.er,
    )


# threshold searches ----------------------------------------------------------


@dataclass
class ValItem:
    """One validation recording: per-model segment predictions and references."""

    models_preds: list  # one list of (start, pred [T, C, 3]) per model
    n_frames: int
    ref: list


def _class_counts(events_by_class, refs_by_class, cfg) -> np.ndarray:
    counts = np.zeros((len(refs_by_class), 3), dtype=np.int64)
    for c, (hyp, ref) in enumerate(zip(events_by_class, refs_by_class)):
        tp = _match_class(ref, hyp, cfg)
        counts[c] = (tp, len(ref) - tp, len(hyp) - tp)
    return counts


def _f1(counts) -> np.ndarray:
    tp, fn, fp = counts[..., 0], counts[..., 1], counts[..., 2]
    den = 2 * tp + fp + fn
    return np.divide(2.0 * tp, den, out=np.zeros(den.shape), where=den > 0)


def _refs_by_class(ref, n_classes, hop_s):
    ivs = to_intervals(ref, hop_s)
    return [[(e.onset_s, e.offset_s) for e in ivs if e.class_id == c] for c in range(n_classes)]


def _pick(f1_grid: np.ndarray):
    """Index of the max over the leading grid axes per class; ties -> lexicographically smallest."""
    n_classes = f1_grid.shape[-1]
    flat = f1_grid.reshape(-1, n_classes)
    best = flat.argmax(axis=0)  # argmax returns the first maximum
    return [np.unravel_index(b, f1_grid.shape[:-1]) for b in best]


def confidence_grid_counts(items, n_classes, T, alpha_grid=ALPHA_GRID, beta_grid=BETA_GRID, cfg=None,
                           hop_s=0.02, roi="pq"):
    """Pooled (tp, fn, fp) per (alpha, beta, class) over validation recordings."""
    cfg = cfg or MatchConfig()
    counts = np.zeros((len(alpha_grid), len(beta_grid), n_classes, 3), dtype=np.int64)
    refs = [_refs_by_class(it.ref, n_classes, hop_s) for it in items]
    for i, a in enumerate(alpha_grid):
        for it, rc in zip(items, refs):
            track = normalize_confidence(confidence_from_models(it.models_preds, it.n_frames, a, T, roi))
            for j, b in enumerate(beta_grid):
                hyp = [[] for _ in range(n_classes)]
                for c in range(n_classes):
                    on, off = active_runs((track.scores[c] >= b) & (track.scores[c] > 0))
                    hyp[c] = list(zip(on * hop_s, off * hop_s))
                counts[i, j] += _class_counts(hyp, rc, cfg)
    return counts


def tune_thresholds(items, n_classes, T, alpha_grid=ALPHA_GRID, beta_grid=BETA_GRID, cfg=None, hop_s=0.02,
                    roi="pq"):
    """Per-class exhaustive search of (alpha, beta) maximizing pooled validation F1.

    Returns ``(alpha, beta, f1)`` arrays of length ``n_classes``.
    """
    items = list(items)
    if not items:
        raise EmptyValidation("threshold tuning needs validation recordings")
    counts = confidence_grid_counts(items, n_classes, T, alpha_grid, beta_grid, cfg, hop_s, roi)
    f1 = _f1(counts)  # [A, B, C]
    picks = _pick(f1)
    alpha = np.array([alpha_grid[i] for i, _ in picks])
    beta = np.array([beta_grid[j] for _, j in picks])
    best = np.array([f1[i, j, c] for c, (i, j) in enumerate(picks)])
    return alpha, beta, best


def tune_median_windows(items, n_classes, alpha_grid=ALPHA_GRID, windows=MEDIAN_WINDOWS, cfg=None, hop_s=0.02):
    """Joint per-class search over (alpha, median window) for the baseline decode.

    ``items`` are ``(activity [N, C], ref events)`` pairs. Returns
    ``(alpha, windows, f1)``.
    """
    items = list(items)
    if not items:
        raise EmptyValidation("median-window tuning needs validation recordings")
    cfg = cfg or MatchConfig()
    counts = np.zeros((len(alpha_grid), len(windows), n_classes, 3), dtype=np.int64)
    refs = [_refs_by_class(ref, n_classes, hop_s) for _, ref in items]
    for (act, _), rc in zip(items, refs):
        act = np.asarray(act)
        for c in range(n_classes):
            prev_key, prev_row = None, None
            for i, a in enumerate(alpha_grid):
                binary = act[:, c] > a
                key = binary.tobytes()
                if key == prev_key:
                    counts[i, :, c] += prev_row
                    continue
                row = np.zeros((len(windows), 3), dtype=np.int64)
                for k, w in enumerate(windows):
                    on, off = active_runs(median_filter_binary(binary, int(w)).astype(bool))
                    hyp = list(zip(on * hop_s, off * hop_s))
                    tp = _match_class(rc[c], hyp, cfg)
                    row[k] = (tp, len(rc[c]) - tp, len(hyp) - tp)
                counts[i, :, c] += row
                prev_key, prev_row = key, row
    f1 = _f1(counts)
    picks = _pick(f1)
    alpha = np.array([alpha_grid[i] for i, _ in picks])
    win = np.array([int(windows[k]) for _, k in picks])
    best = np.array([f1[i, k, c] for c, (i, k) in enumerate(picks)])
    return alpha, win, best


def decode_confidence(models_preds, n_frames, alpha, beta, T, roi="pq"):
    track = normalize_confidence(confidence_from_models(models_preds, n_frames, alpha, T, roi))
    return extract_events(track, beta)


def decode_baseline(activity, alpha, windows):
    return baseline_decode(activity, alpha, windows)


def format_table(per_class, class_names, agg: Aggregate) -> str:
    """Aligned text table; F1 and ER in percent."""
    width = max([len(n) for n in class_names] + [8])
    lines = [f"{'class':<{width}}  {'F1':>6}  {'ER':>6}  {'tp':>4}  {'fp':>4}  {'fn':>4}"]
    for name, m in zip(class_names, per_class):
        lines.append(f"{name:<{width}}  {100 * m.f1:6.1f}  {100 * m.er:6.1f}  {m.tp:4d}  {m.fp:4d}  {m.fn:4d}")
    lines.append(f"{'Average':<{width}}  {100 * agg.average_f1:6.1f}  {100 * agg.average_er:6.1f}")
    lines.append(f"{'Overall':<{width}}  {100 * agg.overall_f1:6.1f}  {100 * agg.overall_er:6.1f}")
    return "\n".join(lines)
