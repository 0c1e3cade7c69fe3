"""Confidence-accumulation decoding and the median-filter baseline decode.

Frame indices are 0-based throughout. Step ``t`` (0-based) of a segment
starting at frame ``m`` sits at frame ``m + t``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import segment_input
from .errors import EvenWindow


@dataclass
class DecoderConfig:
    alpha: np.ndarray
    beta: np.ndarray
    segment_hop: int | None = None  # None -> T (non-overlapping)
    roi: str = "pq"  # "pp" reproduces the symmetric p-only bound

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        for name, arr in (("alpha", self.alpha), ("beta", self.beta)):
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValueError(f"{name} thresholds must lie in [0, 1]")


@dataclass
class ConfidenceTrack:
    scores: np.ndarray  # [C, N]
    normalized: bool = False


@dataclass(frozen=True)
class DetectedEvent:
    class_id: int
    onset_frame: int
    offset_frame: int  # inclusive
    peak_score: float = 1.0

    def onset_s(self, hop_s: float = 0.02) -> float:
        return self.onset_frame * hop_s

    def offset_s(self, hop_s: float = 0.02) -> float:
        return self.offset_frame * hop_s


def _round_frames(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


@dataclass
class Contribution:
    """Sparse additions to a track: ``track[class_idx[i], frame_idx[i]] += value[i]``."""

    class_idx: np.ndarray
    frame_idx: np.ndarray
    value: np.ndarray = field(repr=False)

    def add_to(self, scores: np.ndarray) -> None:
        np.add.at(scores, (self.class_idx, self.frame_idx), self.value)


def segment_contribution(pred, start: int, alpha, n_frames: int, T: int | None = None, roi: str = "pq"):
    """ROI contributions of one segment's predictions ``[T, C, 3]``.

    Each step with activity above ``alpha[c]`` adds its likelihood to every
    frame in ``[m + t - round(p^ T), m + t + round(q^ T)]`` clipped to the
    recording. Entries are emitted in ascending ``t`` then ``c``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    T = pred.shape[0] if T is None else T
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (pred.shape[1],))
    y = pred[..., 0]
    t_idx, c_idx = np.nonzero(y > alpha[None, :])
    if t_idx.size == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Contribution(empty, empty, np.zeros(0))
    back = _round_frames(pred[t_idx, c_idx, 1] * T)
    fwd_col = 2 if roi == "pq" else 1
    ahead = _round_frames(pred[t_idx, c_idx, fwd_col] * T)
    centre = start + t_idx
    lo = np.clip(centre - back, 0, n_frames - 1)
    hi = np.clip(centre + ahead, 0, n_frames - 1)
    keep = (centre < n_frames) & (hi >= lo)
    lo, hi, c_idx, vals = lo[keep], hi[keep], c_idx[keep], y[t_idx[keep], c_idx[keep]]
    lengths = hi - lo + 1
    offsets = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    return Contribution(
        class_idx=np.repeat(c_idx, lengths),
        frame_idx=np.repeat(lo, lengths) + offsets,
        value=np.repeat(vals, lengths),
    )


def segment_starts(n_frames: int, T: int, hop: int | None = None) -> list[int]:
    hop = T if hop is None else hop
    return list(range(0, max(n_frames, 1), hop))


def predict_segments(model, features: np.ndarray, T: int, hop: int | None = None, batch_size: int = 8):
    """Infer-mode predictions for segments tiling a standardized ``[M, N]`` feature matrix."""
    starts = segment_starts(features.shape[1], T, hop)
    out = []
    for i in range(0, len(starts), batch_size):
        chunk = starts[i : i + batch_size]
        xs = np.stack([segment_input(features, s, T) for s in chunk])
        preds = model.predict(xs)
        out.extend(zip(chunk, preds))
    return out


def accumulate_confidence(segment_preds, n_frames: int, alpha, T: int | None = None, roi: str = "pq"):
    """Raw confidence ``f_c(n)`` summed over ``(start, pred)`` segments, in the given order."""
    if not segment_preds:
        raise ValueError("no segment predictions")
    C = np.asarray(segment_preds[0][1]).shape[1]
    scores = np.zeros((C, n_frames))
    for start, pred in segment_preds:
        segment_contribution(pred, start, alpha, n_frames, T, roi).add_to(scores)
    return ConfidenceTrack(scores)


def average_tracks(tracks) -> ConfidenceTrack:
    """Elementwise mean of raw tracks from several (cross-validation) models."""
    tracks = list(tracks)
    scores = tracks[0].scores.copy()
    for tr in tracks[1:]:
        scores += tr.scores
    return ConfidenceTrack(scores / len(tracks))


def confidence_from_models(models_preds, n_frames: int, alpha, T: int, roi: str = "pq") -> ConfidenceTrack:
    """Accumulate per model, then average the raw tracks."""
    return average_tracks(accumulate_confidence(sp, n_frames, alpha, T, roi) for sp in models_preds)


def normalize_confidence(track: ConfidenceTrack) -> ConfidenceTrack:
    """Divide each class row by its maximum; all-zero rows stay zero."""
    peak = track.scores.max(axis=1, keepdims=True)
    scores = np.divide(track.scores, peak, out=np.zeros_like(track.scores), where=peak > 0)
    return ConfidenceTrack(scores, normalized=True)


def active_runs(active: np.ndarray):
    """Start/stop (inclusive) indices of maximal True runs."""
    padded = np.concatenate([[False], active, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return edges[0::2], edges[1::2] - 1


def extract_events(track: ConfidenceTrack, beta) -> list[DetectedEvent]:
    """Maximal runs with score >= beta (and > 0) become events."""
    scores = track.scores
    beta = np.broadcast_to(np.asarray(beta, dtype=np.float64), (scores.shape[0],))
    events = []
    for c in range(scores.shape[0]):
        on, off = active_runs((scores[c] >= beta[c]) & (scores[c] > 0))
        for a, b in zip(on, off):
            events.append(DetectedEvent(c, int(a), int(b), float(scores[c, a : b + 1].max())))
    return sorted(events, key=lambda e: (e.onset_frame, e.class_id))


# baseline --------------------------------------------------------------------


def framewise_activity(segment_preds, n_frames: int) -> np.ndarray:
    """Per-frame activity ``[N, C]`` stitched from non-overlapping segments."""
    C = np.asarray(segment_preds[0][1]).shape[1]
    y = np.zeros((n_frames, C))
    for start, pred in segment_preds:
        stop = min(start + len(pred), n_frames)
        if stop > start:
            y[start:stop] = np.asarray(pred)[: stop - start, :, 0]
    return y


def median_filter_binary(x: np.ndarray, window: int) -> np.ndarray:
    """Running median of a 0/1 sequence with zero padding at both ends."""
    if window % 2 == 0 or window < 1:
        raise EvenWindow(f"median window must be a positive odd integer, got {window}")
    x = np.asarray(x, dtype=np.int64)
    if window == 1:
        return x.copy()
    half = window // 2
    csum = np.concatenate([[0], np.cumsum(np.pad(x, half))])
    counts = csum[window:] - csum[:-window]
    return (counts > half).astype(np.int64)


def baseline_decode(activity: np.ndarray, alpha, windows) -> list[DetectedEvent]:
    """Threshold ``[N, C]`` likelihoods, median-filter per class, emit runs of ones."""
    activity = np.asarray(activity, dtype=np.float64)
    C = activity.shape[1]
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (C,))
    windows = np.broadcast_to(np.asarray(windows, dtype=np.int64), (C,))
    events = []
    for c in range(C):
        smooth = median_filter_binary(activity[:, c] > alpha[c], int(windows[c]))
        on, off = active_runs(smooth.astype(bool))
        for a, b in zip(on, off):
            events.append(DetectedEvent(c, int(a), int(b), float(activity[a : b + 1, c].max())))
    return sorted(events, key=lambda e: (e.onset_frame, e.class_id))


# exports ---------------------------------------------------------------------


def write_confidence_csv(path, track: ConfidenceTrack, class_names, hop_s: float = 0.02) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "class", "score"])
        C, N = track.scores.shape
        for n in range(N):
            for c in range(C):
                w.writerow([f"{n * hop_s:.2f}", class_names[c], f"{track.scores[c, n]:.6f}"])


def write_detections_csv(path, rows) -> None:
    """``rows``: iterable of (recording_id, class_name, onset_s, offset_s, peak)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["recording_id", "class", "onset_s", "offset_s", "peak"])
        for rec, cls, on, off, peak in rows:
            w.writerow([rec, cls, f"{on:.3f}", f"{off:.3f}", f"{peak:.6f}"])


def read_detections_csv(path) -> list[tuple[str, str, float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        return [
            (r["recording_id"], r["class"], float(r["onset_s"]), float(r["offset_s"]), float(r["peak"]))
            for r in reader
        ]
