"""Recordings on disk -> features + annotations in memory."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotation import RecordingAnnotation, load_annotations, load_manifest, render_segment_target
from .audio_features import (
    LogMelSpectrogram,
    SpectrogramConfig,
    Standardizer,
    build_mel_filterbank,
    compute_logmel,
    load_feature_cache,
    load_wav,
    save_feature_cache,
)


@dataclass
class Recording:
    recording_id: str
    features: LogMelSpectrogram  # raw log-mel, not standardized
    annotation: RecordingAnnotation
    split: str = "train"

    @property
    def n_frames(self) -> int:
        return self.features.n_frames


def load_dataset(manifest, label_map, spec_cfg: SpectrogramConfig | None = None, cache_dir=None, splits=None):
    spec_cfg = spec_cfg or SpectrogramConfig()
    fb = build_mel_filterbank(spec_cfg)
    out = []
    for entry in load_manifest(manifest):
        if splits is not None and entry.split not in splits:
            continue
        cache = Path(cache_dir) / f"{entry.recording_id}.lmel" if cache_dir else None
        if cache is not None and cache.exists():
            feats = load_feature_cache(cache, spec_cfg.hop_s)
            duration = None
        else:
            wav = load_wav(entry.audio_path)
            feats = compute_logmel(wav, spec_cfg, fb, entry.recording_id)
            duration = wav.duration_s
            if cache is not None:
                cache.parent.mkdir(parents=True, exist_ok=True)
                save_feature_cache(cache, feats)
        # round fresh features to the cache's float32 precision so both paths agree bit for bit
        feats.values = feats.values.astype(np.float32).astype(np.float64)
        feats.recording_id = entry.recording_id
        ann = load_annotations(entry.annotation_path, label_map, duration or float("inf"))
        ann.recording_id = entry.recording_id
        out.append(Recording(entry.recording_id, feats, ann, entry.split))
    return out


def segment_input(features: np.ndarray, start: int, T: int) -> np.ndarray:
    """``[M, T]`` window starting at ``start``; frames past the end are zero."""
    M, N = features.shape
    seg = np.zeros((M, T))
    stop = min(start + T, N)
    if stop > start:
        seg[:, : stop - start] = features[:, start:stop]
    return seg


def build_segments(recordings, starts, standardizer: Standardizer, T: int, n_classes: int, hop_s: float):
    """Stack inputs ``[S, 1, M, T]`` and targets ``[S, T, C, 3]`` for (recording_id, start) pairs."""
    by_id = {r.recording_id: r for r in recordings}
    std_cache = {}
    xs, ys = [], []
    for rec_id, start in starts:
        rec = by_id[rec_id]
        if rec_id not in std_cache:
            std_cache[rec_id] = standardizer.apply(rec.features.values)
        xs.append(segment_input(std_cache[rec_id], start, T)[None])
        ys.append(render_segment_target(rec.annotation, start, T, hop_s, n_classes, rec.n_frames).values)
    return np.stack(xs), np.stack(ys)
