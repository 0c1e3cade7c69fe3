"""Deterministic synthetic polyphonic recordings with exact annotations."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .annotation import EventInstance, RecordingAnnotation, save_annotations, save_label_map
from .audio_features import SAMPLE_RATE, Waveform, hz_to_mel, mel_to_hz, write_wav
from .errors import InvalidConfig, InvalidDuration, PlacementFailure

# class centres are spaced 220 mel apart (a little over two mel filters)
_BASE_MEL = float(hz_to_mel(250.0))
_MEL_STEP = 220.0
MAX_CLASSES = 16


@dataclass
class SynthConfig:
    n_classes: int = 4
    n_train: int = 12
    n_val: int = 4
    n_test: int = 4
    recording_s: float = 20.0
    max_polyphony: int = 1
    events_per_recording: tuple[int, int] = (8, 12)
    event_duration_s: tuple[float, float] = (0.3, 1.2)
    snr_db: tuple[float, float] = (6.0, 15.0)
    noise_level: float = 0.01
    min_gap_s: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.events_per_recording = tuple(int(v) for v in self.events_per_recording)
        self.event_duration_s = tuple(float(v) for v in self.event_duration_s)
        self.snr_db = tuple(float(v) for v in self.snr_db)

    def validate(self) -> None:
        if not 1 <= self.n_classes <= MAX_CLASSES:
            raise InvalidConfig(f"n_classes must be in [1, {MAX_CLASSES}]")
        if self.max_polyphony < 1:
            raise InvalidConfig("max_polyphony must be >= 1")
        lo, hi = self.event_duration_s
        if not 0.2 <= lo <= hi <= 3.0:
            raise InvalidConfig("event durations must lie in [0.2, 3] s")
        if self.events_per_recording[0] > self.events_per_recording[1] or self.events_per_recording[0] < 0:
            raise InvalidConfig("bad events_per_recording range")
        if self.recording_s <= hi + 0.2:
            raise InvalidConfig("recording_s too short for the longest event")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("events_per_recording", "event_duration_s", "snr_db"):
            d[k] = list(d[k])
        return d

    @property
    def class_names(self) -> list[str]:
        return [f"event{c:02d}" for c in range(self.n_classes)]

    def split_of(self, index: int) -> str:
        if index < self.n_train:
            return "train"
        if index < self.n_train + self.n_val:
            return "val"
        return "test"

    @property
    def n_recordings(self) -> int:
        return self.n_train + self.n_val + self.n_test


def class_center_hz(class_id: int) -> float:
    return float(mel_to_hz(_BASE_MEL + _MEL_STEP * class_id))


def make_template(class_id: int, duration_s: float, seed: int = 0, sample_rate: int = SAMPLE_RATE) -> Waveform:
    """Harmonic stack + amplitude modulation + band-limited noise, peak-normalized."""
    if not 0.2 <= duration_s <= 3.0:
        raise InvalidDuration(f"template duration {duration_s} s outside [0.2, 3] s")
    rng = np.random.default_rng([seed, class_id, int(round(duration_s * 1000))])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    centre = class_center_hz(class_id)
    f0 = centre / 3.0
    sig = np.zeros(n)
    for h in range(1, 7):
        f = f0 * h
        if f >= sample_rate / 2:
            break
        weight = np.exp(-0.5 * (np.log2(f / centre) / 0.3) ** 2)
        sig += weight * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))

    noise = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    noise[np.abs(np.log2(np.maximum(freqs, 1.0) / centre)) > 0.25] = 0.0
    noise = np.fft.irfft(noise, n)
    noise_peak = np.max(np.abs(noise))
    if noise_peak > 0:
        sig += 0.3 * noise / noise_peak

    am_rate = 2.0 + 1.3 * class_id
    sig *= 0.75 + 0.25 * np.cos(2 * np.pi * am_rate * t)

    fade = min(int(0.01 * sample_rate), n // 2)
    ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
    sig[:fade] *= ramp
    sig[n - fade :] *= ramp[::-1]
    return Waveform(sig / np.max(np.abs(sig)), sample_rate)


def pink_noise(n: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    spec = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec /= np.sqrt(np.maximum(freqs, freqs[1] if n > 1 else 1.0))
    x = np.fft.irfft(spec, n)
    return x / np.sqrt(np.mean(x**2))


def _max_concurrency(intervals, on, off) -> int:
    """Largest number of ``intervals`` simultaneously active inside ``[on, off]``."""
    inside = [(max(a, on), min(b, off)) for a, b in intervals if a < off and b > on]
    points = sorted([(a, 1) for a, _ in inside] + [(b, -1) for _, b in inside], key=lambda p: (p[0], p[1]))
    best = cur = 0
    for _, d in points:
        cur += d
        best = max(best, cur)
    return best


def place_events(cfg: SynthConfig, rng: np.random.Generator, max_tries: int = 2000) -> list[EventInstance]:
    n_events = int(rng.integers(cfg.events_per_recording[0], cfg.events_per_recording[1] + 1))
    lo, hi = cfg.event_duration_s
    placed: list[EventInstance] = []
    gap = cfg.min_gap_s
    for _ in range(n_events):
        for _ in range(max_tries):
            c = int(rng.integers(cfg.n_classes))
            dur = round(float(rng.uniform(lo, hi)), 3)
            on = round(float(rng.uniform(0.1, cfg.recording_s - dur - 0.1)), 3)
            off = round(on + dur, 3)
            same = [(e.onset_s - gap, e.offset_s + gap) for e in placed if e.class_id == c]
            if any(a < off and b > on for a, b in same):
                continue
            if cfg.max_polyphony == 1:
                others = [(e.onset_s - gap, e.offset_s + gap) for e in placed]
                if any(a < off and b > on for a, b in others):
                    continue
            elif _max_concurrency([(e.onset_s, e.offset_s) for e in placed], on, off) + 1 > cfg.max_polyphony:
                continue
            placed.append(EventInstance(c, on, off))
            break
        else:
            raise PlacementFailure(f"could not place event {len(placed) + 1} of {n_events}")
    return sorted(placed, key=lambda e: (e.onset_s, e.class_id))


def synthesize_recording(cfg: SynthConfig, recording_index: int):
    """Mixture waveform and its exact annotation for one recording index."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, recording_index])
    events = place_events(cfg, rng)
    n = int(round(cfg.recording_s * SAMPLE_RATE))
    if cfg.noise_level > 0:
        mix = cfg.noise_level * pink_noise(n, rng)
    else:
        mix = np.zeros(n)
    for ev in events:
        tpl = make_template(ev.class_id, ev.duration_s, seed=int(rng.integers(2**31))).samples
        snr = rng.uniform(*cfg.snr_db)
        ref_rms = cfg.noise_level if cfg.noise_level > 0 else 0.01
        tpl = tpl * (ref_rms * 10 ** (snr / 20.0) / np.sqrt(np.mean(tpl**2)))
        start = int(round(ev.onset_s * SAMPLE_RATE))
        stop = min(start + len(tpl), n)
        mix[start:stop] += tpl[: stop - start]
    peak = np.max(np.abs(mix))
    if peak > 0.99:
        mix *= 0.99 / peak
    rec_id = f"{cfg.split_of(recording_index)}_{recording_index:03d}"
    return Waveform(mix), RecordingAnnotation(rec_id, events, cfg.recording_s)


def emit_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write WAVs, annotation files, ``labels.txt`` and ``manifest.tsv``; returns the manifest path."""
    cfg.validate()
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    names = cfg.class_names
    save_label_map(out / "labels.txt", names)
    rows = []
    for i in range(cfg.n_recordings):
        wav, ann = synthesize_recording(cfg, i)
        audio_rel = f"audio/{ann.recording_id}.wav"
        ann_rel = f"annotations/{ann.recording_id}.txt"
        write_wav(out / audio_rel, wav)
        save_annotations(out / ann_rel, ann, names)
        rows.append(f"{audio_rel}\t{ann_rel}\t{cfg.split_of(i)}\n")
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(rows), encoding="utf-8")
    return manifest
