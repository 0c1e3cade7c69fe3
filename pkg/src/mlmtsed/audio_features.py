"""Waveform loading and log-Mel spectrogram extraction."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, InvalidConfig, MissingInput, TooShort, UnsupportedFormat

SAMPLE_RATE = 44100
LMEL_MAGIC = b"LMEL"


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class SpectrogramConfig:
    n_mels: int = 40
    fmin_hz: float = 50.0
    fmax_hz: float = 22050.0
    win_ms: float = 40.0
    hop_ms: float = 20.0
    fft_size: int = 2048
    log_floor: float = 1e-10

    def validate(self, sample_rate: int = SAMPLE_RATE) -> None:
        if self.n_mels < 1:
            raise InvalidConfig("n_mels must be >= 1")
        if not np.isclose(self.hop_ms, self.win_ms / 2):
            raise InvalidConfig("hop_ms must be half of win_ms (50% overlap)")
        if not 0 <= self.fmin_hz < self.fmax_hz <= sample_rate / 2:
            raise InvalidConfig(
                f"need 0 <= fmin < fmax <= {sample_rate / 2}, got [{self.fmin_hz}, {self.fmax_hz}]"
            )
        if self.fft_size < self.win_length(sample_rate):
            raise InvalidConfig("fft_size shorter than the analysis window")
        if self.log_floor <= 0:
            raise InvalidConfig("log_floor must be positive")

    def win_length(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.win_ms * sample_rate / 1000.0))

    def hop_length(self, sample_rate: int = SAMPLE_RATE) -> int:
        return int(round(self.hop_ms * sample_rate / 1000.0))

    @property
    def hop_s(self) -> float:
        return self.hop_ms / 1000.0


@dataclass
class MelFilterbank:
    weights: np.ndarray  # [n_mels, fft_size // 2 + 1]
    center_freqs_hz: np.ndarray


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    hop_s: float = 0.02
    recording_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def load_wav(path) -> Waveform:
    """Read a PCM WAV file, keeping only the first channel.

    Integer samples are scaled by ``2**(bits-1)`` so int16 full scale maps
    to ``[-1, 32767/32768]``.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"audio file not found: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise UnsupportedFormat(f"{path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise UnsupportedFormat(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} Hz")
    if width == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample width {width} bytes")
    return Waveform(data[::n_channels].copy(), rate)


def write_wav(path, w: Waveform) -> None:
    """Write mono 16-bit PCM. Samples are clipped to the int16 range."""
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def build_mel_filterbank(cfg: SpectrogramConfig, sample_rate: int = SAMPLE_RATE) -> MelFilterbank:
    """Unit-peak triangular filters equally spaced on the HTK mel axis."""
    cfg.validate(sample_rate)
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin_hz), hz_to_mel(cfg.fmax_hz), cfg.n_mels + 2))
    lower, centers, upper = edges[:-2], edges[1:-1], edges[2:]

    center_bins = np.round(centers * cfg.fft_size / sample_rate).astype(int)
    if np.any(np.diff(center_bins) == 0):
        raise InvalidConfig("two mel filter centers fall into the same FFT bin")

    rising = (bin_freqs[None, :] - lower[:, None]) / (centers - lower)[:, None]
    falling = (upper[:, None] - bin_freqs[None, :]) / (upper - centers)[:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    peaks = weights.max(axis=1)
    if np.any(peaks <= 0):
        raise InvalidConfig("a mel filter covers no FFT bin; raise fft_size or lower n_mels")
    weights /= peaks[:, None]
    return MelFilterbank(weights=weights, center_freqs_hz=centers)


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1


def compute_logmel(
    w: Waveform,
    cfg: SpectrogramConfig,
    fb: MelFilterbank | None = None,
    recording_id: str = "",
) -> LogMelSpectrogram:
    if fb is None:
        fb = build_mel_filterbank(cfg, w.sample_rate)
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    if len(w.samples) < win:
        raise TooShort(f"waveform has {len(w.samples)} samples, one window needs {win}")
    n = frame_count(len(w.samples), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * np.hamming(win), n=cfg.fft_size, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = fb.weights @ power.T
    values = np.log(np.maximum(mel, cfg.log_floor))
    return LogMelSpectrogram(values=values, hop_s=cfg.hop_s, recording_id=recording_id)


@dataclass
class Standardizer:
    """Per-mel-bin mean and standard deviation (population)."""

    mean: np.ndarray
    std: np.ndarray
    min_std: float = field(default=1e-6, repr=False)

    def apply(self, spec):
        values = spec.values if isinstance(spec, LogMelSpectrogram) else np.asarray(spec)
        out = (values - self.mean[:, None]) / self.std[:, None]
        if isinstance(spec, LogMelSpectrogram):
            return LogMelSpectrogram(out, spec.hop_s, spec.recording_id)
        return out


def fit_standardizer(train_specs, min_std: float = 1e-6) -> Standardizer:
    mats = [s.values if isinstance(s, LogMelSpectrogram) else np.asarray(s) for s in train_specs]
    if not mats or sum(m.shape[1] for m in mats) < 2:
        raise EmptyCorpus("need at least two frames to fit a standardizer")
    stacked = np.concatenate(mats, axis=1)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), min_std)
    return Standardizer(mean=mean, std=std, min_std=min_std)


def apply_standardizer(st: Standardizer, spec):
    return st.apply(spec)


def save_feature_cache(path, spec: LogMelSpectrogram) -> None:
    m, n = spec.values.shape
    payload = np.ascontiguousarray(spec.values.T, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(LMEL_MAGIC + struct.pack("<III", m, n, 0))
        fh.write(payload.tobytes())


def load_feature_cache(path, hop_s: float = 0.02) -> LogMelSpectrogram:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"feature cache not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != LMEL_MAGIC:
        raise UnsupportedFormat(f"{path}: not an LMEL feature file")
    m, n, _ = struct.unpack("<III", blob[4:16])
    if len(blob) != 16 + 4 * m * n:
        raise UnsupportedFormat(f"{path}: truncated feature payload")
    values = np.frombuffer(blob[16:], dtype="<f4").reshape(n, m).T.astype(np.float64)
    return LogMelSpectrogram(values=values, hop_s=hop_s, recording_id=path.stem)
