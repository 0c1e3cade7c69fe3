"""Event annotations, dataset manifests and per-frame triplet targets."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import MissingInput, ParseError, UnknownLabel

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class EventInstance:
    class_id: int
    onset_s: float
    offset_s: float

    def __post_init__(self):
        if not 0 <= self.onset_s < self.offset_s:
            raise ParseError(f"invalid event interval [{self.onset_s}, {self.offset_s}]")

    @property
    def duration_s(self) -> float:
        return self.offset_s - self.onset_s


@dataclass
class RecordingAnnotation:
    recording_id: str
    events: list[EventInstance]
    duration_s: float = float("inf")

    def __post_init__(self):
        self.events = merge_same_class(self.events)


class FrameTriplet(NamedTuple):
    y: float
    p: float
    q: float


@dataclass
class SegmentTarget:
    """Supervision for one segment: ``values[t, c] = (y, p, q)``."""

    values: np.ndarray  # [T, C, 3]
    start_frame: int = 0

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    def triplet(self, t: int, c: int) -> FrameTriplet:
        y, p, q = self.values[t, c]
        return FrameTriplet(float(y), float(p), float(q))


@dataclass
class ManifestEntry:
    audio_path: Path
    annotation_path: Path
    split: str
    recording_id: str = field(default="")

    def __post_init__(self):
        if not self.recording_id:
            self.recording_id = Path(self.audio_path).stem


def merge_same_class(events) -> list[EventInstance]:
    """Union overlapping (or touching) intervals of the same class."""
    merged: list[EventInstance] = []
    by_class: dict[int, list[EventInstance]] = {}
    for ev in events:
        by_class.setdefault(ev.class_id, []).append(ev)
    for cid, evs in by_class.items():
        evs = sorted(evs, key=lambda e: (e.onset_s, e.offset_s))
        cur_on, cur_off = evs[0].onset_s, evs[0].offset_s
        for ev in evs[1:]:
            if ev.onset_s <= cur_off:
                cur_off = max(cur_off, ev.offset_s)
            else:
                merged.append(EventInstance(cid, cur_on, cur_off))
                cur_on, cur_off = ev.onset_s, ev.offset_s
        merged.append(EventInstance(cid, cur_on, cur_off))
    return sorted(merged, key=lambda e: (e.onset_s, e.class_id, e.offset_s))


def load_label_map(path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"label map not found: {path}")
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n]
    if len(set(names)) != len(names):
        raise ParseError(f"{path}: duplicate class names")
    return {name: i for i, name in enumerate(names)}


def save_label_map(path, names) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def parse_annotation_lines(lines, label_map, source="<string>") -> list[EventInstance]:
    events = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"{source}:{lineno}: expected 3 tab-separated fields")
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise ParseError(f"{source}:{lineno}: {exc}") from exc
        label = parts[2].strip()
        if label not in label_map:
            raise UnknownLabel(f"{source}:{lineno}: unknown label {label!r}")
        if not 0 <= onset < offset:
            raise ParseError(f"{source}:{lineno}: onset {onset} must precede offset {offset}")
        events.append(EventInstance(label_map[label], onset, offset))
    return events


def load_annotations(path, label_map, duration_s: float = float("inf")) -> RecordingAnnotation:
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"annotation file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    events = parse_annotation_lines(lines, label_map, source=str(path))
    return RecordingAnnotation(recording_id=path.stem, events=events, duration_s=duration_s)


def save_annotations(path, ann: RecordingAnnotation, class_names) -> None:
    rows = [f"{e.onset_s:.6f}\t{e.offset_s:.6f}\t{class_names[e.class_id]}\n" for e in ann.events]
    Path(path).write_text("".join(rows), encoding="utf-8")


def load_manifest(path) -> list[ManifestEntry]:
    """Parse ``audio<TAB>annotation<TAB>split`` lines; paths resolve against the manifest dir."""
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"manifest not found: {path}")
    root = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in SPLITS:
            raise ParseError(f"{path}:{lineno}: expected audio<TAB>annotation<TAB>split")
        entries.append(ManifestEntry(root / parts[0], root / parts[1], parts[2]))
    ids = [e.recording_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate recording ids")
    return entries


def time_to_frame(t_s, hop_s: float = 0.02):
    """Nearest frame index, halves rounded up."""
    return np.floor(np.asarray(t_s, dtype=np.float64) / hop_s + 0.5).astype(int)


def frame_to_time(n, hop_s: float = 0.02):
    return np.asarray(n, dtype=np.float64) * hop_s


def render_segment_target(
    ann: RecordingAnnotation,
    start_frame: int,
    T: int,
    hop_s: float,
    n_classes: int,
    n_frames: int | None = None,
) -> SegmentTarget:
    """Per-frame triplets for frames ``start_frame .. start_frame + T - 1``.

    Distances to onset/offset are counted in frames, divided by ``T`` and
    clipped to 1. Frames at or past ``n_frames`` stay all-zero.
    """
    if start_frame < 0:
        raise ValueError("start_frame must be >= 0")
    values = np.zeros((T, n_classes, 3))
    n = start_frame + np.arange(T)
    valid = n < n_frames if n_frames is not None else np.ones(T, dtype=bool)
    for ev in ann.events:
        o = int(time_to_frame(ev.onset_s, hop_s))
        f = int(time_to_frame(ev.offset_s, hop_s))
        active = (n >= o) & (n <= f) & valid
        if not active.any():
            continue
        c = ev.class_id
        values[active, c, 0] = 1.0
        values[active, c, 1] = np.minimum((n[active] - o) / T, 1.0)
        values[active, c, 2] = np.minimum((f - n[active]) / T, 1.0)
    return SegmentTarget(values=values, start_frame=start_frame)


def sample_training_segments(recordings, T: int, stride: int) -> list[tuple[str, int]]:
    """Segment starts ``0, stride, 2*stride, ...`` with ``start + T <= N``.

    ``recordings`` holds ``(recording_id, n_frames)`` pairs. A recording
    shorter than ``T`` contributes one zero-padded segment at 0.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for rec_id, n_frames in recordings:
        if n_frames <= T:
            out.append((rec_id, 0))
            continue
        out.extend((rec_id, s) for s in range(0, n_frames - T + 1, stride))
    return out
