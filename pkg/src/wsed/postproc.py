"""Frame activations to timestamped events: threshold, median filter, runs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .gcrnn import FramePredictions


@dataclass(frozen=True)
class PostProcParams:
    threshold: float = 0.5
    median_width: int = 1

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.median_width < 1 or self.median_width % 2 == 0:
            raise ValueError(f"median width must be odd and positive, got {self.median_width}")


DEFAULT_PARAMS = PostProcParams(0.5, 1)


@dataclass(frozen=True, order=True)
class Event:
    label: str
    onset: float
    offset: float

    def __post_init__(self):
        if not 0.0 <= self.onset < self.offset:
            raise ValueError(f"invalid event interval ({self.onset}, {self.offset})")


@dataclass
class EventList:
    clip_id: str
    events: list[Event] = field(default_factory=list)

    def __post_init__(self):
        self.events = sorted(self.events)

    def for_label(self, label: str) -> list[Event]:
        return [e for e in self.events if e.label == label]


def threshold_frames(values: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(values) > threshold).astype(np.int8)


def median_filter(b: np.ndarray, width: int) -> np.ndarray:
    """Centered running median with edge replication."""
    if width < 1 or width % 2 == 0:
        raise ValueError(f"median width must be odd and positive, got {width}")
    b = np.asarray(b)
    if width == 1 or b.size == 0:
        return b.copy()
    half = width // 2
    padded = np.pad(b, half, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, width)
    # for binary input the median is a majority vote
    return (windows.sum(axis=1) > half).astype(b.dtype)


def runs(b: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as inclusive (start, end) frame pairs."""
    b = np.asarray(b).astype(np.int8)
    edges = np.diff(np.concatenate([[0], b, [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def frames_to_events(b: np.ndarray, hop: int, sample_rate: int, label: str,
                     duration: float | None = None) -> list[Event]:
    step = hop / sample_rate
    events = []
    for t0, t1 in runs(b):
        offset = (t1 + 1) * step
        if duration is not None:
            offset = min(offset, duration)
        events.append(Event(label, t0 * step, offset))
    return events


def events_to_frames(events: Sequence[Event], n_frames: int, hop: int, sample_rate: int) -> np.ndarray:
    """Inverse of :func:`frames_to_events` for masks it produced."""
    step = hop / sample_rate
    mask = np.zeros(n_frames, dtype=np.int8)
    for e in events:
        t0 = int(round(e.onset / step))
        t1 = int(round(e.offset / step))
        mask[t0:t1] = 1
    return mask


def class_mask(z_cla_c: np.ndarray, params: PostProcParams) -> np.ndarray:
    return median_filter(threshold_frames(z_cla_c, params.threshold), params.median_width)


def apply(preds: FramePredictions, params_per_class: Sequence[PostProcParams] | Mapping[int, PostProcParams],
          class_names: Sequence[str], clip_id: str = "", hop: int = 664,
          sample_rate: int = 16000, duration: float | None = None) -> EventList:
    events: list[Event] = []
    for c, name in enumerate(class_names):
        mask = class_mask(preds.z_cla[:, c], params_per_class[c])
        events.extend(frames_to_events(mask, hop, sample_rate, name, duration))
    return EventList(clip_id, events)


def write_events(path, corpus: Mapping[str, EventList] | Sequence[EventList]) -> None:
    """DCASE strong-label TSV: filename, onset, offset, event_label."""
    lists = corpus.values() if isinstance(corpus, Mapping) else corpus
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("filename\tonset\toffset\tevent_label\n")
        for el in sorted(lists, key=lambda e: e.clip_id):
            for e in el.events:
                fh.write(f"{el.clip_id}\t{e.onset:.4f}\t{e.offset:.4f}\t{e.label}\n")
