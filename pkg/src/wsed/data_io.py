"""Label files, manifests and the synthetic corpus generator."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .dsp import AudioClip, write_wav
from .postproc import Event, EventList

DCASE2018_CLASSES = [
    "Alarm_bell_ringing", "Blender", "Cat", "Dishes", "Dog",
    "Electric_shaver_toothbrush", "Frying", "Running_water", "Speech", "Vacuum_cleaner",
]

SPLITS = ("weak", "unlabelled_in_domain", "test")


class DataError(ValueError):
    pass


def load_class_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if len(set(names)) != len(names):
        raise DataError(f"{path}: duplicate class names")
    return names


def save_class_list(path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def _rows(path) -> list[list[str]]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    return rows[1:] if rows else []


# ---------------------------------------------------------------- weak labels


def load_weak_labels(path, classes: Sequence[str]) -> dict[str, np.ndarray]:
    index = {c: i for i, c in enumerate(classes)}
    out: dict[str, np.ndarray] = {}
    for lineno, row in enumerate(_rows(path), start=2):
        if not row:
            continue
        name = row[0]
        if name in out:
            raise DataError(f"{path}:{lineno}: duplicate filename {name}")
        vec = np.zeros(len(classes), dtype=np.int8)
        field_ = row[1].strip() if len(row) > 1 else ""
        for label in filter(None, (s.strip() for s in field_.split(","))):
            if label not in index:
                raise DataError(f"{path}:{lineno}: unknown class {label!r}; "
                                f"valid classes: {', '.join(classes)}")
            vec[index[label]] = 1
        out[name] = vec
    return out


def save_weak_labels(path, labels: Mapping[str, np.ndarray], classes: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("filename\tevent_labels\n")
        for name in sorted(labels):
            present = [classes[i] for i in np.flatnonzero(labels[name])]
            fh.write(f"{name}\t{','.join(present)}\n")


# ---------------------------------------------------------------- strong labels


def load_strong_labels(path, classes: Sequence[str] | None = None,
                       max_duration: float = 10.0) -> dict[str, EventList]:
    events: dict[str, list[Event]] = {}
    for lineno, row in enumerate(_rows(path), start=2):
        if not row:
            continue
        name = row[0]
        events.setdefault(name, [])
        if len(row) < 4 or not row[1].strip():
            continue  # clip listed without events
        try:
            onset, offset = float(row[1]), float(row[2])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed onset/offset") from None
        label = row[3]
        if not 0.0 <= onset < offset <= max_duration + 1e-9:
            raise DataError(f"{path}:{lineno}: invalid interval onset={onset} offset={offset}")
        if classes is not None and label not in classes:
            raise DataError(f"{path}:{lineno}: unknown class {label!r}; "
                            f"valid classes: {', '.join(classes)}")
        events[name].append(Event(label, onset, offset))
    return {k: EventList(k, v) for k, v in events.items()}


def save_strong_labels(path, corpus: Mapping[str, EventList]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("filename\tonset\toffset\tevent_label\n")
        for name in sorted(corpus):
            if not corpus[name].events:
                fh.write(f"{name}\t\t\t\n")
            for e in corpus[name].events:
                fh.write(f"{name}\t{e.onset:.4f}\t{e.offset:.4f}\t{e.label}\n")


def weak_from_strong(corpus: Mapping[str, EventList], classes: Sequence[str]) -> dict[str, np.ndarray]:
    index = {c: i for i, c in enumerate(classes)}
    out = {}
    for name, el in corpus.items():
        vec = np.zeros(len(classes), dtype=np.int8)
        for e in el.events:
            vec[index[e.label]] = 1
        out[name] = vec
    return out


# ---------------------------------------------------------------- manifests


class ManifestEntry(NamedTuple):
    clip_id: str
    path: str
    split: str


def load_manifest(path, check_files: bool = True) -> list[ManifestEntry]:
    base = Path(path).parent
    entries, seen = [], set()
    for lineno, row in enumerate(_rows(path), start=2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected clip_id, path, split")
        cid, p, split = row
        if split not in SPLITS:
            raise DataError(f"{path}:{lineno}: unknown split {split!r}")
        if cid in seen:
            raise DataError(f"{path}:{lineno}: duplicate clip_id {cid}")
        seen.add(cid)
        full = p if os.path.isabs(p) else str(base / p)
        if check_files and not os.path.exists(full):
            raise FileNotFoundError(full)
        entries.append(ManifestEntry(cid, full, split))
    return entries


def save_manifest(path, entries: Sequence[ManifestEntry]) -> None:
    base = Path(path).resolve().parent
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("clip_id\tpath\tsplit\n")
        for e in entries:
            p = Path(e.path).resolve()
            rel = os.path.relpath(p, base) if p.is_relative_to(base) else str(p)
            fh.write(f"{e.clip_id}\t{rel}\t{e.split}\n")


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------- synthesis

DURATIONS = {"short": (0.1, 0.5), "mid": (0.5, 2.0), "long": (2.0, 8.0)}
ARCHETYPES = ("tone", "noise_burst", "am_tone")


@dataclass
class ClassSpec:
    name: str
    archetype: str = "tone"
    duration: str | tuple[float, float] = "short"
    freq: float = 1000.0

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise DataError(f"unknown archetype {self.archetype!r}")
        if isinstance(self.duration, str):
            if self.duration not in DURATIONS:
                raise DataError(f"unknown duration class {self.duration!r}")
        else:
            lo, hi = self.duration
            if not 0 < lo <= hi <= 10.0:
                raise DataError(f"invalid duration range {self.duration}")
            self.duration = (float(lo), float(hi))

    @property
    def duration_range(self) -> tuple[float, float]:
        return DURATIONS[self.duration] if isinstance(self.duration, str) else self.duration


def _default_classes() -> list[ClassSpec]:
    return [
        ClassSpec("Beep", "tone", "short", 1500.0),
        ClassSpec("Hum", "noise_burst", "long", 3500.0),
        ClassSpec("Chirp", "am_tone", "mid", 600.0),
    ]


@dataclass
class SynthSpec:
    classes: list[ClassSpec] = field(default_factory=_default_classes)
    n_clips: dict[str, int] = field(default_factory=lambda: {"weak": 40, "unlabelled_in_domain": 40, "test": 20})
    events_per_clip: tuple[int, int] = (1, 3)
    overlap: bool = True
    noise: bool = True
    snr_db: tuple[float, float] = (0.0, 15.0)
    seed: int = 0
    sample_rate: int = 16000
    duration: float = 10.0

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "classes" in d:
            d["classes"] = [ClassSpec(**{**c, "duration": tuple(c["duration"]) if isinstance(
                c.get("duration"), list) else c.get("duration", "short")}) for c in d["classes"]]
        for key in ("events_per_clip", "snr_db"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "classes": [{"name": c.name, "archetype": c.archetype,
                         "duration": list(c.duration) if isinstance(c.duration, tuple) else c.duration,
                         "freq": c.freq} for c in self.classes],
            "n_clips": dict(self.n_clips), "events_per_clip": list(self.events_per_clip),
            "overlap": self.overlap, "noise": self.noise, "snr_db": list(self.snr_db),
            "seed": self.seed, "sample_rate": self.sample_rate, "duration": self.duration,
        }


class SynthClip(NamedTuple):
    clip_id: str
    split: str
    audio: AudioClip
    events: EventList


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.shape[0], dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n)
    return x / np.sqrt(np.mean(x * x))


def _event_wave(cs: ClassSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if cs.archetype == "tone":
        x = np.sin(2 * np.pi * cs.freq * t) + 0.5 * np.sin(2 * np.pi * 2 * cs.freq * t)
    elif cs.archetype == "am_tone":
        rate = rng.uniform(4.0, 8.0)
        x = np.sin(2 * np.pi * cs.freq * t) * (0.6 + 0.4 * np.sin(2 * np.pi * rate * t))
    else:
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        spec[np.abs(freqs - cs.freq) > 0.25 * cs.freq] = 0.0
        x = np.fft.irfft(spec, n)
    ramp = min(n // 2, int(0.01 * sr))
    if ramp > 0:
        env = np.ones(n)
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp], env[n - ramp:] = fade, fade[::-1]
        x = x * env
    rms = np.sqrt(np.mean(x * x))
    return x / rms if rms > 0 else x


def _place_events(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, float, float]]:
    lo, hi = spec.events_per_clip
    n_events = int(rng.integers(lo, hi + 1))
    placed: list[tuple[int, float, float]] = []
    for _ in range(n_events):
        for _attempt in range(100):
            c = int(rng.integers(spec.n_classes))
            dlo, dhi = spec.classes[c].duration_range
            dur = round(float(rng.uniform(dlo, dhi)), 3)
            onset = round(float(rng.uniform(0.0, spec.duration - dur)), 3)
            offset = round(onset + dur, 3)
            ok = True
            for c2, on2, off2 in placed:
                gap = 0.3 if c2 == c else 0.0
                if (c2 == c or not spec.overlap) and onset < off2 + gap and on2 < offset + gap:
                    ok = False
                    break
            if ok:
                placed.append((c, onset, offset))
                break
    return placed


def synth_clip(spec: SynthSpec, split_index: int, clip_index: int) -> tuple[np.ndarray, list[Event]]:
    # independent stream per clip, derived from the master seed
    rng = np.random.default_rng([spec.seed, split_index, clip_index])
    sr = spec.sample_rate
    n = int(round(spec.duration * sr))
    mix = np.zeros(n)
    events = []
    for c, onset, offset in _place_events(spec, rng):
        cs = spec.classes[c]
        s0, s1 = int(round(onset * sr)), int(round(offset * sr))
        wave = _event_wave(cs, s1 - s0, sr, rng)
        if spec.noise:
            snr = rng.uniform(*spec.snr_db)
            wave = wave * 10 ** (snr / 20.0)
        mix[s0:s1] += wave
        events.append(Event(cs.name, onset, offset))
    if spec.noise:
        mix += pink_noise(n, rng)
    peak = np.max(np.abs(mix))
    if peak > 0:
        mix *= 0.9 / peak
    # quantize to the 16-bit grid so in-memory and on-disk clips agree
    mix = np.round(mix * 32768.0) / 32768.0
    return mix.astype(np.float32), events


def generate_corpus(spec: SynthSpec) -> list[SynthClip]:
    clips = []
    for si, split in enumerate(SPLITS):
        for i in range(spec.n_clips.get(split, 0)):
            samples, events = synth_clip(spec, si, i)
            cid = f"{split}_{i:05d}.wav"
            clips.append(SynthClip(cid, split, AudioClip(samples, spec.sample_rate),
                                   EventList(cid, events)))
    return clips


def synthesize(spec: SynthSpec, out_dir) -> dict[str, Path]:
    """Write WAVs, label TSVs, class list and manifest; returns their paths.

    Label files exist for the weak (weak + strong) and test (strong) splits;
    the unlabelled split ships without labels.
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    clips = generate_corpus(spec)
    entries = []
    for clip in clips:
        path = out / "audio" / clip.clip_id
        write_wav(path, clip.audio)
        entries.append(ManifestEntry(clip.clip_id, str(path), clip.split))
    paths = {"manifest": out / "manifest.tsv", "classes": out / "classes.txt"}
    save_manifest(paths["manifest"], entries)
    save_class_list(paths["classes"], spec.class_names)
    for split, stem in (("weak", "weak"), ("test", "test")):
        strong = {c.clip_id: c.events for c in clips if c.split == split}
        if not strong:
            continue
        paths[f"{stem}_strong"] = out / f"{stem}_strong.tsv"
        save_strong_labels(paths[f"{stem}_strong"], strong)
        paths[f"{stem}_weak"] = out / f"{stem}_weak.tsv"
        save_weak_labels(paths[f"{stem}_weak"], weak_from_strong(strong, spec.class_names),
                         spec.class_names)
    (out / "synth_spec.json").write_text(json.dumps(spec.to_dict(), indent=2), encoding="utf-8")
    return paths
