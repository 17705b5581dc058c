"""Self-adaptive label refinement.

For every class and every candidate post-processing, turn the strong
prediction of each clip that is weakly predicted positive into new samples
(each predicted event labelled 1, the remaining frames labelled 0), score
them with the network, and keep the parameterization whose weak predictions
agree best with those labels. No annotations are read.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import gcrnn
from .gcrnn import GcrnnConfig
from .postproc import DEFAULT_PARAMS, PostProcParams, class_mask, runs
from .vat import PROB_EPS

TIE_TOL = 1e-9


@dataclass
class SalrGrid:
    thresholds: list[float] = field(default_factory=lambda: [round(0.1 * i, 1) for i in range(1, 10)])
    widths: list[int] = field(default_factory=lambda: [1, 5, 11, 21, 41, 81])

    def __post_init__(self):
        if not self.thresholds or not self.widths:
            raise ValueError("SALR grid must be non-empty")
        if any(w < 1 or w % 2 == 0 for w in self.widths):
            raise ValueError("SALR widths must be odd and positive")

    def points(self) -> list[PostProcParams]:
        return [PostProcParams(t, w) for w in sorted(self.widths) for t in sorted(self.thresholds)]


@dataclass
class ClassRefinement:
    name: str
    chosen: PostProcParams
    losses: dict[PostProcParams, float]
    n_clips: int
    n_segments: dict[PostProcParams, int]
    fallback: bool = False


@dataclass
class SalrReport:
    classes: list[ClassRefinement]

    @property
    def params(self) -> list[PostProcParams]:
        return [c.chosen for c in self.classes]

    def to_tsv(self) -> str:
        lines = ["class\tthreshold\twidth\tloss\tn_clips\tn_segments\tselected"]
        for c in self.classes:
            if c.fallback:
                p = c.chosen
                lines.append(f"{c.name}\t{p.threshold:g}\t{p.median_width}\tno_data\t0\t0\t1")
                continue
            for p, loss in c.losses.items():
                lines.append(f"{c.name}\t{p.threshold:g}\t{p.median_width}\t{loss:.10g}"
                             f"\t{c.n_clips}\t{c.n_segments[p]}\t{int(p == c.chosen)}")
        return "\n".join(lines) + "\n"


def segment_frames(mask: np.ndarray) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Frame indices of each predicted event run, and of all remaining frames."""
    mask = np.asarray(mask)
    positives = [np.arange(t0, t1 + 1) for t0, t1 in runs(mask)]
    rest = np.flatnonzero(mask == 0)
    return positives, (rest if rest.size else None)


def segment_clip(x: np.ndarray, strong_mask: np.ndarray) -> tuple[list[np.ndarray], np.ndarray | None]:
    """Split a (T, F) spectrogram into positive samples and one negative sample."""
    positives, rest = segment_frames(strong_mask)
    return [x[idx] for idx in positives], (x[rest] if rest is not None else None)


def alignment_loss(probs: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mean binary cross-entropy over segments; ``None`` when there are none."""
    if len(probs) == 0:
        return None
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    l = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(l * np.log(p) + (1 - l) * np.log(1 - p)))


def _select(losses: Mapping[PostProcParams, float]) -> PostProcParams:
    best = min(losses.values())
    tied = [p for p, v in losses.items() if v - best <= TIE_TOL * max(1.0, abs(best))]
    return min(tied, key=lambda p: (p.median_width, p.threshold))


def refine(params, model_config: GcrnnConfig, clips: Mapping[str, np.ndarray],
           class_names: Sequence[str], grid: SalrGrid | None = None,
           presence_threshold: float = 0.5, batch: int = 32) -> SalrReport:
    grid = grid or SalrGrid()
    points = grid.points()
    ids = sorted(clips)
    full = gcrnn.predict_batch(params, [clips[i] for i in ids], model_config, chunk=batch)

    # collect every segment needed by any (class, grid point)
    plan: dict[tuple[int, PostProcParams], list[tuple[str, bytes, int]]] = {}
    needed: dict[tuple[str, bytes], np.ndarray] = {}
    qualifying: dict[int, int] = {}
    for c in range(len(class_names)):
        chosen = [k for k, (_, y) in enumerate(full) if y[c] > presence_threshold]
        qualifying[c] = len(chosen)
        for p in points:
            entries = []
            for k in chosen:
                mask = class_mask(full[k][0].z_cla[:, c], p)
                positives, rest = segment_frames(mask)
                for idx, label in [(i, 1) for i in positives] + ([(rest, 0)] if rest is not None else []):
                    key = idx.astype(np.int32).tobytes()
                    needed.setdefault((ids[k], key), idx)
                    entries.append((ids[k], key, label))
            plan[(c, p)] = entries

    # one forward per unique segment, batched by length
    keys = sorted(needed, key=lambda k: (len(needed[k]), k))
    segment_probs: dict[tuple[str, bytes], np.ndarray] = {}
    results = gcrnn.predict_batch(params, [clips[cid][needed[(cid, key)]] for cid, key in keys],
                                  model_config, chunk=batch)
    for k, (_, y) in zip(keys, results):
        segment_probs[k] = y

    classes = []
    for c, name in enumerate(class_names):
        losses, counts = {}, {}
        for p in points:
            entries = plan[(c, p)]
            loss = alignment_loss([segment_probs[(cid, key)][c] for cid, key, _ in entries],
                                  [label for _, _, label in entries])
            if loss is not None and math.isfinite(loss):
                losses[p], counts[p] = loss, len(entries)
        if not losses:
            classes.append(ClassRefinement(name, DEFAULT_PARAMS, {}, 0, {}, fallback=True))
            continue
        classes.append(ClassRefinement(name, _select(losses), losses, qualifying[c], counts))
    return SalrReport(classes)


def write_report(path, report: SalrReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_tsv())


def write_params(path, names: Sequence[str], params: Sequence[PostProcParams]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class\tthreshold\twidth\n")
        for n, p in zip(names, params):
            fh.write(f"{n}\t{p.threshold:g}\t{p.median_width}\n")


def read_params(path, names: Sequence[str]) -> list[PostProcParams]:
    """Per-class params by name; classes missing from the file get (0.5, 1)."""
    found: dict[str, PostProcParams] = {}
    with open(path, encoding="utf-8") as fh:
        next(fh, None)
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 3:
                continue
            if parts[0] not in names:
                raise ValueError(f"{path}: unknown class {parts[0]!r}")
            found[parts[0]] = PostProcParams(float(parts[1]), int(parts[2]))
    return [found.get(n, DEFAULT_PARAMS) for n in names]
