"""Collar-based event metrics (F1, error rate) with macro averaging."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .postproc import Event, EventList


@dataclass(frozen=True)
class CollarConfig:
    onset_collar: float = 0.200
    offset_collar_abs: float = 0.200
    offset_collar_rel: float = 0.20


@dataclass
class ClassScore:
    tp: int
    fp: int
    fn: int
    n_ref: int
    precision: float
    recall: float
    f1: float
    er: float


@dataclass
class ScoreReport:
    per_class: dict[str, ClassScore] = field(default_factory=dict)
    macro_f1: float = 0.0
    macro_er: float = 0.0

    def to_tsv(self) -> str:
        lines = ["class\ttp\tfp\tfn\tprecision\trecall\tf1\ter"]
        for name, s in self.per_class.items():
            lines.append(f"{name}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.precision:.6f}"
                         f"\t{s.recall:.6f}\t{s.f1:.6f}\t{s.er:.6f}")
        lines.append(f"macro\t\t\t\t\t\t{self.macro_f1:.6f}\t{self.macro_er:.6f}")
        return "\n".join(lines) + "\n"

    def table(self) -> str:
        width = max([len(n) for n in self.per_class] + [5])
        rows = [f"{'class':<{width}}  {'F1':>7}  {'ER':>6}  {'TP':>4} {'FP':>4} {'FN':>4}"]
        for name, s in self.per_class.items():
            rows.append(f"{name:<{width}}  {100 * s.f1:6.1f}%  {s.er:6.2f}  {s.tp:4d} {s.fp:4d} {s.fn:4d}")
        rows.append("-" * len(rows[0]))
        rows.append(f"{'macro':<{width}}  {100 * self.macro_f1:6.1f}%  {self.macro_er:6.2f}")
        return "\n".join(rows)


def matches(ref: Event, est: Event, collars: CollarConfig = CollarConfig()) -> bool:
    if abs(est.onset - ref.onset) > collars.onset_collar:
        return False
    off_collar = max(collars.offset_collar_abs,
                     collars.offset_collar_rel * (ref.offset - ref.onset))
    return abs(est.offset - ref.offset) <= off_collar


def count_matches(ref: Sequence[Event], est: Sequence[Event],
                  collars: CollarConfig = CollarConfig()) -> int:
    """Size of a maximum one-to-one matching between same-class events."""
    if not ref or not est:
        return 0
    adj = np.array([[matches(r, e, collars) for e in est] for r in ref], dtype=np.int8)
    if not adj.any():
        return 0
    assign = maximum_bipartite_matching(csr_matrix(adj), perm_type="column")
    return int((assign >= 0).sum())


def match_events(ref: EventList, est: EventList, collars: CollarConfig = CollarConfig(),
                 labels: Sequence[str] | None = None) -> dict[str, tuple[int, int, int]]:
    """(TP, FP, FN) per class for one clip."""
    if labels is None:
        labels = sorted({e.label for e in ref.events} | {e.label for e in est.events})
    out = {}
    for label in labels:
        r, e = ref.for_label(label), est.for_label(label)
        tp = count_matches(r, e, collars)
        out[label] = (tp, len(e) - tp, len(r) - tp)
    return out


def _class_score(tp: int, fp: int, fn: int) -> ClassScore:
    n_ref, n_est = tp + fn, tp + fp
    if n_ref == 0 and n_est == 0:
        return ClassScore(0, 0, 0, 0, 1.0, 1.0, 1.0, 0.0)
    precision = tp / n_est if n_est else 0.0
    recall = tp / n_ref if n_ref else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    er = (fp + fn) / n_ref if n_ref else float(fp)
    return ClassScore(tp, fp, fn, n_ref, precision, recall, f1, er)


def score(ref_corpus: Mapping[str, EventList], est_corpus: Mapping[str, EventList],
          collars: CollarConfig = CollarConfig(), labels: Sequence[str] | None = None) -> ScoreReport:
    """Event-based scores; counts are summed per class over clips, then macro-averaged.

    With no reference events, ER is reported as the raw insertion count.
    """
    clip_ids = sorted(set(ref_corpus) | set(est_corpus))
    if labels is None:
        found = set()
        for corpus in (ref_corpus, est_corpus):
            for el in corpus.values():
                found.update(e.label for e in el.events)
        labels = sorted(found)
    totals = {label: [0, 0, 0] for label in labels}
    for cid in clip_ids:
        ref = ref_corpus.get(cid, EventList(cid))
        est = est_corpus.get(cid, EventList(cid))
        for label, counts in match_events(ref, est, collars, labels).items():
            for i in range(3):
                totals[label][i] += counts[i]
    report = ScoreReport({label: _class_score(*totals[label]) for label in labels})
    if labels:
        report.macro_f1 = float(np.mean([s.f1 for s in report.per_class.values()]))
        report.macro_er = float(np.mean([s.er for s in report.per_class.values()]))
    return report
