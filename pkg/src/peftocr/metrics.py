"""OCR metrics: CER, WER / word accuracy, word-level F1 and corpus reports.

CER is case-sensitive over characters.  WER, word accuracy and F1 work on
whitespace-split, case-folded words.  Corpus aggregation is micro: summed
edits over summed reference lengths, and precision/recall from summed match
counts.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

from .data import STYLES
from .errors import ManifestError, UndefinedMetricError
from .kernels import edit_ops

_WS = re.compile(r"[ \t]+")


@dataclass(frozen=True)
class EditSummary:
    substitutions: int
    insertions: int
    deletions: int
    reference_length: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def _as_ids(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[list[int], list[int]]:
    table: dict[Hashable, int] = {}
    ia = [table.setdefault(x, len(table)) for x in a]
    ib = [table.setdefault(x, len(table)) for x in b]
    return ia, ib


def edit_distance(reference: Sequence[Hashable], prediction: Sequence[Hashable]) -> EditSummary:
    """Minimal unit-cost edit distance with its S/I/D decomposition.

    Works on any sequences of hashable symbols (strings, word lists).  The
    decomposition follows one optimal path, preferring substitutions, then
    deletions, then insertions when backtracking.
    """
    ref_ids, pred_ids = _as_ids(reference, prediction)
    s, i, d = edit_ops(ref_ids, pred_ids)
    return EditSummary(s, i, d, len(reference))


def words(text: str) -> list[str]:
    return [w.casefold() for w in _WS.split(text.strip(" \t\r\n")) if w]


def _strip_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


def cer(reference: str, prediction: str) -> float:
    reference, prediction = _strip_newline(reference), _strip_newline(prediction)
    if not reference:
        raise UndefinedMetricError("CER is undefined for an empty reference")
    return edit_distance(reference, prediction).distance / len(reference)


def wer_and_accuracy(reference: str, prediction: str) -> dict[str, float]:
    ref_words = words(reference)
    if not ref_words:
        raise UndefinedMetricError("WER is undefined for a reference with no words")
    wer = edit_distance(ref_words, words(prediction)).distance / len(ref_words)
    return {"wer": wer, "word_accuracy": 1.0 - wer}


def _prf(matches: int, n_pred: int, n_ref: int) -> tuple[float, float, float]:
    if n_pred == 0 and n_ref == 0:
        return 1.0, 1.0, 1.0
    if n_pred == 0 or n_ref == 0:
        return 0.0, 0.0, 0.0
    precision, recall = matches / n_pred, matches / n_ref
    f1 = 0.0 if matches == 0 else 2 * precision * recall / (precision + recall)
    return precision, recall, f1


def word_matches(reference: str, prediction: str) -> tuple[int, int, int]:
    """(multiset matches, predicted word count, reference word count)."""
    ref, pred = Counter(words(reference)), Counter(words(prediction))
    return sum((ref & pred).values()), sum(pred.values()), sum(ref.values())


def f1_line(reference: str, prediction: str) -> dict[str, float]:
    p, r, f = _prf(*word_matches(reference, prediction))
    return {"precision": p, "recall": r, "f1": f}


@dataclass(frozen=True)
class MetricsRow:
    subset: str
    samples: int
    cer: float
    wer: float
    word_accuracy: float
    precision: float
    recall: float
    f1: float
    exact_match: float

    def as_dict(self) -> dict:
        return {
            "subset": self.subset,
            "samples": self.samples,
            "CER": self.cer,
            "WER": self.wer,
            "ACC": self.word_accuracy,
            "Precision": self.precision,
            "Recall": self.recall,
            "F1": self.f1,
            "ExactMatch": self.exact_match,
        }


@dataclass(frozen=True)
class MetricsReport:
    rows: tuple[MetricsRow, ...]

    def row(self, subset: str) -> MetricsRow:
        for r in self.rows:
            if r.subset == subset:
                return r
        raise KeyError(subset)

    @property
    def mixed(self) -> MetricsRow:
        return self.row("mixed")

    def to_tsv(self, delimiter: str = "\t") -> str:
        return format_delimited([r.as_dict() for r in self.rows], delimiter)

    def to_table(self) -> str:
        return format_aligned([r.as_dict() for r in self.rows])


class _Accumulator:
    def __init__(self) -> None:
        self.samples = 0
        self.char_edits = self.chars = 0
        self.word_edits = self.word_count = 0
        self.matches = self.pred_words = self.ref_words = 0
        self.exact = 0

    def add(self, reference: str, prediction: str) -> None:
        reference, prediction = _strip_newline(reference), _strip_newline(prediction)
        if not reference:
            raise UndefinedMetricError("corpus reports need non-empty references")
        ref_words = words(reference)
        if not ref_words:
            raise UndefinedMetricError(f"reference {reference!r} has no words")
        self.samples += 1
        self.char_edits += edit_distance(reference, prediction).distance
        self.chars += len(reference)
        self.word_edits += edit_distance(ref_words, words(prediction)).distance
        self.word_count += len(ref_words)
        m, npred, nref = word_matches(reference, prediction)
        self.matches += m
        self.pred_words += npred
        self.ref_words += nref
        self.exact += reference == prediction

    def row(self, subset: str) -> MetricsRow:
        wer = self.word_edits / self.word_count
        p, r, f = _prf(self.matches, self.pred_words, self.ref_words)
        return MetricsRow(subset, self.samples, self.char_edits / self.chars, wer, 1.0 - wer, p, r, f,
                          self.exact / self.samples)


def corpus_report(pairs: Iterable[tuple[str, str, str]]) -> MetricsReport:
    """Aggregate (subset, reference, prediction) triples into per-subset rows plus ``mixed``.

    Subset rows appear in the fixed style order; the reduction is
    order-independent.
    """
    subsets = {s: _Accumulator() for s in STYLES}
    mixed = _Accumulator()
    for subset, reference, prediction in pairs:
        if subset not in subsets:
            raise ManifestError(f"unknown subset tag {subset!r}")
        subsets[subset].add(reference, prediction)
        mixed.add(reference, prediction)
    if mixed.samples == 0:
        raise UndefinedMetricError("corpus report needs at least one pair")
    rows = [acc.row(s) for s, acc in subsets.items() if acc.samples]
    rows.append(mixed.row("mixed"))
    return MetricsReport(tuple(rows))


# ----------------------------------------------------------------- formatting


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def format_delimited(rows: Sequence[dict], delimiter: str = "\t") -> str:
    if not rows:
        return ""
    header = list(rows[0])
    lines = [delimiter.join(header)]
    lines += [delimiter.join(_fmt(r[k]) for k in header) for r in rows]
    return "\n".join(lines) + "\n"


def format_aligned(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    header = list(rows[0])
    cells = [header] + [[_fmt(r[k]) for k in header] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    out = []
    for n, row in enumerate(cells):
        out.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"


def parse_delimited(text: str, delimiter: str = "\t") -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines:
        return []
    header = lines[0].split(delimiter)
    return [dict(zip(header, ln.split(delimiter))) for ln in lines[1:]]
