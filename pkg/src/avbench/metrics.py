"""Multi-label evaluation: per-class and macro F1, the all-positive baseline,
and result tables in the layouts of the benchmark's three report tables.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .taxonomy import NUM_CLASSES, category_names

NA = "N/A"
TABLE3_ROWS = (
    ("audio",),
    ("visual",),
    ("speech",),
    ("audio", "visual"),
    ("audio", "speech"),
    ("visual", "speech"),
    ("audio", "visual", "speech"),
)
TABLE3_RATIOS = ((2.0, 1.0, 1.0), (1.0, 2.0, 1.0), (1.0, 1.0, 2.0))


@dataclass(frozen=True)
class PredictionMatrix:
    clip_ids: tuple[str, ...]
    truth: np.ndarray
    pred: np.ndarray

    def __post_init__(self):
        truth = np.asarray(self.truth, dtype=bool)
        pred = np.asarray(self.pred, dtype=bool)
        if truth.shape != pred.shape:
            raise ValueError(f"truth shape {truth.shape} != pred shape {pred.shape}")
        if truth.ndim != 2 or truth.shape[0] != len(self.clip_ids):
            raise ValueError("matrix rows must match clip_ids")
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "pred", pred)
        object.__setattr__(self, "clip_ids", tuple(self.clip_ids))


@dataclass
class EvalReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_clips: int
    provenance: dict = field(default_factory=dict)

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))

    def percent(self, values=None) -> list[float]:
        values = self.f1 if values is None else values
        return [round(100.0 * float(v), 2) for v in values]

    def to_dict(self) -> dict:
        names = category_names() if len(self.f1) == NUM_CLASSES else [str(i) for i in range(len(self.f1))]
        per_class = {
            n: {"precision": round(100 * float(p), 2), "recall": round(100 * float(r), 2),
                "f1": round(100 * float(f), 2), "support": int(s)}
            for n, p, r, f, s in zip(names, self.precision, self.recall, self.f1, self.support)
        }
        counts = {k: [int(x) for x in getattr(self, k)] for k in ("tp", "fp", "fn", "support")}
        return {"macro_f1": round(100 * self.macro_f1, 2), "n_clips": self.n_clips,
                "per_class": per_class, "counts": counts, "provenance": self.provenance}

    @classmethod
    def from_counts(cls, tp, fp, fn, support, n_clips: int, provenance: Mapping | None = None) -> "EvalReport":
        tp, fp, fn = (np.asarray(x, dtype=np.int64) for x in (tp, fp, fn))
        precision = _safe_div(tp, tp + fp)
        recall = _safe_div(tp, tp + fn)
        f1 = _safe_div(2 * precision * recall, precision + recall)
        return cls(precision, recall, f1, np.asarray(support, dtype=np.int64), tp, fp, fn, int(n_clips),
                   dict(provenance or {}))

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        """Rebuild from :meth:`to_dict` output; scores are recomputed from the raw counts."""
        c = d["counts"]
        return cls.from_counts(c["tp"], c["fp"], c["fn"], c["support"], d["n_clips"], d.get("provenance"))


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def evaluate(matrix: PredictionMatrix, provenance: Mapping | None = None) -> EvalReport:
    """Per-class precision/recall/F1 and their macro average.

    Any zero denominator yields 0 for that quantity, so a class with no true
    and no predicted positives scores F1 = 0. All classes enter the macro
    average.
    """
    if matrix.truth.shape[0] == 0:
        raise ValueError("cannot evaluate an empty prediction matrix")
    t, p = matrix.truth, matrix.pred
    tp = (t & p).sum(axis=0)
    fp = (~t & p).sum(axis=0)
    fn = (t & ~p).sum(axis=0)
    return EvalReport.from_counts(tp, fp, fn, t.sum(axis=0), t.shape[0], provenance)


def dummy_baseline(truth, clip_ids: Sequence[str] | None = None) -> EvalReport:
    """Score the predictor that marks every class positive for every clip.

    Its per-class F1 is ``2p / (1 + p)`` where ``p`` is class prevalence.
    """
    truth = np.asarray(truth, dtype=bool)
    if truth.size == 0:
        raise ValueError("dummy baseline needs a non-empty truth matrix")
    ids = tuple(clip_ids) if clip_ids is not None else tuple(str(i) for i in range(truth.shape[0]))
    return evaluate(PredictionMatrix(ids, truth, np.ones_like(truth)), {"model": "dummy-all-positive"})


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return NA if v is None else f"{v:.2f}"


def _rank_flags(values: Sequence[float | None]) -> list[str]:
    """'best' / 'second' markers over the distinct numeric values."""
    distinct = sorted({v for v in values if v is not None}, reverse=True)
    flags = []
    for v in values:
        if v is None or not distinct:
            flags.append("")
        elif v == distinct[0]:
            flags.append("best")
        elif len(distinct) > 1 and v == distinct[1]:
            flags.append("second")
        else:
            flags.append("")
    return flags


def _decorate(text: str, flag: str, fmt: str) -> str:
    if not flag:
        return text
    if fmt == "markdown":
        return f"**{text}**" if flag == "best" else f"<u>{text}</u>"
    return text + ("*" if flag == "best" else "^")


def _render(header: list[str], rows: list[list[str]], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _macro(report: EvalReport | None) -> float | None:
    return None if report is None else round(100 * report.macro_f1, 2)


def table2(results: Sequence[tuple[str, EvalReport | None]], fmt: str = "csv") -> str:
    """Method vs macro F1 (%), one row per result."""
    values = [_macro(r) for _, r in results]
    flags = _rank_flags(values)
    rows = [[name, _decorate(_fmt(v), f, fmt)] for (name, _), v, f in zip(results, values, flags)]
    return _render(["Method", "F1-score (%)"], rows, fmt)


def modality_label(mods: Sequence[str]) -> str:
    return "-".join(m.capitalize() for m in mods)


def ratio_column(ratio: Sequence[float], modalities: Sequence[str] | None = None) -> str:
    """Header such as ``(a:v:s = 2:1:1)``; ``w`` stands in when the modalities are ambiguous."""
    names = ":".join(m[0] for m in modalities) if modalities else "w"
    return f"({names} = " + ":".join(f"{w:g}" for w in ratio) + ")"


def table3(
    results: Mapping[tuple[tuple[str, ...], str], EvalReport | None],
    fmt: str = "csv",
    ratios: Sequence[Sequence[float]] = TABLE3_RATIOS,
    rows: Sequence[tuple[str, ...]] = TABLE3_ROWS,
) -> str:
    """Modality subsets x fusion methods grid.

    ``results`` is keyed by ``(modalities, column)`` where column is
    ``"average"``, ``"max"``, ``"concat"`` or a weight-ratio label such as
    ``"2:1:1"``. A single modality needs no fusion, so its score sits in the
    Average column and every other cell is N/A; a weight ratio only applies
    to rows with as many modalities as it has weights. Absent cells are N/A.
    """
    columns = ["average", "max", "concat"] + [":".join(f"{w:g}" for w in r) for r in ratios]
    widths = [None] * 3 + [len(r) for r in ratios]
    header = ["Method", "Average", "Max", "Concat"]
    for r, col in zip(ratios, columns[3:]):
        # name the modalities when a single row can carry this ratio
        owners = [m for m in rows if len(m) == len(r) and results.get((tuple(m), col)) is not None]
        if len(owners) != 1:
            owners = [m for m in rows if len(m) == len(r)]
        header.append(ratio_column(r, owners[0] if len(owners) == 1 else None))
    grid = []
    for mods in rows:
        vals = []
        for col, width in zip(columns, widths):
            if (len(mods) == 1 and col != "average") or (width is not None and width != len(mods)):
                vals.append(None)
            else:
                vals.append(_macro(results.get((tuple(mods), col))))
        grid.append(vals)
    flags = _rank_flags([v for row in grid for v in row])
    out, k = [], 0
    for mods, vals in zip(rows, grid):
        cells = [modality_label(mods)]
        for v in vals:
            cells.append(_decorate(_fmt(v), flags[k], fmt))
            k += 1
        out.append(cells)
    return _render(header, out, fmt)


def table4(results: Mapping[str, EvalReport | None], fmt: str = "csv") -> str:
    """Per-category F1 (%) with one column per setting and a closing Average row.

    Best and second best are marked within each row.
    """
    labels = list(results)
    header = ["Behavior"] + labels
    rows = []
    names = list(category_names()) + ["Average"]
    for i, name in enumerate(names):
        vals = []
        for lab in labels:
            r = results[lab]
            if r is None:
                vals.append(None)
            elif i < NUM_CLASSES:
                vals.append(round(100 * float(r.f1[i]), 2))
            else:
                vals.append(_macro(r))
        flags = _rank_flags(vals)
        rows.append([name] + [_decorate(_fmt(v), f, fmt) for v, f in zip(vals, flags)])
    return _render(header, rows, fmt)


def emit_report(results, layout: str, fmt: str = "csv", path=None, **kwargs) -> str:
    """Render ``results`` in ``layout`` (table2/table3/table4); optionally write it."""
    renderers = {"table2": table2, "table3": table3, "table4": table4}
    if layout not in renderers:
        raise ValueError(f"unknown layout {layout!r}")
    text = renderers[layout](results, fmt=fmt, **kwargs)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def append_run_record(path, record: Mapping) -> None:
    """Append one canonical JSON object per run to a results ledger."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
