"""Confusion counts, fall-detection metrics, the LOSO driver and comparison tables."""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable

import numpy as np

from .data import RawInstance, Segment, Standardizer, loso_split, preprocess, stack, subjects
from .models import TABLE_ORDER, FallModel, ModelKind, build_model, predict_from_probs
from .optim import TrainConfig, train
from .tensor import SeededRng

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "recall", "precision", "f_score")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def confusion(preds, labels) -> ConfusionCounts:
    """2x2 tally with fall (1) as the positive class."""
    p = np.asarray(preds, dtype=int).reshape(-1)
    y = np.asarray(labels, dtype=int).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions but {y.size} labels")
    for name, arr in (("predictions", p), ("labels", y)):
        if np.any((arr != 0) & (arr != 1)):
            raise ValueError(f"{name} must be 0 (ADL) or 1 (fall)")
    return ConfusionCounts(
        tp=int(np.sum((p == 1) & (y == 1))),
        fp=int(np.sum((p == 1) & (y == 0))),
        fn=int(np.sum((p == 0) & (y == 1))),
        tn=int(np.sum((p == 0) & (y == 0))),
    )


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    recall: float
    precision: float
    f_score: float
    counts: ConfusionCounts
    degenerate: tuple[str, ...] = ()  # metrics whose denominator was 0 (reported as 0)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in METRIC_NAMES}
        d["counts"] = self.counts.to_dict()
        d["degenerate"] = list(self.degenerate)
        return d


def _ratio(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def metrics(c: ConfusionCounts) -> MetricsReport:
    if c.total == 0:
        raise ValueError("cannot compute metrics on zero evaluated segments")
    flagged = []
    accuracy = (c.tp + c.tn) / c.total
    recall, bad = _ratio(c.tp, c.tp + c.fn)
    if bad:
        flagged.append("recall")
    precision, bad = _ratio(c.tp, c.tp + c.fp)
    if bad:
        flagged.append("precision")
    f_score, bad = _ratio(2 * recall * precision, recall + precision)
    if bad:
        flagged.append("f_score")
    return MetricsReport(accuracy, recall, precision, f_score, c, tuple(flagged))


@dataclass
class LosoReport:
    kind: str
    folds: dict[int, MetricsReport]
    pooled: MetricsReport | None
    macro: dict[str, float]
    histories: dict[int, list[float]] = field(default_factory=dict)
    failures: dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "folds": {str(s): r.to_dict() for s, r in self.folds.items()},
            "pooled": self.pooled.to_dict() if self.pooled else None,
            "macro": self.macro,
            "histories": {str(s): h for s, h in self.histories.items()},
            "failures": {str(s): msg for s, msg in self.failures.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def assemble_report(kind: str, fold_counts: dict[int, ConfusionCounts]) -> LosoReport:
    folds = {s: metrics(c) for s, c in sorted(fold_counts.items())}
    pooled = None
    macro = {}
    if folds:
        total = ConfusionCounts()
        for c in fold_counts.values():
            total = total + c
        pooled = metrics(total)
        macro = {k: float(np.mean([getattr(r, k) for r in folds.values()])) for k in METRIC_NAMES}
    return LosoReport(kind, folds, pooled, macro)


def fit_model(
    kind: ModelKind,
    train_segments: list[Segment],
    config: TrainConfig,
    seed: int,
    standardize: bool = False,
    **model_overrides,
) -> tuple[FallModel, list[float], Standardizer | None]:
    """Fresh model from ``seed``'s ``init`` stream, trained with its ``shuffle`` stream."""
    x, y = stack(train_segments)
    scaler = Standardizer.fit(x) if standardize else None
    if scaler is not None:
        x = scaler(x)
    master = SeededRng(seed)
    model = build_model(kind, master.child("init"), **model_overrides)
    history = train(model, x, y, config, master.child("shuffle"))
    return model, history, scaler


def evaluate(model: FallModel, segments: list[Segment], scaler: Standardizer | None = None) -> ConfusionCounts:
    x, y = stack(segments)
    if scaler is not None:
        x = scaler(x)
    return confusion(predict_from_probs(model.predict_proba(x)), y)


def _run_fold(args):
    kind, train_segs, test_segs, config, seed, standardize, overrides = args
    model, history, scaler = fit_model(kind, train_segs, config, seed, standardize, **overrides)
    return model, history, scaler, evaluate(model, test_segs, scaler)


def loso_run(
    kind: ModelKind | str,
    instances: list[RawInstance],
    config: TrainConfig,
    seed: int,
    standardize: bool = False,
    jobs: int = 1,
    on_fold: Callable | None = None,
    **model_overrides,
) -> LosoReport:
    """Leave-one-subject-out evaluation of one model kind.

    Every fold starts from the same seed streams, so a fold's result depends
    only on its data, not on subject numbering. ``on_fold(subject, model,
    history, scaler)`` is called in subject order once each fold finishes.
    A failing fold is recorded in ``report.failures`` and the remaining folds
    still run.
    """
    kind = ModelKind.parse(kind) if isinstance(kind, str) else kind
    segments = preprocess(instances)
    subs = subjects(segments)
    if len(subs) < 2:
        raise ValueError(f"LOSO needs at least 2 subjects, found {len(subs)}")
    tasks = []
    for s in subs:
        tr, te = loso_split(segments, s)
        tasks.append((kind, tr, te, config, seed, standardize, model_overrides))

    fold_counts: dict[int, ConfusionCounts] = {}
    histories: dict[int, list[float]] = {}
    failures: dict[int, str] = {}

    def collect(subject, result):
        model, history, scaler, counts = result
        fold_counts[subject] = counts
        histories[subject] = history
        log.info("%s fold %s: %s", kind.value, subject, counts)
        if on_fold is not None:
            on_fold(subject, model, history, scaler)

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold, t) for t in tasks]
            for s, fut in zip(subs, futures):
                try:
                    collect(s, fut.result())
                except Exception as e:  # noqa: BLE001 - keep the other folds
                    failures[s] = f"{type(e).__name__}: {e}"
    else:
        for s, t in zip(subs, tasks):
            try:
                collect(s, _run_fold(t))
            except Exception as e:  # noqa: BLE001
                failures[s] = f"{type(e).__name__}: {e}"
                log.error("%s fold %s failed: %s", kind.value, s, failures[s])

    report = assemble_report(kind.value, fold_counts)
    report.histories = histories
    report.failures = failures
    return report


DISPLAY_NAMES = {
    ModelKind.SIMPLE_CNN.value: "Simple CNN",
    ModelKind.SIMPLE_GRU.value: "Simple GRU",
    ModelKind.COARSE_FINE_CNN.value: "Coarse-fine CNN",
    ModelKind.CNN_LSTM.value: "CNN-LSTM",
    ModelKind.CNN_GRU.value: "CNN-GRU",
    ModelKind.ENSEMBLE_CFG.value: "Ensemble CFG (proposed)",
}
TABLE_COLUMNS = ("Accuracy (%)", "Recall (%)", "Precision (%)", "F-score (%)")


def percent(value: float) -> str:
    """Percentage with 2 decimals, halves rounded away from zero."""
    return str(Decimal(repr(value * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _ordered(reports: dict) -> list[tuple[str, LosoReport]]:
    keyed = {(k.value if isinstance(k, ModelKind) else str(k)): r for k, r in reports.items()}
    order = [k.value for k in TABLE_ORDER]
    names = [k for k in order if k in keyed] + sorted(k for k in keyed if k not in order)
    return [(k, keyed[k]) for k in names]


def table_rows(reports: dict, view: str = "pooled") -> list[tuple[str, list[str]]]:
    if view not in ("pooled", "macro"):
        raise ValueError("view must be 'pooled' or 'macro'")
    rows = []
    for name, rep in _ordered(reports):
        if view == "pooled":
            vals = [getattr(rep.pooled, m) for m in METRIC_NAMES] if rep.pooled else [0.0] * 4
        else:
            vals = [rep.macro.get(m, 0.0) for m in METRIC_NAMES]
        rows.append((name, [percent(v) for v in vals]))
    return rows


def report_table(reports: dict, view: str = "pooled") -> tuple[str, str]:
    """Render ``{kind: LosoReport}`` as (aligned text, CSV), one row per model."""
    if not reports:
        raise ValueError("no reports to tabulate")
    rows = table_rows(reports, view)
    labels = [DISPLAY_NAMES.get(n, n) for n, _ in rows]
    w0 = max(len("Method"), *(len(s) for s in labels))
    widths = [len(c) for c in TABLE_COLUMNS]
    lines = ["  ".join(["Method".ljust(w0)] + [c.rjust(w) for c, w in zip(TABLE_COLUMNS, widths)])]
    lines.append("-" * len(lines[0]))
    for label, (_, vals) in zip(labels, rows):
        lines.append("  ".join([label.ljust(w0)] + [v.rjust(w) for v, w in zip(vals, widths)]))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "accuracy_pct", "recall_pct", "precision_pct", "f_score_pct"])
    for name, vals in rows:
        w.writerow([name, *vals])
    return text, buf.getvalue()


def parse_table_csv(text: str) -> dict[str, dict[str, float]]:
    reader = csv.DictReader(io.StringIO(text))
    return {
        row["model"]: {m: float(row[f"{m}_pct"]) for m in METRIC_NAMES}
        for row in reader
    }
