"""Scoring of prediction files: accuracy, lesion-condition macro-F1, per-dataset aggregation."""

from __future__ import annotations

import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

from hierdx.mcq import LESION_OPTIONS, LETTERS, McqItem
from hierdx.reward import RL_TAGS, Mode, TagSet, parse_completion

LESION_CLASSES = tuple(LETTERS[: len(LESION_OPTIONS)])


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    item_id: str
    raw_completion: str
    dataset_tag: str = "default"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PredictionRecord:
        try:
            return cls(str(data["item_id"]), data.get("raw_completion") or "", str(data.get("dataset_tag", "default")))
        except KeyError:
            raise EvalError(f"prediction record without item_id: {data}") from None


@dataclass
class DatasetResult:
    dataset: str
    n: int
    correct: int
    invalid: int
    accuracy: float
    invalid_rate: float
    macro_f1: float | None = None

    @property
    def extractable_rate(self) -> float:
        return 1.0 - self.invalid_rate


@dataclass
class EvalReport:
    datasets: list[DatasetResult]
    mode: str
    averages: dict[str, float | None] = field(default_factory=dict)
    weighted: bool = False

    @property
    def n(self) -> int:
        return sum(d.n for d in self.datasets)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": 1,
            "mode": self.mode,
            "weighted": self.weighted,
            "n": self.n,
            "datasets": [asdict(d) for d in self.datasets],
            "averages": self.averages,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        rows = [("dataset", "n", "accuracy", "macro_f1", "invalid")]
        for d in self.datasets:
            f1 = "-" if d.macro_f1 is None else f"{d.macro_f1:.4f}"
            rows.append((d.dataset, str(d.n), f"{d.accuracy:.4f}", f1, f"{d.invalid_rate:.4f}"))
        avg = self.averages
        fmt = lambda v: "-" if v is None else f"{v:.4f}"  # noqa: E731
        rows.append(("Avg.", str(self.n), fmt(avg.get("accuracy")), fmt(avg.get("macro_f1")), fmt(avg.get("invalid_rate"))))
        widths = [max(len(r[i]) for r in rows) for i in range(5)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return f"[{self.mode}]\n" + "\n".join(lines)


def _resolve(preds: Sequence[PredictionRecord], items: Mapping[str, McqItem]) -> None:
    if not preds:
        raise EvalError("no predictions to evaluate")
    missing = sorted({p.item_id for p in preds if p.item_id not in items})
    if missing:
        raise EvalError(f"{len(missing)} prediction(s) reference unknown items, e.g. {missing[0]!r}")


def extract_letters(
    preds: Sequence[PredictionRecord],
    items: Mapping[str, McqItem],
    mode: Mode = "strict",
    tags: TagSet = RL_TAGS,
) -> list[str | None]:
    return [
        parse_completion(p.raw_completion, tags, mode, items[p.item_id].option_map).option_letter for p in preds
    ]


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


def macro_f1_from_letters(truth: Sequence[str], predicted: Sequence[str | None], classes: Sequence[str] = LESION_CLASSES) -> float:
    """Unweighted mean of per-class F1; an empty class contributes 0."""
    scores = []
    for c in classes:
        tp = sum(t == c and p == c for t, p in zip(truth, predicted))
        fp = sum(t != c and p == c for t, p in zip(truth, predicted))
        fn = sum(t == c and p != c for t, p in zip(truth, predicted))
        scores.append(f1_from_counts(tp, fp, fn))
    return sum(scores) / len(classes)


def macro_f1(
    preds: Sequence[PredictionRecord],
    items: Mapping[str, McqItem],
    mode: Mode = "strict",
    tags: TagSet = RL_TAGS,
) -> float:
    _resolve(preds, items)
    bad = sorted({p.item_id for p in preds if items[p.item_id].variant != "lesion_condition"})
    if bad:
        raise EvalError(f"macro-F1 needs lesion_condition items; {bad[0]!r} is not")
    letters = extract_letters(preds, items, mode, tags)
    truth = [items[p.item_id].correct_letter for p in preds]
    return macro_f1_from_letters(truth, letters)


def accuracy(
    preds: Sequence[PredictionRecord],
    items: Mapping[str, McqItem],
    mode: Mode = "strict",
    tags: TagSet = RL_TAGS,
    dataset: str | None = None,
) -> DatasetResult:
    """Letter accuracy; unextractable answers count as wrong and as invalid."""
    _resolve(preds, items)
    letters = extract_letters(preds, items, mode, tags)
    n = len(preds)
    correct = sum(l is not None and l == items[p.item_id].correct_letter for p, l in zip(preds, letters))
    invalid = sum(l is None for l in letters)
    result = DatasetResult(
        dataset=dataset or preds[0].dataset_tag,
        n=n,
        correct=correct,
        invalid=invalid,
        accuracy=correct / n,
        invalid_rate=invalid / n,
    )
    if all(items[p.item_id].variant == "lesion_condition" for p in preds):
        truth = [items[p.item_id].correct_letter for p in preds]
        result.macro_f1 = macro_f1_from_letters(truth, letters)
    return result


def aggregate(fragments: Iterable[DatasetResult], *, weighted: bool = False, mode: str = "strict") -> EvalReport:
    """Per-dataset rows plus averages (unweighted across datasets unless ``weighted``)."""
    rows = list(fragments)

    def mean(key: str) -> float | None:
        vals = [(getattr(r, key), r.n) for r in rows if getattr(r, key) is not None]
        if not vals:
            return None
        if weighted:
            return sum(v * n for v, n in vals) / sum(n for _, n in vals)
        return sum(v for v, _ in vals) / len(vals)

    averages = {k: mean(k) for k in ("accuracy", "macro_f1", "invalid_rate")}
    return EvalReport(datasets=rows, mode=mode, averages=averages, weighted=weighted)


def evaluate(
    preds: Sequence[PredictionRecord],
    items: Mapping[str, McqItem],
    mode: Mode = "strict",
    *,
    weighted: bool = False,
    tags: TagSet = RL_TAGS,
) -> EvalReport:
    _resolve(preds, items)
    groups: dict[str, list[PredictionRecord]] = {}
    for p in preds:
        groups.setdefault(p.dataset_tag, []).append(p)
    fragments = [accuracy(groups[tag], items, mode, tags, tag) for tag in sorted(groups)]
    return aggregate(fragments, weighted=weighted, mode=mode)
