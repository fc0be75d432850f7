"""Binary detection metrics: confusion matrix, F1 macro/micro, breakdowns.

Machine (label 1) is the positive class everywhere. Ties at equal logits
go to Human, which biases the detector against false machine accusations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Mapping, Sequence

from .corpus import Corpus, HUMAN, MACHINE

if TYPE_CHECKING:  # pragma: no cover - annotation only, no runtime import
    from .trainer import TruncationPolicy

BREAKDOWN_FIELDS = ("source", "generator", "language")


@dataclass(frozen=True)
class ConfusionMatrix:
    """2x2 counts with Machine as the positive class."""

    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp

    def row_normalized(self) -> dict[str, float]:
        """Cell shares within each gold row (gold-human row, gold-machine row)."""
        neg = self.tn + self.fp
        pos = self.fn + self.tp
        return {
            "tn": self.tn / neg if neg else 0.0,
            "fp": self.fp / neg if neg else 0.0,
            "fn": self.fn / pos if pos else 0.0,
            "tp": self.tp / pos if pos else 0.0,
        }

    def to_json(self) -> dict:
        return {"tn": self.tn, "fp": self.fp, "fn": self.fn, "tp": self.tp}


@dataclass(frozen=True)
class GroupMetrics:
    count: int
    accuracy: float
    f1_macro: float


@dataclass(frozen=True)
class MetricReport:
    f1_macro: float
    f1_micro: float
    accuracy: float
    confusion: ConfusionMatrix
    per_group: Mapping[str, Mapping[str, GroupMetrics]]  # field -> group -> metrics

    def to_json(self) -> dict:
        return {
            "f1_macro": self.f1_macro,
            "f1_micro": self.f1_micro,
            "accuracy": self.accuracy,
            "confusion": self.confusion.to_json(),
            "confusion_row_normalized": self.confusion.row_normalized(),
            "per_group": {
                fieldname: {
                    str(group): {
                        "count": m.count,
                        "accuracy": m.accuracy,
                        "f1_macro": m.f1_macro,
                    }
                    for group, m in groups.items()
                }
                for fieldname, groups in self.per_group.items()
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MetricReport":
        try:
            cm = obj["confusion"]
            return cls(
                f1_macro=obj["f1_macro"],
                f1_micro=obj["f1_micro"],
                accuracy=obj["accuracy"],
                confusion=ConfusionMatrix(tn=cm["tn"], fp=cm["fp"], fn=cm["fn"], tp=cm["tp"]),
                per_group={
                    fieldname: {
                        group: GroupMetrics(
                            count=m["count"], accuracy=m["accuracy"], f1_macro=m["f1_macro"]
                        )
                        for group, m in groups.items()
                    }
                    for fieldname, groups in obj.get("per_group", {}).items()
                },
            )
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed metric report: {e}") from None


def confusion(preds: Sequence[int], gold: Sequence[int]) -> ConfusionMatrix:
    if len(preds) != len(gold):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(gold)} labels")
    tn = fp = fn = tp = 0
    for p, g in zip(preds, gold):
        if p not in (0, 1) or g not in (0, 1):
            raise ValueError(f"labels must be binary, got pred={p!r} gold={g!r}")
        if g == MACHINE:
            tp += p
            fn += 1 - p
        else:
            fp += p
            tn += 1 - p
    return ConfusionMatrix(tn=tn, fp=fp, fn=fn, tp=tp)


def _class_f1(tp: int, fp: int, fn: int) -> float:
    # Zero-support or zero-precision+recall classes contribute F1 = 0, which
    # keeps macro-F1 defined on skewed per-group slices.
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_scores(cm: ConfusionMatrix) -> tuple[float, float, float]:
    """(f1_macro, f1_micro, accuracy).

    Macro is the unweighted mean of the two class F1s. Micro pools
    per-class counts globally; for single-label binary data it equals
    accuracy.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    f1_pos = _class_f1(tp=cm.tp, fp=cm.fp, fn=cm.fn)
    f1_neg = _class_f1(tp=cm.tn, fp=cm.fn, fn=cm.fp)
    macro = (f1_pos + f1_neg) / 2
    # Micro-averaged counts: each class contributes its own TP/FP/FN. In
    # single-label data every error is one micro-FP and one micro-FN, so
    # micro precision equals micro recall and the harmonic mean collapses
    # to that same value; computing it directly keeps micro == accuracy
    # exact instead of within an ulp.
    micro_tp = cm.tp + cm.tn
    micro_fp = cm.fp + cm.fn
    micro = micro_tp / (micro_tp + micro_fp)
    accuracy = (cm.tp + cm.tn) / cm.total
    return macro, micro, accuracy


def breakdown_by(corpus: Corpus, preds: Sequence[int], fieldname: str) -> dict[str, GroupMetrics]:
    """Per-group (count, accuracy, macro-F1), groups keyed by field value."""
    if fieldname not in BREAKDOWN_FIELDS:
        raise ValueError(f"unknown breakdown field '{fieldname}' (choices: {BREAKDOWN_FIELDS})")
    if len(preds) != len(corpus):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(corpus)} records")
    grouped: dict[str, tuple[list[int], list[int]]] = {}
    for record, pred in zip(corpus, preds):
        key = str(getattr(record, fieldname))
        pair = grouped.setdefault(key, ([], []))
        pair[0].append(pred)
        pair[1].append(record.label)
    out = {}
    for key, (group_preds, group_gold) in grouped.items():
        macro, _, accuracy = f1_scores(confusion(group_preds, group_gold))
        out[key] = GroupMetrics(count=len(group_gold), accuracy=accuracy, f1_macro=macro)
    return out


def evaluate(
    corpus: Corpus,
    preds: Sequence[int],
    fields: Sequence[str] = BREAKDOWN_FIELDS,
) -> MetricReport:
    """Full MetricReport for predictions aligned with ``corpus``."""
    gold = [r.label for r in corpus]
    cm = confusion(preds, gold)
    macro, micro, accuracy = f1_scores(cm)
    per_group = {f: breakdown_by(corpus, preds, f) for f in fields}
    return MetricReport(
        f1_macro=macro, f1_micro=micro, accuracy=accuracy, confusion=cm, per_group=per_group
    )


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    id: str
    label: int
    score: float  # softmax probability of Machine


def _softmax_machine(logit_human: float, logit_machine: float) -> float:
    m = max(logit_human, logit_machine)
    eh = math.exp(logit_human - m)
    em = math.exp(logit_machine - m)
    return em / (eh + em)


def predict(
    backend,
    corpus: Corpus,
    policy: "TruncationPolicy",
    batch_size: int = 32,
    tie_goes_to: int = HUMAN,
) -> list[Prediction]:
    """One prediction per record, order-aligned with the corpus.

    The backend supplies ``encode(text)`` and ``predict_logits(batch)``
    returning an array of shape (batch, 2). Texts are truncated to
    ``policy.max_tokens`` (head kept). Exactly equal logits resolve to
    ``tie_goes_to``, Human by default: the lesser harm is missing a
    machine text, not accusing a person.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if tie_goes_to not in (HUMAN, MACHINE):
        raise ValueError(f"tie_goes_to must be 0 or 1, got {tie_goes_to!r}")
    encoded = [backend.encode(r.text)[: policy.max_tokens] for r in corpus]
    preds: list[Prediction] = []
    for start in range(0, len(encoded), batch_size):
        batch = encoded[start : start + batch_size]
        logits = backend.predict_logits(batch)
        if len(logits) != len(batch):
            raise ValueError(
                f"backend returned {len(logits)} rows for a batch of {len(batch)}"
            )
        if not all(math.isfinite(float(v)) for row in logits for v in row):
            raise ValueError(f"backend returned non-finite logits near record {start}")
        for offset, row in enumerate(logits):
            record = corpus.records[start + offset]
            lo, hi = float(row[0]), float(row[1])
            if hi > lo:
                label = MACHINE
            elif hi < lo:
                label = HUMAN
            else:
                label = tie_goes_to
            preds.append(
                Prediction(id=record.id, label=label, score=_softmax_machine(lo, hi))
            )
    return preds


def paired_labels(corpus: Corpus, preds: Sequence[Prediction]) -> tuple[list[int], list[int]]:
    """Align predictions to corpus order by id; errors on any mismatch."""
    if len(preds) != len(corpus):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(corpus)} records")
    by_id = {p.id: p for p in preds}
    if len(by_id) != len(preds):
        raise ValueError("duplicate prediction ids")
    pred_labels = []
    for r in corpus:
        p = by_id.get(r.id)
        if p is None:
            raise ValueError(f"no prediction for record id '{r.id}'")
        pred_labels.append(p.label)
    return pred_labels, [r.label for r in corpus]


def write_predictions(preds: Sequence[Prediction], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for p in preds:
            f.write(json.dumps({"id": p.id, "label": p.label, "score": p.score}) + "\n")
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            preds.append(Prediction(id=str(obj["id"]), label=int(obj["label"]), score=float(obj["score"])))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ValueError(f"bad prediction line {lineno}: {e}") from None
        if preds[-1].label not in (0, 1):
            raise ValueError(f"label out of range, line {lineno}")
    return preds
