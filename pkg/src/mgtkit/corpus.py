"""Labeled text corpora: JSONL loading, validation, grouping, length stats.

A corpus file is UTF-8 JSON Lines, one object per line with keys:

    id      string or integer (coerced to string)
    text    non-empty string
    label   0 (human) or 1 (machine)
    model   generating model name, or "human"  -> Record.generator
    source  originating dataset name
    lang    optional BCP-47-ish tag, default "en"

Any other keys are preserved verbatim in ``Record.extras`` so files
round-trip losslessly.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

HUMAN = 0
MACHINE = 1
SPLITS = ("train", "dev", "test")

_REQUIRED_KEYS = ("id", "text", "label", "model", "source")
_CORE_KEYS = frozenset(_REQUIRED_KEYS) | {"lang"}

GROUP_FIELDS = ("source", "generator", "label", "language")


@dataclass(frozen=True)
class Record:
    """One labeled text sample."""

    id: str
    text: str
    label: int
    source: str
    generator: str
    language: str = "en"
    split: str = "train"
    extras: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in (HUMAN, MACHINE):
            raise ValueError(f"label out of range: {self.label!r}")
        if not self.text.strip():
            raise ValueError("empty text")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r} (expected one of {SPLITS})")


@dataclass(frozen=True)
class Corpus:
    """Immutable ordered collection of records plus file provenance."""

    records: tuple[Record, ...]
    path: str
    digest: str

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def label_counts(self) -> dict[int, int]:
        return dict(Counter(r.label for r in self.records))

    def split_label_counts(self) -> dict[tuple[str, int], int]:
        return dict(Counter((r.split, r.label) for r in self.records))

    def subset(self, indices) -> "Corpus":
        """Sub-corpus at ``indices`` (kept in the given order)."""
        picked = tuple(self.records[i] for i in indices)
        return Corpus(records=picked, path=self.path, digest=self.digest)


def _coerce_record(obj: dict, split: str) -> Record:
    for key in _REQUIRED_KEYS:
        if key not in obj:
            raise ValueError(f"missing required field '{key}'")
    label = obj["label"]
    if not isinstance(label, int) or isinstance(label, bool) or label not in (0, 1):
        raise ValueError(f"label out of range: {label!r}")
    text = obj["text"]
    if not isinstance(text, str):
        raise ValueError("field 'text' must be a string")
    extras = {k: v for k, v in obj.items() if k not in _CORE_KEYS}
    return Record(
        id=str(obj["id"]),
        text=text,
        label=label,
        source=str(obj["source"]),
        generator=str(obj["model"]),
        language=str(obj.get("lang", "en")),
        split=split,
        extras=extras,
    )


def load_corpus(path: str | Path, split: str) -> Corpus:
    """Load and validate one JSONL file, tagging every record with ``split``.

    Raises ValueError naming the offending line for malformed JSON, missing
    fields, out-of-range labels, empty texts, and duplicate ids.
    """
    path = Path(path)
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r} (expected one of {SPLITS})")
    raw = path.read_bytes()
    digest = hashlib.sha256(raw).hexdigest()

    records: list[Record] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ValueError(f"invalid JSON, line {lineno}: {e}") from None
        if not isinstance(obj, dict):
            raise ValueError(f"expected a JSON object, line {lineno}")
        try:
            rec = _coerce_record(obj, split)
        except ValueError as e:
            raise ValueError(f"{e}, line {lineno}") from None
        if rec.id in seen_ids:
            raise ValueError(f"duplicate id '{rec.id}' within split '{split}', line {lineno}")
        seen_ids.add(rec.id)
        records.append(rec)

    return Corpus(records=tuple(records), path=str(path), digest=digest)


def save_corpus(corpus: Corpus, path: str | Path) -> Path:
    """Write records back to JSONL with the file-format keys (lossless)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for r in corpus:
            obj = dict(r.extras)
            obj.update(
                id=r.id,
                text=r.text,
                label=r.label,
                model=r.generator,
                source=r.source,
                lang=r.language,
            )
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")
    return path


def group_counts(corpus: Corpus, fieldname: str) -> dict:
    """Counts of records per group value; sums to ``len(corpus)``."""
    if fieldname not in GROUP_FIELDS:
        raise ValueError(f"unknown group field '{fieldname}' (choices: {GROUP_FIELDS})")
    return dict(Counter(getattr(r, fieldname) for r in corpus))


@dataclass(frozen=True)
class LabelLengthStats:
    count: int
    mean: float
    median: float
    p95: float
    max: int
    histogram: Mapping[int, int]  # bucket start (inclusive) -> count


@dataclass(frozen=True)
class TokenLengthStats:
    tokenizer: str
    bucket_width: int
    per_label: Mapping[int, LabelLengthStats]

    def to_json(self) -> dict:
        return {
            "tokenizer": self.tokenizer,
            "bucket_width": self.bucket_width,
            "per_label": {
                str(label): {
                    "count": s.count,
                    "mean": s.mean,
                    "median": s.median,
                    "p95": s.p95,
                    "max": s.max,
                    "histogram": {str(k): v for k, v in sorted(s.histogram.items())},
                }
                for label, s in sorted(self.per_label.items())
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TokenLengthStats":
        per_label = {
            int(label): LabelLengthStats(
                count=s["count"],
                mean=s["mean"],
                median=s["median"],
                p95=s["p95"],
                max=s["max"],
                histogram={int(k): v for k, v in s["histogram"].items()},
            )
            for label, s in obj["per_label"].items()
        }
        return cls(tokenizer=obj["tokenizer"], bucket_width=obj["bucket_width"], per_label=per_label)


def token_length_stats(corpus: Corpus, tokenizer, bucket_width: int = 64) -> TokenLengthStats:
    """Per-label token-length histograms and summary stats.

    Deterministic for a fixed tokenizer and invariant under record
    reordering (histograms are multiset functions).
    """
    if bucket_width < 1:
        raise ValueError(f"bucket_width must be >= 1, got {bucket_width}")
    if len(corpus) == 0:
        raise ValueError("no records")

    lengths: dict[int, list[int]] = {}
    for r in corpus:
        lengths.setdefault(r.label, []).append(len(tokenizer.encode(r.text)))

    per_label = {}
    for label, vals in lengths.items():
        arr = np.asarray(vals, dtype=np.int64)
        hist = Counter(int(v // bucket_width) * bucket_width for v in vals)
        per_label[label] = LabelLengthStats(
            count=len(vals),
            mean=float(arr.mean()),
            median=float(np.percentile(arr, 50)),
            p95=float(np.percentile(arr, 95)),
            max=int(arr.max()),
            histogram=dict(sorted(hist.items())),
        )
    return TokenLengthStats(
        tokenizer=tokenizer.identity, bucket_width=bucket_width, per_label=per_label
    )


def compare_token_stats(train: TokenLengthStats, test: TokenLengthStats) -> dict:
    """Train-vs-test length shift summary.

    The headline flag is whether the machine class is longer on average in
    the test split than in training. Refuses to compare stats produced by
    different tokenizers.
    """
    if train.tokenizer != test.tokenizer:
        raise ValueError(
            f"cannot compare stats across tokenizers ('{train.tokenizer}' vs '{test.tokenizer}')"
        )
    summary: dict = {"tokenizer": train.tokenizer, "per_label": {}}
    for label in sorted(set(train.per_label) & set(test.per_label)):
        tr, te = train.per_label[label], test.per_label[label]
        summary["per_label"][label] = {
            "train_mean": tr.mean,
            "test_mean": te.mean,
            "mean_shift": te.mean - tr.mean,
        }
    machine = summary["per_label"].get(MACHINE)
    summary["machine_test_longer_than_train"] = bool(machine and machine["mean_shift"] > 0)
    return summary
