"""Synthetic labeled corpora for desk-scale training and tests.

Human texts draw from common English words; machine texts draw from a
disjoint alphabet, so the two classes are linearly separable at the byte
level and a small model must learn them quickly.
"""

from __future__ import annotations

import hashlib
import json
import random

from .corpus import Corpus, Record

_HUMAN_WORDS = (
    "the quick brown fox jumps over a lazy dog while rain falls on green "
    "hills and children laugh near the old stone bridge every summer morning"
).split()

_MACHINE_WORDS = (
    "zyx qqz xvz zzq vzx qzy zqv xxz yzq zxqy vvq zyq qxz yyx zqz xqv zvy qyx"
).split()


def synthetic_corpus(
    n: int,
    split: str = "train",
    seed: int = 0,
    machine_fraction: float = 0.5,
    sources: tuple[str, ...] = ("synthetic",),
    machine_generators: tuple[str, ...] = ("toygen",),
) -> Corpus:
    """Corpus of ``n`` records with roughly ``machine_fraction`` machine texts."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = random.Random(seed)
    records = []
    for i in range(n):
        label = 1 if rng.random() < machine_fraction else 0
        words = _MACHINE_WORDS if label else _HUMAN_WORDS
        text = " ".join(rng.choice(words) for _ in range(rng.randint(4, 10)))
        records.append(
            Record(
                id=f"{split}-{i:05d}",
                text=text,
                label=label,
                source=rng.choice(list(sources)),
                generator=rng.choice(list(machine_generators)) if label else "human",
                language="en",
                split=split,
            )
        )
    payload = json.dumps([r.id for r in records] + [split, str(seed)]).encode()
    return Corpus(
        records=tuple(records),
        path=f"synthetic://{split}?seed={seed}&n={n}",
        digest=hashlib.sha256(payload).hexdigest(),
    )
