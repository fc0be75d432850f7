"""Class rebalancing by downsampling, and inverse-frequency class weights."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Mapping

from .corpus import Corpus


@dataclass(frozen=True)
class BalanceSpec:
    """Target class ratio and the seed that makes the subsample reproducible."""

    target_ratio: tuple[float, float] = (0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        r0, r1 = self.target_ratio
        if not (0.0 < r0 < 1.0 and 0.0 < r1 < 1.0):
            raise ValueError(f"ratio components must be in (0, 1), got {self.target_ratio}")
        if abs(r0 + r1 - 1.0) > 1e-9:
            raise ValueError(f"ratio components must sum to 1, got {self.target_ratio}")


@dataclass(frozen=True)
class ClassWeights:
    """Per-label loss multipliers, mean-one normalized."""

    by_label: Mapping[int, float]

    def __getitem__(self, label: int) -> float:
        return self.by_label[label]

    def as_list(self) -> list[float]:
        return [self.by_label[k] for k in sorted(self.by_label)]


def _sample_without_replacement(items: list[int], k: int, rng: random.Random) -> list[int]:
    # Partial Fisher-Yates; frozen here so the draw is stable across Python
    # versions (random.sample's internals are not part of our contract).
    pool = list(items)
    for i in range(k):
        j = rng.randrange(i, len(pool))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


def _group_seed(seed: int, group: str) -> int:
    h = hashlib.sha256(f"{seed}:{group}".encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big")


def _balanced_indices(labels: list[int], positions: list[int], spec: BalanceSpec) -> list[int]:
    by_label: dict[int, list[int]] = {0: [], 1: []}
    for pos, label in zip(positions, labels):
        by_label[label].append(pos)
    if not by_label[0] or not by_label[1]:
        raise ValueError("cannot balance: only one class present")

    ratio = {0: spec.target_ratio[0], 1: spec.target_ratio[1]}
    # The class that runs out first under the target ratio is kept in full;
    # the other is subsampled to match.
    limiting = min((0, 1), key=lambda c: len(by_label[c]) / ratio[c])
    other = 1 - limiting
    keep_other = int(round(len(by_label[limiting]) * ratio[other] / ratio[limiting]))
    keep_other = min(keep_other, len(by_label[other]))

    rng = random.Random(spec.seed)
    chosen = _sample_without_replacement(by_label[other], keep_other, rng)
    return sorted(by_label[limiting] + chosen)


def balance_downsample(corpus: Corpus, spec: BalanceSpec, group_by: str | None = None) -> Corpus:
    """Downsample the majority class to the target ratio.

    The minority class is kept in full; the majority class is subsampled
    uniformly at random without replacement under ``spec.seed``. Relative
    record order is preserved, and nothing is duplicated or synthesized.

    With ``group_by`` set to a record field, balancing runs independently
    inside each group (each group must contain both classes).
    """
    if group_by is None:
        keep = _balanced_indices([r.label for r in corpus], list(range(len(corpus))), spec)
        return corpus.subset(keep)

    groups: dict[str, list[int]] = {}
    for i, r in enumerate(corpus):
        groups.setdefault(str(getattr(r, group_by)), []).append(i)
    keep: list[int] = []
    for name, positions in groups.items():
        sub_spec = BalanceSpec(target_ratio=spec.target_ratio, seed=_group_seed(spec.seed, name))
        try:
            keep.extend(
                _balanced_indices([corpus.records[i].label for i in positions], positions, sub_spec)
            )
        except ValueError as e:
            raise ValueError(f"{e} (group '{name}')") from None
    return corpus.subset(sorted(keep))


def class_weights(counts: Mapping[int, int]) -> ClassWeights:
    """Inverse-frequency weights w_c = N / (K * N_c).

    The weighted example mass equals N (sum over classes of w_c * N_c), so
    unit weights fall out exactly for a balanced corpus.
    """
    if not counts:
        raise ValueError("no class counts given")
    if any(n <= 0 for n in counts.values()):
        raise ValueError(f"all class counts must be positive, got {dict(counts)}")
    total = sum(counts.values())
    k = len(counts)
    return ClassWeights(by_label={c: total / (k * n) for c, n in counts.items()})
