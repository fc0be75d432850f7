"""Exact parameter accounting for transformer classifiers.

Everything here is dimensional: no weights are ever loaded. A descriptor
pins down every tensor of a decoder- or encoder-style classifier, and two
independent routes count them:

  * closed-form arithmetic (``count_params``, ``audit_freeze``, ``audit_lora``)
  * a per-tensor ledger (``tensor_ledger`` and the plan ledgers) that simply
    enumerates tensor shapes and multiplies them out

The two routes must agree exactly; the test suite enforces this on
randomized descriptors and plans.

Counting conventions that matter:

  * ``tied_embeddings=False`` adds a separate vocab x hidden output
    projection to the total; tied models reuse the input embedding.
  * Low-rank adapter audits count the base weights as frozen and add
    r*(in+out) trainable parameters per injected projection. When the
    classifier head is trained alongside adapters, the audited total counts
    the head twice (the frozen original plus its trainable copy), matching
    how adapter frameworks store and report such models.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

PROJECTIONS = ("query", "key", "value", "output", "ffn_in", "ffn_out")

CAUSAL_DECODER = "causal_decoder"
MASKED_ENCODER = "masked_encoder"
_KINDS = (CAUSAL_DECODER, MASKED_ENCODER)

_POOLINGS = ("last_token", "first_token")


@dataclass(frozen=True)
class ClassifierHeadSpec:
    """Stack of linear layers ending in the 2-way decision."""

    layers: tuple[tuple[int, int, bool], ...]  # (in_dim, out_dim, bias)
    dropout: float = 0.0
    pooling: str = "last_token"

    def validate(self, hidden: int) -> None:
        if not self.layers:
            raise ValueError("classifier head needs at least one layer")
        if self.pooling not in _POOLINGS:
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"head dropout must be in [0, 1), got {self.dropout}")
        if self.layers[0][0] != hidden:
            raise ValueError(
                f"head input dim {self.layers[0][0]} does not match hidden size {hidden}"
            )
        for (_, out_a, _), (in_b, _, _) in zip(self.layers, self.layers[1:]):
            if out_a != in_b:
                raise ValueError(f"head layer dims do not chain: {out_a} -> {in_b}")
        if self.layers[-1][1] != 2:
            raise ValueError(f"head must end in 2 classes, got {self.layers[-1][1]}")


@dataclass(frozen=True)
class ArchDescriptor:
    """Dimensional description of a transformer classifier.

    ``kv_dim`` is the projected key/value width; it equals ``hidden``
    except under grouped-query attention. ``norm_params_per_layer``,
    ``final_norm_params`` and ``embedding_norm_params`` are raw parameter
    counts, which absorbs the RMSNorm (weight only) vs LayerNorm
    (weight+bias) distinction.
    """

    kind: str
    num_layers: int
    hidden: int
    ffn_dim: int
    num_heads: int
    kv_dim: int
    vocab: int
    head: ClassifierHeadSpec
    attn_bias: Mapping[str, bool] = field(
        default_factory=lambda: {"query": False, "key": False, "value": False, "output": False}
    )
    ffn_bias: bool = False
    gated_ffn: bool = False
    norm_params_per_layer: int = 0
    final_norm_params: int = 0
    embedding_norm_params: int = 0
    max_positions: int = 0
    type_vocab: int = 0
    tied_embeddings: bool = True

    def validate(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        for name in ("num_layers", "hidden", "ffn_dim", "num_heads", "kv_dim", "vocab"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kv_dim > self.hidden:
            raise ValueError(f"kv_dim {self.kv_dim} exceeds hidden {self.hidden}")
        for name in (
            "norm_params_per_layer",
            "final_norm_params",
            "embedding_norm_params",
            "max_positions",
            "type_vocab",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        missing = [p for p in ("query", "key", "value", "output") if p not in self.attn_bias]
        if missing:
            raise ValueError(f"attn_bias missing projections: {missing}")
        self.head.validate(self.hidden)

    @classmethod
    def from_json(cls, obj: dict) -> "ArchDescriptor":
        try:
            return cls._from_json(obj)
        except KeyError as e:
            raise ValueError(f"descriptor missing key {e}") from None

    @classmethod
    def _from_json(cls, obj: dict) -> "ArchDescriptor":
        head = obj["head"]
        desc = cls(
            kind=obj["kind"],
            num_layers=obj["num_layers"],
            hidden=obj["hidden"],
            ffn_dim=obj["ffn_dim"],
            num_heads=obj["num_heads"],
            kv_dim=obj["kv_dim"],
            vocab=obj["vocab"],
            head=ClassifierHeadSpec(
                layers=tuple((int(i), int(o), bool(b)) for i, o, b in head["layers"]),
                dropout=head.get("dropout", 0.0),
                pooling=head.get("pooling", "last_token"),
            ),
            attn_bias=dict(obj.get("attn_bias", {})) or {
                "query": False, "key": False, "value": False, "output": False
            },
            ffn_bias=obj.get("ffn_bias", False),
            gated_ffn=obj.get("gated_ffn", False),
            norm_params_per_layer=obj.get("norm_params_per_layer", 0),
            final_norm_params=obj.get("final_norm_params", 0),
            embedding_norm_params=obj.get("embedding_norm_params", 0),
            max_positions=obj.get("max_positions", 0),
            type_vocab=obj.get("type_vocab", 0),
            tied_embeddings=obj.get("tied_embeddings", True),
        )
        desc.validate()
        return desc

    @classmethod
    def load(cls, path: str | Path) -> "ArchDescriptor":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FreezePlan:
    """Which blocks (and head / final norm) receive gradient updates."""

    trainable_blocks: tuple[int, ...] = ()
    head_trainable: bool = True
    final_norm_trainable: bool = False

    def validate(self, num_layers: int) -> None:
        bad = [b for b in self.trainable_blocks if not (0 <= b < num_layers)]
        if bad:
            raise ValueError(f"block indices out of range [0, {num_layers}): {bad}")
        if len(set(self.trainable_blocks)) != len(self.trainable_blocks):
            raise ValueError(f"duplicate block indices: {self.trainable_blocks}")


@dataclass(frozen=True)
class LoraPlan:
    """Low-rank adapter injection: rank, scaling, and target projections."""

    r: int
    alpha: float
    dropout: float = 0.0
    target_projections: tuple[str, ...] = ("query", "value")
    head_trainable: bool = True

    def validate(self) -> None:
        if self.r < 1:
            raise ValueError(f"rank must be >= 1, got {self.r}")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        unknown = [p for p in self.target_projections if p not in PROJECTIONS]
        if unknown:
            raise ValueError(f"unknown target projections: {unknown}")
        if len(set(self.target_projections)) != len(self.target_projections):
            raise ValueError(f"duplicate target projections: {self.target_projections}")


@dataclass(frozen=True)
class ParamAudit:
    total_params: int
    trainable_params: int

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_params / self.total_params


def plan_from_json(obj: dict, num_layers: int | None = None) -> FreezePlan | LoraPlan:
    """Build a plan from its JSON form.

    Freeze-plan block indices may be negative (counted from the end) when
    ``num_layers`` is supplied.
    """
    kind = obj.get("type")
    if kind == "freeze":
        blocks = [int(b) for b in obj.get("trainable_blocks", [])]
        if num_layers is not None:
            blocks = [b % num_layers if b < 0 else b for b in blocks]
        plan = FreezePlan(
            trainable_blocks=tuple(blocks),
            head_trainable=obj.get("head_trainable", True),
            final_norm_trainable=obj.get("final_norm_trainable", False),
        )
        if num_layers is not None:
            plan.validate(num_layers)
        return plan
    if kind == "lora":
        plan = LoraPlan(
            r=int(obj["r"]),
            alpha=float(obj.get("alpha", obj["r"])),
            dropout=float(obj.get("dropout", 0.0)),
            target_projections=tuple(obj.get("target_projections", ["query", "value"])),
            head_trainable=obj.get("head_trainable", True),
        )
        plan.validate()
        return plan
    raise ValueError(f"plan 'type' must be 'freeze' or 'lora', got {kind!r}")


def plan_to_json(plan: FreezePlan | LoraPlan) -> dict:
    if isinstance(plan, FreezePlan):
        return {
            "type": "freeze",
            "trainable_blocks": list(plan.trainable_blocks),
            "head_trainable": plan.head_trainable,
            "final_norm_trainable": plan.final_norm_trainable,
        }
    if isinstance(plan, LoraPlan):
        return {
            "type": "lora",
            "r": plan.r,
            "alpha": plan.alpha,
            "dropout": plan.dropout,
            "target_projections": list(plan.target_projections),
            "head_trainable": plan.head_trainable,
        }
    raise TypeError(f"not a plan: {plan!r}")


def load_plan(path: str | Path, num_layers: int | None = None) -> FreezePlan | LoraPlan:
    """Load a freeze or LoRA plan from a JSON file."""
    return plan_from_json(json.loads(Path(path).read_text(encoding="utf-8")), num_layers)


# ---------------------------------------------------------------------------
# Projection geometry shared by both counting routes. A projection is one
# weight matrix family inside a block; gated FFNs have two input matrices.
# ---------------------------------------------------------------------------


def projection_shapes(arch: ArchDescriptor, projection: str) -> list[tuple[str, int, int, bool]]:
    """(tensor name, in_dim, out_dim, has_bias) for one projection family."""
    h, kv, f = arch.hidden, arch.kv_dim, arch.ffn_dim
    ab = arch.attn_bias
    if projection == "query":
        return [("attn.query", h, h, ab["query"])]
    if projection == "key":
        return [("attn.key", h, kv, ab["key"])]
    if projection == "value":
        return [("attn.value", h, kv, ab["value"])]
    if projection == "output":
        return [("attn.output", h, h, ab["output"])]
    if projection == "ffn_in":
        if arch.gated_ffn:
            return [("ffn.gate", h, f, arch.ffn_bias), ("ffn.up", h, f, arch.ffn_bias)]
        return [("ffn.in", h, f, arch.ffn_bias)]
    if projection == "ffn_out":
        return [("ffn.out", f, h, arch.ffn_bias)]
    raise ValueError(f"unknown projection {projection!r}")


# ---------------------------------------------------------------------------
# Route 1: per-tensor ledger (enumeration).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerRow:
    name: str
    shape: tuple[int, ...]
    block: int | None  # block index for per-layer tensors, else None
    group: str  # embeddings | block | final_norm | head | adapter | head_copy
    projection: str | None = None
    trainable: bool = False

    @property
    def params(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


def tensor_ledger(arch: ArchDescriptor) -> list[LedgerRow]:
    """Every base-model tensor with its shape, in model order."""
    arch.validate()
    rows: list[LedgerRow] = []

    def add(name, shape, block=None, group="block", projection=None):
        rows.append(LedgerRow(name, tuple(int(d) for d in shape), block, group, projection))

    add("embeddings.token", (arch.vocab, arch.hidden), group="embeddings")
    if arch.max_positions:
        add("embeddings.position", (arch.max_positions, arch.hidden), group="embeddings")
    if arch.type_vocab:
        add("embeddings.type", (arch.type_vocab, arch.hidden), group="embeddings")
    if arch.embedding_norm_params:
        add("embeddings.norm", (arch.embedding_norm_params,), group="embeddings")

    for i in range(arch.num_layers):
        for proj in PROJECTIONS:
            for name, in_dim, out_dim, bias in projection_shapes(arch, proj):
                add(f"block{i}.{name}.weight", (out_dim, in_dim), block=i, projection=proj)
                if bias:
                    add(f"block{i}.{name}.bias", (out_dim,), block=i, projection=proj)
        if arch.norm_params_per_layer:
            add(f"block{i}.norms", (arch.norm_params_per_layer,), block=i)

    if arch.final_norm_params:
        add("final_norm", (arch.final_norm_params,), group="final_norm")
    if not arch.tied_embeddings:
        add("unembedding", (arch.vocab, arch.hidden), group="embeddings")

    for j, (in_dim, out_dim, bias) in enumerate(arch.head.layers):
        add(f"head.{j}.weight", (out_dim, in_dim), group="head")
        if bias:
            add(f"head.{j}.bias", (out_dim,), group="head")
    return rows


def freeze_ledger(arch: ArchDescriptor, plan: FreezePlan) -> list[LedgerRow]:
    """Base ledger with trainable flags set per the freeze plan."""
    plan.validate(arch.num_layers)
    blocks = set(plan.trainable_blocks)
    rows = []
    for row in tensor_ledger(arch):
        trainable = (
            (row.group == "block" and row.block in blocks)
            or (row.group == "head" and plan.head_trainable)
            or (row.group == "final_norm" and plan.final_norm_trainable)
        )
        rows.append(LedgerRow(row.name, row.shape, row.block, row.group, row.projection, trainable))
    return rows


def lora_ledger(arch: ArchDescriptor, plan: LoraPlan) -> list[LedgerRow]:
    """Base ledger (frozen) plus adapter factors and the trainable head copy."""
    plan.validate()
    rows = list(tensor_ledger(arch))
    targets = set(plan.target_projections)
    for i in range(arch.num_layers):
        for proj in PROJECTIONS:
            if proj not in targets:
                continue
            for name, in_dim, out_dim, _ in projection_shapes(arch, proj):
                rows.append(
                    LedgerRow(f"block{i}.{name}.lora_a", (plan.r, in_dim), i, "adapter", proj, True)
                )
                rows.append(
                    LedgerRow(f"block{i}.{name}.lora_b", (out_dim, plan.r), i, "adapter", proj, True)
                )
    if plan.head_trainable:
        for j, (in_dim, out_dim, bias) in enumerate(arch.head.layers):
            rows.append(LedgerRow(f"head_copy.{j}.weight", (out_dim, in_dim), None, "head_copy", None, True))
            if bias:
                rows.append(LedgerRow(f"head_copy.{j}.bias", (out_dim,), None, "head_copy", None, True))
    return rows


def ledger_audit(rows: list[LedgerRow]) -> ParamAudit:
    """Sum a flagged ledger into a ParamAudit (the enumeration route)."""
    total = sum(r.params for r in rows)
    trainable = sum(r.params for r in rows if r.trainable)
    return ParamAudit(total_params=total, trainable_params=trainable)


def write_ledger_csv(rows: list[LedgerRow], path: str | Path) -> Path:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(["name", "shape", "params", "trainable"])
        for r in rows:
            w.writerow([r.name, "x".join(map(str, r.shape)), r.params, int(r.trainable)])
    return path


# ---------------------------------------------------------------------------
# Route 2: closed-form arithmetic.
# ---------------------------------------------------------------------------


def params_per_block(arch: ArchDescriptor) -> int:
    """Parameters of one transformer block, in closed form."""
    h, kv, f = arch.hidden, arch.kv_dim, arch.ffn_dim
    ab = arch.attn_bias
    attn = (
        h * h + (h if ab["query"] else 0)
        + h * kv + (kv if ab["key"] else 0)
        + h * kv + (kv if ab["value"] else 0)
        + h * h + (h if ab["output"] else 0)
    )
    if arch.gated_ffn:
        ffn = 3 * h * f + (2 * f + h if arch.ffn_bias else 0)
    else:
        ffn = 2 * h * f + (f + h if arch.ffn_bias else 0)
    return attn + ffn + arch.norm_params_per_layer


def head_params(head: ClassifierHeadSpec) -> int:
    return sum(i * o + (o if b else 0) for i, o, b in head.layers)


def count_params(arch: ArchDescriptor) -> int:
    """Total parameter count of the described classifier."""
    arch.validate()
    embeddings = (
        arch.vocab * arch.hidden
        + arch.max_positions * arch.hidden
        + arch.type_vocab * arch.hidden
        + arch.embedding_norm_params
        + (0 if arch.tied_embeddings else arch.vocab * arch.hidden)
    )
    return (
        embeddings
        + arch.num_layers * params_per_block(arch)
        + arch.final_norm_params
        + head_params(arch.head)
    )


def lora_delta(out_dim: int, in_dim: int, r: int) -> int:
    """Trainable parameters added by one rank-r injection: r * (in + out)."""
    if out_dim <= 0 or in_dim <= 0:
        raise ValueError(f"dims must be positive, got ({out_dim}, {in_dim})")
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    return r * (in_dim + out_dim)


def audit_freeze(arch: ArchDescriptor, plan: FreezePlan) -> ParamAudit:
    """Trainable count under a layer-freezing plan."""
    arch.validate()
    plan.validate(arch.num_layers)
    trainable = len(set(plan.trainable_blocks)) * params_per_block(arch)
    if plan.head_trainable:
        trainable += head_params(arch.head)
    if plan.final_norm_trainable:
        trainable += arch.final_norm_params
    return ParamAudit(total_params=count_params(arch), trainable_params=trainable)


def audit_lora(arch: ArchDescriptor, plan: LoraPlan) -> ParamAudit:
    """Trainable count under a low-rank adapter plan.

    Base weights are frozen but stay in the total; the total also includes
    the adapter factors and, when the head is trained, its trainable copy
    (see module docstring for the convention).
    """
    arch.validate()
    plan.validate()
    added = 0
    for proj in plan.target_projections:
        for _, in_dim, out_dim, _ in projection_shapes(arch, proj):
            added += arch.num_layers * lora_delta(out_dim, in_dim, plan.r)
    head = head_params(arch.head) if plan.head_trainable else 0
    return ParamAudit(
        total_params=count_params(arch) + added + head,
        trainable_params=added + head,
    )
