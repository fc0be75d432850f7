"""Fine-tuning harness: truncation, schedule, weighted loss, early stopping.

The pure pieces (schedule arithmetic, the weighted cross-entropy and its
gradient, the plateau rule) live here as plain functions so they are
testable without any model. ``train`` drives a backend through epochs with
decoupled-weight-decay Adam and a linear warmup + linear decay schedule.

A backend must provide:

    model                    torch.nn.Module mapping (ids, mask) -> logits (B, 2)
    encode(text)             token ids
    collate(seqs)            pad a list of id sequences -> (ids, mask) tensors
    apply_plan(plan)         freeze / inject adapters per a FreezePlan or LoraPlan
    predict_logits(seqs)     eval-mode logits as a numpy array (B, 2)
    save(dir_path)           persist weights + hyperparameters

The built-in ``toy_backend.ToyTransformerBackend`` satisfies this and keeps
every trainer contract testable on a CPU in seconds.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .arch_audit import FreezePlan, LoraPlan
from .corpus import Corpus
from .evaluator import confusion, f1_scores
from .sampler import class_weights


@dataclass(frozen=True)
class TruncationPolicy:
    """Keep the first ``max_tokens`` tokens; long inputs lose their tail."""

    max_tokens: int
    side: str = "head"

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.side != "head":
            raise ValueError(f"only 'head' truncation is supported, got {self.side!r}")


def truncate(token_ids: Sequence, policy: TruncationPolicy) -> list:
    return list(token_ids[: policy.max_tokens])


@dataclass(frozen=True)
class Schedule:
    """Linear warmup to ``peak_lr`` at ``warmup_steps``, linear decay to 0."""

    total_steps: int
    warmup_steps: int
    peak_lr: float = 1.0

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be non-negative, got {step}")
        if step >= self.total_steps:
            return 0.0
        if self.warmup_steps and step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        return self.peak_lr * (self.total_steps - step) / (self.total_steps - self.warmup_steps)


def make_schedule(
    num_examples: int,
    batch_size: int,
    epochs: int,
    warmup_fraction: float,
    peak_lr: float = 1.0,
) -> Schedule:
    """Step counts from corpus size; the final partial batch is dropped."""
    if num_examples < 1 or batch_size < 1 or epochs < 1:
        raise ValueError("num_examples, batch_size and epochs must be positive")
    if batch_size > num_examples:
        raise ValueError(f"batch_size {batch_size} exceeds num_examples {num_examples}")
    if not (0.0 <= warmup_fraction < 1.0):
        raise ValueError(f"warmup_fraction must be in [0, 1), got {warmup_fraction}")
    steps_per_epoch = num_examples // batch_size
    total = steps_per_epoch * epochs
    warmup = math.floor(warmup_fraction * total)
    return Schedule(total_steps=total, warmup_steps=warmup, peak_lr=peak_lr)


# ---------------------------------------------------------------------------
# Weighted cross-entropy (pure, numpy) with its analytic gradient.
# ---------------------------------------------------------------------------


def _check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.shape != (2,):
        raise ValueError(f"expected two logits, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite logits")
    return arr


def _weight_of(weights, label: int) -> float:
    w = weights[label]
    if w <= 0:
        raise ValueError(f"class weight must be positive, got {w}")
    return float(w)


def weighted_cross_entropy(logits, label: int, weights) -> float:
    """w_label * (-log softmax(logits)[label]); unit weights give plain CE."""
    arr = _check_logits(logits)
    w = _weight_of(weights, label)
    log_z = arr.max() + math.log(np.exp(arr - arr.max()).sum())
    return w * (log_z - arr[label])


def weighted_cross_entropy_grad(logits, label: int, weights) -> np.ndarray:
    """Gradient w.r.t. logits: w_label * (softmax(logits) - onehot(label))."""
    arr = _check_logits(logits)
    w = _weight_of(weights, label)
    shifted = np.exp(arr - arr.max())
    probs = shifted / shifted.sum()
    grad = w * probs
    grad[label] -= w
    return grad


def batch_weighted_cross_entropy(logits_batch, labels: Sequence[int], weights) -> float:
    """Weighted mean over a batch: sum(w_i * ce_i) / sum(w_i)."""
    num = 0.0
    den = 0.0
    for row, label in zip(logits_batch, labels):
        num += weighted_cross_entropy(row, label, weights)
        den += _weight_of(weights, label)
    if den == 0.0:
        raise ValueError("empty batch")
    return num / den


# ---------------------------------------------------------------------------
# Training configuration and epoch logging.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    weight_decay: float
    batch_size: int
    max_epochs: int
    warmup_fraction: float = 0.0
    optimizer: str = "adamw"
    weighted_loss: bool = False
    seed: int = 0
    truncation: TruncationPolicy = field(default_factory=lambda: TruncationPolicy(512))
    plan: FreezePlan | LoraPlan | None = None
    early_stop_tolerance: float = 0.005

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.optimizer != "adamw":
            raise ValueError(f"unsupported optimizer {self.optimizer!r} (only 'adamw')")
        if not (0.0 <= self.warmup_fraction < 1.0):
            raise ValueError(f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


def config_from_toml(path: str | Path) -> TrainConfig:
    """Read a flat key-value TOML config (see configs/ for the shipped presets)."""
    try:
        import tomllib  # Python >= 3.11
    except ModuleNotFoundError:  # pragma: no cover - version dependent
        import tomli as tomllib
    obj = tomllib.loads(Path(path).read_text(encoding="utf-8"))
    try:
        return _config_from_mapping(obj)
    except KeyError as e:
        raise ValueError(f"config {path} missing key {e}") from None


def _config_from_mapping(obj: dict) -> TrainConfig:
    plan = None
    plan_type = obj.get("plan_type")
    if plan_type == "freeze":
        plan = FreezePlan(
            trainable_blocks=tuple(int(b) for b in obj.get("trainable_blocks", [])),
            head_trainable=obj.get("head_trainable", True),
            final_norm_trainable=obj.get("final_norm_trainable", False),
        )
    elif plan_type == "lora":
        plan = LoraPlan(
            r=int(obj["lora_r"]),
            alpha=float(obj.get("lora_alpha", obj["lora_r"])),
            dropout=float(obj.get("lora_dropout", 0.0)),
            target_projections=tuple(obj.get("lora_targets", ["query", "value"])),
            head_trainable=obj.get("head_trainable", True),
        )
    elif plan_type is not None:
        raise ValueError(f"plan_type must be 'freeze' or 'lora', got {plan_type!r}")

    return TrainConfig(
        learning_rate=float(obj["learning_rate"]),
        weight_decay=float(obj.get("weight_decay", 0.0)),
        batch_size=int(obj["batch_size"]),
        max_epochs=int(obj["max_epochs"]),
        warmup_fraction=float(obj.get("warmup_fraction", 0.0)),
        optimizer=obj.get("optimizer", "adamw"),
        weighted_loss=obj.get("weighted_loss", False),
        seed=int(obj.get("seed", 0)),
        truncation=TruncationPolicy(
            max_tokens=int(obj.get("max_tokens", 512)),
            side=obj.get("truncation_side", "head"),
        ),
        plan=plan,
        early_stop_tolerance=float(obj.get("early_stop_tolerance", 0.005)),
    )


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)} to TOML")


def config_to_toml(config: TrainConfig) -> str:
    """Flat TOML snapshot of a config (the checkpoint copy)."""
    pairs: list[tuple[str, object]] = [
        ("learning_rate", config.learning_rate),
        ("weight_decay", config.weight_decay),
        ("batch_size", config.batch_size),
        ("max_epochs", config.max_epochs),
        ("warmup_fraction", config.warmup_fraction),
        ("optimizer", config.optimizer),
        ("weighted_loss", config.weighted_loss),
        ("seed", config.seed),
        ("max_tokens", config.truncation.max_tokens),
        ("truncation_side", config.truncation.side),
        ("early_stop_tolerance", config.early_stop_tolerance),
    ]
    if isinstance(config.plan, FreezePlan):
        pairs += [
            ("plan_type", "freeze"),
            ("trainable_blocks", list(config.plan.trainable_blocks)),
            ("head_trainable", config.plan.head_trainable),
            ("final_norm_trainable", config.plan.final_norm_trainable),
        ]
    elif isinstance(config.plan, LoraPlan):
        pairs += [
            ("plan_type", "lora"),
            ("lora_r", config.plan.r),
            ("lora_alpha", config.plan.alpha),
            ("lora_dropout", config.plan.dropout),
            ("lora_targets", list(config.plan.target_projections)),
            ("head_trainable", config.plan.head_trainable),
        ]
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in pairs)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_macro_f1: float
    wall_time_s: float


EPOCH_LOG_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_macro_f1", "wall_time_s")


def write_epoch_logs(logs: Sequence[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(EPOCH_LOG_COLUMNS)
        for log in logs:
            w.writerow(
                [log.epoch, repr(log.train_loss), repr(log.valid_loss),
                 repr(log.valid_macro_f1), repr(log.wall_time_s)]
            )
    return path


def read_epoch_logs(path: str | Path) -> list[EpochLog]:
    with Path(path).open(encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [
            EpochLog(
                epoch=int(row["epoch"]),
                train_loss=float(row["train_loss"]),
                valid_loss=float(row["valid_loss"]),
                valid_macro_f1=float(row["valid_macro_f1"]),
                wall_time_s=float(row["wall_time_s"]),
            )
            for row in reader
        ]


class Decision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


def early_stop(logs: Sequence[EpochLog], tolerance: float, max_epochs: int | None = None) -> Decision:
    """Stop on a validation-loss plateau or when the epoch budget is spent.

    The plateau rule compares the latest epoch to the one before it: an
    improvement smaller than ``tolerance`` stops training.
    """
    if not logs:
        raise ValueError("need at least one epoch log")
    if max_epochs is not None and logs[-1].epoch >= max_epochs:
        return Decision.STOP
    if len(logs) < 2:
        return Decision.CONTINUE
    improvement = logs[-2].valid_loss - logs[-1].valid_loss
    return Decision.STOP if improvement < tolerance else Decision.CONTINUE


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the logs of completed epochs."""

    def __init__(self, message: str, logs: Sequence[EpochLog]):
        super().__init__(message)
        self.logs = list(logs)


@dataclass(frozen=True)
class CheckpointHandle:
    path: Path
    best_epoch: int


# ---------------------------------------------------------------------------
# The training loop.
# ---------------------------------------------------------------------------


def _encode_corpus(backend, corpus: Corpus, policy: TruncationPolicy):
    seqs = [truncate(backend.encode(r.text), policy) for r in corpus]
    labels = [r.label for r in corpus]
    return seqs, labels


def train(
    backend,
    train_corpus: Corpus,
    valid_corpus: Corpus,
    config: TrainConfig,
    out_dir: str | Path,
) -> tuple[CheckpointHandle, list[EpochLog]]:
    """Fine-tune ``backend`` and checkpoint the best-validation-loss epoch.

    Bit-deterministic for the toy backend under a fixed ``config.seed``:
    weight init, batch order and every update are driven by seeded
    generators. Validation loss uses the same (optionally class-weighted)
    criterion as training. The backend is left holding the best epoch's
    weights, which are also what the checkpoint stores.
    """
    import torch
    import torch.nn.functional as F

    if len(train_corpus) == 0 or len(valid_corpus) == 0:
        raise ValueError("train and valid corpora must be non-empty")
    if config.plan is None:
        raise ValueError("config.plan must be a FreezePlan or LoraPlan")

    torch.manual_seed(config.seed)
    backend.apply_plan(config.plan)
    params = [p for p in backend.model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("plan leaves no trainable parameters")

    schedule = make_schedule(
        len(train_corpus), config.batch_size, config.max_epochs,
        config.warmup_fraction, peak_lr=config.learning_rate,
    )
    optimizer = torch.optim.AdamW(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )

    weights_t = None
    if config.weighted_loss:
        cw = class_weights(Counter(r.label for r in train_corpus))
        weights_t = torch.tensor(cw.as_list(), dtype=torch.float32)

    train_seqs, train_labels = _encode_corpus(backend, train_corpus, config.truncation)
    valid_seqs, valid_labels = _encode_corpus(backend, valid_corpus, config.truncation)

    order_rng = random.Random(config.seed)
    steps_per_epoch = len(train_seqs) // config.batch_size
    logs: list[EpochLog] = []
    best_loss = math.inf
    best_epoch = 0
    best_state = None
    step = 0

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = list(range(len(train_seqs)))
        order_rng.shuffle(order)
        backend.model.train()
        loss_num = 0.0
        loss_den = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size : (b + 1) * config.batch_size]
            ids, mask = backend.collate([train_seqs[i] for i in idx])
            labels = torch.tensor([train_labels[i] for i in idx], dtype=torch.long)
            lr = schedule.lr_at(step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = backend.model(ids, mask)
            loss = F.cross_entropy(logits, labels, weight=weights_t)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", logs)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
            batch_weight = float(weights_t[labels].sum()) if weights_t is not None else len(idx)
            loss_num += loss.item() * batch_weight
            loss_den += batch_weight

        train_loss = loss_num / loss_den
        valid_loss, valid_macro = _validate(
            backend, valid_seqs, valid_labels, weights_t, config.batch_size
        )
        if not math.isfinite(valid_loss):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}", logs)
        logs.append(
            EpochLog(
                epoch=epoch,
                train_loss=train_loss,
                valid_loss=valid_loss,
                valid_macro_f1=valid_macro,
                wall_time_s=time.perf_counter() - t0,
            )
        )
        if valid_loss < best_loss:
            best_loss = valid_loss
            best_epoch = epoch
            best_state = {
                k: v.detach().clone() for k, v in backend.model.state_dict().items()
            }
        if early_stop(logs, config.early_stop_tolerance, config.max_epochs) is Decision.STOP:
            break

    backend.model.load_state_dict(best_state)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(config_to_toml(config), encoding="utf-8")
    write_epoch_logs(logs, out_dir / "epoch_logs.csv")
    backend.save(out_dir / "backend")
    return CheckpointHandle(path=out_dir, best_epoch=best_epoch), logs


def _validate(backend, seqs, labels, weights_t, batch_size):
    import torch
    import torch.nn.functional as F

    backend.model.eval()
    loss_num = 0.0
    loss_den = 0.0
    preds: list[int] = []
    with torch.no_grad():
        for start in range(0, len(seqs), batch_size):
            chunk = seqs[start : start + batch_size]
            ids, mask = backend.collate(chunk)
            y = torch.tensor(labels[start : start + batch_size], dtype=torch.long)
            logits = backend.model(ids, mask)
            loss = F.cross_entropy(logits, y, weight=weights_t)
            batch_weight = float(weights_t[y].sum()) if weights_t is not None else len(chunk)
            loss_num += loss.item() * batch_weight
            loss_den += batch_weight
            preds.extend((logits[:, 1] > logits[:, 0]).long().tolist())
    macro, _, _ = f1_scores(confusion(preds, labels))
    return loss_num / loss_den, macro


def load_checkpoint(path: str | Path):
    """Reload the backend stored in a checkpoint directory."""
    backend_dir = Path(path) / "backend"
    meta = json.loads((backend_dir / "backend.json").read_text(encoding="utf-8"))
    kind = meta.get("kind")
    if kind == "toy":
        from .toy_backend import ToyTransformerBackend

        return ToyTransformerBackend.load(backend_dir)
    raise ValueError(f"unknown backend kind {kind!r} (only 'toy' is built in)")
