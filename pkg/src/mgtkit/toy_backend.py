"""A tiny byte-level decoder classifier that runs every trainer contract on CPU.

Two blocks, hidden 32, vocab 256 (one token per UTF-8 byte). Pre-norm
attention + gated FFN, last-non-padding-token pooling, 2-way linear head.
Weight init is driven by a local seeded generator so constructing the same
backend twice gives bit-identical parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .arch_audit import (
    ArchDescriptor,
    ClassifierHeadSpec,
    FreezePlan,
    LoraPlan,
    plan_from_json,
    plan_to_json,
)
from .tokenizers import ByteTokenizer

PAD_ID = 0


class _SelfAttention(nn.Module):
    def __init__(self, hidden: int, num_heads: int):
        super().__init__()
        if hidden % num_heads:
            raise ValueError(f"hidden {hidden} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = hidden // num_heads
        self.wq = nn.Linear(hidden, hidden, bias=False)
        self.wk = nn.Linear(hidden, hidden, bias=False)
        self.wv = nn.Linear(hidden, hidden, bias=False)
        self.wo = nn.Linear(hidden, hidden, bias=False)

    def forward(self, x, allowed):  # allowed: (B, 1, T, T) bool
        b, t, _ = x.shape
        q = self.wq(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.wk(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.wv(x).view(b, t, self.num_heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / self.head_dim**0.5
        # Finite fill keeps fully-masked padding rows NaN-free; their
        # outputs never reach the pooled representation.
        scores = scores.masked_fill(~allowed, -1e9)
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, t, -1))


class _GatedFFN(nn.Module):
    def __init__(self, hidden: int, ffn_dim: int):
        super().__init__()
        self.gate = nn.Linear(hidden, ffn_dim, bias=False)
        self.up = nn.Linear(hidden, ffn_dim, bias=False)
        self.down = nn.Linear(ffn_dim, hidden, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class _Block(nn.Module):
    def __init__(self, hidden: int, num_heads: int, ffn_dim: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(hidden)
        self.attn = _SelfAttention(hidden, num_heads)
        self.ln2 = nn.LayerNorm(hidden)
        self.mlp = _GatedFFN(hidden, ffn_dim)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.mlp(self.ln2(x))


class _ToyDecoder(nn.Module):
    def __init__(self, num_layers, hidden, num_heads, ffn_dim, vocab, max_positions):
        super().__init__()
        self.tok_emb = nn.Embedding(vocab, hidden)
        self.pos_emb = nn.Embedding(max_positions, hidden)
        self.blocks = nn.ModuleList(
            _Block(hidden, num_heads, ffn_dim) for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(hidden)
        self.head = nn.Linear(hidden, 2, bias=True)

    def forward(self, ids, mask):
        b, t = ids.shape
        positions = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(positions)[None, :, :]
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool, device=ids.device))
        allowed = causal[None, None, :, :] & mask[:, None, None, :].bool()
        for block in self.blocks:
            x = block(x, allowed)
        x = self.final_norm(x)
        last = mask.sum(dim=1) - 1
        pooled = x[torch.arange(b, device=ids.device), last]
        return self.head(pooled)


class LoraLinear(nn.Module):
    """Frozen linear plus a trainable rank-r update, scaled by alpha/r.

    The B factor starts at zero, so right after injection the wrapped layer
    computes exactly what the base layer did.
    """

    def __init__(self, base: nn.Linear, r: int, alpha: float, dropout: float, generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.scaling = alpha / r
        self.lora_a = nn.Parameter(torch.empty(r, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, r))
        with torch.no_grad():
            self.lora_a.normal_(0.0, 0.02, generator=generator)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        update = F.linear(F.linear(self.dropout(x), self.lora_a), self.lora_b)
        return self.base(x) + update * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)


# Module paths (relative to a block) carrying each projection family.
_PROJECTION_MODULES = {
    "query": ("attn.wq",),
    "key": ("attn.wk",),
    "value": ("attn.wv",),
    "output": ("attn.wo",),
    "ffn_in": ("mlp.gate", "mlp.up"),
    "ffn_out": ("mlp.down",),
}


def _get_module(root: nn.Module, dotted: str) -> nn.Module:
    mod = root
    for part in dotted.split("."):
        mod = getattr(mod, part)
    return mod


def _set_module(root: nn.Module, dotted: str, value: nn.Module) -> None:
    parts = dotted.split(".")
    parent = _get_module(root, ".".join(parts[:-1])) if len(parts) > 1 else root
    setattr(parent, parts[-1], value)


class ToyTransformerBackend:
    kind = "toy"

    def __init__(
        self,
        num_layers: int = 2,
        hidden: int = 32,
        num_heads: int = 2,
        ffn_dim: int = 64,
        vocab: int = 256,
        max_positions: int = 256,
        seed: int = 0,
    ):
        self.hparams = {
            "num_layers": num_layers,
            "hidden": hidden,
            "num_heads": num_heads,
            "ffn_dim": ffn_dim,
            "vocab": vocab,
            "max_positions": max_positions,
            "seed": seed,
        }
        self.seed = seed
        self.tokenizer = ByteTokenizer()
        self.tokenizer_identity = self.tokenizer.identity
        self.model = _ToyDecoder(num_layers, hidden, num_heads, ffn_dim, vocab, max_positions)
        self.plan: FreezePlan | LoraPlan | None = None
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.model.named_parameters():
                if p.ndim > 1:
                    p.normal_(0.0, 0.02, generator=g)
                elif name.endswith(".bias"):
                    p.zero_()
                else:  # 1-d non-bias tensors are norm scales
                    p.fill_(1.0)

    @property
    def num_layers(self) -> int:
        return self.hparams["num_layers"]

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def collate(self, seqs) -> tuple[torch.Tensor, torch.Tensor]:
        """Right-pad with PAD_ID; mask marks real tokens."""
        if not seqs:
            raise ValueError("empty batch")
        longest = max(len(s) for s in seqs)
        if longest > self.hparams["max_positions"]:
            raise ValueError(
                f"sequence length {longest} exceeds max_positions "
                f"{self.hparams['max_positions']}; truncate first"
            )
        if min(len(s) for s in seqs) == 0:
            raise ValueError("empty token sequence in batch")
        ids = torch.full((len(seqs), longest), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(seqs), longest), dtype=torch.long)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
            mask[i, : len(s)] = 1
        return ids, mask

    def predict_logits(self, seqs) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            ids, mask = self.collate(seqs)
            return self.model(ids, mask).numpy()

    def apply_plan(self, plan: FreezePlan | LoraPlan) -> None:
        if self.plan is not None:
            raise ValueError("a plan is already applied to this backend")
        if isinstance(plan, FreezePlan):
            self._apply_freeze(plan)
        elif isinstance(plan, LoraPlan):
            self._apply_lora(plan)
        else:
            raise TypeError(f"not a plan: {plan!r}")
        self.plan = plan

    def _resolve_blocks(self, blocks) -> set[int]:
        n = self.num_layers
        resolved = {b % n if b < 0 else b for b in blocks}
        bad = [b for b in resolved if not (0 <= b < n)]
        if bad:
            raise ValueError(f"block indices out of range [0, {n}): {sorted(bad)}")
        return resolved

    def _apply_freeze(self, plan: FreezePlan) -> None:
        trainable_blocks = self._resolve_blocks(plan.trainable_blocks)
        for p in self.model.parameters():
            p.requires_grad_(False)
        for i in trainable_blocks:
            for p in self.model.blocks[i].parameters():
                p.requires_grad_(True)
        if plan.head_trainable:
            for p in self.model.head.parameters():
                p.requires_grad_(True)
        if plan.final_norm_trainable:
            for p in self.model.final_norm.parameters():
                p.requires_grad_(True)

    def _apply_lora(self, plan: LoraPlan) -> None:
        plan.validate()
        for p in self.model.parameters():
            p.requires_grad_(False)
        g = torch.Generator().manual_seed(self.seed + 1)
        for block in self.model.blocks:
            for projection in plan.target_projections:
                for dotted in _PROJECTION_MODULES[projection]:
                    base = _get_module(block, dotted)
                    _set_module(
                        block, dotted, LoraLinear(base, plan.r, plan.alpha, plan.dropout, g)
                    )
        if plan.head_trainable:
            for p in self.model.head.parameters():
                p.requires_grad_(True)

    def lora_modules(self) -> list[tuple[str, LoraLinear]]:
        return [
            (name, mod) for name, mod in self.model.named_modules() if isinstance(mod, LoraLinear)
        ]

    def parameter_snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def arch_descriptor(self) -> ArchDescriptor:
        """Dimensional description of this backend, for audit cross-checks."""
        h = self.hparams["hidden"]
        return ArchDescriptor(
            kind="causal_decoder",
            num_layers=self.hparams["num_layers"],
            hidden=h,
            ffn_dim=self.hparams["ffn_dim"],
            num_heads=self.hparams["num_heads"],
            kv_dim=h,
            vocab=self.hparams["vocab"],
            head=ClassifierHeadSpec(layers=((h, 2, True),), pooling="last_token"),
            attn_bias={"query": False, "key": False, "value": False, "output": False},
            ffn_bias=False,
            gated_ffn=True,
            norm_params_per_layer=4 * h,  # two LayerNorms, weight + bias each
            final_norm_params=2 * h,
            max_positions=self.hparams["max_positions"],
            tied_embeddings=True,
        )

    def save(self, dir_path: str | Path) -> Path:
        dir_path = Path(dir_path)
        dir_path.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": self.kind,
            "hparams": self.hparams,
            "plan": plan_to_json(self.plan) if self.plan is not None else None,
        }
        (dir_path / "backend.json").write_text(
            json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8"
        )
        torch.save(self.model.state_dict(), dir_path / "weights.pt")
        return dir_path

    @classmethod
    def load(cls, dir_path: str | Path) -> "ToyTransformerBackend":
        dir_path = Path(dir_path)
        meta = json.loads((dir_path / "backend.json").read_text(encoding="utf-8"))
        backend = cls(**meta["hparams"])
        if meta.get("plan") is not None:
            backend.apply_plan(plan_from_json(meta["plan"], backend.num_layers))
        state = torch.load(dir_path / "weights.pt", map_location="cpu", weights_only=True)
        backend.model.load_state_dict(state)
        return backend
