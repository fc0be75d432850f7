#!/usr/bin/env python3
"""Print the parameter budgets of the shipped reference architectures.

Covers the two training recipes: head + last block on the 0.5B causal
model, and rank-4 query/value adapters on the multilingual encoder.
"""

from pathlib import Path

from mgtkit.arch_audit import (
    ArchDescriptor,
    FreezePlan,
    audit_freeze,
    audit_lora,
    head_params,
    load_plan,
)

ROOT = Path(__file__).resolve().parent.parent / "descriptors"


def show(title, arch, audit, head):
    no_head = audit.trainable_params / (audit.total_params - head)
    print(f"{title}")
    print(f"  total       {audit.total_params:>13,}")
    print(f"  trainable   {audit.trainable_params:>13,}")
    print(f"  fraction    {100 * audit.trainable_fraction:>12.4f}%")
    print(f"  fraction    {100 * no_head:>12.4f}% (head excluded from denominator)")
    print()


def main() -> None:
    causal = ArchDescriptor.load(ROOT / "qwen2.5-0.5b.json")
    freeze = load_plan(ROOT / "plans" / "head_plus_last.json", causal.num_layers)
    show(
        "causal 0.5B, head + last block",
        causal,
        audit_freeze(causal, freeze),
        head_params(causal.head),
    )

    encoder = ArchDescriptor.load(ROOT / "xlm-roberta-base.json")
    lora = load_plan(ROOT / "plans" / "lora_r4_qv.json")
    show(
        "multilingual encoder, rank-4 query/value adapters + head",
        encoder,
        audit_lora(encoder, lora),
        head_params(encoder.head),
    )

    full = audit_freeze(
        causal,
        FreezePlan(
            trainable_blocks=tuple(range(causal.num_layers)),
            head_trainable=True,
            final_norm_trainable=True,
        ),
    )
    print(f"(for scale: training every block, the head and the final norm of "
          f"the causal model would touch {full.trainable_params:,} parameters)")


if __name__ == "__main__":
    main()
