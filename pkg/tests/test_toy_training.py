import numpy as np
import pytest
import torch
from torch import nn

from mgtkit.arch_audit import FreezePlan, LoraPlan, audit_freeze, audit_lora, count_params
from mgtkit.synthetic import synthetic_corpus
from mgtkit.toy_backend import ToyTransformerBackend
from mgtkit.trainer import (
    TrainConfig,
    TrainingDiverged,
    TruncationPolicy,
    config_from_toml,
    load_checkpoint,
    read_epoch_logs,
    train,
)

LAST_BLOCK_PLAN = FreezePlan(trainable_blocks=(1,), head_trainable=True)


def toy_config(**overrides) -> TrainConfig:
    fields = dict(
        learning_rate=3e-3,
        weight_decay=0.01,
        batch_size=32,
        max_epochs=3,
        truncation=TruncationPolicy(128),
        plan=LAST_BLOCK_PLAN,
        early_stop_tolerance=0.0,
        seed=0,
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def trainable_count(backend) -> int:
    return sum(p.numel() for p in backend.model.parameters() if p.requires_grad)


# ---------------------------------------------------------------------------
# The live torch module doubles as an oracle for the dimensional auditor.
# ---------------------------------------------------------------------------


def test_descriptor_matches_torch_parameter_count():
    backend = ToyTransformerBackend(seed=0)
    torch_total = sum(p.numel() for p in backend.model.parameters())
    assert count_params(backend.arch_descriptor()) == torch_total


@pytest.mark.parametrize(
    "plan",
    [
        FreezePlan(trainable_blocks=(), head_trainable=True),
        FreezePlan(trainable_blocks=(1,), head_trainable=True),
        FreezePlan(trainable_blocks=(0, 1), head_trainable=True, final_norm_trainable=True),
    ],
)
def test_freeze_runtime_trainable_matches_audit(plan):
    backend = ToyTransformerBackend(seed=0)
    backend.apply_plan(plan)
    audit = audit_freeze(backend.arch_descriptor(), plan)
    assert trainable_count(backend) == audit.trainable_params


@pytest.mark.parametrize(
    "targets",
    [("query", "value"), ("key", "output"), ("ffn_in", "ffn_out"), ()],
)
def test_lora_runtime_trainable_matches_audit(targets):
    backend = ToyTransformerBackend(seed=0)
    plan = LoraPlan(r=4, alpha=8, dropout=0.0, target_projections=targets, head_trainable=True)
    backend.apply_plan(plan)
    audit = audit_lora(backend.arch_descriptor(), plan)
    assert trainable_count(backend) == audit.trainable_params


def test_negative_block_index_means_last():
    backend = ToyTransformerBackend(seed=0)
    backend.apply_plan(FreezePlan(trainable_blocks=(-1,), head_trainable=False))
    block1 = {id(p) for p in backend.model.blocks[1].parameters()}
    trainable = {id(p) for p in backend.model.parameters() if p.requires_grad}
    assert trainable == block1


def test_second_plan_rejected():
    backend = ToyTransformerBackend(seed=0)
    backend.apply_plan(LAST_BLOCK_PLAN)
    with pytest.raises(ValueError, match="already applied"):
        backend.apply_plan(LAST_BLOCK_PLAN)


# ---------------------------------------------------------------------------
# Training dynamics, determinism, and the freezing / adapter contracts.
# ---------------------------------------------------------------------------


def test_separable_data_learns_in_three_epochs(tmp_path):
    train_c = synthetic_corpus(500, "train", seed=1)
    valid_c = synthetic_corpus(200, "dev", seed=2)
    backend = ToyTransformerBackend(seed=0)
    handle, logs = train(backend, train_c, valid_c, toy_config(), tmp_path / "run")
    assert len(logs) == 3
    assert logs[0].train_loss > logs[1].train_loss > logs[2].train_loss
    assert logs[-1].valid_macro_f1 >= 0.95
    assert handle.best_epoch == min(logs, key=lambda l: l.valid_loss).epoch


def test_max_epochs_one_gives_one_log(tmp_path):
    backend = ToyTransformerBackend(seed=0)
    _, logs = train(
        backend,
        synthetic_corpus(64, "train", seed=3),
        synthetic_corpus(32, "dev", seed=4),
        toy_config(max_epochs=1, batch_size=16),
        tmp_path / "run",
    )
    assert len(logs) == 1
    assert logs[0].epoch == 1


def test_plateau_cuts_training_short(tmp_path):
    # A zero learning rate cannot improve validation loss, so the plateau
    # rule must fire right after epoch 2.
    backend = ToyTransformerBackend(seed=0)
    _, logs = train(
        backend,
        synthetic_corpus(64, "train", seed=3),
        synthetic_corpus(32, "dev", seed=4),
        toy_config(learning_rate=1e-12, max_epochs=5, batch_size=16,
                   early_stop_tolerance=0.005),
        tmp_path / "run",
    )
    assert len(logs) == 2


def test_same_seed_bitwise_identical_runs(tmp_path):
    train_c = synthetic_corpus(96, "train", seed=9)
    valid_c = synthetic_corpus(48, "dev", seed=10)

    def run(tag):
        backend = ToyTransformerBackend(seed=5)
        _, logs = train(backend, train_c, valid_c,
                        toy_config(seed=5, max_epochs=2, batch_size=16),
                        tmp_path / tag)
        return backend.model.state_dict(), logs

    state_a, logs_a = run("a")
    state_b, logs_b = run("b")
    assert [(l.train_loss, l.valid_loss, l.valid_macro_f1) for l in logs_a] == [
        (l.train_loss, l.valid_loss, l.valid_macro_f1) for l in logs_b
    ]
    assert state_a.keys() == state_b.keys()
    for key in state_a:
        assert torch.equal(state_a[key], state_b[key]), key


def test_frozen_parameters_bit_identical_after_freeze_run(tmp_path):
    backend = ToyTransformerBackend(seed=11)
    before = backend.parameter_snapshot()
    train(
        backend,
        synthetic_corpus(96, "train", seed=12),
        synthetic_corpus(48, "dev", seed=13),
        toy_config(max_epochs=2, batch_size=16),
        tmp_path / "run",
    )
    after = backend.model.state_dict()
    trained_prefixes = ("blocks.1.", "head.")
    for key, tensor in before.items():
        if key.startswith(trained_prefixes):
            continue
        assert torch.equal(tensor, after[key]), f"frozen parameter changed: {key}"
    # and the plan's own parameters did move
    assert not torch.equal(before["head.weight"], after["head.weight"])


def test_lora_step0_forward_equals_base_exactly():
    backend = ToyTransformerBackend(seed=3)
    seqs = [backend.encode(r.text)[:128] for r in synthetic_corpus(16, seed=8)]
    base_logits = backend.predict_logits(seqs)
    backend.apply_plan(
        LoraPlan(r=4, alpha=8, dropout=0.25, target_projections=("query", "value"))
    )
    assert np.array_equal(base_logits, backend.predict_logits(seqs))


def test_lora_merged_weights_equal_base_plus_scaled_product():
    backend = ToyTransformerBackend(seed=3)
    plan = LoraPlan(r=4, alpha=8, dropout=0.0, target_projections=("query", "value"))
    backend.apply_plan(plan)
    for name, mod in backend.lora_modules():
        with torch.no_grad():
            mod.lora_b.normal_(0, 0.1)
        manual = mod.base.weight + (plan.alpha / plan.r) * (mod.lora_b @ mod.lora_a)
        assert torch.equal(mod.merged_weight(), manual), name


def test_lora_base_weights_bit_identical_after_training(tmp_path):
    backend = ToyTransformerBackend(seed=14)
    before = backend.parameter_snapshot()
    plan = LoraPlan(r=2, alpha=4, dropout=0.1, target_projections=("query", "value"))
    train(
        backend,
        synthetic_corpus(96, "train", seed=15),
        synthetic_corpus(48, "dev", seed=16),
        toy_config(plan=plan, weighted_loss=True, max_epochs=2, batch_size=16),
        tmp_path / "run",
    )
    after = backend.model.state_dict()
    wrapped = ("attn.wq.weight", "attn.wv.weight")
    for key, tensor in before.items():
        if key.startswith("head."):
            continue
        post_key = key
        for suffix in wrapped:
            if key.endswith(suffix):
                post_key = key.replace(".weight", ".base.weight")
        assert torch.equal(tensor, after[post_key]), f"base weight changed: {key}"
    # adapters learned something
    assert any(
        after[k].abs().sum() > 0 for k in after if k.endswith("lora_b")
    )


# ---------------------------------------------------------------------------
# Failure modes and the checkpoint contract.
# ---------------------------------------------------------------------------


class _ExplodingBackend:
    """Returns NaN logits from the n-th model call onward."""

    def __init__(self, explode_at_call: int):
        probe = self

        class _Model(nn.Module):
            def __init__(self):
                super().__init__()
                self.lin = nn.Linear(4, 2)
                self.calls = 0

            def forward(self, ids, mask):
                self.calls += 1
                x = torch.ones(ids.shape[0], 4)
                out = self.lin(x)
                if self.calls >= probe.explode_at_call:
                    out = out * float("nan")
                return out

        self.explode_at_call = explode_at_call
        self.model = _Model()

    def encode(self, text):
        return [1, 2, 3]

    def collate(self, seqs):
        ids = torch.ones(len(seqs), 3, dtype=torch.long)
        mask = torch.ones(len(seqs), 3, dtype=torch.long)
        return ids, mask

    def apply_plan(self, plan):
        pass

    def save(self, path):
        pass


def test_divergence_aborts_immediately_with_empty_logs(tmp_path):
    backend = _ExplodingBackend(explode_at_call=1)
    with pytest.raises(TrainingDiverged) as excinfo:
        train(
            backend,
            synthetic_corpus(20, "train", seed=1),
            synthetic_corpus(10, "dev", seed=2),
            toy_config(batch_size=10, max_epochs=3),
            tmp_path / "run",
        )
    assert excinfo.value.logs == []


def test_divergence_carries_partial_logs(tmp_path):
    # 2 train calls + 1 valid call per epoch; call 4 is epoch 2's first batch.
    backend = _ExplodingBackend(explode_at_call=4)
    with pytest.raises(TrainingDiverged) as excinfo:
        train(
            backend,
            synthetic_corpus(20, "train", seed=1),
            synthetic_corpus(10, "dev", seed=2),
            toy_config(batch_size=10, max_epochs=3),
            tmp_path / "run",
        )
    assert len(excinfo.value.logs) == 1


def test_train_rejects_bad_inputs(tmp_path):
    backend = ToyTransformerBackend(seed=0)
    train_c = synthetic_corpus(20, "train", seed=1)
    valid_c = synthetic_corpus(10, "dev", seed=2)
    with pytest.raises(ValueError, match="non-empty"):
        train(backend, train_c.subset([]), valid_c, toy_config(), tmp_path / "a")
    with pytest.raises(ValueError, match="plan"):
        train(backend, train_c, valid_c, toy_config(plan=None), tmp_path / "b")
    with pytest.raises(ValueError, match="no trainable parameters"):
        train(
            backend, train_c, valid_c,
            toy_config(plan=FreezePlan(trainable_blocks=(), head_trainable=False),
                       batch_size=10),
            tmp_path / "c",
        )


def test_collate_guards():
    backend = ToyTransformerBackend(seed=0)
    with pytest.raises(ValueError, match="empty batch"):
        backend.collate([])
    with pytest.raises(ValueError, match="empty token sequence"):
        backend.collate([[1, 2], []])
    with pytest.raises(ValueError, match="max_positions"):
        backend.collate([[1] * 500])


def test_checkpoint_layout_and_reload(tmp_path):
    train_c = synthetic_corpus(64, "train", seed=21)
    valid_c = synthetic_corpus(32, "dev", seed=22)
    backend = ToyTransformerBackend(seed=2)
    config = toy_config(max_epochs=2, batch_size=16)
    handle, logs = train(backend, train_c, valid_c, config, tmp_path / "ckpt")

    assert (handle.path / "config.toml").exists()
    assert (handle.path / "epoch_logs.csv").exists()
    assert (handle.path / "backend" / "backend.json").exists()
    assert (handle.path / "backend" / "weights.pt").exists()

    assert config_from_toml(handle.path / "config.toml") == config
    assert read_epoch_logs(handle.path / "epoch_logs.csv") == logs

    reloaded = load_checkpoint(handle.path)
    seqs = [backend.encode(r.text)[:128] for r in valid_c.records[:8]]
    assert np.array_equal(backend.predict_logits(seqs), reloaded.predict_logits(seqs))


def test_load_checkpoint_rejects_unknown_backend(tmp_path):
    backend_dir = tmp_path / "ckpt" / "backend"
    backend_dir.mkdir(parents=True)
    (backend_dir / "backend.json").write_text('{"kind": "bert"}')
    with pytest.raises(ValueError, match="unknown backend"):
        load_checkpoint(tmp_path / "ckpt")
