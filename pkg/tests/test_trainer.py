import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mgtkit.arch_audit import FreezePlan, LoraPlan
from mgtkit.trainer import (
    Decision,
    EpochLog,
    TrainConfig,
    TruncationPolicy,
    batch_weighted_cross_entropy,
    config_from_toml,
    config_to_toml,
    early_stop,
    make_schedule,
    read_epoch_logs,
    truncate,
    weighted_cross_entropy,
    weighted_cross_entropy_grad,
    write_epoch_logs,
)

from .conftest import CONFIGS


# ---------------------------------------------------------------------------
# Truncation
# ---------------------------------------------------------------------------


def test_truncate_keeps_head():
    ids = list(range(600))
    assert truncate(ids, TruncationPolicy(512)) == ids[:512]


def test_truncate_noop_under_limit():
    ids = list(range(10))
    assert truncate(ids, TruncationPolicy(512)) == ids


def test_truncate_boundary_one_token():
    assert truncate([7, 8, 9], TruncationPolicy(1)) == [7]


def test_truncation_policy_validation():
    with pytest.raises(ValueError, match="max_tokens"):
        TruncationPolicy(0)
    with pytest.raises(ValueError, match="head"):
        TruncationPolicy(8, side="tail")


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def test_schedule_reproduces_full_scale_warmup_count():
    schedule = make_schedule(674_083, 16, 1, 0.10)
    assert schedule.total_steps == 42_130  # floor(674083 / 16)
    assert schedule.warmup_steps == 4_213  # floor(0.1 * 42130)


def test_schedule_hand_arithmetic():
    schedule = make_schedule(100, 10, 2, 0.10)
    assert schedule.total_steps == 20
    assert schedule.warmup_steps == 2


def test_schedule_zero_warmup_is_pure_decay():
    schedule = make_schedule(100, 10, 1, 0.0, peak_lr=0.5)
    assert schedule.warmup_steps == 0
    assert schedule.lr_at(0) == 0.5
    assert schedule.lr_at(5) == 0.25
    assert schedule.lr_at(10) == 0.0


def test_schedule_shape_and_peak():
    schedule = make_schedule(640, 32, 5, 0.2, peak_lr=2e-4)
    w, t = schedule.warmup_steps, schedule.total_steps
    assert schedule.lr_at(0) == 0.0
    assert schedule.lr_at(w) == 2e-4  # peak exactly at warmup_steps
    assert schedule.lr_at(t) == 0.0
    # linear on both sides
    assert schedule.lr_at(w // 2) == pytest.approx(2e-4 * (w // 2) / w)
    mid = (w + t) // 2
    assert schedule.lr_at(mid) == pytest.approx(2e-4 * (t - mid) / (t - w))


@given(
    num=st.integers(min_value=1, max_value=10_000),
    batch=st.integers(min_value=1, max_value=128),
    epochs=st.integers(min_value=1, max_value=5),
    frac=st.floats(min_value=0.0, max_value=0.99),
)
def test_schedule_piecewise_linear_and_continuous(num, batch, epochs, frac):
    if batch > num:
        with pytest.raises(ValueError):
            make_schedule(num, batch, epochs, frac)
        return
    schedule = make_schedule(num, batch, epochs, frac, peak_lr=1.0)
    assert schedule.warmup_steps <= schedule.total_steps
    values = [schedule.lr_at(s) for s in range(schedule.total_steps + 1)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert values[-1] == 0.0
    if schedule.warmup_steps:
        assert values[schedule.warmup_steps] == 1.0
        assert values[0] == 0.0
    # one sign change in the slope at most
    diffs = [b - a for a, b in zip(values, values[1:])]
    rises = [d for d in diffs[: schedule.warmup_steps]]
    falls = [d for d in diffs[schedule.warmup_steps :]]
    assert all(d >= 0 for d in rises)
    assert all(d <= 0 for d in falls)


def test_schedule_rejects_oversized_batch():
    with pytest.raises(ValueError, match="exceeds"):
        make_schedule(10, 11, 1, 0.1)


# ---------------------------------------------------------------------------
# Weighted cross-entropy
# ---------------------------------------------------------------------------


def test_uniform_softmax_gives_ln2():
    assert weighted_cross_entropy((0.0, 0.0), 1, {0: 1.0, 1: 1.0}) == pytest.approx(
        math.log(2), abs=1e-12
    )


def test_weight_scales_loss():
    assert weighted_cross_entropy((0.0, 0.0), 1, {0: 1.0, 1: 2.0}) == pytest.approx(
        2 * math.log(2), abs=1e-12
    )


def test_unit_weights_reduce_to_plain_cross_entropy():
    rng = np.random.default_rng(1)
    unit = {0: 1.0, 1: 1.0}
    for _ in range(1000):
        logits = rng.normal(0, 3, size=2)
        label = int(rng.integers(0, 2))
        weighted = weighted_cross_entropy(logits, label, unit)
        plain = -(logits[label] - np.log(np.exp(logits).sum()))
        assert abs(weighted - plain) <= 1e-12


def test_non_finite_logits_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        weighted_cross_entropy((float("nan"), 0.0), 0, {0: 1.0, 1: 1.0})
    with pytest.raises(ValueError, match="non-finite"):
        weighted_cross_entropy((float("inf"), 0.0), 0, {0: 1.0, 1: 1.0})


def test_nonpositive_weight_rejected():
    with pytest.raises(ValueError, match="positive"):
        weighted_cross_entropy((0.0, 1.0), 0, {0: 0.0, 1: 1.0})


def test_gradient_matches_central_differences():
    rng = np.random.default_rng(123)
    h = 1e-6
    for _ in range(100):
        logits = rng.normal(0, 2, size=2)
        label = int(rng.integers(0, 2))
        weights = {0: float(rng.uniform(0.1, 5)), 1: float(rng.uniform(0.1, 5))}
        analytic = weighted_cross_entropy_grad(logits, label, weights)
        for j in range(2):
            bumped_up = logits.copy()
            bumped_up[j] += h
            bumped_dn = logits.copy()
            bumped_dn[j] -= h
            numeric = (
                weighted_cross_entropy(bumped_up, label, weights)
                - weighted_cross_entropy(bumped_dn, label, weights)
            ) / (2 * h)
            scale = max(abs(analytic[j]), abs(numeric), 1e-8)
            assert abs(analytic[j] - numeric) / scale <= 1e-5


def test_batch_reduction_is_weighted_mean():
    logits = [(0.0, 0.0), (0.0, 0.0)]
    weights = {0: 1.0, 1: 3.0}
    # both rows have loss w * ln2; weighted mean = (1*ln2*1 + 3*ln2*1)... the
    # reduction divides the weighted losses by the weight mass
    loss = batch_weighted_cross_entropy(logits, [0, 1], weights)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_weighted_loss_matches_torch_convention():
    import torch
    import torch.nn.functional as F

    rng = np.random.default_rng(5)
    logits = rng.normal(0, 2, size=(16, 2))
    labels = rng.integers(0, 2, size=16)
    weights = {0: 0.7, 1: 2.3}
    ours = batch_weighted_cross_entropy(logits, labels.tolist(), weights)
    theirs = F.cross_entropy(
        torch.tensor(logits, dtype=torch.float64),
        torch.tensor(labels, dtype=torch.long),
        weight=torch.tensor([0.7, 2.3], dtype=torch.float64),
    )
    assert ours == pytest.approx(float(theirs), abs=1e-9)


# ---------------------------------------------------------------------------
# Early stopping
# ---------------------------------------------------------------------------


def _logs(valid_losses):
    return [
        EpochLog(epoch=i + 1, train_loss=0.0, valid_loss=v, valid_macro_f1=0.9, wall_time_s=1.0)
        for i, v in enumerate(valid_losses)
    ]


def test_plateau_stops_after_third_epoch():
    logs = _logs([0.11, 0.10, 0.10])
    assert early_stop(logs[:2], tolerance=0.005) is Decision.CONTINUE
    assert early_stop(logs, tolerance=0.005) is Decision.STOP


def test_single_log_continues_unless_budget_spent():
    logs = _logs([0.5])
    assert early_stop(logs, tolerance=0.005) is Decision.CONTINUE
    assert early_stop(logs, tolerance=0.005, max_epochs=1) is Decision.STOP


def test_clear_improvement_continues():
    assert early_stop(_logs([0.5, 0.3]), tolerance=0.005) is Decision.CONTINUE


def test_worsening_loss_stops():
    assert early_stop(_logs([0.3, 0.5]), tolerance=0.005) is Decision.STOP


def test_early_stop_requires_logs():
    with pytest.raises(ValueError, match="at least one"):
        early_stop([], tolerance=0.005)


# ---------------------------------------------------------------------------
# Config files and epoch-log CSV
# ---------------------------------------------------------------------------


def test_subtask_a_preset_matches_published_recipe():
    config = config_from_toml(CONFIGS / "subtask-a.toml")
    assert config.learning_rate == 2e-4
    assert config.weight_decay == 0.01
    assert config.batch_size == 32
    assert config.max_epochs == 3
    assert config.warmup_fraction == 0.0
    assert config.weighted_loss is False
    assert config.truncation.max_tokens == 2048
    assert config.plan == FreezePlan(
        trainable_blocks=(-1,), head_trainable=True, final_norm_trainable=False
    )


def test_subtask_b_preset_matches_published_recipe():
    config = config_from_toml(CONFIGS / "subtask-b.toml")
    assert config.learning_rate == 5e-5
    assert config.weight_decay == 0.002
    assert config.batch_size == 16
    assert config.max_epochs == 1
    assert config.warmup_fraction == 0.10
    assert config.weighted_loss is True
    assert config.truncation.max_tokens == 512
    assert config.plan == LoraPlan(
        r=4, alpha=8.0, dropout=0.25,
        target_projections=("query", "value"), head_trainable=True,
    )


def test_config_toml_round_trip(tmp_path):
    config = config_from_toml(CONFIGS / "subtask-b.toml")
    path = tmp_path / "snapshot.toml"
    path.write_text(config_to_toml(config), encoding="utf-8")
    assert config_from_toml(path) == config


def test_config_validation():
    with pytest.raises(ValueError, match="positive"):
        TrainConfig(learning_rate=0.0, weight_decay=0.0, batch_size=4, max_epochs=1)
    with pytest.raises(ValueError, match="optimizer"):
        TrainConfig(
            learning_rate=1e-3, weight_decay=0.0, batch_size=4, max_epochs=1,
            optimizer="sgd",
        )


def test_epoch_log_csv_round_trip(tmp_path):
    logs = _logs([0.11, 0.10, 0.10])
    path = write_epoch_logs(logs, tmp_path / "epoch_logs.csv")
    header = path.read_text().splitlines()[0]
    assert header == "epoch,train_loss,valid_loss,valid_macro_f1,wall_time_s"
    assert read_epoch_logs(path) == logs


def test_golden_full_scale_trajectory_round_trips_and_plateaus(tmp_path):
    # The reference three-epoch run, kept as the log-format golden example:
    # steadily falling train loss, validation flat by epoch 3.
    golden = [
        EpochLog(1, 0.11, 0.11, 0.950, 3600.0),
        EpochLog(2, 0.07, 0.10, 0.960, 3600.0),
        EpochLog(3, 0.04, 0.10, 0.966, 3600.0),
    ]
    path = write_epoch_logs(golden, tmp_path / "epoch_logs.csv")
    assert read_epoch_logs(path) == golden
    assert early_stop(golden[:2], tolerance=0.005) is Decision.CONTINUE
    assert early_stop(golden, tolerance=0.005) is Decision.STOP
