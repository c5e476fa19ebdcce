import math

import numpy as np
import pytest

from vfa.data import procedural_anchors
from vfa.model import ModelConfig, init_params
from vfa.train import (TrainConfig, TrainState, TrainingError, adamw_step, build_chains,
                       chain_scores, cosine_lr, eval_rank_accuracy, finetune, rank_accuracy,
                       train_joint, train_rank, write_log)

TINY = ModelConfig(frames=8, height=16, width=16, window=(2, 3, 3))


def tiny_anchors(n, seed=0):
    return procedural_anchors(n, seed=seed, frames=8, height=16, width=16)


def params_equal(a, b):
    return all(np.array_equal(x.data, y.data) for x, y in zip(a.parameters(), b.parameters()))


# ---------------------------------------------------------------- optimizer


def test_adamw_matches_hand_computation():
    cfg = TrainConfig(lr=0.01, weight_decay=0.1, grad_clip=1e9)
    state = TrainState.fresh(TINY, 0)
    names = [n for n, _ in state.params.named_parameters()]
    start = [p.data.copy() for p in state.params.parameters()]
    rng = np.random.default_rng(0)
    g1 = [rng.normal(size=p.shape) for p in start]
    g2 = [rng.normal(size=p.shape) for p in start]
    adamw_step(state, g1, 0.01, cfg)
    adamw_step(state, g2, 0.005, cfg)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for name, p0, a, b, p in zip(names, start, g1, g2, state.params.parameters()):
        decays = p0.ndim == 2 and not name.endswith("bias_table")
        expected = p0.copy()
        m = np.zeros_like(p0)
        v = np.zeros_like(p0)
        for step, (g, lr) in enumerate([(a, 0.01), (b, 0.005)], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            if decays:
                expected = expected * (1 - lr * 0.1)
            expected = expected - lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + eps)
        assert np.allclose(p.data, expected, rtol=1e-12, atol=1e-15), name
    assert state.step == 2


def test_weight_decay_exclusions():
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    state = TrainState.fresh(TINY, 0)
    before = {n: p.data.copy() for n, p in state.params.named_parameters()}
    zeros = [np.zeros(p.shape) for p in state.params.parameters()]
    adamw_step(state, zeros, 0.1, cfg)
    for n, p in state.params.named_parameters():
        if p.ndim == 2 and not n.endswith("bias_table"):
            assert np.allclose(p.data, before[n] * 0.95), n
        else:
            assert np.array_equal(p.data, before[n]), n
    decayed = [n for n, p in state.params.named_parameters() if p.ndim == 2 and "bias_table" not in n]
    assert "head.fc1.weight" in decayed and "stages.0.blocks.0.attn.q_weight" in decayed


def test_gradient_clipping():
    cfg = TrainConfig(lr=1.0, weight_decay=0.0, grad_clip=1.0)
    a, b = TrainState.fresh(TINY, 0), TrainState.fresh(TINY, 0)
    grads = [np.full(p.shape, 3.0) for p in a.params.parameters()]
    norm = adamw_step(a, grads, 1.0, cfg)
    assert norm == pytest.approx(3.0 * math.sqrt(sum(p.size for p in a.params.parameters())))
    # Adam's first step is scale-invariant, so clipped and unclipped updates agree
    adamw_step(b, [g / norm for g in grads], 1.0, cfg)
    assert all(np.allclose(x.data, y.data, rtol=1e-6) for x, y in zip(a.params.parameters(), b.params.parameters()))
    with pytest.raises(TrainingError):
        adamw_step(a, [np.full(p.shape, np.nan) for p in a.params.parameters()], 1.0, cfg)


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 100) == 1.0
    assert cosine_lr(1.0, 50, 100) == pytest.approx(0.5)
    assert cosine_lr(1.0, 100, 100) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(1.0, 30, 100, enabled=False) == 1.0
    values = [cosine_lr(3e-4, s, 40) for s in range(41)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_config_validation_and_round_trip():
    cfg = TrainConfig.paper()
    assert (cfg.batch_size, cfg.lr, cfg.epochs, cfg.weight_decay) == (16, 3e-4, 30, 0.01)
    ft = TrainConfig.paper("finetune")
    assert (ft.lr, ft.epochs, ft.weight_decay) == (1e-5, 60, 0.05)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for bad in [dict(stage="x"), dict(margin=0.0), dict(alpha=-1), dict(batch_size=0), dict(lr=-1)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"bogus": 1})


# ---------------------------------------------------------------- training contracts


def test_zero_learning_rate_leaves_params_bit_identical():
    cfg = TrainConfig(epochs=2, batch_size=2, lr=0.0)
    state = TrainState.fresh(TINY, 1)
    before = state.params.state()
    train_rank(tiny_anchors(3), cfg, state=state)
    assert all(np.array_equal(before[n], p.data) for n, p in state.params.named_parameters())
    assert len(state.history) == 4


def test_zero_epochs_leaves_state_unchanged():
    state = TrainState.fresh(TINY, 1)
    before = state.params.state()
    finetune([(tiny_anchors(1)[0], 3.0)], TrainConfig(stage="finetune", epochs=0), state)
    assert state.step == 0 and state.history == []
    assert all(np.array_equal(before[n], p.data) for n, p in state.params.named_parameters())


def test_fixed_seed_is_deterministic():
    cfg = TrainConfig(epochs=2, batch_size=2, seed=5)
    a = train_rank(tiny_anchors(3), cfg, config=TINY)
    b = train_rank(tiny_anchors(3), cfg, config=TINY)
    assert a.history == b.history and params_equal(a.params, b.params)
    c = train_rank(tiny_anchors(3), TrainConfig(epochs=2, batch_size=2, seed=6), config=TINY)
    assert a.history != c.history


def test_history_records(tmp_path):
    state = train_rank(tiny_anchors(2), TrainConfig(epochs=1, batch_size=1), config=TINY)
    assert [r["step"] for r in state.history] == [1, 2]
    assert all(math.isfinite(r["loss"]) and math.isfinite(r["grad_norm"]) for r in state.history)
    write_log(state.history, tmp_path / "log.jsonl")
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 2


def test_zero_alpha_joint_equals_finetune():
    labeled = [(v, y) for v, y in zip(tiny_anchors(3), [1.5, 3.0, 4.5])]
    cfg = TrainConfig(stage="joint", epochs=2, batch_size=2, alpha=0.0, seed=2)
    a = train_joint(labeled, cfg, config=TINY)
    b = finetune(labeled, cfg, TrainState.fresh(TINY, cfg.seed))
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert params_equal(a.params, b.params)


def test_label_validation():
    with pytest.raises(ValueError):
        finetune([(tiny_anchors(1)[0], 5.5)], TrainConfig(stage="finetune"), TrainState.fresh(TINY))
    with pytest.raises(ValueError):
        train_rank([], TrainConfig(), config=TINY)


def test_chains_are_seeded_per_anchor_and_epoch():
    anchors = tiny_anchors(2)
    cfg = TrainConfig(drop_rates=(0.25, 0.5))
    a, b = build_chains(anchors, cfg), build_chains(anchors, cfg)
    assert [s.to_dict() for c in a for s in c.schedules] == [s.to_dict() for c in b for s in c.schedules]
    assert a[0].videos().shape == (3, 8, 16, 16, 3)


# ---------------------------------------------------------------- evaluation


def test_rank_accuracy_arithmetic():
    assert rank_accuracy([[3, 2, 1], [1, 2, 3]]) == 0.5
    assert rank_accuracy([[1, 1]]) == 0.0


def test_perfect_oracle_scores_full_accuracy():
    cfg = TrainConfig()
    chains = build_chains(tiny_anchors(4), cfg)
    oracle = np.array([[0.0] + [-s.drop_rate for s in c.schedules] for c in chains])
    assert rank_accuracy(oracle) == 1.0


def test_untrained_model_is_near_chance():
    # 70 chains x 3 adjacent pairs = 210 pairs
    config = ModelConfig(frames=8, height=32, width=32, init_std=0.2)
    state = TrainState.fresh(config, 0)
    anchors = procedural_anchors(70, seed=3, frames=8, height=32, width=32)
    acc = eval_rank_accuracy(state, anchors, TrainConfig())
    assert 0.3 <= acc <= 0.7


def test_chain_scores_shape():
    chains = build_chains(tiny_anchors(2), TrainConfig())
    assert chain_scores(init_params(TINY, 0), TINY, chains).shape == (2, 4)


def test_linear_warmup():
    assert cosine_lr(1.0, 0, 100, warmup=4) == pytest.approx(0.25 * cosine_lr(1.0, 0, 100))
    assert cosine_lr(1.0, 3, 100, warmup=4) == cosine_lr(1.0, 3, 100)
    assert cosine_lr(2.0, 1, 0, enabled=False, warmup=4) == 1.0
    toy = TrainConfig.toy()
    assert (toy.epochs, toy.drop_rates, toy.warmup_steps) == (30, (0.1, 0.5, 0.9), 20)
    assert TrainConfig.paper().warmup_steps == 0
