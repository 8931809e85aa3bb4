import math

import numpy as np
import pytest

from conftest import SMALL
from paradec import numerics as nx
from paradec.corpus import EOS, Sample
from paradec.model import ModelConfig, Transformer
from paradec.numerics import GradTape
from paradec.schedule import BlockPair, ConfigError, NoiseSchedule, PackedSample
from paradec.training import (
    TrainConfig,
    TrainingError,
    ar_loss,
    collect,
    loss_cllm,
    loss_progressive,
    pack_records,
    packed_loss,
    progressive_pipeline,
    train_round,
)

TINY = ModelConfig(vocab_size=96, d_model=16, n_layers=1, n_heads=2, max_seq_len=64, seed=5)


@pytest.fixture(scope="module")
def model64():
    return Transformer(SMALL).astype(np.float64)


def rand_block(rng, n, eos_at=None):
    b = [int(t) for t in rng.integers(3, 96, n)]
    if eos_at is not None:
        b[eos_at] = EOS
    return b


def rand_sample(rng, variant, n=3, N=2, w=2, eos=False):
    blocks = []
    for i in range(N):
        clean = rand_block(rng, n, eos_at=(n // 2 if eos and i == N - 1 else None))
        blocks.append(BlockPair(rand_block(rng, n), clean, 0.5))
    return PackedSample([0] + [int(t) for t in rng.integers(3, 96, 3)], blocks, variant, w)


def _logprobs(model, seq):
    logits, _ = model.inference_view().forward(np.asarray(seq, dtype=np.int64))
    z = logits.data.astype(np.float64)
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def oracle_loss(model, s, ar_weight):
    """Loss from separate teacher and student passes per block, in float64."""
    gen = [t for b in s.blocks for t in b.clean]
    stop = gen.index(EOS) + 1 if EOS in gen else len(gen)
    n, P = s.n, len(s.prompt)
    per_block, nll = [], []
    for i, b in enumerate(s.blocks):
        k = min(n, stop - i * n)
        if k <= 0:
            break
        clean_ctx = [t for blk in s.blocks[:i] for t in blk.clean]
        if s.mask_variant == "CC":
            noisy_ctx = clean_ctx
        elif s.mask_variant == "NC":
            noisy_ctx = [t for blk in s.blocks[:i] for t in blk.noisy]
        else:
            noisy_ctx = [t for j, blk in enumerate(s.blocks[:i])
                         for t in (blk.noisy if j // s.window_size == i // s.window_size else blk.clean)]
        # rows predicting positions 0..n-1 start at the last context token
        t_lp = _logprobs(model, s.prompt + clean_ctx + b.clean)[P + i * n - 1:][:k]
        s_lp = _logprobs(model, s.prompt + noisy_ctx + b.noisy)[P + i * n - 1:][:k]
        kl = 0.0
        for r in range(k):
            for v in range(t_lp.shape[1]):
                pt = math.exp(t_lp[r, v])
                if pt > 0:
                    kl += pt * (t_lp[r, v] - s_lp[r, v])
            nll.append(-t_lp[r, b.clean[r]])
        per_block.append(kl)
    l_pc, l_ar = float(np.mean(per_block)), float(np.mean(nll))
    return l_pc, l_ar, l_pc + ar_weight * l_ar


@pytest.mark.parametrize("variant", ["NC", "CC", "NC_IC"])
def test_packed_loss_matches_unpacked_oracle(model64, variant):
    rng = np.random.default_rng({"NC": 0, "CC": 1, "NC_IC": 2}[variant])
    for trial in range(6):
        s = rand_sample(rng, variant, n=int(rng.integers(2, 5)), N=int(rng.integers(1, 5)), w=2, eos=trial % 2 == 1)
        rep = packed_loss(model64, [s], ar_weight=0.7)
        ref = oracle_loss(model64, s, 0.7)
        assert rep.l_pc == pytest.approx(ref[0], abs=1e-5)
        assert rep.l_ar == pytest.approx(ref[1], abs=1e-5)
        assert rep.total == pytest.approx(ref[2], abs=1e-5)


def test_n2_total_matches_oracle(model64):
    s = rand_sample(np.random.default_rng(10), "NC", n=4, N=2)
    assert loss_progressive(s, model64, 1.0).total == pytest.approx(oracle_loss(model64, s, 1.0)[2], abs=1e-5)


def test_batch_loss_is_mean_over_samples(model64):
    rng = np.random.default_rng(11)
    a, b = rand_sample(rng, "NC", n=2, N=3), rand_sample(rng, "NC", n=2, N=1)
    both = packed_loss(model64, [a, b], 1.0)
    sep = [packed_loss(model64, [x], 1.0) for x in (a, b)]
    assert both.l_pc == pytest.approx((sep[0].l_pc + sep[1].l_pc) / 2, abs=1e-9)
    assert both.l_ar == pytest.approx((sep[0].l_ar + sep[1].l_ar) / 2, abs=1e-9)


def test_report_invariants(model64):
    rng = np.random.default_rng(12)
    for _ in range(5):
        s = rand_sample(rng, "NC", n=3, N=int(rng.integers(1, 5)))
        rep = packed_loss(model64, [s], ar_weight=0.3)
        assert rep.total == pytest.approx(rep.l_pc + 0.3 * rep.l_ar, abs=1e-6)
        assert rep.l_pc == pytest.approx(np.mean(rep.per_block_kl[0]), abs=1e-9)
        assert rep.l_pc >= 0 and rep.l_ar >= 0


def test_zero_ar_weight(model64):
    rep = loss_progressive(rand_sample(np.random.default_rng(13), "NC"), model64, ar_weight=0.0)
    assert rep.total == rep.l_pc


def test_zero_noise_has_zero_consistency_loss(model64):
    rng = np.random.default_rng(14)
    blocks = [BlockPair(c, list(c), 0.0) for c in (rand_block(rng, 4) for _ in range(3))]
    for variant, fn in (("NC", loss_progressive), ("CC", loss_cllm)):
        rep = fn(PackedSample([0, 5, 6], blocks, variant, 4), model64)
        assert abs(rep.l_pc) <= 1e-6


def test_single_block_cllm_equals_progressive(model64):
    rng = np.random.default_rng(15)
    blk = [BlockPair(rand_block(rng, 5), rand_block(rng, 5), 0.4)]
    a = loss_cllm(PackedSample([0, 9], blk, "CC", 1), model64)
    b = loss_progressive(PackedSample([0, 9], blk, "NC", 1), model64)
    assert a.total == pytest.approx(b.total, abs=1e-12)


def test_cllm_rejects_non_cc(model64):
    with pytest.raises(ConfigError):
        loss_cllm(rand_sample(np.random.default_rng(16), "NC"), model64)


def test_gradient_matches_finite_differences():
    m = Transformer(TINY).astype(np.float64)
    rng = np.random.default_rng(17)
    s = rand_sample(rng, "NC", n=3, N=2)
    frozen = packed_loss(m, [s], 1.0).teacher_logprobs

    def f(_):
        return packed_loss(m, [s], 1.0, teacher_logprobs=frozen).tensor

    err = nx.grad_check(f, m.parameters(), eps=1e-5, coords=6, rng=np.random.default_rng(0))
    assert err < 1e-3


def test_teacher_path_carries_no_gradient():
    m = Transformer(TINY).astype(np.float64)
    s = rand_sample(np.random.default_rng(18), "NC", n=3, N=3)

    def grads(frozen):
        for p in m.parameters():
            p.grad = None
        with GradTape() as tape:
            rep = packed_loss(m, [s], 0.0, teacher_logprobs=frozen)
        tape.backward(rep.tensor)
        return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in m.parameters()]

    live = grads(None)
    fixed = grads(packed_loss(m, [s], 0.0).teacher_logprobs)
    for a, b in zip(live, fixed):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_ar_loss_matches_direct_nll(model64):
    smp = Sample("1+2=", "3")
    lp = _logprobs(model64, smp.prompt_ids + smp.target_ids)
    P = len(smp.prompt_ids)
    ref = -np.mean([lp[j - 1, t] for j, t in enumerate(smp.prompt_ids + smp.target_ids) if j >= P])
    assert float(ar_loss(model64, [smp]).data) == pytest.approx(ref, abs=1e-9)


# --- optimization ------------------------------------------------------------------

@pytest.fixture(scope="module")
def dataset():
    m = Transformer(TINY)
    rng = np.random.default_rng(19)
    prompts = [[0] + [int(t) for t in rng.integers(3, 96, 3)] for _ in range(500)]
    recs = collect(m, prompts, 4, 8, seed=0)
    return pack_records(recs, NoiseSchedule(2), "NC")


def _cfg(**kw):
    base = dict(learning_rate=0.05, batch_size=8, steps=5, seed=3, optimizer="sgd")
    return TrainConfig(**{**base, **kw})


def test_zero_learning_rate_leaves_parameters(dataset):
    m = Transformer(TINY)
    before = {k: v.data.copy() for k, v in m.params.items()}
    train_round(m, dataset, _cfg(learning_rate=0.0, steps=1))
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_training_is_deterministic(dataset):
    a, b = Transformer(TINY), Transformer(TINY)
    la = train_round(a, dataset, _cfg())
    lb = train_round(b, dataset, _cfg())
    assert la == lb
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_loss_decreases(dataset):
    m = Transformer(TINY)
    log = train_round(m, dataset, _cfg(steps=200, learning_rate=3e-3, optimizer="adam"))
    first = np.mean([r["total"] for r in log[:10]])
    last = np.mean([r["total"] for r in log[-10:]])
    assert last < first
    assert set(log[0]) == {"step", "l_pc", "l_ar", "total"}


def test_non_finite_loss_aborts(dataset):
    m = Transformer(TINY)
    m.params["head"].data[0, 0] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train_round(m, dataset, _cfg(steps=2))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(ar_weight=-1)
    with pytest.raises(ConfigError):
        TrainConfig(rounds=({"block_size": 16, "window_size": 4, "steps": 1},
                            {"block_size": 8, "window_size": 4, "steps": 1}))
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    cfg = TrainConfig(rounds=({"block_size": 8, "window_size": 8, "steps": 2},))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_single_round_pipeline_is_collect_plus_train(tmp_path):
    rng = np.random.default_rng(20)
    prompts = [[0] + [int(t) for t in rng.integers(3, 96, 3)] for _ in range(12)]
    cfg = _cfg(rounds=({"block_size": 4, "window_size": 2, "steps": 3},), max_new=8)
    a = progressive_pipeline(Transformer(TINY), prompts, cfg, out_dir=tmp_path)
    b = Transformer(TINY)
    data = pack_records(collect(b, prompts, 4, 8, seed=cfg.seed), NoiseSchedule(2, seed=cfg.seed), "NC")
    train_round(b, data, cfg, steps=3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    assert (tmp_path / "round0.npz").exists()
