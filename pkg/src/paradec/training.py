"""Consistency-distillation objective, optimizers, and the multi-round pipeline."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .corpus import PAD, Sample
from .decoding import TrajectoryRecord, collect_record
from .model import Transformer, save_checkpoint
from .numerics import GradTape, Tensor
from .schedule import ConfigError, NoiseSchedule, PackedSample, pack_sample, pad_batch


class TrainingError(FloatingPointError):
    """Non-finite loss during optimization."""


@dataclass(frozen=True)
class RoundConfig:
    block_size: int
    window_size: int
    steps: int


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    steps: int = 200
    ar_weight: float = 1.0
    schedule: str = "linear_progressive"
    mask_variant: str = "NC"
    block_size: int = 16
    rounds: tuple[RoundConfig, ...] = ()
    seed: int = 0
    optimizer: str = "sgd"
    loss: str = "progressive"
    grad_clip: float | None = None
    max_new: int = 64

    def __post_init__(self) -> None:
        if self.ar_weight < 0:
            raise ConfigError("ar_weight must be non-negative")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("progressive", "cllm"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        rounds = tuple(r if isinstance(r, RoundConfig) else RoundConfig(**r) for r in self.rounds)
        object.__setattr__(self, "rounds", rounds)
        for a, b in zip(rounds, rounds[1:]):
            if b.block_size < a.block_size:
                raise ConfigError("round block sizes must not decrease")

    def effective_rounds(self) -> tuple[RoundConfig, ...]:
        if self.rounds:
            return self.rounds
        return (RoundConfig(self.block_size, self.block_size, self.steps),)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rounds"] = [asdict(r) for r in self.rounds]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class LossReport:
    l_pc: float
    l_ar: float
    total: float
    ar_weight: float
    per_block_kl: list[list[float]] = field(default_factory=list)
    tensor: Tensor | None = field(default=None, repr=False)
    teacher_logprobs: np.ndarray | None = field(default=None, repr=False)


def packed_loss(model: Transformer, samples: Sequence[PackedSample], ar_weight: float = 1.0,
                require_variant: str | None = None,
                teacher_logprobs: np.ndarray | None = None) -> LossReport:
    """Progressive consistency loss plus weighted AR loss over a padded batch.

    For each sample, KL(teacher || student) is summed over the positions of
    a block and averaged over blocks; the AR term is the mean next-token
    log-loss over clean-path positions. The batch value is the mean over
    samples. Teacher distributions carry no gradient; ``teacher_logprobs``
    replaces them with fixed values (used for finite-difference checks).
    """
    if not samples:
        raise ValueError("empty batch")
    if require_variant is not None:
        for s in samples:
            if s.mask_variant != require_variant:
                raise ConfigError(f"loss expects {require_variant} samples, got {s.mask_variant}")
    tok, pos, mask = pad_batch(samples)
    B = len(samples)
    dtype = model.dtype
    bt, tr, sr, tg, w_pc, w_ar, blocks = [], [], [], [], [], [], []
    for b, s in enumerate(samples):
        li = s.loss_index()
        v = li.valid
        nblocks = len(np.unique(li.block[v]))
        k = int(v.sum())
        bt.append(np.full(k, b))
        tr.append(li.teacher_rows[v])
        sr.append(li.student_rows[v])
        tg.append(li.targets[v])
        w_pc.append(np.full(k, 1.0 / (B * nblocks)))
        w_ar.append(np.full(k, 1.0 / (B * k)))
        blocks.append(li.block[v])
    bt_all = np.concatenate(bt)
    R = len(bt_all)
    rows_b = np.concatenate([bt_all, bt_all])
    rows_p = np.concatenate([np.concatenate(tr), np.concatenate(sr)])
    logits, _ = model.forward(tok, pos, mask=mask, rows=(rows_b, rows_p))
    lp = nx.softmax_logprobs(logits)
    lp_t = nx.take(lp, np.arange(R))
    lp_s = nx.take(lp, np.arange(R, 2 * R))
    teacher = nx.detach(lp_t) if teacher_logprobs is None else Tensor(teacher_logprobs.astype(dtype))
    kl = nx.kl_rows(teacher, lp_s)
    nll = nx.nll_rows(lp_t, np.concatenate(tg))
    l_pc = nx.sum_all(nx.mul(kl, Tensor(np.concatenate(w_pc).astype(dtype))))
    l_ar = nx.sum_all(nx.mul(nll, Tensor(np.concatenate(w_ar).astype(dtype))))
    total = nx.add(l_pc, nx.scale(l_ar, ar_weight))

    per_block: list[list[float]] = []
    kl_np = kl.data.astype(np.float64)
    off = 0
    for blk in blocks:
        seg = kl_np[off : off + len(blk)]
        per_block.append([float(seg[blk == i].sum()) for i in np.unique(blk)])
        off += len(blk)
    return LossReport(float(l_pc.data), float(l_ar.data), float(total.data), ar_weight, per_block, total,
                      lp_t.data.copy())


def loss_progressive(sample: PackedSample | Sequence[PackedSample], model: Transformer,
                     ar_weight: float = 1.0) -> LossReport:
    samples = [sample] if isinstance(sample, PackedSample) else list(sample)
    return packed_loss(model, samples, ar_weight)


def loss_cllm(sample: PackedSample | Sequence[PackedSample], model: Transformer,
              ar_weight: float = 1.0) -> LossReport:
    """Same objective with students conditioned on clean prefixes; needs CC samples."""
    samples = [sample] if isinstance(sample, PackedSample) else list(sample)
    return packed_loss(model, samples, ar_weight, require_variant="CC")


def ar_loss(model: Transformer, samples: Sequence[Sample]) -> Tensor:
    """Mean next-token log-loss over target tokens of prompt/target pairs."""
    seqs = [s.prompt_ids + s.target_ids for s in samples]
    T = max(len(q) for q in seqs)
    tok = np.full((len(seqs), T), PAD, dtype=np.int64)
    bi, ri, tg = [], [], []
    for b, (s, q) in enumerate(zip(samples, seqs)):
        tok[b, : len(q)] = q
        P = len(s.prompt_ids)
        for j in range(P, len(q)):
            bi.append(b)
            ri.append(j - 1)
            tg.append(q[j])
    logits, _ = model.forward(tok, rows=(np.asarray(bi), np.asarray(ri)))
    nll = nx.nll_rows(nx.softmax_logprobs(logits), np.asarray(tg))
    return nx.mean_all(nll)


class SGD:
    def __init__(self, params: list[Tensor], lr: float):
        self.params, self.lr = params, lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params, self.lr, self.betas, self.eps = params, lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad**2
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def make_optimizer(name: str, params: list[Tensor], lr: float):
    if name == "sgd":
        return SGD(params, lr)
    if name == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer {name!r}")


def _clip(params: list[Tensor], max_norm: float | None) -> None:
    if not max_norm:
        return
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm


def _optimize(model: Transformer, steps: int, lr: float, optimizer: str, seed: int, n_items: int,
              batch_size: int, loss_fn: Callable[[list[int]], tuple[Tensor, dict]],
              grad_clip: float | None, log: Callable[[dict], None] | None) -> list[dict]:
    params = model.parameters()
    opt = make_optimizer(optimizer, params, lr)
    rng = np.random.Generator(np.random.PCG64(seed))
    order: list[int] = []
    rows = []
    for step in range(steps):
        if len(order) < batch_size:
            order += [int(i) for i in rng.permutation(n_items)]
        batch, order = order[:batch_size], order[batch_size:]
        for p in params:
            p.grad = None
        try:
            with GradTape() as tape:
                loss, info = loss_fn(batch)
        except nx.NumericsError as e:
            raise TrainingError(f"non-finite loss at step {step}: {e}") from e
        if not np.isfinite(loss.data).all():
            raise TrainingError(f"non-finite loss at step {step}")
        tape.backward(loss)
        _clip(params, grad_clip)
        opt.step()
        model.mark_updated()
        row = {"step": step, **info}
        rows.append(row)
        if log:
            log(row)
    for p in params:
        p.grad = None
    return rows


def train_ar(model: Transformer, samples: Sequence[Sample], steps: int, batch_size: int = 16,
             lr: float = 1e-3, optimizer: str = "adam", seed: int = 0, grad_clip: float | None = 1.0,
             log: Callable[[dict], None] | None = None) -> list[dict]:
    """Plain next-token training on prompt/target pairs (base checkpoint)."""
    samples = list(samples)

    def loss_fn(batch):
        loss = ar_loss(model, [samples[i] for i in batch])
        return loss, {"l_ar": float(loss.data)}

    return _optimize(model, steps, lr, optimizer, seed, len(samples), batch_size, loss_fn, grad_clip, log)


def train_round(model: Transformer, dataset: Sequence[PackedSample], cfg: TrainConfig,
                steps: int | None = None, log: Callable[[dict], None] | None = None) -> list[dict]:
    """Optimize the configured objective over ``dataset``; returns the per-step log."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    require = "CC" if cfg.loss == "cllm" else None

    def loss_fn(batch):
        rep = packed_loss(model, [dataset[i] for i in batch], cfg.ar_weight, require)
        return rep.tensor, {"l_pc": rep.l_pc, "l_ar": rep.l_ar, "total": rep.total}

    return _optimize(model, steps or cfg.steps, cfg.learning_rate, cfg.optimizer, cfg.seed,
                     len(dataset), cfg.batch_size, loss_fn, cfg.grad_clip, log)


def collect(model: Transformer, prompts: Sequence[Sequence[int]], n: int, max_new: int,
            seed: int = 0) -> list[TrajectoryRecord]:
    """Jacobi trajectories of the current model, one record per prompt."""
    return [collect_record(model, p, n, max_new, seed=seed + i) for i, p in enumerate(prompts)]


def pack_records(records: Sequence[TrajectoryRecord], schedule: NoiseSchedule,
                 variant: str) -> list[PackedSample]:
    return [pack_sample(r.prompt, r.blocks, schedule, variant, salt=i)
            for i, r in enumerate(records) if r.blocks]


def progressive_pipeline(model: Transformer, prompts: Sequence[Sequence[int]], cfg: TrainConfig,
                         out_dir: str | Path | None = None,
                         log: Callable[[dict], None] | None = None) -> Transformer:
    """Collect, pack and train once per round, growing the block size.

    Each round collects trajectories from the model as it stands at the
    start of the round. A checkpoint is written per round when ``out_dir``
    is given.
    """
    variant = "CC" if cfg.loss == "cllm" else cfg.mask_variant
    for r, rc in enumerate(cfg.effective_rounds()):
        records = collect(model, prompts, rc.block_size, cfg.max_new, seed=cfg.seed + 1000 * r)
        schedule = NoiseSchedule(rc.window_size, cfg.schedule, seed=cfg.seed + r)
        data = pack_records(records, schedule, variant)
        rcfg = replace(cfg, seed=cfg.seed + r, block_size=rc.block_size)

        def tagged(row, r=r):
            if log:
                log({"round": r, **row})

        train_round(model, data, rcfg, steps=rc.steps, log=tagged)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"round{r}.npz", model,
                            extra={"round": r, "block_size": rc.block_size, "window_size": rc.window_size,
                                   "train_config": json.loads(json.dumps(cfg.to_dict()))})
    return model
