"""Noise schedules, trajectory-point selection, and noisy/clean sequence packing.

A packed sample lays out ``prompt, noisy_0, clean_0, noisy_1, clean_1, ...``.
Each noisy block shares position ids with its clean twin. One masked pass
then yields both the clean-path (teacher) distributions and the noisy-path
(student) distributions for every block.

Mask variants for noisy-block queries (clean rows are identical in all):

* ``CC``: clean blocks before it;
* ``NC``: noisy blocks before it;
* ``NC_IC``: clean blocks of earlier windows, noisy blocks of its own window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import EOS, PAD
from .decoding import JacobiTrajectory
from .model import MaskSpec

VARIANTS = ("CC", "NC", "NC_IC")
SCHEDULES = ("linear_progressive", "random", "reverse_progressive")
DUMP_FORMAT = "paradec-packed"
DUMP_VERSION = 1


class ConfigError(ValueError):
    """Unknown variant or schedule name, or mismatched loss/sample variant."""


class FormatError(ValueError):
    """Trajectories of inconsistent block size."""


@dataclass(frozen=True)
class NoiseSchedule:
    window_size: int
    variant: str = "linear_progressive"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.window_size < 1:
            raise ConfigError("window_size must be >= 1")
        if self.variant not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.variant!r}")


def schedule_ratios(schedule: NoiseSchedule, N: int, salt: int = 0) -> list[float]:
    """Noise ratio for each of ``N`` consecutive blocks.

    The random variant draws each ratio uniformly from the same set
    ``{0, 1/w, ..., (w-1)/w}``; ``salt`` decorrelates samples.
    """
    w = schedule.window_size
    if schedule.variant == "linear_progressive":
        return [(i % w) / w for i in range(N)]
    if schedule.variant == "reverse_progressive":
        return [(w - 1 - (i % w)) / w for i in range(N)]
    rng = np.random.Generator(np.random.PCG64([schedule.seed, salt]))
    return [int(k) / w for k in rng.integers(0, w, size=N)]


def noisy_target(t: float, n: int) -> int:
    return math.ceil(round(t * n, 9))


def mismatches(point: Sequence[int], fixed: Sequence[int]) -> int:
    return sum(a != b for a, b in zip(point, fixed))


def select_point(traj: JacobiTrajectory, t: float) -> list[int]:
    """Trajectory point whose mismatch count is closest to ``ceil(t*n)``.

    Ties go to the noisier point, then to the earlier one.
    """
    if not traj.points:
        raise ValueError("empty trajectory")
    goal = noisy_target(t, len(traj.fixed_point))
    best, best_key = 0, None
    for j, p in enumerate(traj.points):
        m = mismatches(p, traj.fixed_point)
        key = (abs(m - goal), -m)
        if best_key is None or key < best_key:
            best, best_key = j, key
    return list(traj.points[best])


@dataclass
class BlockPair:
    noisy: list[int]
    clean: list[int]
    t: float


@dataclass
class LossIndex:
    """Row indices into a packed sequence for each predicted clean token."""

    block: np.ndarray
    teacher_rows: np.ndarray
    student_rows: np.ndarray
    targets: np.ndarray
    valid: np.ndarray


@dataclass
class PackedSample:
    prompt: list[int]
    blocks: list[BlockPair]
    mask_variant: str
    window_size: int
    layout: str = "noisy_then_clean"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mask_variant not in VARIANTS:
            raise ConfigError(f"unknown mask variant {self.mask_variant!r}")
        if self.layout != "noisy_then_clean":
            raise ConfigError(f"unknown layout {self.layout!r}")

    @property
    def n(self) -> int:
        return len(self.blocks[0].clean) if self.blocks else 0

    @property
    def N(self) -> int:
        return len(self.blocks)

    @property
    def length(self) -> int:
        return len(self.prompt) + 2 * self.N * self.n

    def noisy_start(self, i: int) -> int:
        return len(self.prompt) + 2 * i * self.n

    def clean_start(self, i: int) -> int:
        return self.noisy_start(i) + self.n

    def tokens(self) -> np.ndarray:
        out = list(self.prompt)
        for b in self.blocks:
            out += b.noisy + b.clean
        return np.asarray(out, dtype=np.int64)

    def positions(self) -> np.ndarray:
        P, n = len(self.prompt), self.n
        out = list(range(P))
        for i in range(self.N):
            span = list(range(P + i * n, P + (i + 1) * n))
            out += span + span
        return np.asarray(out, dtype=np.int64)

    def generation(self) -> list[int]:
        return [t for b in self.blocks for t in b.clean]

    def window(self, i: int) -> int:
        return i // self.window_size

    def loss_index(self) -> LossIndex:
        """Teacher/student rows predicting each clean token.

        The row predicting position ``p`` of block ``i`` is the row of the
        token at ``p - 1`` in the same path; for ``p == 0`` it is the last
        row of the preceding block in that path (or the last prompt row).
        Tokens strictly after the first EOS of the generation are invalid.
        """
        P, n = len(self.prompt), self.n
        blk, trows, srows, tgt = [], [], [], []
        for i, b in enumerate(self.blocks):
            ns, cs = self.noisy_start(i), self.clean_start(i)
            if i == 0:
                t_prev = s_prev = P - 1
            else:
                t_prev = self.clean_start(i - 1) + n - 1
                noisy_prev = self.noisy_start(i - 1) + n - 1
                if self.mask_variant == "CC":
                    s_prev = t_prev
                elif self.mask_variant == "NC":
                    s_prev = noisy_prev
                else:
                    s_prev = noisy_prev if self.window(i - 1) == self.window(i) else t_prev
            for p in range(n):
                blk.append(i)
                trows.append(t_prev if p == 0 else cs + p - 1)
                srows.append(s_prev if p == 0 else ns + p - 1)
                tgt.append(b.clean[p])
        gen = np.asarray(tgt, dtype=np.int64)
        valid = np.ones(len(gen), dtype=bool)
        eos = np.flatnonzero(gen == EOS)
        if eos.size:
            valid[eos[0] + 1 :] = False
        return LossIndex(np.asarray(blk), np.asarray(trows), np.asarray(srows), gen, valid)


def pack_sample(prompt: Sequence[int], trajectories: Sequence[JacobiTrajectory],
                schedule: NoiseSchedule, variant: str, salt: int = 0) -> PackedSample:
    """Pair each block's fixed point with a scheduled noisy trajectory point."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown mask variant {variant!r}")
    if not trajectories:
        raise FormatError("no trajectories to pack")
    n = len(trajectories[0].fixed_point)
    for tr in trajectories:
        if len(tr.fixed_point) != n or any(len(p) != n for p in tr.points):
            raise FormatError("trajectories have inconsistent block sizes")
    ratios = schedule_ratios(schedule, len(trajectories), salt)
    blocks = [BlockPair(select_point(tr, t), list(tr.fixed_point), t)
              for tr, t in zip(trajectories, ratios)]
    return PackedSample(list(prompt), blocks, variant, schedule.window_size,
                        meta={"schedule": schedule.variant})


def build_mask(sample: PackedSample) -> MaskSpec:
    if sample.mask_variant not in VARIANTS:
        raise ConfigError(f"unknown mask variant {sample.mask_variant!r}")
    L, P, n = sample.length, len(sample.prompt), sample.n
    allowed = np.zeros((L, L), dtype=bool)
    allowed[:P, :P] = np.tril(np.ones((P, P), dtype=bool))
    causal = np.tril(np.ones((n, n), dtype=bool))
    for i in range(sample.N):
        ns, cs = sample.noisy_start(i), sample.clean_start(i)
        for rows in (slice(ns, ns + n), slice(cs, cs + n)):
            allowed[rows, :P] = True
        allowed[ns : ns + n, ns : ns + n] = causal
        allowed[cs : cs + n, cs : cs + n] = causal
        for j in range(i):
            cj, nj = sample.clean_start(j), sample.noisy_start(j)
            allowed[cs : cs + n, cj : cj + n] = True
            if sample.mask_variant == "CC":
                src = cj
            elif sample.mask_variant == "NC":
                src = nj
            else:
                src = nj if sample.window(j) == sample.window(i) else cj
            allowed[ns : ns + n, src : src + n] = True
    return MaskSpec(allowed)


def pad_batch(samples: Sequence[PackedSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack tokens, positions and masks, right-padding with self-attending PAD rows."""
    T = max(s.length for s in samples)
    B = len(samples)
    tok = np.full((B, T), PAD, dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T, T), dtype=bool)
    for b, s in enumerate(samples):
        L = s.length
        tok[b, :L] = s.tokens()
        pos[b, :L] = s.positions()
        mask[b, :L, :L] = build_mask(s).allowed
        idx = np.arange(L, T)
        mask[b, idx, idx] = True
    return tok, pos, mask


def _run_lengths(row: np.ndarray) -> list[list[int]]:
    out: list[list[int]] = []
    for v in row.astype(int):
        if out and out[-1][0] == v:
            out[-1][1] += 1
        else:
            out.append([int(v), 1])
    return out


def dump_packed(path: str | Path, samples: Sequence[PackedSample]) -> None:
    """Debug dump: one JSON object per sample with layout, ratios and run-length mask rows."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": DUMP_FORMAT, "version": DUMP_VERSION}) + "\n")
        for s in samples:
            m = build_mask(s).allowed
            fh.write(json.dumps({
                "prompt": s.prompt,
                "n": s.n,
                "window_size": s.window_size,
                "mask_variant": s.mask_variant,
                "layout": s.layout,
                "positions": s.positions().tolist(),
                "blocks": [{"noisy": b.noisy, "clean": b.clean, "t": b.t} for b in s.blocks],
                "mask_rle": [_run_lengths(r) for r in m],
            }) + "\n")


def load_packed(path: str | Path) -> list[PackedSample]:
    out = []
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != DUMP_FORMAT:
            raise FormatError(f"{path} is not a packed dump")
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(PackedSample(d["prompt"], [BlockPair(b["noisy"], b["clean"], b["t"]) for b in d["blocks"]],
                                    d["mask_variant"], d["window_size"], d["layout"]))
    return out


def decode_rle(rows: list[list[list[int]]]) -> np.ndarray:
    return np.asarray([[bool(v) for v, k in r for _ in range(k)] for r in rows], dtype=bool)
