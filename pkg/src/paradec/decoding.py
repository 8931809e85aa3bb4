"""Greedy AR, blockwise Jacobi, and running-window decoders.

All decoders share one bookkeeping scheme (:class:`DecodeSession`): the KV
cache holds every known token except a short uncommitted ``tail`` (the whole
prompt before the first pass, afterwards the single most recent token).
Each forward pass feeds ``tail + draft``; row ``len(tail) - 1 + j`` of the
output predicts the token following ``draft[:j]``. Prediction ``j`` is
certified correct whenever ``draft[:j]`` agrees with the predictions before
it, which is the greedy verification rule shared by every parallel decoder.

The first pass doubles as prefill, so greedy AR spends exactly one pass per
generated token.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import EOS
from .model import KVCache, Transformer

TRAJ_FORMAT = "paradec-trajectories"
TRAJ_VERSION = 1
FIRST_DRAFT_ID = 3


class ConvergenceError(RuntimeError):
    """A block failed to converge within its length; indicates a bug."""


@dataclass
class DecodeMetrics:
    forward_passes: int
    generated_tokens: int
    wall_time: float | None = None
    positions_processed: int = 0
    accepted_per_pass: list[int] = field(default_factory=list)
    ar_wall_time: float | None = None

    def __post_init__(self) -> None:
        if self.forward_passes < 1:
            raise ValueError("forward_passes must be at least 1")

    @property
    def tpf(self) -> float:
        return self.generated_tokens / self.forward_passes

    @property
    def iterations_per_token(self) -> float:
        return self.forward_passes / self.generated_tokens if self.generated_tokens else float("inf")

    @property
    def tps(self) -> float | None:
        if not self.wall_time:
            return None
        return self.generated_tokens / self.wall_time

    @property
    def speedup(self) -> float | None:
        if not self.wall_time or not self.ar_wall_time:
            return None
        return self.ar_wall_time / self.wall_time


def compute_metrics(forward_passes: int, generated_tokens: int, wall_time: float | None = None,
                    ar_wall_time: float | None = None, positions_processed: int = 0) -> DecodeMetrics:
    if forward_passes < 1:
        raise ValueError("forward_passes must be at least 1")
    return DecodeMetrics(forward_passes, generated_tokens, wall_time, positions_processed,
                         ar_wall_time=ar_wall_time)


def aggregate_metrics(runs: Iterable[DecodeMetrics]) -> DecodeMetrics:
    """Micro-average: total tokens over total passes."""
    runs = list(runs)
    walls = [m.wall_time for m in runs]
    return DecodeMetrics(
        forward_passes=sum(m.forward_passes for m in runs),
        generated_tokens=sum(m.generated_tokens for m in runs),
        wall_time=sum(walls) if runs and all(w is not None for w in walls) else None,
        positions_processed=sum(m.positions_processed for m in runs),
    )


@dataclass
class JacobiTrajectory:
    block_index: int
    points: list[list[int]]
    fixed_point: list[int]

    @property
    def iterations(self) -> int:
        return len(self.points) - 1

    def to_dict(self) -> dict:
        return {"block_index": self.block_index, "points": self.points,
                "fixed_point": self.fixed_point, "iterations": self.iterations}

    @classmethod
    def from_dict(cls, d: dict) -> "JacobiTrajectory":
        return cls(int(d["block_index"]), [list(map(int, p)) for p in d["points"]],
                   list(map(int, d["fixed_point"])))


def random_draft(rng: np.random.Generator, length: int, vocab_size: int) -> list[int]:
    return [int(t) for t in rng.integers(FIRST_DRAFT_ID, vocab_size, size=length)]


def leading_matches(draft: Sequence[int], preds: Sequence[int]) -> int:
    c = 0
    for d, p in zip(draft, preds):
        if d != p:
            break
        c += 1
    return c


class DecodeSession:
    """Cache plus uncommitted tail for one generation."""

    def __init__(self, model: Transformer, prompt: Sequence[int]):
        if not prompt:
            raise ValueError("prompt must be nonempty")
        self.model = model.inference_view()
        self.cache: KVCache = self.model.new_cache()
        self.tail: list[int] = [int(t) for t in prompt]
        self.passes = 0
        self.positions = 0

    @property
    def vocab_size(self) -> int:
        return self.model.cfg.vocab_size

    def predict(self, draft: Sequence[int]) -> tuple[list[int], list]:
        """One pass over ``tail + draft``; returns ``len(draft) + 1`` greedy predictions."""
        toks = np.asarray(self.tail + list(draft), dtype=np.int64)
        logits, fresh = self.model.forward(toks, cache=self.cache)
        self.passes += 1
        self.positions += len(toks)
        preds = logits.data[len(self.tail) - 1 :].argmax(axis=-1)
        return [int(p) for p in preds], fresh

    def predict_batch(self, rows: np.ndarray) -> tuple[np.ndarray, list]:
        """One pass over ``tail + row`` for every row; counts as a single pass."""
        rows = np.asarray(rows, dtype=np.int64)
        B = rows.shape[0]
        toks = np.concatenate([np.broadcast_to(np.asarray(self.tail), (B, len(self.tail))), rows], axis=1)
        logits, fresh = self.model.forward(toks, cache=self.cache)
        self.passes += 1
        self.positions += toks.size
        return logits.data[:, len(self.tail) - 1 :].argmax(axis=-1), fresh

    def advance(self, fresh, accepted_draft: int, bonus: int, row: int = 0) -> None:
        """Commit the tail and ``accepted_draft`` verified draft tokens; ``bonus`` becomes the tail."""
        self.cache.commit(fresh, len(self.tail) + accepted_draft, row=row)
        self.tail = [int(bonus)]

    def prefill_only(self) -> None:
        self.predict([])


def _extend(out: list[int], tokens: Iterable[int], max_new: int) -> tuple[int, bool]:
    """Append tokens up to EOS or ``max_new``; returns (appended, finished)."""
    added = 0
    for t in tokens:
        if len(out) >= max_new:
            return added, True
        out.append(int(t))
        added += 1
        if t == EOS:
            return added, True
    return added, len(out) >= max_new


def greedy_ar_decode(model: Transformer, prompt: Sequence[int], max_new: int,
                     timed: bool = False) -> tuple[list[int], DecodeMetrics]:
    t0 = time.perf_counter()
    s = DecodeSession(model, prompt)
    out: list[int] = []
    per_pass: list[int] = []
    if max_new <= 0:
        s.prefill_only()
        per_pass.append(0)
    done = max_new <= 0
    while not done:
        preds, fresh = s.predict([])
        added, done = _extend(out, preds[:1], max_new)
        per_pass.append(added)
        if not done:
            s.advance(fresh, 0, preds[0])
    m = DecodeMetrics(s.passes, len(out), time.perf_counter() - t0 if timed else None,
                      s.positions, per_pass)
    return out, m


def jacobi_update(model: Transformer, cache: KVCache, tail: Sequence[int],
                  block: Sequence[int]) -> list[int]:
    """One parallel Jacobi step.

    ``cache`` holds the prefix except ``tail``. Entry ``i`` of the result is
    the greedy token after ``prefix + block[:i]``, computed from the old
    block in a single causal pass.
    """
    view = model.inference_view()
    toks = np.asarray(list(tail) + list(block[:-1]), dtype=np.int64)
    logits, _ = view.forward(toks, cache=cache)
    return [int(p) for p in logits.data[len(tail) - 1 :].argmax(axis=-1)]


def jacobi_decode(model: Transformer, prompt: Sequence[int], n: int, max_new: int,
                  record: bool = False, seed: int = 0, timed: bool = False,
                  ) -> tuple[list[int], list[JacobiTrajectory], DecodeMetrics]:
    """Blockwise Jacobi decoding.

    Each block of ``n`` positions starts from random tokens. A pass feeds the
    unconverged positions; the converged prefix grows by the number of
    leading draft tokens matching their predictions plus one, so a block
    needs at most ``n`` passes. Converged tokens are committed as they are
    certified. With ``record`` set, the block that ends generation is still
    iterated to its fixed point so every trajectory has ``n`` positions;
    metrics are frozen at the moment the output was complete.
    """
    if n < 1:
        raise ValueError("block size must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    s = DecodeSession(model, prompt)
    out: list[int] = []
    per_pass: list[int] = []
    trajs: list[JacobiTrajectory] = []
    frozen: tuple[int, int] | None = None
    if max_new <= 0:
        s.prefill_only()
        per_pass.append(0)
        frozen = (s.passes, s.positions)

    b = 0
    while frozen is None:
        y = random_draft(rng, n, s.vocab_size)
        points = [list(y)]
        a = 0
        while a < n:
            preds, fresh = s.predict(y[a : n - 1])
            c = leading_matches(y[a : n - 1], preds)
            y = y[:a] + preds
            points.append(list(y))
            if frozen is None:
                added, done = _extend(out, preds[: c + 1], max_new)
                per_pass.append(added)
                if done:
                    frozen = (s.passes, s.positions)
                    if not record:
                        break
            a += c + 1
            s.advance(fresh, c, preds[c])
            if len(points) > n + 1:
                raise ConvergenceError(f"block {b} did not converge in {n} passes")
        if record:
            trajs.append(JacobiTrajectory(b, points, list(y)))
        b += 1

    passes, positions = frozen
    m = DecodeMetrics(passes, len(out), time.perf_counter() - t0 if timed else None,
                      positions, per_pass)
    return out, trajs, m


def running_window_decode(model: Transformer, prompt: Sequence[int], n: int, max_new: int,
                          seed: int = 0, timed: bool = False) -> tuple[list[int], DecodeMetrics]:
    """Jacobi with a sliding window of ``n`` positions.

    After each pass the verified tokens are committed and the window is
    refilled with the pass's own predictions for the positions beyond the
    accepted ones, topped up with random tokens.
    """
    if n < 1:
        raise ValueError("window size must be >= 1")
    t0 = time.perf_counter()
    rng = np.random.Generator(np.random.PCG64(seed))
    s = DecodeSession(model, prompt)
    out: list[int] = []
    per_pass: list[int] = []
    if max_new <= 0:
        s.prefill_only()
        per_pass.append(0)
    draft = random_draft(rng, n - 1, s.vocab_size)
    done = max_new <= 0
    while not done:
        preds, fresh = s.predict(draft)
        c = leading_matches(draft, preds)
        added, done = _extend(out, preds[: c + 1], max_new)
        per_pass.append(added)
        if not done:
            s.advance(fresh, c, preds[c])
            draft = preds[c + 1 :] + random_draft(rng, c, s.vocab_size)
    m = DecodeMetrics(s.passes, len(out), time.perf_counter() - t0 if timed else None,
                      s.positions, per_pass)
    return out, m


# --- trajectory dataset ----------------------------------------------------

@dataclass
class TrajectoryRecord:
    prompt: list[int]
    n: int
    blocks: list[JacobiTrajectory]
    output: list[int]

    def generation(self) -> list[int]:
        return [t for tr in self.blocks for t in tr.fixed_point]


def collect_record(model: Transformer, prompt: Sequence[int], n: int, max_new: int,
                   seed: int = 0) -> TrajectoryRecord:
    out, trajs, _ = jacobi_decode(model, prompt, n, max_new, record=True, seed=seed)
    return TrajectoryRecord(list(prompt), n, trajs, out)


def write_trajectories(path: str | Path, records: Iterable[TrajectoryRecord], meta: dict | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": TRAJ_FORMAT, "version": TRAJ_VERSION, **(meta or {})}) + "\n")
        for r in records:
            fh.write(json.dumps({"prompt": r.prompt, "n": r.n, "output": r.output,
                                 "blocks": [t.to_dict() for t in r.blocks]}) + "\n")


def read_trajectories(path: str | Path) -> tuple[dict, list[TrajectoryRecord]]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != TRAJ_FORMAT or header.get("version") != TRAJ_VERSION:
            raise ValueError(f"{path}: unsupported trajectory file")
        recs = []
        for line in fh:
            if line.strip():
                d = json.loads(line)
                recs.append(TrajectoryRecord(d["prompt"], d["n"],
                                             [JacobiTrajectory.from_dict(b) for b in d["blocks"]],
                                             d["output"]))
    return header, recs
