"""Multi-block decoding with rejection recycling.

Output positions are grouped into fixed spans ``[k*n, (k+1)*n)``. The
real-active (RA) block drafts the positions right after the committed
output: ``n - 1`` tokens, or up to the start of the first pseudo-active
block when one exists. Pseudo-active blocks own later spans; their
accepted tokens are provisional because they are conditioned on unverified
drafts. Every step runs one forward over

    [pending] + q_RA + (a_1 + q_1) + (a_2 + q_2) + ...

with extra rows, batched along the first axis, in which ``q_RA`` is replaced
by continuations taken from an n-gram pool of previously rejected draft
tails. Only the RA block commits tokens; its acceptance is the greedy
rule, so the output always equals greedy AR decoding.

Lifecycle per step: forward, RA verification (best branch wins), pool
harvest from the rejected RA tail, pseudo-block verification, cache trim
(only verified tokens are committed), promotion of the first pseudo block
once the RA reaches it, and spawning of a new block when the newest block
has ``ceil(r*n)`` accepted tokens and fewer than ``K`` blocks are active.
"""

from __future__ import annotations

import json
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .corpus import EOS
from .decoding import DecodeMetrics, DecodeSession, leading_matches, random_draft
from .model import Transformer


class NonTerminationError(RuntimeError):
    """The engine exceeded ``max_iters``; the message carries a state dump."""


@dataclass(frozen=True)
class EngineConfig:
    n: int = 16
    K: int = 2
    r: float = 0.85
    verification_size: int = 4
    max_iters: int | None = None
    pool_capacity: int = 256
    min_ngram: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n < 1 or self.K < 1 or self.verification_size < 1:
            raise ValueError("n, K and verification_size must be >= 1")
        if not 0 < self.r <= 1:
            raise ValueError("spawn ratio must lie in (0, 1]")
        if self.pool_capacity < 0 or self.min_ngram < 1:
            raise ValueError("invalid pool settings")

    @property
    def s(self) -> int:
        return max(1, math.ceil(round(self.r * self.n, 9)))

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class NGramPool:
    """Bounded pool of token sequences indexed by their first token.

    Duplicates are ignored; when full, the oldest entry is evicted.
    """

    def __init__(self, capacity: int = 256, min_len: int = 3, max_len: int | None = None):
        self.capacity = capacity
        self.min_len = min_len
        self.max_len = max_len
        self._entries: OrderedDict[tuple[int, ...], None] = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, seq) -> bool:
        return tuple(seq) in self._entries

    def add(self, seq: Sequence[int]) -> bool:
        key = tuple(int(t) for t in seq)
        if self.max_len is not None:
            key = key[: self.max_len]
        if len(key) < self.min_len or key in self._entries or self.capacity == 0:
            return False
        while len(self._entries) >= self.capacity:
            self._entries.popitem(last=False)
        self._entries[key] = None
        return True

    def harvest(self, tail: Sequence[int]) -> None:
        """Insert every suffix of ``tail`` long enough to be useful."""
        for i in range(len(tail) - self.min_len + 1):
            self.add(tail[i:])

    def lookup(self, first: int, limit: int) -> list[tuple[int, ...]]:
        """Up to ``limit`` entries starting with ``first``, newest first."""
        out = []
        for seq in reversed(self._entries):
            if seq[0] == first:
                out.append(seq)
                if len(out) == limit:
                    break
        return out

    def entries(self) -> list[tuple[int, ...]]:
        return list(self._entries)


@dataclass
class BlockState:
    start: int
    accepted: list[int] = field(default_factory=list)
    draft: list[int] = field(default_factory=list)
    status: str = "pseudo_active"

    @property
    def content(self) -> list[int]:
        return self.accepted + self.draft


@dataclass
class EngineState:
    out: list[int]
    q_ra: list[int]
    pseudo: list[BlockState]
    pool: NGramPool
    iteration: int = 0
    finished: bool = False

    def dump(self) -> dict:
        return {
            "iteration": self.iteration,
            "out": self.out,
            "q_ra": self.q_ra,
            "pseudo": [asdict(b) for b in self.pseudo],
            "pool": [list(e) for e in self.pool.entries()],
            "finished": self.finished,
        }


def assemble_input(state: EngineState) -> tuple[list[int], list[dict]]:
    """Concatenate the RA draft and every pseudo block (accepted then draft).

    Returns the tokens that follow the pending token, and a span table with
    one entry per block giving its offset in that list, its accepted length,
    and its draft length.
    """
    toks = list(state.q_ra)
    spans = [{"block": "RA", "offset": 0, "accepted": 0, "draft": len(state.q_ra),
              "start": len(state.out)}]
    for i, b in enumerate(state.pseudo):
        spans.append({"block": i, "offset": len(toks), "accepted": len(b.accepted),
                      "draft": len(b.draft), "start": b.start})
        toks += b.content
    return toks, spans


def branch_rows(state: EngineState, base: list[int], pending: int, v: int) -> tuple[list[list[int]], list[tuple[int, ...]]]:
    """Greedy row plus up to ``v - 1`` rows whose RA draft comes from the pool."""
    m = len(state.q_ra)
    rows, cands = [base], []
    if v <= 1 or m == 0:
        return rows, cands
    for entry in state.pool.lookup(pending, v - 1):
        cont = list(entry[1 : 1 + m])
        draft = cont + state.q_ra[len(cont) :]
        rows.append(draft + base[m:])
        cands.append(entry)
    return rows, cands


class MBRREngine:
    """Stateful decoder; :meth:`step` performs one forward pass."""

    def __init__(self, model: Transformer, prompt: Sequence[int], config: EngineConfig, max_new: int,
                 trace: bool = False):
        self.cfg = config
        self.max_new = max_new
        self.session = DecodeSession(model, prompt)
        self.rng = np.random.Generator(np.random.PCG64(config.seed))
        self.max_iters = config.max_iters if config.max_iters is not None else max_new + 1
        pool = NGramPool(config.pool_capacity, config.min_ngram, max_len=config.n)
        self.state = EngineState([], self._fresh(config.n - 1), [], pool)
        self.per_pass: list[int] = []
        self.trace: list[dict] | None = [] if trace else None
        if max_new <= 0:
            self.session.prefill_only()
            self.per_pass.append(0)
            self.state.finished = True

    def _fresh(self, k: int) -> list[int]:
        return random_draft(self.rng, k, self.session.vocab_size)

    def _ra_target(self) -> int:
        st = self.state
        if st.pseudo:
            return st.pseudo[0].start - len(st.out)
        return self.cfg.n - 1

    def _resize(self, q: list[int], k: int) -> list[int]:
        return q[:k] if len(q) >= k else q + self._fresh(k - len(q))

    def step(self) -> EngineState:
        st, cfg, s = self.state, self.cfg, self.session
        if st.finished:
            return st
        if st.iteration >= self.max_iters:
            raise NonTerminationError(json.dumps({"error": "max_iters exceeded", "state": st.dump()}))
        st.iteration += 1

        base, spans = assemble_input(st)
        pending = s.tail[-1]
        rows, cands = branch_rows(st, base, pending, cfg.verification_size)
        preds, fresh = s.predict_batch(np.asarray(rows, dtype=np.int64).reshape(len(rows), len(base)))
        m = len(st.q_ra)

        best, best_c = 0, -1
        for bi, row in enumerate(rows):
            c = leading_matches(row[:m], preds[bi, :m])
            if c > best_c:
                best, best_c = bi, c
        c = best_c
        g = [int(t) for t in preds[best]]
        accepted = g[: c + 1]
        st.pool.harvest(st.q_ra[leading_matches(st.q_ra, preds[0, :m]) :])

        for sp, b in zip(spans[1:], st.pseudo):
            lo = sp["offset"] + sp["accepted"]
            gb = g[lo : lo + sp["draft"] + 1]
            cb = leading_matches(b.draft, gb)
            b.accepted = (b.accepted + gb[: cb + 1])[: cfg.n]
            b.draft = gb[cb + 1 : sp["draft"]]

        committed_before = len(st.out)
        for t in accepted:
            if len(st.out) >= self.max_new:
                st.finished = True
                break
            st.out.append(t)
            if t == EOS:
                st.finished = True
                break
        if len(st.out) >= self.max_new:
            st.finished = True
        self.per_pass.append(len(st.out) - committed_before)

        if not st.finished:
            s.advance(fresh, c, g[c], row=best)
            q = g[c + 1 : m + 1]
            if st.pseudo and len(st.out) >= st.pseudo[0].start:
                head = st.pseudo.pop(0)
                head.status = "verified"
                q = head.content[len(st.out) - head.start :]
            st.q_ra = self._resize(q, self._ra_target())
            self._maybe_spawn()

        if self.trace is not None:
            self.trace.append({
                "iter": st.iteration,
                "input": [int(t) for t in rows[0]],
                "branches": len(rows),
                "branch": best,
                "ra_accepted": len(st.out) - committed_before,
                "blocks": [[b.start, len(b.accepted), len(b.draft)] for b in st.pseudo],
                "q_ra": list(st.q_ra),
                "pool_size": len(st.pool),
                "committed": s.cache.committed_len,
                "out_len": len(st.out),
            })
        return st

    def _maybe_spawn(self) -> None:
        st, cfg = self.state, self.cfg
        if 1 + len(st.pseudo) >= cfg.K:
            return
        n = cfg.n
        if st.pseudo:
            newest = st.pseudo[-1]
            if len(newest.accepted) < cfg.s:
                return
            start = newest.start + n
            if start >= self.max_new:
                return
            draft = self._resize(list(st.q_ra), n)
        else:
            if len(st.out) % n < cfg.s:
                return
            start = (len(st.out) // n + 1) * n
            if start >= self.max_new:
                return
            cut = start - len(st.out)
            draft = self._resize(st.q_ra[cut : cut + n], n)
            st.q_ra = self._resize(st.q_ra, cut)
        st.pseudo.append(BlockState(start, [], draft))

    def run(self) -> tuple[list[int], DecodeMetrics]:
        t0 = time.perf_counter()
        while not self.state.finished:
            self.step()
        m = DecodeMetrics(self.session.passes, len(self.state.out), time.perf_counter() - t0,
                          self.session.positions, self.per_pass)
        return self.state.out, m


def decode_mbrr(model: Transformer, prompt: Sequence[int], config: EngineConfig, max_new: int,
                trace: bool = False, timed: bool = False) -> tuple[list[int], DecodeMetrics] | tuple[list[int], DecodeMetrics, list[dict]]:
    """Run the engine to completion.

    Each step counts as one forward pass regardless of how many candidate
    rows it batches; ``positions_processed`` counts every row position.
    With ``trace`` set, the per-step trace rows are returned as a third item.
    """
    eng = MBRREngine(model, prompt, config, max_new, trace=trace)
    out, m = eng.run()
    if not timed:
        m.wall_time = None
    if trace:
        return out, m, eng.trace or []
    return out, m
