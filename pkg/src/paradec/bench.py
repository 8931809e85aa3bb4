"""Paired decoder benchmarks, grid search, and trajectory statistics.

Every run is checked against greedy AR on the same checkpoint; a mismatch
raises :class:`LosslessnessError`. CSV outputs start with a versioned
comment row. Wall-clock columns are only filled when timing is requested,
so default outputs are bit-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoding import (
    DecodeMetrics,
    JacobiTrajectory,
    TrajectoryRecord,
    aggregate_metrics,
    greedy_ar_decode,
    jacobi_decode,
    running_window_decode,
)
from .mbrr import EngineConfig, decode_mbrr
from .model import Transformer

BENCH_SCHEMA = "# paradec-bench v1"
GRID_SCHEMA = "# paradec-grid v1"
TRAJ_SCHEMA = "# paradec-traj-report v1"
STRATEGIES = ("ar", "jacobi", "window", "mbrr")


class LosslessnessError(AssertionError):
    """A parallel decoder disagreed with greedy AR."""

    def __init__(self, decoder: str, prompt_index: int, prompt: Sequence[int],
                 expected: Sequence[int], got: Sequence[int]):
        self.decoder, self.prompt_index = decoder, prompt_index
        self.prompt, self.expected, self.got = list(prompt), list(expected), list(got)
        super().__init__(f"{decoder}: output differs from greedy AR on prompt #{prompt_index} {self.prompt}")


@dataclass(frozen=True)
class DecoderSpec:
    name: str
    strategy: str
    checkpoint: str = "model"
    n: int = 16
    K: int = 2
    r: float = 0.85
    verification_size: int = 4

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class BenchSuite:
    prompts: list[list[int]]
    max_new: int
    decoders: list[DecoderSpec]
    repetitions: int = 1
    seed: int = 0
    timed: bool = False


@dataclass(frozen=True)
class GridSpec:
    block_sizes: tuple[int, ...]
    verification_sizes: tuple[int, ...]
    K_values: tuple[int, ...] = (2,)
    r_values: tuple[float, ...] = (0.85,)

    def __post_init__(self) -> None:
        vals = (self.block_sizes, self.verification_sizes, self.K_values, self.r_values)
        if not all(vals):
            raise ValueError("grid dimensions must be nonempty")
        if any(v <= 0 for dim in vals for v in dim):
            raise ValueError("grid values must be positive")


def output_hash(tokens: Sequence[int]) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype=np.int64).tobytes()).hexdigest()[:16]


def run_decoder(model: Transformer, spec: DecoderSpec, prompt: Sequence[int], max_new: int,
                seed: int = 0, timed: bool = False) -> tuple[list[int], DecodeMetrics]:
    if spec.strategy == "ar":
        return greedy_ar_decode(model, prompt, max_new, timed=timed)
    if spec.strategy == "jacobi":
        out, _, m = jacobi_decode(model, prompt, spec.n, max_new, seed=seed, timed=timed)
        return out, m
    if spec.strategy == "window":
        return running_window_decode(model, prompt, spec.n, max_new, seed=seed, timed=timed)
    cfg = EngineConfig(n=spec.n, K=spec.K, r=spec.r, verification_size=spec.verification_size, seed=seed)
    return decode_mbrr(model, prompt, cfg, max_new, timed=timed)


@dataclass
class SuiteResult:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, DecodeMetrics] = field(default_factory=dict)


def run_suite(suite: BenchSuite, models: dict[str, Transformer]) -> SuiteResult:
    """Decode every prompt with every decoder and verify against greedy AR.

    Rows are ordered by (decoder, prompt index, repetition). Aggregates are
    micro-averaged per decoder.
    """
    reference: dict[tuple[str, int], tuple[list[int], DecodeMetrics]] = {}
    res = SuiteResult()
    for spec in suite.decoders:
        model = models[spec.checkpoint]
        runs = []
        for i, prompt in enumerate(suite.prompts):
            key = (spec.checkpoint, i)
            if key not in reference:
                reference[key] = greedy_ar_decode(model, prompt, suite.max_new, timed=suite.timed)
            ref, ref_m = reference[key]
            for rep in range(suite.repetitions):
                seed = suite.seed + 7919 * i + rep
                out, m = run_decoder(model, spec, prompt, suite.max_new, seed=seed, timed=suite.timed)
                if out != ref:
                    raise LosslessnessError(spec.name, i, prompt, ref, out)
                if suite.timed:
                    m.ar_wall_time = ref_m.wall_time
                runs.append(m)
                res.rows.append({
                    "decoder": spec.name,
                    "strategy": spec.strategy,
                    "checkpoint": spec.checkpoint,
                    "prompt": i,
                    "rep": rep,
                    "hash": output_hash(out),
                    "lossless": 1,
                    "tokens": m.generated_tokens,
                    "passes": m.forward_passes,
                    "tpf": round(m.tpf, 6),
                    "iter_per_token": round(m.iterations_per_token, 6),
                    "positions": m.positions_processed,
                    "wall_time": "" if m.wall_time is None else f"{m.wall_time:.6f}",
                })
        res.aggregates[spec.name] = aggregate_metrics(runs)
    return res


def _write_csv(rows: Sequence[dict], schema: str, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    buf.write(schema + "\n")
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def suite_csv(result: SuiteResult, path: str | Path | None = None) -> str:
    return _write_csv(result.rows, BENCH_SCHEMA, path)


def summary_rows(result: SuiteResult) -> list[dict]:
    return [{"decoder": k, "tokens": m.generated_tokens, "passes": m.forward_passes,
             "tpf": round(m.tpf, 6), "iter_per_token": round(m.iterations_per_token, 6),
             "positions": m.positions_processed}
            for k, m in result.aggregates.items()]


def grid_search(grid: GridSpec, model: Transformer, prompts: Sequence[Sequence[int]], max_new: int,
                seed: int = 0, path: str | Path | None = None) -> list[dict]:
    """One row per (n, verification size, K, r); the best-TPF row is flagged."""
    rows = []
    for n, v, K, r in itertools.product(grid.block_sizes, grid.verification_sizes, grid.K_values, grid.r_values):
        spec = DecoderSpec(f"mbrr_n{n}_v{v}_K{K}_r{r}", "mbrr", n=n, K=K, r=r, verification_size=v)
        suite = BenchSuite([list(p) for p in prompts], max_new, [spec], seed=seed)
        agg = run_suite(suite, {"model": model}).aggregates[spec.name]
        rows.append({"n": n, "verification_size": v, "K": K, "r": r, "tokens": agg.generated_tokens,
                     "passes": agg.forward_passes, "tpf": round(agg.tpf, 6),
                     "iter_per_token": round(agg.iterations_per_token, 6),
                     "positions": agg.positions_processed, "best": 0})
    if rows:
        best = max(range(len(rows)), key=lambda i: (rows[i]["tpf"], -i))
        rows[best]["best"] = 1
    if path is not None:
        _write_csv(rows, GRID_SCHEMA, path)
    return rows


def off_position_matches(point: Sequence[int], fixed: Sequence[int], min_len: int = 4) -> int:
    """Maximal runs of at least ``min_len`` tokens that appear in ``fixed`` at a shifted offset."""
    n, m = len(point), len(fixed)
    count = 0
    for delta in range(-(n - 1), m):
        if delta == 0:
            continue
        run = 0
        for i in range(n):
            j = i + delta
            if 0 <= j < m and point[i] == fixed[j]:
                run += 1
            else:
                count += run >= min_len
                run = 0
        count += run >= min_len
    return count


def trajectory_stats(trajs: Sequence[JacobiTrajectory], min_len: int = 4) -> dict:
    tokens = sum(len(t.fixed_point) for t in trajs)
    iters = sum(t.iterations for t in trajs)
    counts = [off_position_matches(p, t.fixed_point, min_len) for t in trajs for p in t.points[:-1]]
    return {
        "blocks": len(trajs),
        "points": len(counts),
        "tokens": tokens,
        "iterations": iters,
        "accepted_per_iter": round(tokens / iters, 6) if iters else 0.0,
        "offpos_matches_per_point": round(float(np.mean(counts)), 6) if counts else 0.0,
    }


def trajectory_report(named: dict[str, Sequence[TrajectoryRecord]], path: str | Path | None = None) -> list[dict]:
    """One CSV row per checkpoint summarizing its recorded trajectories."""
    rows = []
    for name, records in named.items():
        trajs = [t for r in records for t in r.blocks]
        rows.append({"checkpoint": name, **trajectory_stats(trajs)})
    if path is not None:
        _write_csv(rows, TRAJ_SCHEMA, path)
    return rows


def exact_match(model: Transformer, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], max_new: int) -> float:
    """Fraction of prompts whose greedy continuation equals the reference."""
    if not pairs:
        return 0.0
    hits = sum(greedy_ar_decode(model, p, max_new)[0] == list(t) for p, t in pairs)
    return hits / len(pairs)
