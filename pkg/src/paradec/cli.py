"""Command-line entry point: ``paradec [--config F] [--seed S] [--out D] <command>``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import corpus as cp
from .bench import (
    BenchSuite,
    DecoderSpec,
    GridSpec,
    LosslessnessError,
    exact_match,
    grid_search,
    output_hash,
    run_decoder,
    run_suite,
    suite_csv,
    summary_rows,
    trajectory_report,
)
from .config import ConfigError, load_config
from .decoding import greedy_ar_decode, read_trajectories, write_trajectories
from .mbrr import EngineConfig, decode_mbrr
from .model import ModelConfig, Transformer, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, dump_packed
from .training import TrainConfig, collect, pack_records, progressive_pipeline, train_ar

EXIT_LOSSY = 3


def _corpus(cfg: dict, seed: int) -> tuple[list[cp.Sample], list[cp.Sample]]:
    spec = cp.CorpusSpec.from_dict({**cfg["corpus"], "seed": cfg["corpus"]["seed"] + seed})
    return cp.split(cp.generate(spec), seed=spec.seed)


def _write_rows(path: Path, rows: list[dict], header: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


def _prompts(samples: list[cp.Sample], limit: int) -> list[list[int]]:
    return [s.prompt_ids for s in samples[:limit]]


def cmd_train(args, cfg, out: Path) -> int:
    train, held = _corpus(cfg, args.seed)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = Transformer(ModelConfig.from_dict({**cfg["model"], "seed": cfg["model"]["seed"] + args.seed}))
        pre = cfg["pretrain"]
        log_rows: list[dict] = []
        train_ar(model, train, pre["steps"], pre["batch_size"], pre["learning_rate"], pre["optimizer"],
                 seed=args.seed, grad_clip=pre["grad_clip"], log=log_rows.append)
        _write_rows(out / "pretrain_log.csv", log_rows, "# paradec-pretrain-log v1")
        save_checkpoint(out / "base.npz", model, extra={"stage": "base"})
    if args.stage == "base":
        return 0
    tc = dict(cfg["train"])
    n_prompts = tc.pop("prompts")
    tcfg = TrainConfig.from_dict({**tc, "seed": args.seed})
    rows: list[dict] = []
    progressive_pipeline(model, _prompts(train, n_prompts), tcfg, out_dir=out, log=rows.append)
    _write_rows(out / "train_log.csv", rows, "# paradec-train-log v1")
    save_checkpoint(out / "final.npz", model, extra={"stage": "final", "train_config": tcfg.to_dict()})
    q = exact_match(model, [(s.prompt_ids, s.target_ids) for s in held[: cfg["bench"]["prompts"]]],
                    cfg["bench"]["max_new"])
    (out / "train_summary.json").write_text(json.dumps({"eval_exact_match": q}, sort_keys=True) + "\n")
    return 0


def cmd_collect(args, cfg, out: Path) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    c = cfg["collect"]
    train, held = _corpus(cfg, args.seed)
    pool = train if (args.split or c["split"]) == "train" else held
    n = args.n or c["n"]
    recs = collect(model, _prompts(pool, args.limit or c["prompts"]), n, c["max_new"], seed=args.seed)
    write_trajectories(out / "trajectories.jsonl", recs, meta={"n": n, "checkpoint": Path(args.checkpoint).name})
    return 0


def cmd_pack(args, cfg, out: Path) -> int:
    _, recs = read_trajectories(args.trajectories)
    p = cfg["pack"]
    sched = NoiseSchedule(args.window or p["window_size"], args.schedule or p["schedule"], seed=args.seed)
    samples = pack_records(recs, sched, args.variant or p["mask_variant"])
    dump_packed(out / "packed.jsonl", samples)
    return 0


def _decoder_spec(args, cfg) -> DecoderSpec:
    d = cfg["decode"]
    return DecoderSpec(
        name=args.strategy or d["strategy"], strategy=args.strategy or d["strategy"],
        n=args.n or d["n"], K=args.K or d["K"], r=args.r or d["r"],
        verification_size=args.v or d["verification_size"],
    )


def cmd_decode(args, cfg, out: Path) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    spec = _decoder_spec(args, cfg)
    max_new = cfg["decode"]["max_new"]
    if args.prompt is not None:
        prompts = [[cp.BOS] + cp.tokenize(args.prompt)]
    else:
        _, held = _corpus(cfg, args.seed)
        prompts = _prompts(held, args.limit or cfg["bench"]["prompts"])
    rows, traces = [], []
    for i, p in enumerate(prompts):
        ref, _ = greedy_ar_decode(model, p, max_new)
        seed = args.seed + 7919 * i
        if spec.strategy == "mbrr":
            ec = EngineConfig(n=spec.n, K=spec.K, r=spec.r, verification_size=spec.verification_size, seed=seed)
            o, m, tr = decode_mbrr(model, p, ec, max_new, trace=True)
            traces.append({"prompt": i, "steps": tr})
        else:
            o, m = run_decoder(model, spec, p, max_new, seed=seed)
        lossless = o == ref
        rows.append({"prompt": i, "text": cp.VOCAB.decode(o, strip_special=True), "hash": output_hash(o),
                     "lossless": int(lossless), "tokens": m.generated_tokens, "passes": m.forward_passes,
                     "tpf": round(m.tpf, 6)})
        if not lossless:
            _write_rows(out / "decode.csv", rows, "# paradec-decode v1")
            print(f"losslessness violation on prompt {i}", file=sys.stderr)
            return EXIT_LOSSY
    _write_rows(out / "decode.csv", rows, "# paradec-decode v1")
    if traces:
        with open(out / "trace.jsonl", "w") as fh:
            for t in traces:
                fh.write(json.dumps(t) + "\n")
    return 0


def _named_paths(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        name, _, path = it.partition("=")
        out[name if path else Path(name).stem] = path or name
    return out


def cmd_bench(args, cfg, out: Path) -> int:
    ckpts = _named_paths(args.checkpoint)
    models = {k: load_checkpoint(v)[0] for k, v in ckpts.items()}
    b = cfg["bench"]
    _, held = _corpus(cfg, args.seed)
    decoders = [DecoderSpec(**{**d, "name": f"{name}:{d['name']}", "checkpoint": name})
                for name in ckpts for d in b["decoders"]]
    suite = BenchSuite(_prompts(held, b["prompts"]), b["max_new"], decoders, b["repetitions"], args.seed, b["timed"])
    res = run_suite(suite, models)
    suite_csv(res, out / "bench.csv")
    _write_rows(out / "bench_summary.csv", summary_rows(res), "# paradec-bench-summary v1")
    return 0


def cmd_grid(args, cfg, out: Path) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    g = cfg["grid"]
    spec = GridSpec(tuple(g["block_sizes"]), tuple(g["verification_sizes"]), tuple(g["K_values"]),
                    tuple(g["r_values"]))
    _, held = _corpus(cfg, args.seed)
    grid_search(spec, model, _prompts(held, g["prompts"]), g["max_new"], seed=args.seed, path=out / "grid.csv")
    return 0


def cmd_traj_report(args, cfg, out: Path) -> int:
    named = {k: read_trajectories(v)[1] for k, v in _named_paths(args.trajectories).items()}
    trajectory_report(named, out / "traj_report.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="paradec", description=__doc__)
    ap.add_argument("--config", help="JSON config file")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="out", help="output directory")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="pretrain a base model and run progressive distillation")
    t.add_argument("--checkpoint", help="start from this checkpoint instead of pretraining")
    t.add_argument("--stage", choices=("base", "all"), default="all")

    c = sub.add_parser("collect", help="record Jacobi trajectories")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--n", type=int)
    c.add_argument("--limit", type=int)
    c.add_argument("--split", choices=("train", "eval"))

    p = sub.add_parser("pack", help="pack trajectories into noisy/clean training samples")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--schedule", choices=("linear_progressive", "random", "reverse_progressive"))
    p.add_argument("--variant", choices=("CC", "NC", "NC_IC"))

    d = sub.add_parser("decode", help="decode prompts and check against greedy AR")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--strategy", choices=("ar", "jacobi", "window", "mbrr"))
    d.add_argument("--prompt", help="raw prompt text; defaults to held-out corpus prompts")
    d.add_argument("--limit", type=int)
    d.add_argument("--n", type=int)
    d.add_argument("--K", type=int)
    d.add_argument("--r", type=float)
    d.add_argument("--v", type=int, help="verification size")

    b = sub.add_parser("bench", help="paired benchmark of all configured decoders")
    b.add_argument("--checkpoint", action="append", required=True, help="NAME=PATH, repeatable")

    g = sub.add_parser("grid", help="grid search over engine settings")
    g.add_argument("--checkpoint", required=True)

    r = sub.add_parser("traj-report", help="summarize recorded trajectories")
    r.add_argument("--trajectories", action="append", required=True, help="NAME=PATH, repeatable")
    return ap


COMMANDS = {
    "train": cmd_train,
    "collect": cmd_collect,
    "pack": cmd_pack,
    "decode": cmd_decode,
    "bench": cmd_bench,
    "grid": cmd_grid,
    "traj-report": cmd_traj_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args, cfg, out)
    except LosslessnessError as e:
        print(str(e), file=sys.stderr)
        return EXIT_LOSSY


if __name__ == "__main__":
    sys.exit(main())
