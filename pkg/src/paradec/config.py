"""Run configuration: one JSON document with a section per component.

Missing keys fall back to :data:`DEFAULTS`; unknown sections or keys are
rejected so typos fail loudly.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS: dict = {
    "model": {"vocab_size": 96, "d_model": 128, "n_layers": 2, "n_heads": 4, "max_seq_len": 128, "seed": 0},
    "corpus": {"task": "arith", "size": 20000, "min_depth": 2, "max_depth": 3, "show_work": True,
               "max_target_len": 40, "ops": "+-", "modulus": None, "form": "tree", "trace": False,
               "max_operand": None, "seed": 0, "min_len": 2, "max_len": 8},
    "pretrain": {"steps": 4000, "batch_size": 32, "learning_rate": 1e-3, "optimizer": "adam", "grad_clip": 1.0},
    "train": {
        "learning_rate": 3e-4, "batch_size": 16, "steps": 400, "ar_weight": 10.0,
        "schedule": "linear_progressive", "mask_variant": "NC", "block_size": 8,
        "rounds": [{"block_size": 4, "window_size": 4, "steps": 400},
                   {"block_size": 8, "window_size": 4, "steps": 400}],
        "optimizer": "adam", "loss": "progressive", "grad_clip": 1.0, "max_new": 48,
        "prompts": 2000,
    },
    "decode": {"strategy": "jacobi", "n": 16, "K": 2, "r": 0.85, "verification_size": 4, "max_new": 48},
    "bench": {"prompts": 100, "max_new": 48, "repetitions": 1, "timed": False,
              "decoders": [
                  {"name": "ar", "strategy": "ar"},
                  {"name": "jacobi", "strategy": "jacobi", "n": 16},
                  {"name": "window", "strategy": "window", "n": 16},
                  {"name": "mbrr", "strategy": "mbrr", "n": 16, "K": 2, "r": 0.85, "verification_size": 4},
              ]},
    "grid": {"block_sizes": [8, 16, 32], "verification_sizes": [1, 2, 4], "K_values": [2], "r_values": [0.85],
             "prompts": 50, "max_new": 48},
    "collect": {"n": 16, "max_new": 48, "prompts": 200, "split": "train"},
    "pack": {"window_size": 8, "schedule": "linear_progressive", "mask_variant": "NC"},
}


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = merge(base[k], v, where)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = merge(cfg, overrides)
    return cfg
