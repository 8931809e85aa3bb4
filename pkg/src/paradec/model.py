"""Toy decoder-only transformer with a KV cache and block-sparse masks.

One forward implementation serves both paths:

* training: full sequences, an explicit boolean mask per sample, no cache;
* decoding: causal attention over ``cache ∪ tokens``; the cache is only
  extended through :meth:`KVCache.commit`.

Parameters live in float32 for training. Decoders run on a float64 twin
(:meth:`Transformer.inference_view`) so that the greedy argmax of a row does
not depend on how many other rows share the forward pass.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CHECKPOINT_FORMAT = "paradec-checkpoint"
CHECKPOINT_VERSION = 1


class CapacityError(RuntimeError):
    """A sequence would exceed ``max_seq_len``."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 96
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 512
    seed: int = 0
    init_std: float = 0.02

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class MaskSpec:
    """Boolean attention table: ``allowed[q, k]`` permits query q to read key k."""

    allowed: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.allowed, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("mask must be a square table")
        if not a.any(axis=1).all():
            raise ValueError("mask has a query row with no admissible key")
        self.allowed = a

    @property
    def seq_len(self) -> int:
        return self.allowed.shape[0]

    @classmethod
    def causal(cls, n: int) -> "MaskSpec":
        return cls(np.tril(np.ones((n, n), dtype=bool)))

    def bias(self, dtype=np.float32) -> np.ndarray:
        return np.where(self.allowed, 0.0, -np.inf).astype(dtype)


def _layer_names(i: int) -> list[str]:
    p = f"l{i}."
    return [p + s for s in ("ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2")]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        n = _layer_names(i)
        shapes.update({
            n[0]: (d,), n[1]: (d,), n[2]: (d, d), n[3]: (d, d), n[4]: (d, d), n[5]: (d, d),
            n[6]: (d,), n[7]: (d,), n[8]: (d, f), n[9]: (f,), n[10]: (f, d), n[11]: (d,),
        })
    shapes.update({"lnf.g": (d,), "lnf.b": (d,), "head": (d, V)})
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    out = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf in ("b", "b1", "b2"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, cfg.init_std, size=shape)
        out[name] = arr.astype(dtype)
    return out


class KVCache:
    """Preallocated per-layer key/value buffers for one sequence."""

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        shape = (cfg.n_layers, cfg.n_heads, cfg.max_seq_len, cfg.head_dim)
        self.k = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.committed_len = 0
        self.capacity = cfg.max_seq_len

    def keys(self, layer: int) -> np.ndarray:
        return self.k[layer, :, : self.committed_len]

    def values(self, layer: int) -> np.ndarray:
        return self.v[layer, :, : self.committed_len]

    def commit(self, new_kv: Sequence[tuple[np.ndarray, np.ndarray]], count: int,
               start: int = 0, row: int = 0) -> "KVCache":
        """Append ``count`` positions taken from a forward's fresh keys/values.

        ``new_kv[layer]`` holds ``(k, v)`` of shape ``(B, H, T, dh)``; positions
        ``start .. start+count`` of batch row ``row`` are appended.
        """
        if count < 0:
            raise ValueError("negative commit")
        if self.committed_len + count > self.capacity:
            raise CapacityError("cache capacity exceeded")
        if count == 0:
            return self
        lo, hi = self.committed_len, self.committed_len + count
        for layer, (k, v) in enumerate(new_kv):
            if start + count > k.shape[2]:
                raise ValueError("commit range exceeds the forward's positions")
            self.k[layer, :, lo:hi] = k[row, :, start : start + count]
            self.v[layer, :, lo:hi] = v[row, :, start : start + count]
        self.committed_len = hi
        return self

    def truncate(self, new_len: int) -> "KVCache":
        if not 0 <= new_len <= self.committed_len:
            raise IndexError(f"cannot truncate cache of length {self.committed_len} to {new_len}")
        self.k[:, :, new_len : self.committed_len] = 0
        self.v[:, :, new_len : self.committed_len] = 0
        self.committed_len = new_len
        return self

    def copy(self) -> "KVCache":
        c = object.__new__(KVCache)
        c.k, c.v = self.k.copy(), self.v.copy()
        c.committed_len, c.capacity = self.committed_len, self.capacity
        return c


class Transformer:
    """Pre-LN decoder with learned absolute positions and an untied head."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 dtype=np.float32):
        self.cfg = cfg
        raw = init_params(cfg, dtype) if params is None else params
        shapes = param_shapes(cfg)
        if set(raw) != set(shapes):
            raise ValueError("parameter names do not match the config")
        self.params: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            arr = np.asarray(raw[name])
            if arr.shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {arr.shape}")
            self.params[name] = Tensor(arr.astype(dtype, copy=True), requires_grad=True)
        self.version = 0
        self._view: tuple[int, Transformer] | None = None

    @property
    def dtype(self):
        return self.params["head"].dtype

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def astype(self, dtype) -> "Transformer":
        return Transformer(self.cfg, self.named_arrays(), dtype=dtype)

    def copy(self) -> "Transformer":
        return self.astype(self.dtype)

    def mark_updated(self) -> None:
        self.version += 1

    def inference_view(self) -> "Transformer":
        """Float64 copy used by every decoder, rebuilt after parameter updates."""
        if self.dtype == np.float64:
            return self
        if self._view is None or self._view[0] != self.version:
            self._view = (self.version, self.astype(np.float64))
        return self._view[1]

    def new_cache(self) -> KVCache:
        return KVCache(self.cfg, dtype=self.dtype)

    def forward(
        self,
        tokens: np.ndarray,
        positions: np.ndarray | None = None,
        mask: MaskSpec | np.ndarray | None = None,
        cache: KVCache | None = None,
        rows: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
        """Compute next-token logits.

        Args:
            tokens: ``(T,)`` or ``(B, T)`` token ids.
            positions: position ids, same shape as ``tokens`` or ``(T,)``.
                Defaults to ``committed_len + arange(T)``.
            mask: training path only; a :class:`MaskSpec` or boolean array of
                shape ``(T, T)`` or ``(B, T, T)``.
            cache: decoding path only; attention covers the committed cache
                plus a causal prefix of ``tokens``.
            rows: optional ``(batch_idx, pos_idx)`` selecting which hidden
                rows reach the output head.

        Returns:
            Logits of shape ``(B, T, V)`` (or ``(T, V)`` for 1-D input, or
            ``(R, V)`` when ``rows`` is given) and the fresh per-layer
            ``(k, v)`` arrays of shape ``(B, H, T, dh)``.
        """
        cfg = self.cfg
        tok = np.asarray(tokens, dtype=np.int64)
        squeeze = tok.ndim == 1
        if squeeze:
            tok = tok[None]
        B, T = tok.shape
        if mask is not None and cache is not None:
            raise ValueError("pass either a mask (training) or a cache (decoding), not both")
        past = 0 if cache is None else cache.committed_len
        if positions is None:
            if past + T > cfg.max_seq_len:
                raise CapacityError(f"sequence of {past + T} exceeds max_seq_len {cfg.max_seq_len}")
            pos = np.broadcast_to(past + np.arange(T), (B, T))
        else:
            pos = np.broadcast_to(np.asarray(positions, dtype=np.int64), (B, T))
            if pos.size and (pos.min() < 0 or pos.max() >= cfg.max_seq_len):
                raise CapacityError("position index beyond max_seq_len")
            if past + T > cfg.max_seq_len and cache is not None:
                raise CapacityError(f"sequence of {past + T} exceeds max_seq_len {cfg.max_seq_len}")

        if mask is None:
            allowed = np.ones((T, past + T), dtype=bool)
            allowed[:, past:] = np.tril(np.ones((T, T), dtype=bool))
        else:
            allowed = mask.allowed if isinstance(mask, MaskSpec) else np.asarray(mask, dtype=bool)
            if allowed.shape[-2:] != (T, T):
                raise ValueError(f"mask shape {allowed.shape} does not match length {T}")
            if not allowed.any(axis=-1).all():
                raise ValueError("mask has a query row with no admissible key")
        bias = np.where(allowed, 0.0, -np.inf).astype(self.dtype)
        bias = bias[:, None] if bias.ndim == 3 else bias[None, None]

        p = self.params
        H, dh = cfg.n_heads, cfg.head_dim
        x = nx.add(nx.embedding(p["tok_emb"], tok), nx.embedding(p["pos_emb"], pos))
        fresh: list[tuple[np.ndarray, np.ndarray]] = []
        for i in range(cfg.n_layers):
            n = _layer_names(i)
            h = nx.layer_norm(x, p[n[0]], p[n[1]])
            q = nx.transpose(nx.reshape(nx.matmul(h, p[n[2]]), (B, T, H, dh)), (0, 2, 1, 3))
            k = nx.transpose(nx.reshape(nx.matmul(h, p[n[3]]), (B, T, H, dh)), (0, 2, 1, 3))
            v = nx.transpose(nx.reshape(nx.matmul(h, p[n[4]]), (B, T, H, dh)), (0, 2, 1, 3))
            fresh.append((k.data, v.data))
            if past:
                ck = Tensor(np.broadcast_to(cache.keys(i), (B, H, past, dh)))
                cv = Tensor(np.broadcast_to(cache.values(i), (B, H, past, dh)))
                k = nx.concat([ck, k], axis=2)
                v = nx.concat([cv, v], axis=2)
            scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
            att = nx.masked_softmax(scores, bias)
            o = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = nx.add(x, nx.matmul(o, p[n[5]]))
            h2 = nx.layer_norm(x, p[n[6]], p[n[7]])
            ff = nx.gelu(nx.add(nx.matmul(h2, p[n[8]]), p[n[9]]))
            x = nx.add(x, nx.add(nx.matmul(ff, p[n[10]]), p[n[11]]))
        x = nx.layer_norm(x, p["lnf.g"], p["lnf.b"])
        if rows is not None:
            x = nx.gather_rows(x, rows[0], rows[1])
        logits = nx.matmul(x, p["head"])
        if squeeze and rows is None:
            logits = nx.reshape(logits, (T, cfg.vocab_size))
        return logits, fresh


def forward_logits(model: Transformer, tokens: Sequence[int], cache: KVCache | None = None,
                   mask: MaskSpec | None = None) -> np.ndarray:
    """Logits ``(len, V)`` for a single sequence; never modifies the cache."""
    logits, _ = model.forward(np.asarray(tokens, dtype=np.int64), mask=mask, cache=cache)
    return logits.data


def commit_cache(model: Transformer, cache: KVCache, tokens: Sequence[int]) -> KVCache:
    """Run ``tokens`` through the model and append their keys/values to ``cache``."""
    tokens = list(tokens)
    if not tokens:
        return cache
    if cache.committed_len + len(tokens) > cache.capacity:
        raise CapacityError("cache capacity exceeded")
    _, fresh = model.forward(np.asarray(tokens, dtype=np.int64), cache=cache)
    return cache.commit(fresh, len(tokens))


def truncate_cache(cache: KVCache, new_len: int) -> KVCache:
    return cache.truncate(new_len)


def save_checkpoint(path: str | Path, model: Transformer, extra: dict | None = None) -> Path:
    """Write config and parameters to an ``.npz`` container.

    The archive holds one array per parameter plus ``__meta__``, a JSON
    document with the format tag, version, config and optional metadata.
    """
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "dtype": str(model.dtype),
        "extra": extra or {},
    }
    arrays = {k: v.data for k, v in model.params.items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed entry timestamps keep identical models byte-identical on disk
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[Transformer, dict]:
    with np.load(Path(path)) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = {k: z[k] for k in z.files if k != "__meta__"}
    cfg = ModelConfig.from_dict(meta["config"])
    model = Transformer(cfg, params, dtype=np.dtype(meta["dtype"]))
    return model, meta.get("extra", {})
