"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`GradTape` when
at least one operand requires gradients. Without an active tape every
operation is a plain numpy computation, which is how inference runs.

Broadcasting is restricted to suffix shapes: a right operand may omit
leading axes of the left operand (bias vectors, shared position tables,
2-D weights in batched matmul). Gradients are summed back over the omitted
axes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "DimensionError",
    "NumericsError",
    "tensor",
    "detach",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "concat",
    "embedding",
    "gather_rows",
    "take",
    "gelu",
    "layer_norm",
    "masked_softmax",
    "softmax_logprobs",
    "kl_rows",
    "kl_divergence",
    "nll_rows",
    "sum_all",
    "mean_all",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericsError(FloatingPointError):
    """A non-finite value appeared where finite input was required."""


_TAPES: list["GradTape"] = []


class Tensor:
    """A numpy array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[], None] | None = None
        self._parents: tuple[Tensor, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of differentiable operations.

    Used as a context manager; ``backward`` replays the recorded nodes once
    each in reverse order of creation.
    """

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self._done = False

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise DimensionError("backward expects a scalar loss")
        if self._done:
            raise RuntimeError("tape already replayed")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward()
            node._backward = None
            node._parents = ()


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    if not _TAPES or not any(p.requires_grad for p in parents):
        return out
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward
    _TAPES[-1].nodes.append(out)
    return out


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data, requires_grad=False)


def _check_suffix(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not suffix-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D and shared across the batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions {a.shape} x {b.shape}")
    if b.ndim == 2:
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = Tensor((a2 @ b.data).reshape(*a.shape[:-1], m))
    else:
        out = Tensor(np.matmul(a.data, b.data))

    def backward() -> None:
        g = out.grad
        if b.ndim == 2:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a2.T @ g2)
            return
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            b._accumulate(np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _record(out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data, b.data, "add")
    out = Tensor(a.data + b.data)

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _record(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad)
        if b.requires_grad:
            b._accumulate(-_unbroadcast(out.grad, b.shape))

    return _record(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)

    def backward() -> None:
        if a.requires_grad:
            a._accumulate(out.grad * b.data)
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))

    def backward() -> None:
        a._accumulate(out.grad * c)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def backward() -> None:
        a._accumulate(out.grad.reshape(a.shape))

    return _record(out, (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(a.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward() -> None:
        a._accumulate(np.transpose(out.grad, inverse))

    return _record(out, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward() -> None:
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(out.grad[tuple(idx)])

    return _record(out, tuple(parts), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; repeated ids accumulate gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out = Tensor(table.data[ids])

    def backward() -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        table._accumulate(g)

    return _record(out, (table,), backward)


def gather_rows(x: Tensor, batch_idx: np.ndarray, row_idx: np.ndarray) -> Tensor:
    """Select ``x[batch_idx[i], row_idx[i], :]`` from a rank-3 tensor."""
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    row_idx = np.asarray(row_idx, dtype=np.int64)
    out = Tensor(x.data[batch_idx, row_idx])

    def backward() -> None:
        g = np.zeros_like(x.data)
        np.add.at(g, (batch_idx, row_idx), out.grad)
        x._accumulate(g)

    return _record(out, (x,), backward)


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select entries along the first axis; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def backward() -> None:
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        x._accumulate(g)

    return _record(out, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    v = x.data
    v2 = v * v
    inner = _GELU_C * (v + 0.044715 * v2 * v)
    th = np.tanh(inner)
    out = Tensor(0.5 * v * (1.0 + th))

    def backward() -> None:
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner
        x._accumulate(out.grad * d)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True, dtype=np.float64).astype(v.dtype)
    centered = v - mu
    var = (centered**2).mean(axis=-1, keepdims=True, dtype=np.float64).astype(v.dtype)
    inv = 1.0 / np.sqrt(var + v.dtype.type(eps))
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward() -> None:
        g = out.grad
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.shape))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _record(out, (x, gamma, beta), backward)


def masked_softmax(x: Tensor, bias: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding a constant bias.

    Entries where ``bias`` is ``-inf`` receive exactly zero weight. Every row
    must keep at least one finite entry.
    """
    z = x.data if bias is None else x.data + bias
    m = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericsError("softmax row with no admissible entry")
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y.astype(x.dtype, copy=False))

    def backward() -> None:
        g = out.grad
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _record(out, (x,), backward)


def softmax_logprobs(logits: Tensor) -> Tensor:
    """Log-probabilities over the last axis, stabilized by max subtraction."""
    v = logits.data
    if np.isnan(v).any():
        raise NumericsError("NaN in logits")
    wide = v.astype(np.float64)
    shifted = wide - wide.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    lp = shifted - lse
    probs = np.exp(lp)
    out = Tensor(lp.astype(v.dtype))

    def backward() -> None:
        g = out.grad.astype(np.float64)
        gx = g - probs * g.sum(axis=-1, keepdims=True)
        logits._accumulate(gx)

    return _record(out, (logits,), backward)


def kl_rows(teacher_logprobs: Tensor, student_logprobs: Tensor) -> Tensor:
    """Per-row forward KL(teacher || student) over the last axis.

    The teacher side is treated as a constant. Zero-probability teacher
    entries contribute nothing, even against ``-inf`` student entries.
    """
    if teacher_logprobs.shape != student_logprobs.shape:
        raise DimensionError(
            f"kl: shapes {teacher_logprobs.shape} and {student_logprobs.shape} differ"
        )
    t = teacher_logprobs.data.astype(np.float64)
    s = student_logprobs.data.astype(np.float64)
    p = np.exp(t)
    support = p > 0
    diff = np.where(support, t - np.where(support, s, 0.0), 0.0)
    rows = (p * diff).sum(axis=-1)
    out = Tensor(rows.astype(student_logprobs.dtype))

    def backward() -> None:
        g = out.grad.astype(np.float64)[..., None]
        student_logprobs._accumulate(-p * g)

    return _record(out, (student_logprobs,), backward)


def kl_divergence(teacher_logprobs: Tensor, student_logprobs: Tensor) -> Tensor:
    """KL summed over all positions; scalar."""
    return sum_all(kl_rows(teacher_logprobs, student_logprobs))


def nll_rows(logprobs: Tensor, targets: np.ndarray) -> Tensor:
    """Negative log-likelihood of ``targets`` for each row of a rank-2 tensor."""
    targets = np.asarray(targets, dtype=np.int64)
    if logprobs.ndim != 2 or targets.shape != logprobs.shape[:1]:
        raise DimensionError("nll_rows expects (R, V) logprobs and (R,) targets")
    rows = np.arange(targets.shape[0])
    out = Tensor(-logprobs.data[rows, targets])

    def backward() -> None:
        g = np.zeros_like(logprobs.data)
        g[rows, targets] = -out.grad
        logprobs._accumulate(g)

    return _record(out, (logprobs,), backward)


def sum_all(x: Tensor) -> Tensor:
    total = x.data.sum(dtype=np.float64)
    out = Tensor(np.asarray(total, dtype=x.dtype))

    def backward() -> None:
        x._accumulate(np.broadcast_to(out.grad, x.shape))

    return _record(out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = max(x.data.size, 1)
    return scale(sum_all(x), 1.0 / n)


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Tensor | Iterable[Tensor],
    eps: float = 1e-4,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients against central differences.

    Args:
        f: maps the parameter list to a scalar tensor. Must rebuild its graph
            from the current parameter values on every call.
        params: parameter tensor(s); they are promoted to float64 in place.
        eps: finite-difference step, within [1e-5, 1e-3].
        coords: if given, check only this many randomly chosen coordinates
            per parameter.
        rng: generator for coordinate sampling.

    Returns:
        The maximum of ``|analytic - fd| / (|analytic| + |fd| + 1e-8)``.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-5, 1e-3]")
    plist = [params] if isinstance(params, Tensor) else list(params)
    for p in plist:
        p.data = p.data.astype(np.float64)
        p.requires_grad = True
        p.grad = None

    with GradTape() as tape:
        loss = f(plist)
    if not np.isfinite(loss.data).all():
        raise NumericsError("non-finite loss in grad_check")
    tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in plist]

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, a in zip(plist, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = rng.choice(flat.size, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f(plist).data)
            flat[i] = orig - eps
            down = float(f(plist).data)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericsError("non-finite loss in grad_check")
            fd = (up - down) / (2 * eps)
            an = float(a.reshape(-1)[i])
            worst = max(worst, abs(an - fd) / (abs(an) + abs(fd) + 1e-8))
    return worst
