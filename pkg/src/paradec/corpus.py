"""Character vocabulary and synthetic structured-text tasks.

Three tasks are available:

* ``arith``: fully parenthesized integer expressions such as ``(3+4)*2=``.
  The target is the value, or with ``show_work`` the chain of one-operation
  rewrites ending in the value (``(3+4)*2=`` -> ``7*2=14``). With a
  ``modulus`` every operation is reduced modulo it (``7*2=4`` for 10), and
  ``trace`` lists each intermediate value as one digit instead
  (``((3+5)-2)+7=`` -> ``863`` for 10). ``form="chain"`` draws left-nested
  expressions whose depth is the number of operations; ``max_operand``
  bounds their right-hand operands.
* ``copy``: ``abc|`` -> ``abc``.
* ``bracket``: an open bracket prefix followed by ``=``; the target closes it.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

BOS, EOS, PAD = 0, 1, 2
SPECIALS = ("<bos>", "<eos>", "<pad>")
_EXCLUDED = {"\\", "`"}
CHARS = tuple(chr(c) for c in range(32, 127) if chr(c) not in _EXCLUDED)
TASKS = ("arith", "copy", "bracket")
FORMS = ("tree", "chain")


class EncodingError(ValueError):
    """A character or id outside the vocabulary."""


class SpecError(ValueError):
    """Invalid corpus bounds."""


class Vocabulary:
    """Fixed bijection between symbols and ids; specials occupy ids 0-2."""

    def __init__(self, chars: Sequence[str] = CHARS):
        self.symbols: tuple[str, ...] = SPECIALS + tuple(chars)
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("duplicate symbols")
        self._index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str) -> list[int]:
        out = []
        for ch in text:
            i = self._index.get(ch)
            if i is None or i < len(SPECIALS):
                raise EncodingError(f"character {ch!r} is not in the vocabulary")
            out.append(i)
        return out

    def decode(self, ids: Iterable[int], strip_special: bool = False) -> str:
        parts = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.symbols):
                raise EncodingError(f"id {i} is outside the vocabulary")
            if i < len(SPECIALS):
                if strip_special:
                    continue
                raise EncodingError(f"special id {i} has no text form")
            parts.append(self.symbols[i])
        return "".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(json.dumps(s) for s in self.symbols) + "\n")


VOCAB = Vocabulary()


def tokenize(text: str) -> list[int]:
    return VOCAB.encode(text)


def detokenize(ids: Iterable[int]) -> str:
    return VOCAB.decode(ids)


@dataclass(frozen=True)
class CorpusSpec:
    task: str = "arith"
    size: int = 1000
    min_depth: int = 1
    max_depth: int = 2
    min_len: int = 2
    max_len: int = 8
    show_work: bool = False
    max_target_len: int | None = None
    modulus: int | None = None
    form: str = "tree"
    trace: bool = False
    ops: str = "+-*"
    max_operand: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}")
        if self.size < 0:
            raise SpecError("size must be non-negative")
        if not 0 <= self.min_depth <= self.max_depth:
            raise SpecError("need 0 <= min_depth <= max_depth")
        if not 1 <= self.min_len <= self.max_len:
            raise SpecError("need 1 <= min_len <= max_len")
        if self.modulus is not None and not 2 <= self.modulus <= 10:
            raise SpecError("modulus must lie in [2, 10]")
        if self.form not in FORMS:
            raise SpecError(f"unknown form {self.form!r}")
        if not self.ops or set(self.ops) - set("+-*"):
            raise SpecError("ops must be a non-empty subset of '+-*'")
        if self.max_operand is not None and not 0 <= self.max_operand < (self.modulus or 10):
            raise SpecError("max_operand must lie in [0, modulus)")
        if self.trace and (self.modulus is None or self.show_work):
            raise SpecError("trace needs a modulus and excludes show_work")

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class Sample:
    prompt: str
    target: str

    @property
    def prompt_ids(self) -> list[int]:
        return [BOS] + tokenize(self.prompt)

    @property
    def target_ids(self) -> list[int]:
        return tokenize(self.target) + [EOS]


# --- arithmetic -----------------------------------------------------------

_MAX_VALUE = 99


class _Expr:
    __slots__ = ("op", "left", "right", "value")

    def __init__(self, op: str | None, left=None, right=None, value: int = 0):
        self.op, self.left, self.right, self.value = op, left, right, value

    @property
    def leaf(self) -> bool:
        return self.op is None

    def render(self, top: bool = True) -> str:
        if self.leaf:
            return str(self.value)
        s = f"{self.left.render(False)}{self.op}{self.right.render(False)}"
        return s if top else f"({s})"

    def depth(self) -> int:
        return 0 if self.leaf else 1 + max(self.left.depth(), self.right.depth())


def _apply(op: str, a: int, b: int, modulus: int | None = None) -> int | None:
    if modulus is not None:
        return (a + b if op == "+" else a - b if op == "-" else a * b) % modulus
    if op == "+":
        r = a + b
    elif op == "-":
        r = a - b
    else:
        if a > 9 or b > 9:
            return None
        r = a * b
    return r if 0 <= r <= _MAX_VALUE else None


def _gen_expr(rng: random.Random, depth: int, force: bool, modulus: int | None = None,
              ops: str = "+-*") -> _Expr | None:
    if depth == 0 or (not force and rng.random() < 0.35):
        return _Expr(None, value=rng.randint(0, (modulus or 10) - 1))
    left = _gen_expr(rng, depth - 1, force and rng.random() < 0.5, modulus, ops)
    right = _gen_expr(rng, depth - 1, False, modulus, ops)
    if left is None or right is None:
        return None
    op = rng.choice(ops)
    val = _apply(op, left.value, right.value, modulus)
    if val is None:
        return None
    return _Expr(op, left, right, val)


def _gen_chain(rng: random.Random, length: int, modulus: int | None, ops: str,
               max_operand: int | None = None) -> _Expr | None:
    hi = (modulus or 10) - 1
    e = _Expr(None, value=rng.randint(0, hi))
    for _ in range(length):
        op = rng.choice(ops)
        right = _Expr(None, value=rng.randint(0, hi if max_operand is None else max_operand))
        val = _apply(op, e.value, right.value, modulus)
        if val is None:
            return None
        e = _Expr(op, e, right, val)
    return e


def _reduce_once(e: _Expr) -> _Expr:
    """Replace the leftmost operation whose operands are both numbers."""
    if e.left.leaf and e.right.leaf:
        return _Expr(None, value=e.value)
    if not e.left.leaf:
        return _Expr(e.op, _reduce_once(e.left), e.right, e.value)
    return _Expr(e.op, e.left, _reduce_once(e.right), e.value)


def evaluate(expr: str, modulus: int | None = None) -> int:
    """Value of a fully parenthesized ``+ - *`` expression, optionally reduced per operation."""
    pos = 0

    def parse() -> int:
        nonlocal pos
        a = term()
        while pos < len(expr) and expr[pos] in "+-*":
            op = expr[pos]
            pos += 1
            b = term()
            a = a + b if op == "+" else a - b if op == "-" else a * b
            if modulus is not None:
                a %= modulus
        return a

    def term() -> int:
        nonlocal pos
        if pos >= len(expr):
            raise SpecError(f"malformed expression {expr!r}")
        if expr[pos] == "(":
            pos += 1
            v = parse()
            if pos >= len(expr) or expr[pos] != ")":
                raise SpecError(f"malformed expression {expr!r}")
            pos += 1
            return v
        start = pos
        while pos < len(expr) and expr[pos].isdigit():
            pos += 1
        if start == pos:
            raise SpecError(f"malformed expression {expr!r}")
        return int(expr[start:pos])

    v = parse()
    if pos != len(expr):
        raise SpecError(f"malformed expression {expr!r}")
    return v


def arith_target(expr: str, show_work: bool = False, modulus: int | None = None, trace: bool = False) -> str:
    """Canonical continuation for ``expr`` (without the trailing ``=``)."""
    if not (show_work or trace):
        return str(evaluate(expr, modulus))
    steps = []
    tree = _parse_tree(expr, modulus)
    while not tree.leaf:
        prev, tree = tree, _reduce_once(tree)
        steps.append(str(_reduced_value(prev)) if trace else tree.render())
    if trace:
        return "".join(steps) if steps else expr
    return "=".join(steps) if steps else expr


def _reduced_value(e: _Expr) -> int:
    """Value of the node that :func:`_reduce_once` replaces."""
    while not (e.left.leaf and e.right.leaf):
        e = e.left if not e.left.leaf else e.right
    return e.value


def _parse_tree(expr: str, modulus: int | None = None) -> _Expr:
    pos = 0

    def node() -> _Expr:
        nonlocal pos
        left = atom()
        if pos < len(expr) and expr[pos] in "+-*":
            op = expr[pos]
            pos += 1
            right = atom()
            val = _apply(op, left.value, right.value, modulus)
            if val is None:
                val = evaluate(f"{left.value}{op}{right.value}")
            return _Expr(op, left, right, val)
        return left

    def atom() -> _Expr:
        nonlocal pos
        if expr[pos] == "(":
            pos += 1
            e = node()
            pos += 1
            return e
        start = pos
        while pos < len(expr) and expr[pos].isdigit():
            pos += 1
        return _Expr(None, value=int(expr[start:pos]))

    return node()


# --- generation -----------------------------------------------------------

_OPEN, _CLOSE = "([{<", ")]}>"
_COPY_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"


def _one(spec: CorpusSpec, rng: random.Random) -> Sample | None:
    if spec.task == "arith":
        depth = rng.randint(spec.min_depth, spec.max_depth)
        if spec.form == "chain":
            e = _gen_chain(rng, depth, spec.modulus, spec.ops, spec.max_operand)
        else:
            e = _gen_expr(rng, depth, force=True, modulus=spec.modulus, ops=spec.ops)
        if e is None or e.depth() < spec.min_depth:
            return None
        text = e.render()
        return Sample(text + "=", arith_target(text, spec.show_work, spec.modulus, spec.trace))
    length = rng.randint(spec.min_len, spec.max_len)
    if spec.task == "copy":
        s = "".join(rng.choice(_COPY_CHARS) for _ in range(length))
        return Sample(s + "|", s)
    opens = "".join(rng.choice(_OPEN) for _ in range(length))
    closers = "".join(_CLOSE[_OPEN.index(c)] for c in reversed(opens))
    return Sample(opens + "=", closers)


def generate(spec: CorpusSpec) -> list[Sample]:
    """Deterministic list of distinct prompts with canonical targets."""
    spec.validate()
    rng = random.Random(f"{spec.task}:{spec.seed}")
    out: list[Sample] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < spec.size:
        attempts += 1
        if attempts > 200 * max(spec.size, 1) + 1000:
            raise SpecError("bounds admit too few distinct samples")
        s = _one(spec, rng)
        if s is None or s.prompt in seen:
            continue
        if spec.max_target_len is not None and len(s.target) > spec.max_target_len:
            continue
        seen.add(s.prompt)
        out.append(s)
    return out


def is_eval(prompt: str, seed: int = 0, eval_fraction: float = 0.1) -> bool:
    h = hashlib.sha256(f"{seed}:{prompt}".encode()).digest()
    return int.from_bytes(h[:8], "big") / 2**64 < eval_fraction


def split(samples: Sequence[Sample], seed: int = 0,
          eval_fraction: float = 0.1) -> tuple[list[Sample], list[Sample]]:
    """Hash-partition samples into (train, eval)."""
    train, held = [], []
    for s in samples:
        (held if is_eval(s.prompt, seed, eval_fraction) else train).append(s)
    return train, held


def write_corpus(path: str | Path, samples: Iterable[Sample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(asdict(s)) + "\n")


def read_corpus(path: str | Path) -> list[Sample]:
    with open(path) as fh:
        return [Sample(**json.loads(line)) for line in fh if line.strip()]
