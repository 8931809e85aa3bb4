import numpy as np
import pytest

from paradec.model import ModelConfig, Transformer

SMALL = ModelConfig(vocab_size=96, d_model=32, n_layers=2, n_heads=4, max_seq_len=160, seed=11)


def bigram_model(nxt) -> Transformer:
    """A transformer whose greedy prediction depends only on the current token.

    Layers are zeroed so the residual stream is the one-hot token embedding;
    the head maps token ``i`` to ``nxt[i]``.
    """
    V = len(nxt)
    cfg = ModelConfig(vocab_size=V, d_model=128, n_layers=1, n_heads=4, max_seq_len=256, seed=0)
    m = Transformer(cfg, dtype=np.float64)
    for name, p in m.params.items():
        if name.rsplit(".", 1)[-1] != "g":
            p.data[...] = 0.0
    m.params["tok_emb"].data[np.arange(V), np.arange(V)] = 1.0
    m.params["head"].data[np.arange(V), np.asarray(nxt)] = 10.0
    m.mark_updated()
    return m


def cycle_table(V: int, cycle: list[int], default: int) -> list[int]:
    nxt = [default] * V
    for a, b in zip(cycle, cycle[1:] + cycle[:1]):
        nxt[a] = b
    return nxt


@pytest.fixture(scope="session")
def small_model():
    return Transformer(SMALL)


@pytest.fixture(scope="session")
def prompts():
    rng = np.random.default_rng(99)
    return [[0] + [int(t) for t in rng.integers(3, 96, size=int(rng.integers(1, 8)))] for _ in range(6)]


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
