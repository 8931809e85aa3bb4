"""Straight-line multi-block decoder used as a test oracle.

No KV cache and no batching: every candidate row is scored by its own full
forward over ``prompt + output + row``. Bookkeeping mirrors the engine's
documented lifecycle so step traces can be compared field by field.
"""

import math

import numpy as np

from paradec.corpus import EOS
from paradec.decoding import random_draft
from paradec.model import forward_logits


def _lead(a, b):
    k = 0
    while k < min(len(a), len(b)) and a[k] == b[k]:
        k += 1
    return k


def reference_mbrr(model, prompt, n, K, r, v, max_new, seed, capacity=256, min_ngram=3):
    view = model.inference_view()
    V = view.cfg.vocab_size
    rng = np.random.Generator(np.random.PCG64(seed))
    s = max(1, math.ceil(round(r * n, 9)))
    pool = []

    def fresh(k):
        return random_draft(rng, k, V)

    def resize(q, k):
        return q[:k] if len(q) >= k else q + fresh(k - len(q))

    def pool_add(seq):
        key = tuple(int(t) for t in seq)[:n]
        if len(key) < min_ngram or key in pool or capacity == 0:
            return
        while len(pool) >= capacity:
            pool.pop(0)
        pool.append(key)

    out, q, pseudo, trace = [], fresh(n - 1), [], []
    committed = 0
    if max_new <= 0:
        return out, trace
    it = 0
    while True:
        it += 1
        ctx = list(prompt) + out
        pending = ctx[-1]
        base = list(q)
        offsets = []
        for b in pseudo:
            offsets.append(len(base))
            base += b["acc"] + b["draft"]
        m = len(q)
        rows = [base]
        if v > 1 and m:
            hits = [e for e in reversed(pool) if e[0] == pending][: v - 1]
            for e in hits:
                cont = list(e[1 : 1 + m])
                rows.append(cont + q[len(cont):] + base[m:])
        preds = []
        for row in rows:
            logits = forward_logits(view, ctx + row)
            preds.append([int(t) for t in logits[len(ctx) - 1 :].argmax(-1)])
        scores = [_lead(row[:m], p[:m]) for row, p in zip(rows, preds)]
        best = scores.index(max(scores))
        c, g = scores[best], preds[best]
        for i in range(_lead(q, preds[0][:m]), len(q) - min_ngram + 1):
            pool_add(q[i:])

        for off, b in zip(offsets, pseudo):
            lo = off + len(b["acc"])
            dl = len(b["draft"])
            gb = g[lo : lo + dl + 1]
            cb = _lead(b["draft"], gb)
            b["acc"] = (b["acc"] + gb[: cb + 1])[:n]
            b["draft"] = gb[cb + 1 : dl]

        before = len(out)
        done = False
        for t in g[: c + 1]:
            if len(out) >= max_new:
                done = True
                break
            out.append(t)
            if t == EOS:
                done = True
                break
        done = done or len(out) >= max_new

        if not done:
            committed = len(prompt) + len(out) - 1
            nq = g[c + 1 : m + 1]
            if pseudo and len(out) >= pseudo[0]["start"]:
                head = pseudo.pop(0)
                nq = (head["acc"] + head["draft"])[len(out) - head["start"] :]
            target = pseudo[0]["start"] - len(out) if pseudo else n - 1
            q = resize(nq, target)
            # spawn
            if 1 + len(pseudo) < K:
                if pseudo:
                    last = pseudo[-1]
                    start = last["start"] + n
                    if len(last["acc"]) >= s and start < max_new:
                        pseudo.append({"start": start, "acc": [], "draft": resize(list(q), n)})
                elif len(out) % n >= s:
                    start = (len(out) // n + 1) * n
                    if start < max_new:
                        cut = start - len(out)
                        draft = resize(q[cut : cut + n], n)
                        q = resize(q, cut)
                        pseudo.append({"start": start, "acc": [], "draft": draft})

        trace.append({
            "iter": it,
            "input": [int(t) for t in rows[0]],
            "branches": len(rows),
            "branch": best,
            "ra_accepted": len(out) - before,
            "blocks": [[b["start"], len(b["acc"]), len(b["draft"])] for b in pseudo],
            "q_ra": list(q),
            "pool_size": len(pool),
            "committed": committed,
            "out_len": len(out),
        })
        if done:
            return out, trace
