"""Naive reference forward pass used as an independent oracle in the tests.

Written position by position with Python loops: rotary pairs (i, i + d_head/2)
are rotated as complex numbers, attention is an explicit softmax over earlier
positions, and the MLP output is accumulated one neuron at a time.
"""

from __future__ import annotations

import math

import numpy as np


def reference_forward(model, ids, suppress: dict[int, set[int]] | None = None, k: float = 0.0) -> np.ndarray:
    """Logits for every position; ``suppress`` maps layer -> neuron indices forced to ``-k|a|``."""
    cfg = model.config
    W = {name: np.asarray(a, dtype=np.float64) for name, a in model.tensors()}
    d, H = cfg.d_model, cfg.n_heads
    dh, half = d // H, (d // H) // 2
    eps = cfg.norm_epsilon
    suppress = suppress or {}

    def norm(v, scale):
        return v / math.sqrt(sum(float(x) * float(x) for x in v) / len(v) + eps) * scale

    def rotate(vec, pos):
        out = np.empty_like(vec)
        for i in range(half):
            theta = pos * cfg.rope_base ** (-2.0 * i / dh)
            z = complex(vec[i], vec[i + half]) * complex(math.cos(theta), math.sin(theta))
            out[i], out[i + half] = z.real, z.imag
        return out

    xs = [W["token_embedding"][t].copy() for t in ids]
    for layer in range(cfg.n_layers):
        p = f"layers.{layer}."
        normed = [norm(x, W[p + "attn_norm"]) for x in xs]
        heads_q, heads_k, heads_v = [], [], []
        for h in range(H):
            sl = slice(h * dh, (h + 1) * dh)
            heads_q.append([rotate((n @ W[p + "W_Q"])[sl], t) for t, n in enumerate(normed)])
            heads_k.append([rotate((n @ W[p + "W_K"])[sl], t) for t, n in enumerate(normed)])
            heads_v.append([(n @ W[p + "W_V"])[sl] for n in normed])
        new = []
        for t in range(len(xs)):
            parts = []
            for h in range(H):
                scores = [float(heads_q[h][t] @ heads_k[h][s]) / math.sqrt(dh) for s in range(t + 1)]
                top = max(scores)
                weights = [math.exp(s - top) for s in scores]
                total = sum(weights)
                parts.append(sum((weights[s] / total) * heads_v[h][s] for s in range(t + 1)))
            new.append(xs[t] + np.concatenate(parts) @ W[p + "W_O"])
        xs = new
        targets = suppress.get(layer, set())
        out = []
        for x in xs:
            n = norm(x, W[p + "mlp_norm"])
            g, u = n @ W[p + "W_gate"], n @ W[p + "W_up"]
            acc = x.copy()
            for j in range(cfg.d_mlp):
                a = g[j] / (1.0 + math.exp(-g[j])) * u[j]
                if j in targets:
                    a = -k * abs(a)
                acc = acc + a * W[p + "W_down"][j]
            out.append(acc)
        xs = out
    if cfg.final_norm:
        xs = [norm(x, W["final_norm"]) for x in xs]
    return np.array([x @ W["W_U"] for x in xs])
