"""Forward passes with residual/activation capture and in-flight neuron intervention.

Weights are stored as float32; all arithmetic here runs in float64 on exact
upcasts of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import EmptyInput, InvalidSpec, LayerNotCaptured
from .model_core.bundle import ModelBundle
from .model_core.tokenizer import TokenSequence, detokenize

MEAN_ALL_POSITIONS = "mean_all_positions"
LAST_INPUT_TOKEN = "last_input_token"
POOLINGS = (MEAN_ALL_POSITIONS, LAST_INPUT_TOKEN)


@dataclass(frozen=True, order=True)
class NeuronRef:
    """An MLP neuron; ``layer`` is 0-based internally."""

    layer: int
    index: int

    @property
    def label(self) -> str:
        # reports use 1-based layers: MLP.v^{layer}_{index}
        return f"MLP.v^{self.layer + 1}_{self.index}"

    def to_dict(self) -> dict:
        return {"layer": self.layer, "index": self.index, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> NeuronRef:
        return cls(int(data["layer"]), int(data["index"]))


@dataclass(frozen=True)
class CapturePlan:
    residual_layers: frozenset[int] = frozenset()
    neurons: frozenset[NeuronRef] = frozenset()
    pooling: str = MEAN_ALL_POSITIONS

    def __post_init__(self) -> None:
        object.__setattr__(self, "residual_layers", frozenset(self.residual_layers))
        object.__setattr__(self, "neurons", frozenset(self.neurons))
        if self.pooling not in POOLINGS:
            raise InvalidSpec(f"pooling must be one of {POOLINGS}, got {self.pooling!r}", subject="pooling")


@dataclass(frozen=True)
class InterventionPolicy:
    """Force targeted activations negative: ``a -> -k|a|`` at every position."""

    targets: frozenset[NeuronRef]
    factor: float
    enabled: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", frozenset(self.targets))
        if not (np.isfinite(self.factor) and self.factor > 0):
            raise InvalidSpec(f"intervention factor must be > 0, got {self.factor}", subject="factor")


def intervene(a: np.ndarray, k: float) -> np.ndarray:
    """Sign-forcing transform: positive activations times -k, negative times k, zero stays 0."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(a > 0, -k * a, np.where(a < 0, k * a, 0.0))


@dataclass
class ForwardTrace:
    ids: np.ndarray
    logits: np.ndarray
    residual: dict[int, np.ndarray] = field(default_factory=dict)
    activation: dict[NeuronRef, np.ndarray] = field(default_factory=dict)
    mlp_input: dict[int, np.ndarray] = field(default_factory=dict)
    valid: np.ndarray | None = None  # non-pad positions


def silu(x: np.ndarray) -> np.ndarray:
    # x * sigmoid(x), computed without overflow for large |x|
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return x * sig


def rms_norm(x: np.ndarray, scale: np.ndarray, eps: float) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * scale


def rope_tables(n_pos: int, d_head: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    half = d_head // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / d_head)
    angles = np.arange(n_pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate pairs ``(i, i + d_head/2)``; ``x`` is (positions, heads, d_head)."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[:, None, :], sin[:, None, :]
    return np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)


def attention(xn: np.ndarray, W: dict, prefix: str, n_heads: int, cos, sin) -> np.ndarray:
    T, d = xn.shape
    dh = d // n_heads
    q = (xn @ W[prefix + "W_Q"]).reshape(T, n_heads, dh)
    k = (xn @ W[prefix + "W_K"]).reshape(T, n_heads, dh)
    v = (xn @ W[prefix + "W_V"]).reshape(T, n_heads, dh)
    q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
    scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(dh)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    scores = np.where(mask[None], -np.inf, scores)
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = np.einsum("hqk,khd->qhd", probs, v).reshape(T, d)
    return out @ W[prefix + "W_O"]


def mlp_forward(x: np.ndarray, layer) -> tuple[np.ndarray, np.ndarray]:
    """SwiGLU MLP on an (already normalised) input; returns ``(output, activations)``.

    ``activations[j] = silu(x W_gate)_j * (x W_up)_j`` and
    ``output = sum_j activations[j] * W_down[j]``.
    """
    x = np.asarray(x, dtype=np.float64)
    gate = x @ np.asarray(layer.W_gate, dtype=np.float64)
    up = x @ np.asarray(layer.W_up, dtype=np.float64)
    a = silu(gate) * up
    return a @ np.asarray(layer.W_down, dtype=np.float64), a


def _check_refs(model: ModelBundle, layers: Iterable[int], refs: Iterable[NeuronRef]) -> None:
    cfg = model.config
    for layer in layers:
        if not 0 <= layer < cfg.n_layers:
            raise InvalidSpec(f"layer {layer} outside model with {cfg.n_layers} layers", subject=str(layer))
    for ref in refs:
        if not (0 <= ref.layer < cfg.n_layers and 0 <= ref.index < cfg.d_mlp):
            raise InvalidSpec(f"neuron {ref.label} outside the model", subject=ref.label)


def forward(
    model: ModelBundle,
    tokens,
    plan: CapturePlan | None = None,
    policy: InterventionPolicy | None = None,
) -> ForwardTrace:
    ids = np.asarray(tokens.ids if isinstance(tokens, TokenSequence) else tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise EmptyInput("forward needs a non-empty 1-D token list", subject="tokens")
    cfg = model.config
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InvalidSpec("token id outside vocab", subject="tokens")
    plan = plan or CapturePlan()
    _check_refs(model, plan.residual_layers, plan.neurons)
    targets: dict[int, list[int]] = {}
    if policy is not None and policy.enabled:
        _check_refs(model, (), policy.targets)
        for ref in sorted(policy.targets):
            targets.setdefault(ref.layer, []).append(ref.index)
    captured: dict[int, list[NeuronRef]] = {}
    for ref in sorted(plan.neurons):
        captured.setdefault(ref.layer, []).append(ref)

    W = model.float64
    eps = cfg.norm_epsilon
    T = ids.size
    cos, sin = rope_tables(T, cfg.d_head, cfg.rope_base)
    pad = model.vocab.pad_id
    trace = ForwardTrace(ids=ids, logits=np.empty(0), valid=(ids != pad) if pad is not None else np.ones(T, bool))

    x = W["token_embedding"][ids]
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        x = x + attention(rms_norm(x, W[pre + "attn_norm"], eps), W, pre, cfg.n_heads, cos, sin)
        xn = rms_norm(x, W[pre + "mlp_norm"], eps)
        a = silu(xn @ W[pre + "W_gate"]) * (xn @ W[pre + "W_up"])
        if layer in targets:
            cols = targets[layer]
            a[:, cols] = intervene(a[:, cols], policy.factor)
        x = x + a @ W[pre + "W_down"]
        if layer in captured:
            trace.mlp_input[layer] = xn
            for ref in captured[layer]:
                trace.activation[ref] = a[:, ref.index].copy()
        if layer in plan.residual_layers:
            trace.residual[layer] = x.copy()
    if cfg.final_norm:
        x = rms_norm(x, W["final_norm"], eps)
    trace.logits = x @ W["W_U"]
    return trace


def pool(values: np.ndarray, valid: np.ndarray | None, pooling: str) -> np.ndarray:
    """Pool per-position values (positions first) over non-pad positions."""
    if valid is None:
        valid = np.ones(values.shape[0], dtype=bool)
    if not valid.any():
        raise EmptyInput("no non-pad positions to pool")
    if pooling == MEAN_ALL_POSITIONS:
        return values[valid].mean(axis=0)
    if pooling == LAST_INPUT_TOKEN:
        return values[np.flatnonzero(valid)[-1]]
    raise InvalidSpec(f"unknown pooling {pooling!r}", subject="pooling")


def pool_residual(trace: ForwardTrace, layer: int, pooling: str = MEAN_ALL_POSITIONS) -> np.ndarray:
    if layer not in trace.residual:
        raise LayerNotCaptured(f"residual of layer {layer} was not captured", subject=str(layer))
    return pool(trace.residual[layer], trace.valid, pooling)


def pool_activation(trace: ForwardTrace, ref: NeuronRef, pooling: str = MEAN_ALL_POSITIONS) -> float:
    if ref not in trace.activation:
        raise LayerNotCaptured(f"activation of {ref.label} was not captured", subject=ref.label)
    return float(pool(trace.activation[ref], trace.valid, pooling))


def greedy_generate(
    model: ModelBundle,
    prompt,
    max_new: int,
    policy: InterventionPolicy | None = None,
    *,
    stop_at_eos: bool = True,
) -> TokenSequence:
    """Argmax decoding (ties -> lowest id); returns only the new tokens."""
    if max_new < 1:
        raise InvalidSpec(f"max_new must be >= 1, got {max_new}", subject="max_new")
    ids = list(prompt.ids if isinstance(prompt, TokenSequence) else prompt)
    if not ids:
        raise EmptyInput("prompt is empty", subject="prompt")
    eos = model.vocab.eos_id
    new: list[int] = []
    for _ in range(max_new):
        logits = forward(model, ids + new, policy=policy).logits[-1]
        nxt = int(np.argmax(logits))
        new.append(nxt)
        if stop_at_eos and nxt == eos:
            break
    return TokenSequence(tuple(new), detokenize(new, model.vocab))
