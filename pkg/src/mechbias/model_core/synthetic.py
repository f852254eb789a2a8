"""Seeded synthetic bundles with planted neurons.

A planted neuron ``(layer, index, token t, strength a)`` gets ``W_down[index]``
equal to ``a * u_t / |u_t|`` plus seeded noise of norm ``0.005 a``, where
``u_t`` is column ``t`` of ``W_U``. That gives the attribution and intervention
code a known ground truth.

Beyond that, a spec can reserve orthonormal *feature* directions in residual
space. Features are added to the embeddings of their carrier tokens, can be
shared by clusters of unembedding columns, can be read by planted neurons
(gate and up columns both set to the feature direction), and can be copied
forward in the sequence by a wired attention head that attends to carrier
tokens. With those pieces a spec describes a small model whose behaviour is
known in closed form.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DimTooSmall, InvalidSpec
from ..rng import SplitMix64, derive_seed
from .bundle import LAYER_TENSORS, ModelBundle, ModelConfig, assemble
from .tokenizer import Vocab

PLANT_NOISE = 0.005


@dataclass(frozen=True)
class PlantedNeuron:
    layer: int
    index: int
    group_label: str
    write_token_id: int
    strength: float
    read_feature: str | None = None
    read_gain: float = 1.0


@dataclass(frozen=True)
class Feature:
    name: str
    token_ids: tuple[int, ...] = ()
    scale: float = 1.0  # norm added to each carrier embedding
    carrier_scales: tuple[float, ...] = ()  # optional per-carrier override of ``scale``

    def scale_of(self, position: int) -> float:
        return self.carrier_scales[position] if self.carrier_scales else self.scale


@dataclass(frozen=True)
class UnembedCluster:
    feature: str
    token_ids: tuple[int, ...]
    weight: float = 1.0  # cluster columns are normalize(noise + weight * feature)


@dataclass(frozen=True)
class CueAttention:
    """Head ``head`` of ``layer`` attends to carriers of ``features`` and copies them."""

    layer: int
    head: int
    features: tuple[str, ...]
    score: float = 12.0
    gain: float = 1.0
    const_scale: float = 4.0
    flag_scale: float = 4.0


@dataclass(frozen=True)
class SyntheticSpec:
    d_model: int
    n_layers: int
    n_heads: int
    d_mlp: int
    vocab_size: int = 0
    vocab_tokens: tuple[str, ...] = ()
    planted_neurons: tuple[PlantedNeuron, ...] = ()
    seed: int = 0
    orthogonal_unembedding: bool = False
    features: tuple[Feature, ...] = ()
    unembed_clusters: tuple[UnembedCluster, ...] = ()
    cue_attention: tuple[CueAttention, ...] = ()
    weight_scale: float = 1.0
    embed_scale: float = 1.0
    rope_base: float = 10000.0
    norm_epsilon: float = 1e-5
    final_norm: bool = True

    @property
    def resolved_vocab_size(self) -> int:
        return len(self.vocab_tokens) if self.vocab_tokens else self.vocab_size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticSpec:
        data = dict(data)
        data["vocab_tokens"] = tuple(data.get("vocab_tokens", ()))
        data["planted_neurons"] = tuple(PlantedNeuron(**p) for p in data.get("planted_neurons", ()))
        data["features"] = tuple(
            Feature(f["name"], tuple(f.get("token_ids", ())), f.get("scale", 1.0), tuple(f.get("carrier_scales", ())))
            for f in data.get("features", ())
        )
        data["unembed_clusters"] = tuple(
            UnembedCluster(c["feature"], tuple(c["token_ids"]), c.get("weight", 1.0))
            for c in data.get("unembed_clusters", ())
        )
        data["cue_attention"] = tuple(
            CueAttention(**{**c, "features": tuple(c["features"])}) for c in data.get("cue_attention", ())
        )
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> SyntheticSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check(spec: SyntheticSpec) -> ModelConfig:
    vocab_size = spec.resolved_vocab_size
    config = ModelConfig(
        d_model=spec.d_model,
        n_layers=spec.n_layers,
        n_heads=spec.n_heads,
        d_mlp=spec.d_mlp,
        vocab_size=vocab_size,
        rope_base=spec.rope_base,
        norm_epsilon=spec.norm_epsilon,
        final_norm=spec.final_norm,
    )
    names = [f.name for f in spec.features]
    if len(set(names)) != len(names):
        raise InvalidSpec("feature names must be unique", subject="features")
    known = set(names)
    for f in spec.features:
        bad = [t for t in f.token_ids if not 0 <= t < vocab_size]
        if bad or not math.isfinite(f.scale):
            raise InvalidSpec(f"feature {f.name}: bad token ids {bad} or scale", subject=f.name)
        if f.carrier_scales and len(f.carrier_scales) != len(f.token_ids):
            raise InvalidSpec(f"feature {f.name}: carrier_scales must match token_ids", subject=f.name)
    for c in spec.unembed_clusters:
        if c.feature not in known:
            raise InvalidSpec(f"cluster references unknown feature {c.feature!r}", subject=c.feature)
        if any(not 0 <= t < vocab_size for t in c.token_ids):
            raise InvalidSpec(f"cluster {c.feature}: token id out of range", subject=c.feature)
    if spec.unembed_clusters and spec.orthogonal_unembedding:
        raise InvalidSpec("unembedding clusters cannot be combined with orthogonal unembedding")
    seen = set()
    for p in spec.planted_neurons:
        where = f"planted neuron ({p.layer}, {p.index})"
        if not (0 <= p.layer < spec.n_layers and 0 <= p.index < spec.d_mlp):
            raise InvalidSpec(f"{where} outside the model", subject=where)
        if not 0 <= p.write_token_id < vocab_size:
            raise InvalidSpec(f"{where}: write token {p.write_token_id} outside vocab", subject=where)
        if not (math.isfinite(p.strength) and math.isfinite(p.read_gain)):
            raise InvalidSpec(f"{where}: strength must be finite", subject=where)
        if p.read_feature is not None and p.read_feature not in known:
            raise InvalidSpec(f"{where}: unknown read feature {p.read_feature!r}", subject=where)
        if (p.layer, p.index) in seen:
            raise InvalidSpec(f"{where} planted twice", subject=where)
        seen.add((p.layer, p.index))
    for cue in spec.cue_attention:
        if not (0 <= cue.layer < spec.n_layers and 0 <= cue.head < spec.n_heads):
            raise InvalidSpec(f"cue attention head ({cue.layer}, {cue.head}) outside the model")
        if any(f not in known for f in cue.features):
            raise InvalidSpec("cue attention references an unknown feature")
        if len(cue.features) > config.d_head:
            raise InvalidSpec("cue attention copies more features than the head dimension")
    if spec.vocab_tokens and spec.vocab_size not in (0, len(spec.vocab_tokens)):
        raise InvalidSpec("vocab_size disagrees with vocab_tokens")
    return config


def _orthonormal(rng: SplitMix64, d: int, k: int) -> np.ndarray:
    """``d x k`` matrix with orthonormal columns, sign-fixed so diag(R) > 0."""
    if k == 0:
        return np.zeros((d, 0))
    q, r = np.linalg.qr(rng.normal((d, k)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _project_out(mat: np.ndarray, basis: np.ndarray, axis: int) -> np.ndarray:
    if basis.shape[1] == 0:
        return mat
    if axis == 1:  # rows live in residual space
        return mat - (mat @ basis) @ basis.T
    return mat - basis @ (basis.T @ mat)


def generate_synthetic_model(spec: SyntheticSpec) -> ModelBundle:
    config = _check(spec)
    d, m, v, n_layers = config.d_model, config.d_mlp, config.vocab_size, config.n_layers
    seed = spec.seed

    vocab = Vocab(tuple(spec.vocab_tokens)) if spec.vocab_tokens else Vocab(tuple(f"<t{i}>" for i in range(v)))

    use_cue = bool(spec.cue_attention)
    reserved_names = (["@const", "@flag"] if use_cue else []) + [f.name for f in spec.features]
    if len(reserved_names) > d:
        raise DimTooSmall(f"{len(reserved_names)} reserved directions do not fit in d_model={d}")
    basis = _orthonormal(SplitMix64(derive_seed(seed, "basis")), d, len(reserved_names))
    direction = {name: basis[:, i] for i, name in enumerate(reserved_names)}

    # embeddings: noise outside the reserved subspace, then features on carriers
    emb = SplitMix64(derive_seed(seed, "embed")).normal((v, d), spec.embed_scale)
    emb = _project_out(emb, basis, axis=1)
    for f in spec.features:
        for i, t in enumerate(f.token_ids):
            emb[t] += f.scale_of(i) * direction[f.name]
    carriers: set[int] = set()
    if use_cue:
        for cue in spec.cue_attention:
            for fname in cue.features:
                carriers.update(next(f for f in spec.features if f.name == fname).token_ids)
        const_scale = max(c.const_scale for c in spec.cue_attention)
        flag_scale = max(c.flag_scale for c in spec.cue_attention)
        emb += const_scale * direction["@const"]
        for t in sorted(carriers):
            emb[t] += flag_scale * direction["@flag"]

    # unembedding
    rng_u = SplitMix64(derive_seed(seed, "unembed"))
    if spec.orthogonal_unembedding:
        if v > d:
            raise DimTooSmall(f"orthogonal unembedding needs vocab_size <= d_model (got {v} > {d})")
        W_U = _orthonormal(rng_u, d, v)
    else:
        W_U = rng_u.normal((d, v), 1.0 / math.sqrt(d))
        W_U = _project_out(W_U, basis, axis=0)
        for c in spec.unembed_clusters:
            for t in c.token_ids:
                col = W_U[:, t] / max(np.linalg.norm(W_U[:, t]), 1e-12)
                col = col + c.weight * direction[c.feature]
                W_U[:, t] = col / np.linalg.norm(col)

    tensors: dict[str, np.ndarray] = {"token_embedding": emb}
    ws = spec.weight_scale
    for layer in range(n_layers):
        rng = SplitMix64(derive_seed(seed, "layer", layer))
        lw = {
            "attn_norm": np.ones(d),
            "W_Q": rng.normal((d, d), ws / math.sqrt(d)),
            "W_K": rng.normal((d, d), ws / math.sqrt(d)),
            "W_V": rng.normal((d, d), ws / math.sqrt(d)),
            "W_O": rng.normal((d, d), ws / math.sqrt(d)),
            "mlp_norm": np.ones(d),
            "W_gate": rng.normal((d, m), ws / math.sqrt(d)),
            "W_up": rng.normal((d, m), ws / math.sqrt(d)),
            "W_down": rng.normal((m, d), ws / math.sqrt(m)),
        }
        # only planted neurons may write along reserved directions
        lw["W_down"] = _project_out(lw["W_down"], basis, axis=1)
        for name in LAYER_TENSORS:
            tensors[f"layers.{layer}.{name}"] = lw[name]

    for cue in spec.cue_attention:
        _wire_cue_head(tensors, config, cue, direction, emb, sorted(carriers))

    rng_p = SplitMix64(derive_seed(seed, "planted"))
    for p in spec.planted_neurons:
        u = W_U[:, p.write_token_id]
        noise = rng_p.normal(d)
        noise *= PLANT_NOISE * abs(p.strength) / max(np.linalg.norm(noise), 1e-12)
        tensors[f"layers.{p.layer}.W_down"][p.index] = p.strength * u / np.linalg.norm(u) + noise
        if p.read_feature is not None:
            col = p.read_gain * direction[p.read_feature]
            tensors[f"layers.{p.layer}.W_gate"][:, p.index] = col
            tensors[f"layers.{p.layer}.W_up"][:, p.index] = col

    tensors["final_norm"] = np.ones(d)
    tensors["W_U"] = W_U
    return assemble(config, vocab, tensors)


def _wire_cue_head(tensors, config, cue, direction, emb, carriers) -> None:
    """Zero one head, then make it attend to carrier tokens and copy their features.

    Query and key meet in the lowest-frequency rotary pair so the score is
    nearly position independent. The score scale is calibrated on the mean
    normalised const/flag components of the carrier embeddings.
    """
    dh = config.d_head
    lo = cue.head * dh
    cols = slice(lo, lo + dh)
    pre = f"layers.{cue.layer}."
    for name in ("W_Q", "W_K", "W_V"):
        tensors[pre + name][:, cols] = 0.0
    tensors[pre + "W_O"][cols, :] = 0.0

    rms = np.sqrt(np.mean(emb**2, axis=1) + config.norm_epsilon)
    normed = emb / rms[:, None]
    const_c = float(np.mean(normed @ direction["@const"]))
    flag_c = float(np.mean(normed[carriers] @ direction["@flag"])) if carriers else 1.0
    gain = math.sqrt(cue.score * math.sqrt(dh) / max(const_c * flag_c, 1e-12))
    slot = lo + dh // 2 - 1
    tensors[pre + "W_Q"][:, slot] = gain * direction["@const"]
    tensors[pre + "W_K"][:, slot] = gain * direction["@flag"]
    for k, fname in enumerate(cue.features):
        value_col = lo + k
        tensors[pre + "W_V"][:, value_col] = direction[fname]
        tensors[pre + "W_O"][value_col, :] = cue.gain * direction[fname]
