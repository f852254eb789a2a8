"""Decoder-only transformer weights with SwiGLU MLPs.

Architecture pinned by this package (pre-norm, rotary, untied unembedding)::

    x = token_embedding[ids]
    for each layer:
        x = x + Attn(RMSNorm(x) * attn_norm)
        x = x + MLP(RMSNorm(x) * mlp_norm)
    logits = (RMSNorm(x) * final_norm if config.final_norm else x) @ W_U

with ``MLP(x) = (silu(x W_gate) * (x W_up)) W_down``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import InvalidSpec, MissingTensor, NonFiniteWeight, SchemaError, ShapeMismatch
from .container import read_container, write_container
from .tokenizer import Vocab

LAYER_TENSORS = ("attn_norm", "W_Q", "W_K", "W_V", "W_O", "mlp_norm", "W_gate", "W_up", "W_down")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_layers: int
    n_heads: int
    d_mlp: int
    vocab_size: int
    rope_base: float = 10000.0
    norm_epsilon: float = 1e-5
    final_norm: bool = True

    def __post_init__(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "d_mlp"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidSpec(f"{name} must be a positive int, got {value!r}", subject=name)
        if self.vocab_size < 2:
            raise InvalidSpec(f"vocab_size must be >= 2, got {self.vocab_size}", subject="vocab_size")
        if self.d_model % self.n_heads:
            raise InvalidSpec(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}", subject="n_heads"
            )
        if (self.d_model // self.n_heads) % 2:
            raise InvalidSpec("head dimension must be even for rotary embeddings", subject="n_heads")
        if not (np.isfinite(self.rope_base) and self.rope_base > 0):
            raise InvalidSpec("rope_base must be a positive real", subject="rope_base")
        if not (np.isfinite(self.norm_epsilon) and self.norm_epsilon > 0):
            raise InvalidSpec("norm_epsilon must be a positive real", subject="norm_epsilon")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        missing = {"d_model", "n_layers", "n_heads", "d_mlp", "vocab_size"} - set(data)
        if missing:
            raise SchemaError(f"config missing fields {sorted(missing)}", subject="config")
        kwargs = {k: v for k, v in data.items() if k in known}
        return cls(**kwargs)


def expected_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, v = config.d_model, config.d_mlp, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"token_embedding": (v, d)}
    per_layer = {
        "attn_norm": (d,),
        "W_Q": (d, d),
        "W_K": (d, d),
        "W_V": (d, d),
        "W_O": (d, d),
        "mlp_norm": (d,),
        "W_gate": (d, m),
        "W_up": (d, m),
        "W_down": (m, d),
    }
    for layer in range(config.n_layers):
        for name, shape in per_layer.items():
            shapes[f"layers.{layer}.{name}"] = shape
    shapes["final_norm"] = (d,)
    shapes["W_U"] = (d, v)
    return shapes


@dataclass(frozen=True, eq=False)
class LayerWeights:
    attn_norm: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    mlp_norm: np.ndarray
    W_gate: np.ndarray
    W_up: np.ndarray
    W_down: np.ndarray


@dataclass(frozen=True, eq=False)
class ModelBundle:
    config: ModelConfig
    vocab: Vocab
    token_embedding: np.ndarray
    layers: tuple[LayerWeights, ...]
    final_norm: np.ndarray
    W_U: np.ndarray

    def tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Yield ``(name, array)`` in canonical manifest order."""
        yield "token_embedding", self.token_embedding
        for i, layer in enumerate(self.layers):
            for name in LAYER_TENSORS:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "final_norm", self.final_norm
        yield "W_U", self.W_U

    @cached_property
    def float64(self) -> dict[str, np.ndarray]:
        """Float64 copies of every tensor, computed once per bundle for the engine."""
        return {name: array.astype(np.float64) for name, array in self.tensors()}

    def neuron_output(self, layer: int, index: int) -> np.ndarray:
        """Output vector of a neuron: row ``index`` of that layer's W_down."""
        return self.layers[layer].W_down[index]


def _freeze(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float32, copy=True)
    out.setflags(write=False)
    return out


def validate_tensors(config: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
    for name, shape in expected_shapes(config).items():
        if name not in tensors:
            raise MissingTensor(f"tensor {name} is missing", subject=name)
        actual = tuple(np.shape(tensors[name]))
        if actual != shape:
            raise ShapeMismatch(f"tensor {name}: expected shape {list(shape)}, got {list(actual)}", subject=name)
        array = np.asarray(tensors[name])
        bad = ~np.isfinite(array)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise NonFiniteWeight(f"tensor {name} has a non-finite entry at {list(where)}", subject=name)


def assemble(config: ModelConfig, vocab: Vocab, tensors: dict[str, np.ndarray]) -> ModelBundle:
    """Validate a flat tensor dict and build an immutable bundle."""
    if len(vocab) != config.vocab_size:
        raise ShapeMismatch(
            f"vocab has {len(vocab)} tokens but config.vocab_size={config.vocab_size}", subject="vocab"
        )
    validate_tensors(config, tensors)
    layers = tuple(
        LayerWeights(**{name: _freeze(tensors[f"layers.{i}.{name}"]) for name in LAYER_TENSORS})
        for i in range(config.n_layers)
    )
    return ModelBundle(
        config=config,
        vocab=vocab,
        token_embedding=_freeze(tensors["token_embedding"]),
        layers=layers,
        final_norm=_freeze(tensors["final_norm"]),
        W_U=_freeze(tensors["W_U"]),
    )


def save_model(bundle: ModelBundle, manifest_path: str | Path) -> Path:
    """Write ``<name>.json`` + ``<name>.bin`` + ``<name>.vocab.tsv``."""
    manifest_path = Path(manifest_path)
    vocab_name = manifest_path.with_suffix(".vocab.tsv").name
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    bundle.vocab.save(manifest_path.parent / vocab_name)
    return write_container(
        manifest_path,
        dict(bundle.tensors()),
        kind="model",
        extra={"config": bundle.config.to_dict(), "vocab": vocab_name},
    )


def load_model(manifest_path: str | Path) -> ModelBundle:
    manifest_path = Path(manifest_path)
    manifest, tensors = read_container(manifest_path)
    if manifest.get("kind") != "model":
        raise SchemaError(f"manifest kind is {manifest.get('kind')!r}, expected 'model'", subject=str(manifest_path))
    if "config" not in manifest or "vocab" not in manifest:
        raise SchemaError("model manifest needs 'config' and 'vocab'", subject=str(manifest_path))
    config = ModelConfig.from_dict(manifest["config"])
    vocab = Vocab.load(manifest_path.parent / manifest["vocab"])
    return assemble(config, vocab, tensors)
