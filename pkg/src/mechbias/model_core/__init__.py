"""Model bundles, tokenizer and synthetic model generation."""

from .bundle import LayerWeights, ModelBundle, ModelConfig, assemble, expected_shapes, load_model, save_model
from .synthetic import CueAttention, Feature, PlantedNeuron, SyntheticSpec, UnembedCluster, generate_synthetic_model
from .tokenizer import TokenSequence, Vocab, detokenize, tokenize

__all__ = [
    "CueAttention",
    "Feature",
    "LayerWeights",
    "ModelBundle",
    "ModelConfig",
    "PlantedNeuron",
    "SyntheticSpec",
    "TokenSequence",
    "UnembedCluster",
    "Vocab",
    "assemble",
    "detokenize",
    "expected_shapes",
    "generate_synthetic_model",
    "load_model",
    "save_model",
    "tokenize",
]
