from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from mechbias.model_core.bundle import ModelConfig, assemble, expected_shapes
from mechbias.model_core.synthetic import SyntheticSpec, generate_synthetic_model
from mechbias.model_core.tokenizer import Vocab

FIXTURES = Path(str(resources.files("mechbias").joinpath("data/fixtures")))


def random_model(seed: int = 0, d_model: int = 16, n_layers: int = 2, n_heads: int = 2, d_mlp: int = 8,
                 vocab_size: int = 12, **kw):
    spec = SyntheticSpec(d_model=d_model, n_layers=n_layers, n_heads=n_heads, d_mlp=d_mlp,
                         vocab_size=vocab_size, seed=seed, **kw)
    return generate_synthetic_model(spec)


def bundle_from(tensors: dict, vocab_tokens=None, **config_kw):
    """Assemble a bundle from explicit tensors; missing tensors default to zeros/ones."""
    cfg = ModelConfig(**config_kw)
    full = {}
    for name, shape in expected_shapes(cfg).items():
        if name in tensors:
            full[name] = np.asarray(tensors[name], dtype=np.float64)
        elif name.endswith("norm"):
            full[name] = np.ones(shape)
        else:
            full[name] = np.zeros(shape)
    tokens = vocab_tokens or tuple(f"<t{i}>" for i in range(cfg.vocab_size))
    return assemble(cfg, Vocab(tuple(tokens)), full)


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def fixture_copy(tmp_path) -> Path:
    """A writable copy of the shipped fixtures (configs write relative ``out/`` dirs)."""
    dest = tmp_path / "fixtures"
    shutil.copytree(FIXTURES, dest)
    return dest
