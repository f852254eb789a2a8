"""Logit lens, cosine neuron scoring and keyword-based alignment filtering.

A neuron's output vector is its row of ``W_down``. Neurons are ranked by the
cosine between that vector and a probe direction, the top candidates are
projected through the unembedding, and a candidate is kept when enough of its
top tokens name the target group.
"""

from __future__ import annotations

import json
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .engine import NeuronRef
from .errors import InvalidSpec, SchemaError
from .model_core.bundle import ModelBundle


@dataclass(frozen=True)
class TokenProjection:
    entries: tuple[tuple[int, str, float], ...]  # (token id, token string, logit)

    @property
    def ids(self) -> list[int]:
        return [e[0] for e in self.entries]

    @property
    def tokens(self) -> list[str]:
        return [e[1] for e in self.entries]

    def to_dict(self) -> list[dict]:
        return [{"id": i, "token": t, "logit": v} for i, t, v in self.entries]


@dataclass(frozen=True)
class NeuronCandidate:
    ref: NeuronRef
    score: float
    projection: TokenProjection | None = None
    retained: bool = False
    matched_keywords: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        out = {"neuron": self.ref.label, "layer": self.ref.layer, "index": self.ref.index, "score": self.score}
        out["retained"] = self.retained
        out["matched_keywords"] = list(self.matched_keywords)
        out["top_tokens"] = self.projection.to_dict() if self.projection else []
        return out


@dataclass(frozen=True)
class NeuronGroup:
    group: str
    mention: str  # "direct" | "indirect" | "n/a"
    members: tuple[NeuronCandidate, ...]
    evaluated: tuple[NeuronCandidate, ...] = field(default=(), compare=False)

    def __post_init__(self) -> None:
        refs = [m.ref for m in self.members]
        if len(set(refs)) != len(refs):
            raise InvalidSpec(f"duplicate members in neuron group {self.group}", subject=self.group)

    @property
    def refs(self) -> tuple[NeuronRef, ...]:
        return tuple(m.ref for m in self.members)

    @property
    def kind(self) -> str:
        return self.mention

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "mention": self.mention,
            "members": [m.ref.label for m in self.members],
            "candidates": [c.to_dict() for c in self.evaluated],
        }


def logit_lens(model: ModelBundle, h: np.ndarray, k: int = 20) -> TokenProjection:
    """Top-``k`` tokens of ``h @ W_U``; ties resolve to the smaller token id."""
    if k < 1:
        raise InvalidSpec(f"k must be >= 1, got {k}", subject="k")
    logits = np.asarray(h, dtype=np.float64) @ model.float64["W_U"]
    ids = np.arange(logits.size)
    order = np.lexsort((ids, -logits))[:k]
    vocab = model.vocab
    return TokenProjection(tuple((int(i), vocab.tokens[i], float(logits[i])) for i in order))


def cosine_scores(model: ModelBundle, direction: np.ndarray, layers: Iterable[int]) -> dict[int, np.ndarray]:
    w = np.asarray(direction, dtype=np.float64)
    w_norm = float(np.linalg.norm(w))
    out = {}
    for layer in layers:
        V = model.float64[f"layers.{layer}.W_down"]
        norms = np.linalg.norm(V, axis=1)
        denom = norms * w_norm
        dots = V @ w
        scores = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
        out[layer] = np.clip(scores, -1.0, 1.0)
    return out


def score_neurons(model: ModelBundle, direction: np.ndarray, layer_window: int = 4) -> list[NeuronCandidate]:
    """Rank every neuron of the last ``layer_window`` layers by cosine with ``direction``.

    Descending score; ties by (layer, index). Zero-norm vectors score 0.
    """
    if layer_window < 1:
        raise InvalidSpec(f"layer_window must be >= 1, got {layer_window}", subject="layer_window")
    if np.shape(direction) != (model.config.d_model,):
        raise InvalidSpec(f"direction must have shape ({model.config.d_model},)", subject="direction")
    n_layers = model.config.n_layers
    layers = range(max(0, n_layers - layer_window), n_layers)
    scores = cosine_scores(model, direction, layers)
    all_layers = np.concatenate([np.full(s.size, layer) for layer, s in scores.items()])
    all_index = np.concatenate([np.arange(s.size) for s in scores.values()])
    all_scores = np.concatenate(list(scores.values()))
    order = np.lexsort((all_index, all_layers, -all_scores))
    return [
        NeuronCandidate(NeuronRef(int(all_layers[i]), int(all_index[i])), float(all_scores[i]))
        for i in order
    ]


def select_candidates(ranked: Sequence[NeuronCandidate], top_n: int = 20) -> list[NeuronCandidate]:
    if top_n < 1:
        raise InvalidSpec(f"top_n must be >= 1, got {top_n}", subject="top_n")
    return list(ranked[:top_n])


WORD_MARKERS = "_\u2581"  # underscore and the SentencePiece word-boundary mark


def _strippable(ch: str) -> bool:
    return ch.isspace() or ch in WORD_MARKERS or unicodedata.category(ch)[0] in "PZ"


def normalize_token(token: str) -> str:
    """NFKC, case-fold, then strip leading/trailing punctuation, underscores, word marks and spaces."""
    text = unicodedata.normalize("NFKC", token).casefold()
    start, end = 0, len(text)
    while start < end and _strippable(text[start]):
        start += 1
    while end > start and _strippable(text[end - 1]):
        end -= 1
    return text[start:end]


def filter_by_alignment(
    candidates: Sequence[NeuronCandidate],
    keywords: Sequence[str],
    model: ModelBundle,
    k: int = 20,
    min_matches: int = 2,
    *,
    group: str = "",
    mention: str = "n/a",
) -> NeuronGroup:
    """Keep candidates whose top-``k`` tokens hit at least ``min_matches`` keywords.

    A hit is one projected token whose normalised form equals a normalised
    keyword; repeated tokens count separately. ``min_matches=0`` keeps every
    candidate.
    """
    if not keywords:
        raise InvalidSpec(f"keyword list for {group or 'group'} is empty", subject=group or "keywords")
    if min_matches < 0:
        raise InvalidSpec(f"min_matches must be >= 0, got {min_matches}", subject="min_matches")
    wanted = {normalize_token(w) for w in keywords} - {""}
    evaluated = []
    for cand in candidates:
        projection = logit_lens(model, model.float64[f"layers.{cand.ref.layer}.W_down"][cand.ref.index], k)
        hits = [normalize_token(t) for t in projection.tokens]
        hits = [t for t in hits if t in wanted]
        matched = tuple(dict.fromkeys(hits))
        evaluated.append(
            NeuronCandidate(cand.ref, cand.score, projection, retained=len(hits) >= min_matches, matched_keywords=matched)
        )
    members = tuple(c for c in evaluated if c.retained)
    return NeuronGroup(group=group, mention=mention, members=members, evaluated=tuple(evaluated))


@lru_cache(maxsize=None)
def _default_keywords() -> dict:
    text = resources.files("mechbias").joinpath("data/keywords.json").read_text(encoding="utf-8")
    return json.loads(text)


def load_keywords(path: str | Path | None = None) -> dict:
    """Per-dataset, per-group keyword lists (``{"creact": {"Asian": [...]}, ...}``)."""
    if path is None:
        return _default_keywords()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read keywords {path}: {exc}", subject=str(path)) from exc
    if not isinstance(data, dict):
        raise SchemaError("keywords file must hold an object", subject=str(path))
    return data
