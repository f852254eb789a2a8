from __future__ import annotations

import math

import numpy as np
import pytest

from mechbias.attribution import (
    NeuronCandidate,
    NeuronGroup,
    filter_by_alignment,
    load_keywords,
    logit_lens,
    normalize_token,
    score_neurons,
    select_candidates,
)
from mechbias.engine import NeuronRef
from mechbias.errors import InvalidSpec

from conftest import bundle_from, random_model


def identity_model(d=8):
    return bundle_from({"W_U": np.eye(d)}, d_model=d, n_layers=1, n_heads=2, d_mlp=4, vocab_size=d)


def brute_force_ranking(model, w, layer_window):
    """Python-level cosine and sort, independent of the vectorised implementation."""
    n = model.config.n_layers
    rows = []
    wn = math.sqrt(sum(float(x) * float(x) for x in w))
    for layer in range(max(0, n - layer_window), n):
        V = model.layers[layer].W_down
        for j in range(V.shape[0]):
            v = [float(x) for x in V[j]]
            vn = math.sqrt(sum(x * x for x in v))
            dot = sum(a * float(b) for a, b in zip(v, w))
            score = 0.0 if vn * wn == 0 else max(-1.0, min(1.0, dot / (vn * wn)))
            rows.append((layer, j, score))
    rows.sort(key=lambda r: (-r[2], r[0], r[1]))
    return [(layer, j) for layer, j, _ in rows]


def test_lens_identity_delta():
    m = identity_model()
    h = np.zeros(8)
    h[3] = 1.0
    assert logit_lens(m, h, 1).ids == [3]


def test_lens_zero_vector_tie_order():
    proj = logit_lens(identity_model(), np.zeros(8), 5)
    assert proj.ids == [0, 1, 2, 3, 4]
    assert all(e[2] == 0.0 for e in proj.entries)


def test_lens_orthogonal_combination():
    m = random_model(seed=2, d_model=16, vocab_size=12, orthogonal_unembedding=True)
    U = m.float64["W_U"]
    h = 2 * U[:, 5] + U[:, 9]
    assert logit_lens(m, h, 2).ids == [5, 9]


def test_lens_linearity():
    m = random_model(seed=3, d_model=16, vocab_size=30)
    rng = np.random.default_rng(0)
    h1, h2 = rng.normal(size=16), rng.normal(size=16)
    full = logit_lens(m, 2.5 * h1 - h2, 30)
    a = {e[0]: e[2] for e in logit_lens(m, h1, 30).entries}
    b = {e[0]: e[2] for e in logit_lens(m, h2, 30).entries}
    for i, _, v in full.entries:
        assert abs(v - (2.5 * a[i] - b[i])) < 1e-6


def test_score_self_first_and_negative_last():
    m = random_model(seed=4, d_model=16, n_layers=2, d_mlp=8)
    v = m.float64["layers.1.W_down"][5]
    ranked = score_neurons(m, v, 2)
    assert ranked[0].ref == NeuronRef(1, 5)
    assert ranked[0].score == pytest.approx(1.0)
    ranked_neg = score_neurons(m, -v, 2)
    assert ranked_neg[-1].ref == NeuronRef(1, 5)
    assert ranked_neg[-1].score == pytest.approx(-1.0)


def test_score_negative_last_with_orthogonal_rest():
    d = 8
    W_down = np.zeros((4, d))
    W_down[0, 0] = 1.0
    W_down[1, 1] = 2.0
    W_down[2, 2] = 1.0
    W_down[3, 3] = 1.0
    m = bundle_from({"layers.0.W_down": W_down}, d_model=d, n_layers=1, n_heads=2, d_mlp=4, vocab_size=4)
    ranked = score_neurons(m, -W_down[1], 1)
    assert ranked[-1].ref == NeuronRef(0, 1) and ranked[-1].score == -1.0
    # the orthogonal rest tie at 0 and keep index order
    assert [c.ref.index for c in ranked[:3]] == [0, 2, 3]


def test_ranking_oracle_with_ties_and_zero_rows():
    m = random_model(seed=7, d_model=16, n_layers=4, n_heads=2, d_mlp=64)
    tensors = {name: np.array(a) for name, a in m.tensors()}
    tensors["layers.2.W_down"][10] = tensors["layers.3.W_down"][4]  # exact tie across layers
    tensors["layers.1.W_down"][3] = 0.0  # zero-norm row scores 0
    m = bundle_from(tensors, m.vocab.tokens, **m.config.to_dict())
    w = np.random.default_rng(0).normal(size=16)
    got = [(c.ref.layer, c.ref.index) for c in score_neurons(m, w, 4)]
    assert got == brute_force_ranking(m, w, 4)


def test_layer_window_limits_layers():
    m = random_model(seed=1, n_layers=3, d_mlp=8)
    ranked = score_neurons(m, np.ones(m.config.d_model), 2)
    assert {c.ref.layer for c in ranked} == {1, 2}
    assert len(score_neurons(m, np.ones(m.config.d_model), 10)) == 24


def test_select_candidates():
    ranked = [NeuronCandidate(NeuronRef(0, i), 1.0 - i / 10) for i in range(5)]
    assert select_candidates(ranked, 50) == ranked
    assert select_candidates(ranked, 1) == [ranked[0]]
    for n in range(1, 5):
        assert select_candidates(ranked, n) == select_candidates(ranked, n + 1)[:n]


@pytest.mark.parametrize(
    "raw, norm",
    [("▁China", "china"), (" China", "china"), ("_China_", "china"), ("“Chinese”", "chinese"),
     ("ＡＳＩＡＮ", "asian"), ("[Asian]", "asian"), ("...", "")],
)
def test_normalize_token(raw, norm):
    assert normalize_token(raw) == norm


def _lens_model(tokens, d=16):
    """Model whose single neuron (0, 0) projects onto ``tokens`` in order of decreasing logit."""
    v = len(tokens)
    U = np.linalg.qr(np.random.default_rng(0).normal(size=(d, d)))[0][:, :v]
    W_down = np.zeros((2, d))
    W_down[0] = sum((v - i) * U[:, i] for i in range(v))
    W_down[1] = -W_down[0]
    return bundle_from({"W_U": U, "layers.0.W_down": W_down}, tokens, d_model=d, n_layers=1, n_heads=2, d_mlp=2,
                       vocab_size=v)


def test_filter_retains_planted_and_drops_junk():
    m = _lens_model(("Chinese", "China", "Beijing", ",", ".", "!", "?"))
    cands = [NeuronCandidate(NeuronRef(0, 0), 0.9), NeuronCandidate(NeuronRef(0, 1), 0.1)]
    group = filter_by_alignment(cands, ["asian", "chinese", "china", "beijing"], m, k=3, min_matches=2, group="Asian")
    assert group.refs == (NeuronRef(0, 0),)
    assert group.evaluated[0].matched_keywords == ("chinese", "china", "beijing")
    assert not group.evaluated[1].retained


def test_filter_min_matches_zero_keeps_everything():
    m = _lens_model((",", ".", "!", "?"))
    cands = [NeuronCandidate(NeuronRef(0, i), 0.0) for i in range(2)]
    assert len(filter_by_alignment(cands, ["asian"], m, k=2, min_matches=0).members) == 2


def test_filter_counts_repeated_tokens():
    # two distinct tokens normalising to the same keyword count as two hits
    m = _lens_model((" China", "China", ".", ","))
    cands = [NeuronCandidate(NeuronRef(0, 0), 1.0)]
    group = filter_by_alignment(cands, ["china"], m, k=2, min_matches=2)
    assert group.members and group.members[0].matched_keywords == ("china",)


def test_filter_rejects_empty_keywords_and_group_duplicates():
    m = _lens_model(("a", "b"))
    with pytest.raises(InvalidSpec):
        filter_by_alignment([], [], m)
    c = NeuronCandidate(NeuronRef(0, 0), 1.0)
    with pytest.raises(InvalidSpec):
        NeuronGroup("g", "direct", (c, c))


def test_packaged_keywords_cover_labels():
    kw = load_keywords()
    assert set(kw["creact"]) == {"Asian", "BlackAA", "White"}
    assert set(kw["toxigen"]) == {"Asian", "Black", "Latino", "MiddleEastern", "NativeAmerican"}
    assert {"chinese", "china", "beijing"} <= set(kw["toxigen"]["Asian"])
