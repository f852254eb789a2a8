from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mechbias.analysis import UNKNOWN, parse_label
from mechbias.attribution import normalize_token
from mechbias.corpus import CREACT_TEMPLATE, render_prompt
from mechbias.engine import intervene
from mechbias.model_core.tokenizer import Vocab, detokenize, tokenize
from mechbias.probe import ProbeHyper, loss_and_grad, softmax, train_probe

VOCAB = Vocab.build(["Pt", " ", "is", "a", "Asian", "White", ".", "[", "]", "ab", "abc"])
OPTIONS = ("White", "BlackAA", "Asian")

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)


@given(text=st.text(max_size=40))
def test_tokenize_round_trip(text):
    ids = tokenize(text, VOCAB).ids
    assert detokenize(ids, VOCAB) == text
    assert tokenize(detokenize(ids, VOCAB), VOCAB).ids == ids


@given(a=finite, k=st.sampled_from([5.0, 10.0, 20.0]))
def test_intervene_sign_rule(a, k):
    out = float(intervene(np.array([a]), k)[0])
    assert out <= 0
    assert abs(out) == k * abs(a)


@given(text=st.text(max_size=30))
def test_parse_label_is_total(text):
    assert parse_label(text, OPTIONS) in (*OPTIONS, UNKNOWN)


@given(text=st.text(max_size=30))
def test_normalize_is_idempotent(text):
    once = normalize_token(text)
    assert normalize_token(once) == once


@given(text=st.text(max_size=60))
def test_prompt_embeds_text_verbatim(text):
    out = render_prompt(CREACT_TEMPLATE, text)
    assert f'Clinical Note: "{text}"\n' in out
    assert out.endswith("Inferred Race or Ethnicity:")


@settings(max_examples=50)
@given(z=st.lists(finite, min_size=2, max_size=6), shift=finite)
def test_softmax_sums_to_one_and_is_shift_invariant(z, shift):
    z = np.array(z)
    p = softmax(z)
    assert p.sum() == pytest.approx(1.0)
    assert np.allclose(softmax(z + shift), p, atol=1e-9)


def test_probe_objective_matches_sklearn():
    """Independent optimiser: sklearn's L-BFGS on the same objective (C = 1 / (2 n lambda)).

    Its optimum must be stationary under our gradient, and our trained loss must
    sit just above the optimum (training stops on a small-improvement rule).
    """
    linear_model = pytest.importorskip("sklearn.linear_model")
    rng = np.random.default_rng(0)
    n, lam = 60, 0.05
    X = np.concatenate([rng.normal(loc=c, size=(20, 3)) for c in (-1.0, 0.0, 1.0)])
    labels = np.repeat(["a", "b", "c"], 20)
    y = np.repeat([0, 1, 2], 20)
    ref = linear_model.LogisticRegression(C=1 / (2 * n * lam), tol=1e-12, max_iter=10000).fit(X, labels)
    opt_loss, gW, gb = loss_and_grad(ref.coef_.T, ref.intercept_, X, y, lam)
    assert max(np.abs(gW).max(), np.abs(gb).max()) < 1e-6
    probe = train_probe(list(zip(X, labels)), ProbeHyper(lr=1.0, epochs=20000, l2_lambda=lam))
    ours = loss_and_grad(probe.W, probe.b, X, y, lam)[0]
    assert opt_loss <= ours < opt_loss + 1e-5
