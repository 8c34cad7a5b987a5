import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from policymark.corpus import make_corpus
from policymark.minilang import VOCAB
from policymark.ngram import BaseLM, EmptyCorpus, fit_ngram, fit_on_tasks, sample_token, softmax, token_entropy

V = VOCAB.size


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(1000, seed=21)


@pytest.fixture(scope="module")
def lm(corpus):
    return fit_on_tasks(corpus)


def test_two_token_corpus_by_hand():
    a, b = VOCAB.id("a"), VOCAB.id("b")
    lam = 0.1
    m = fit_ngram([[a, b]], order=2, lam=lam)
    assert m.next_probs([a])[b] == pytest.approx((1 + lam) / (1 + lam * V), abs=1e-15)


def test_large_lambda_tends_to_uniform():
    a, b = VOCAB.id("a"), VOCAB.id("b")
    m = fit_ngram([[a, b]], order=2, lam=1e9)
    assert np.allclose(m.next_probs([a]), 1.0 / V, atol=1e-8)


def test_argument_checks():
    with pytest.raises(EmptyCorpus):
        fit_ngram([[], []])
    with pytest.raises(ValueError):
        fit_ngram([[1, 2]], order=0)
    with pytest.raises(ValueError):
        fit_ngram([[1, 2]], lam=0.0)


def test_refit_is_identical(corpus):
    assert fit_on_tasks(corpus[:200]).table_digest() == fit_on_tasks(corpus[:200]).table_digest()


def test_unseen_context_backs_off_to_unigram(lm):
    weird = [VOCAB.id("return")] * 5 + [VOCAB.PAD]  # PAD never occurs in training text
    unigram = lm.next_probs([])
    assert np.array_equal(lm.next_logits(weird), np.log(unigram))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, V - 1), max_size=40))
def test_distributions_normalized(ctx):
    m = _SMALL
    assert abs(softmax(m.next_logits(ctx)).sum() - 1.0) < 1e-9
    assert np.all(np.isfinite(m.next_logits(ctx)))


_SMALL = fit_on_tasks(make_corpus(200, seed=3))


def test_after_fn_an_identifier_follows(lm):
    # "fn" is always followed by the function name, drawn from the identifier-like pool
    p = lm.next_probs([VOCAB.id("fn")])
    names = [VOCAB.id("f")] + VOCAB.variable_ids
    assert p[names].sum() >= 0.9


def test_frozen_after_queries(lm, corpus):
    before = lm.table_digest()
    for t in corpus[:50]:
        lm.next_logits(t.prompt)
    assert lm.table_digest() == before


def test_backoff_uses_longest_seen_context(lm, corpus):
    """On training text every observed continuation keeps its full-context count."""
    checked = 0
    for t in corpus[:100]:
        seq = t.prompt + t.reference + (VOCAB.END,)
        for i in range(1, len(seq)):
            ctx = seq[max(0, i - lm.order + 1):i]
            counts = lm.counts(ctx)
            total = sum(counts.values())
            assert counts.get(seq[i], 0) >= 1
            want = (counts[seq[i]] + lm.lam) / (total + lm.lam * V)
            assert lm.next_probs(seq[:i])[seq[i]] == pytest.approx(want, rel=1e-12)
            checked += 1
    assert checked > 500


def test_save_load_round_trip(lm, tmp_path):
    path = tmp_path / "lm.tsv"
    lm.save(path)
    back = BaseLM.load(path)
    assert back.table_digest() == lm.table_digest()
    assert (back.order, back.lam, back.min_count) == (lm.order, lm.lam, lm.min_count)
    path2 = tmp_path / "lm2.tsv"
    back.save(path2)
    assert hashlib.sha256(path.read_bytes()).digest() == hashlib.sha256(path2.read_bytes()).digest()


def test_load_rejects_other_vocabulary(lm, tmp_path):
    path = tmp_path / "lm.tsv"
    lm.save(path)
    path.write_text(path.read_text().replace(VOCAB.hash, "f" * 16, 1))
    with pytest.raises(ValueError):
        BaseLM.load(path)


def test_min_count_skips_rare_contexts():
    a, b, c = (VOCAB.id(x) for x in "abc")
    m1 = fit_ngram([[a, b], [c, a], [c, a]], order=2, lam=0.01, min_count=1)
    m2 = fit_ngram([[a, b], [c, a], [c, a]], order=2, lam=0.01, min_count=2)
    assert m1.next_probs([a])[b] > 0.5
    assert np.array_equal(m2.next_probs([a]), m2.next_probs([]))


# ------------------------------------------------------------------ sampling


def test_sampling_near_deterministic():
    logits = np.zeros(V)
    logits[5] = 50.0
    rng = np.random.default_rng(0)
    draws = [sample_token(logits, 1.0, rng) for _ in range(10_000)]
    assert np.mean(np.array(draws) == 5) > 0.999


def test_sampling_uniform_chi_square():
    rng = np.random.default_rng(1)
    draws = np.array([sample_token(np.zeros(V), 1.0, rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=V)
    expected = 100_000 / V
    sigma = np.sqrt(100_000 * (1 / V) * (1 - 1 / V))
    assert np.all(np.abs(counts - expected) < 4 * sigma)
    assert stats.chisquare(counts).pvalue > 1e-3


def test_sampling_same_seed_same_draws():
    lg = np.random.default_rng(2).normal(size=V)
    a = [sample_token(lg, 0.7, np.random.default_rng(9)) for _ in range(3)]
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    assert [sample_token(lg, 0.7, r1) for _ in range(50)] == [sample_token(lg, 0.7, r2) for _ in range(50)]
    assert len(a) == 3


def test_temperature_must_be_positive():
    with pytest.raises(ValueError):
        sample_token(np.zeros(V), 0.0, np.random.default_rng(0))


# ------------------------------------------------------------------- entropy


def test_entropy_cases():
    assert token_entropy(np.zeros(V)) == pytest.approx(np.log(V), abs=1e-12)
    assert np.log(46) == pytest.approx(3.8286, abs=1e-4)
    one_hot = np.full(V, -np.inf)
    one_hot[3] = 0.0
    assert token_entropy(one_hot) == 0.0
    two = np.full(V, -np.inf)
    two[:2] = 0.0
    assert token_entropy(two) == pytest.approx(np.log(2), abs=1e-12)


# ------------------------------------------------------- corpus entropy design


def test_entropy_design_property():
    """Identifier choices stay uncertain, grammar-forced keywords do not (>= 1,000 contexts each)."""
    tasks = make_corpus(1000, seed=77, prefix="held")
    model = fit_on_tasks(make_corpus(2000, seed=1))
    ident, keyword = [], []
    fn_id, else_id, let_id = VOCAB.id("fn"), VOCAB.id("else"), VOCAB.id("let")
    for t in tasks:
        seq = t.prompt + t.reference + (VOCAB.END,)
        for i in range(1, len(seq)):
            h = float(token_entropy(model.next_logits(seq[:i])))
            if seq[i - 1] == let_id:
                ident.append(h)
            if seq[i] in (fn_id, else_id):
                keyword.append(h)
    assert len(ident) >= 1000 and len(keyword) >= 1000
    assert np.mean(ident) > 0.5
    assert np.mean(keyword) < 0.1
