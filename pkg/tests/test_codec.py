import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from policymark.codec import (
    DomainError,
    WatermarkConfig,
    bias_logits,
    context_window,
    decide,
    detect,
    detect_many,
    generate_group,
    generate_watermarked,
    head_anchor,
    reconstruct_decisions,
    sequence_windows,
    watermark_head,
    watermark_head_backward,
    z_score,
)
from policymark.corpus import make_corpus
from policymark.minilang import VOCAB
from policymark.ngram import fit_ngram, fit_on_tasks, log_softmax
from policymark.nn import PolicyConfig
from policymark.policy import Policy, gradient_check

V = VOCAB.size
SMALL = PolicyConfig(V, d_model=16, n_layers=1, n_heads=2, d_ff=32)


@pytest.fixture(scope="module")
def tasks():
    return make_corpus(300, seed=4)


@pytest.fixture(scope="module")
def lm(tasks):
    return fit_on_tasks(tasks)


@pytest.fixture(scope="module")
def policy():
    return Policy.init(PolicyConfig(V), 0)


# ------------------------------------------------------------------ z-score


def test_z_examples():
    assert z_score(5, 10, 0.5) == 0.0
    assert z_score(10, 10, 0.5) == pytest.approx(np.sqrt(10), abs=1e-12)
    assert z_score(0, 4, 0.5) == -2.0


@settings(max_examples=300)
@given(st.integers(1, 10_000), st.floats(0.01, 0.99), st.data())
def test_z_matches_recomputation(T, gamma, data):
    n = data.draw(st.integers(0, T))
    want = (n - T * gamma) / (T * gamma * (1 - gamma)) ** 0.5
    assert z_score(n, T, gamma) == pytest.approx(want, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("args", [(1, 0, 0.5), (3, 2, 0.5), (-1, 4, 0.5), (1, 4, 0.0), (1, 4, 1.0)])
def test_z_domain(args):
    with pytest.raises(DomainError):
        z_score(*args)


# ------------------------------------------------------------- config, bias


def test_config_validation():
    for bad in ({"delta": -1}, {"gamma": 0}, {"tau": 0}, {"noise": "x"}, {"force_gate": 2}, {"temperature": 0}):
        with pytest.raises(ValueError):
            WatermarkConfig(**bad)
    assert WatermarkConfig().replace(delta=3.0).delta == 3.0


def test_bias_adds_delta_to_green_only():
    base = np.arange(4.0)
    member = np.array([True, False, True, False])
    assert bias_logits(base, 1, member, 2.0).tolist() == [2.0, 1.0, 4.0, 3.0]
    assert bias_logits(base, 0, member, 2.0).tolist() == base.tolist()


# ------------------------------------------------------------------ windows


def test_context_window_pads_and_resets():
    E, a, b = VOCAB.END, VOCAB.id("a"), VOCAB.id("b")
    P = VOCAB.PAD
    assert context_window([], 4).tolist() == [P] * 4
    assert context_window([a, b], 4).tolist() == [P, P, a, b]
    assert context_window([a, b, E], 4).tolist() == [P] * 4
    assert context_window([a, b, E, b], 4).tolist() == [P, P, P, b]
    assert context_window([a] * 9, 4).tolist() == [a] * 4


@settings(max_examples=60)
@given(st.lists(st.integers(1, V - 1), max_size=30))
def test_sequence_windows_agree_with_incremental(seq):
    W = sequence_windows(seq, 4)
    for t in range(len(seq)):
        assert W[t].tolist() == context_window(seq[:t], 4).tolist()


def test_empty_window_is_never_gated(policy):
    cfg = WatermarkConfig()
    wins = np.full((3, 4), VOCAB.PAD)
    dec = decide(policy, wins, cfg)
    assert dec.w.tolist() == [0, 0, 0]
    assert not dec.controlled.any()
    assert decide(policy, wins, cfg.replace(force_gate=1)).w.tolist() == [1, 1, 1]


# -------------------------------------------------------------- generation


def test_delta_zero_matches_base_distribution(lm, policy, tasks):
    """With delta = 0 the first token follows the base model (chi-square, 20k draws)."""
    cfg = WatermarkConfig(delta=0.0, max_completion_length=1, force_gate=1)
    prompt = tasks[0].prompt
    rngs = [np.random.default_rng([5, i]) for i in range(20_000)]
    recs = generate_group(lm, policy, [prompt] * len(rngs), cfg, rngs)
    counts = np.bincount([r.completion[0] for r in recs], minlength=V)
    p = np.exp(lm.next_logits(prompt))
    p[VOCAB.PAD] = 0.0
    p /= p.sum()
    keep = p * len(rngs) >= 5
    obs, exp = counts[keep], p[keep] * len(rngs)
    if (~keep).any() and p[~keep].sum() > 0:  # pool rare tokens into one cell
        obs, exp = np.append(obs, counts[~keep].sum()), np.append(exp, p[~keep].sum() * len(rngs))
    assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_forced_gate_green_fraction_on_flat_model(policy):
    """Flat base model, gate forced on: P(green) = gamma e^delta / (gamma e^delta + 1 - gamma)."""
    flat = fit_ngram([list(range(1, V))], order=1, lam=1e6)
    cfg = WatermarkConfig(force_gate=1, max_completion_length=400)
    prompt = [VOCAB.id("fn")]
    recs = generate_group(flat, policy, [prompt] * 10, cfg, [np.random.default_rng(i) for i in range(10)])
    green = np.concatenate([r.in_green for r in recs])
    k = 23
    # PAD is banned, and it is red or green depending on the window; average over both
    pg = np.mean([k * np.e**2 / (k * np.e**2 + (V - k - 1)), (k - 1) * np.e**2 / ((k - 1) * np.e**2 + (V - k))])
    assert abs(green.mean() - pg) < 4 * np.sqrt(pg * (1 - pg) / len(green)) + 0.01


def test_generation_deterministic_per_rng(lm, policy, tasks):
    cfg = WatermarkConfig()
    a = generate_watermarked(lm, policy, tasks[1].prompt, cfg, np.random.default_rng(3))
    b = generate_watermarked(lm, policy, tasks[1].prompt, cfg, np.random.default_rng(3))
    assert a.to_bytes() == b.to_bytes()
    assert a.completion[-1] == VOCAB.END or len(a) == cfg.max_completion_length
    assert VOCAB.PAD not in a.completion


def test_round_trip_reconstructs_every_decision(lm, policy, tasks):
    cfg = WatermarkConfig()
    rngs = [np.random.default_rng([8, i]) for i in range(40)]
    recs = generate_group(lm, policy, [t.prompt for t in tasks[:40]], cfg, rngs)
    for r in recs:
        w, in_g = reconstruct_decisions(policy, r.completion, cfg)
        assert np.array_equal(w, r.gate)
        assert np.array_equal(in_g, r.in_green)


def test_locality(policy):
    """Decisions at t depend only on the c tokens before t (within the same program)."""
    rng = np.random.default_rng(0)
    cfg = WatermarkConfig()
    seq = rng.integers(1, V, size=30)
    seq = seq[seq != VOCAB.END]
    w0, g0 = reconstruct_decisions(policy, seq, cfg)
    changed = seq.copy()
    changed[3] = VOCAB.id("7") if seq[3] != VOCAB.id("7") else VOCAB.id("8")
    w1, g1 = reconstruct_decisions(policy, changed, cfg)
    far = np.r_[0:4, 9:len(seq)]
    assert np.array_equal(w0[far], w1[far])
    dec0 = decide(policy, sequence_windows(seq, 4), cfg)
    dec1 = decide(policy, sequence_windows(changed, 4), cfg)
    assert np.array_equal(dec0.member[far], dec1.member[far])


# --------------------------------------------------------------- detection


def test_detect_counts_and_insufficient_data(policy):
    cfg = WatermarkConfig(force_gate=1)
    rep = detect(policy, [VOCAB.id("a")] * 5, cfg)
    assert rep.T == 5 and rep.z is None and rep.verdict == "insufficient_data"
    assert rep.score == pytest.approx(z_score(rep.N_G, 5, 0.5))
    empty = detect(policy, [], cfg)
    assert empty.T == 0 and empty.score == 0.0


def test_detect_many_matches_detect(lm, policy, tasks):
    cfg = WatermarkConfig()
    seqs = [t.reference for t in tasks[:15]] + [()]
    for a, b in zip(detect_many(policy, seqs, cfg), [detect(policy, s, cfg) for s in seqs]):
        assert (a.T, a.N_G, a.z, a.verdict) == (b.T, b.N_G, b.z, b.verdict)


def test_detection_of_forced_watermark(lm, policy, tasks):
    cfg = WatermarkConfig(force_gate=1)
    rngs = [np.random.default_rng([9, i]) for i in range(30)]
    recs = generate_group(lm, policy, [t.prompt for t in tasks[:30]], cfg, rngs)
    zs = [detect(policy, r.completion, cfg).score for r in recs]
    assert np.mean(zs) > 1.0


def test_report_serialises(policy):
    cfg = WatermarkConfig(force_gate=1)
    d = detect(policy, [VOCAB.id("a")] * 12, cfg).to_dict("abc")
    assert d["policy_checkpoint_hash"] == "abc"
    assert len(d["per_position"]) == 12 and d["verdict"] in ("watermarked", "not_watermarked")


# ---------------------------------------------------------- composite head


def _head_setup(seed, relax=1.0):
    rng = np.random.default_rng(seed)
    pol = Policy.init(SMALL, seed, std=0.3)
    cfg = WatermarkConfig(relax_temperature=relax)
    win = rng.integers(1, V, size=(6, 4))
    base = rng.normal(size=(6, V))
    tok = rng.integers(1, V, size=6)
    dec = decide(pol, win, cfg)
    return rng, pol, cfg, win, base, tok, dec


def test_head_forward_equals_hard_law_at_anchor():
    _, pol, cfg, win, base, _, dec = _head_setup(0)
    w, l, _ = pol.forward(win)
    st_ = watermark_head(w, l, base, cfg, head_anchor(dec, cfg))
    hard = base + (dec.w * cfg.delta)[:, None] * dec.member
    hard[:, VOCAB.PAD] = -np.inf
    assert np.allclose(st_.logp, log_softmax(hard), atol=1e-12)


@pytest.mark.parametrize("seed", [1, 2, 3])
@pytest.mark.parametrize("relax", [0.5, 1.0])
def test_head_gradients_match_finite_differences(seed, relax):
    rng, pol, cfg, win, base, tok, dec = _head_setup(seed, relax)
    anc = head_anchor(dec, cfg)
    B = len(win)

    def f(params):
        w, l, _ = Policy(SMALL, params).forward(win)
        return float(watermark_head(w, l, base, cfg, anc).logp[np.arange(B), tok].sum())

    w, l, cache = pol.forward(win)
    state = watermark_head(w, l, base, cfg, anc)
    d = np.zeros((B, V))
    d[np.arange(B), tok] = 1.0
    grads = pol.backward(*watermark_head_backward(state, d, cfg), cache)
    assert gradient_check(f, grads, pol.params, eps=1e-5, rng=rng) < 1e-4
