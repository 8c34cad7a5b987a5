"""Watermarked generation over the frozen base model, and prompt-free detection.

Generation: at every step the policy sees the last ``c`` completion tokens
(left-padded with PAD), emits a gate and a green list, and the base logits of
green tokens are raised by ``delta`` when the gate is on. Detection replays the
same decisions from the observed tokens alone and runs a one-proportion z-test
on the green hits among gated positions.

The green-list noise is a keyed hash of the context window, so detection needs
the policy checkpoint and the key but neither the base model nor the prompt.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .minilang import VOCAB, Vocabulary, code_mask
from .ngram import BaseLM, log_softmax
from .policy import (
    NOISELESS_U,
    GreenSelection,
    Policy,
    WGate,
    gate_decision,
    gumbel_green_selection,
    keyed_uniforms,
    membership_relaxation,
    sigmoid,
)

__all__ = [
    "WatermarkConfig",
    "GenerationRecord",
    "DetectionReport",
    "Decisions",
    "DomainError",
    "bias_logits",
    "decide",
    "context_window",
    "sequence_windows",
    "generate_watermarked",
    "generate_group",
    "generate_base",
    "generate_document",
    "reconstruct_decisions",
    "z_score",
    "detect",
    "detect_many",
]


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class WatermarkConfig:
    delta: float = 2.0
    gamma: float = 0.5
    context: int = 4
    switch_threshold: float = 0.5
    tau: float = 4.0
    min_positions: int = 10
    max_completion_length: int = 256
    temperature: float = 1.0
    relax_temperature: float = 1.0
    key: int = 15485863
    noise: str = "keyed"  # "keyed" | "none"
    force_gate: int | None = None  # None: policy decides; 0/1: override

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.min_positions < 1:
            raise ValueError("min_positions must be >= 1")
        if self.context < 1 or self.max_completion_length < 1:
            raise ValueError("context and max_completion_length must be >= 1")
        if self.temperature <= 0 or self.relax_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if self.noise not in ("keyed", "none"):
            raise ValueError("noise must be 'keyed' or 'none'")
        if self.force_gate not in (None, 0, 1):
            raise ValueError("force_gate must be None, 0 or 1")

    def replace(self, **kw) -> "WatermarkConfig":
        return WatermarkConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def bias_logits(logits, w, member, delta: float) -> np.ndarray:
    """``logits + w * delta * member`` elementwise (hard values)."""
    logits = np.asarray(logits, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim:
        w = w[..., None]
    return logits + w * delta * np.asarray(member, dtype=np.float64)


def ban_tokens(logits: np.ndarray, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """PAD is never emitted by any sampler."""
    out = np.array(logits, dtype=np.float64, copy=True)
    out[..., vocab.PAD] = -np.inf
    return out


# -------------------------------------------------------------------- windows


def context_window(visible: Sequence[int], c: int, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Last ``c`` tokens after the most recent ``<end>``, left-padded with PAD."""
    seq = list(visible)
    start = 0
    for i in range(len(seq) - 1, -1, -1):
        if seq[i] == vocab.END:
            start = i + 1
            break
    tail = seq[max(start, len(seq) - c):]
    return np.array([vocab.PAD] * (c - len(tail)) + tail, dtype=np.int64)


def sequence_windows(seq: Sequence[int], c: int, vocab: Vocabulary = VOCAB) -> np.ndarray:
    """Window for every position ``t`` of ``seq`` (built from ``seq[:t]``)."""
    seq = [int(t) for t in seq]
    out = np.full((len(seq), c), vocab.PAD, dtype=np.int64)
    start = 0
    for t in range(len(seq)):
        tail = seq[max(start, t - c):t]
        if tail:
            out[t, c - len(tail):] = tail
        if seq[t] == vocab.END:
            start = t + 1
    return out


# ------------------------------------------------------------------ decisions


@dataclass
class Decisions:
    """Policy action for a batch of windows."""

    w_phi: np.ndarray
    l_phi: np.ndarray
    gate: WGate
    w: np.ndarray  # effective hard gate (after any override)
    selection: GreenSelection
    seeds: np.ndarray
    controlled: np.ndarray  # where the gate came from the policy (and so is trainable)

    @property
    def member(self) -> np.ndarray:
        return self.selection.member


def noise_for(windows: np.ndarray, cfg: WatermarkConfig, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    if cfg.noise == "none":
        return np.full((len(windows), vocab_size), NOISELESS_U), np.zeros(len(windows), dtype=np.uint64)
    return keyed_uniforms(cfg.key, windows, vocab_size)


def decide(policy: Policy, windows: np.ndarray, cfg: WatermarkConfig) -> Decisions:
    windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
    if cfg.context != policy.context:
        raise ValueError(f"watermark context {cfg.context} != policy context {policy.context}")
    w_phi, l_phi, _ = policy.forward(windows)
    gate = gate_decision(w_phi, cfg.switch_threshold)
    u, seeds = noise_for(windows, cfg, l_phi.shape[1])
    sel = gumbel_green_selection(l_phi, cfg.gamma, u=u)
    if cfg.force_gate is None:
        # an all-PAD window is shared by the first token of every text; gating it
        # would give every text the same green list there
        controlled = (windows != policy.vocab.PAD).any(axis=1)
        w = np.where(controlled, gate.hard, 0)
    else:
        controlled = np.zeros(len(windows), dtype=bool)
        w = np.full(len(windows), cfg.force_gate, dtype=np.int64)
    return Decisions(w_phi, l_phi, gate, w, sel, seeds, controlled)


# ------------------------------------------------- differentiable composite head


@dataclass
class HeadAnchor:
    """Hard decisions and relaxed values frozen at one parameter point.

    Forward values equal the hard ones at the anchor; away from it the relaxed
    values move (``w = hard + sigmoid(w_phi) - sigmoid_0``, same for membership).
    """

    w_hard: np.ndarray  # (B,)
    controlled: np.ndarray  # (B,) bool
    sig0: np.ndarray  # (B,)
    member: np.ndarray  # (B, V) float
    S0: np.ndarray  # (B, V)
    theta: np.ndarray  # (B,)
    gumbel: np.ndarray  # (B, V) noise part of g


@dataclass
class HeadState:
    logp: np.ndarray  # (B, V) log-probabilities of the watermarked next-token law
    p: np.ndarray
    w_eff: np.ndarray
    lG_eff: np.ndarray
    sig: np.ndarray
    S: np.ndarray
    anchor: HeadAnchor


def head_anchor(dec: Decisions, cfg: WatermarkConfig) -> HeadAnchor:
    sel = dec.selection
    return HeadAnchor(
        w_hard=dec.w.astype(np.float64),
        controlled=dec.controlled.copy(),
        sig0=np.asarray(dec.gate.relaxed, dtype=np.float64).copy(),
        member=sel.member.astype(np.float64),
        S0=membership_relaxation(sel.g, sel.threshold, cfg.relax_temperature),
        theta=sel.threshold.copy(),
        gumbel=sel.g - dec.l_phi,
    )


def watermark_head(w_phi, l_phi, base_logits, cfg: WatermarkConfig, anchor: HeadAnchor,
                   vocab: Vocabulary = VOCAB) -> HeadState:
    """Watermarked next-token log-probabilities as a differentiable function of (w_phi, l_phi).

    At the anchor's own parameters the forward values are exactly the hard ones
    used for sampling.
    """
    sig = np.asarray(sigmoid(np.asarray(w_phi, dtype=np.float64)))
    S = membership_relaxation(l_phi + anchor.gumbel, anchor.theta, cfg.relax_temperature)
    w_eff = anchor.w_hard + np.where(anchor.controlled, sig - anchor.sig0, 0.0)
    lG_eff = anchor.member + (S - anchor.S0)
    lt = ban_tokens(base_logits + (w_eff * cfg.delta)[:, None] * lG_eff, vocab) / cfg.temperature
    logp = log_softmax(lt)
    return HeadState(logp, np.exp(logp), w_eff, lG_eff, sig, S, anchor)


def watermark_head_backward(state: HeadState, d_logp: np.ndarray, cfg: WatermarkConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pull ``d loss / d logp`` (B, V) back to ``(d w_phi (B,), d l_phi (B, V))``."""
    d_logp = np.where(state.p > 0, d_logp, 0.0)
    d_lt = (d_logp - state.p * d_logp.sum(-1, keepdims=True)) / cfg.temperature
    d_w_eff = cfg.delta * (d_lt * state.lG_eff).sum(-1)
    d_lG = (state.w_eff * cfg.delta)[:, None] * d_lt
    d_w_phi = np.where(state.anchor.controlled, d_w_eff * state.sig * (1.0 - state.sig), 0.0)
    d_l_phi = d_lG * state.S * (1.0 - state.S) / cfg.relax_temperature
    return d_w_phi, d_l_phi


# ----------------------------------------------------------------- generation


@dataclass
class GenerationRecord:
    prompt: tuple[int, ...]
    completion: tuple[int, ...]
    gate: np.ndarray  # (T,) int
    in_green: np.ndarray  # (T,) bool
    logprob: np.ndarray  # (T,) float
    noise_seed: np.ndarray  # (T,) uint64
    is_code: np.ndarray  # (T,) bool
    history: tuple[int, ...] = ()
    base_logits: np.ndarray | None = field(default=None, repr=False)  # (T, V); not serialized

    def __len__(self) -> int:
        return len(self.completion)

    def to_dict(self) -> dict:
        return {
            "prompt": list(self.prompt),
            "completion": list(self.completion),
            "history": list(self.history),
            "trace": [
                {"w": int(self.gate[t]), "in_G": bool(self.in_green[t]), "logprob": float(self.logprob[t]),
                 "noise_seed": int(self.noise_seed[t]), "is_code": bool(self.is_code[t])}
                for t in range(len(self.completion))
            ],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()


def generate_group(lm: BaseLM, policy: Policy | None, prompts: Sequence[Sequence[int]], cfg: WatermarkConfig,
                   rngs: Sequence[np.random.Generator],
                   histories: Sequence[Sequence[int]] | None = None) -> list[GenerationRecord]:
    """Generate one completion per prompt in lock-step (one policy call per step).

    Each rollout draws its tokens from its own ``rngs[i]``. ``histories`` are
    earlier completions of the same document; they are visible to the policy
    window (which still resets after ``<end>``) but not to the base model.
    ``policy=None`` means no watermark: gate 0 everywhere.
    """
    vocab = lm.vocab
    n = len(prompts)
    if n != len(rngs):
        raise ValueError("need one rng per prompt")
    histories = [tuple(h) for h in histories] if histories is not None else [()] * n
    comps: list[list[int]] = [[] for _ in range(n)]
    traces = [dict(w=[], g=[], lp=[], seed=[], base=[]) for _ in range(n)]
    active = [i for i in range(n) if len(prompts[i]) > 0]
    if len(active) != n:
        raise ValueError("prompts must be non-empty")
    c = cfg.context
    while active:
        if policy is not None:
            windows = np.stack([context_window(histories[i] + tuple(comps[i]), c, vocab) for i in active])
            dec = decide(policy, windows, cfg)
        still = []
        for j, i in enumerate(active):
            base = lm.next_logits(tuple(prompts[i]) + tuple(comps[i]))
            if policy is None:
                w, member, seed = 0, np.zeros(vocab.size, dtype=bool), 0
            else:
                w, member, seed = int(dec.w[j]), dec.member[j], int(dec.seeds[j])
            lt = ban_tokens(bias_logits(base, w, member, cfg.delta), vocab) / cfg.temperature
            lp = log_softmax(lt)
            p = np.exp(lp)
            cdf = np.cumsum(p)
            r = rngs[i].random() * cdf[-1]
            tok = int(min(np.searchsorted(cdf, r, side="right"), vocab.size - 1))
            while p[tok] == 0.0:  # guards the banned id against round-off at the cdf tail
                tok -= 1
            comps[i].append(tok)
            tr = traces[i]
            tr["w"].append(w)
            tr["g"].append(bool(member[tok]))
            tr["lp"].append(float(lp[tok]))
            tr["seed"].append(seed)
            tr["base"].append(base)
            if tok != vocab.END and len(comps[i]) < cfg.max_completion_length:
                still.append(i)
        active = still
    records = []
    for i in range(n):
        tr = traces[i]
        records.append(GenerationRecord(
            prompt=tuple(int(t) for t in prompts[i]),
            completion=tuple(comps[i]),
            gate=np.array(tr["w"], dtype=np.int64),
            in_green=np.array(tr["g"], dtype=bool),
            logprob=np.array(tr["lp"], dtype=np.float64),
            noise_seed=np.array(tr["seed"], dtype=np.uint64),
            is_code=np.array(code_mask(comps[i], vocab), dtype=bool),
            history=histories[i],
            base_logits=np.array(tr["base"]),
        ))
    return records


def generate_watermarked(lm: BaseLM, policy: Policy, prompt: Sequence[int], cfg: WatermarkConfig,
                         rng: np.random.Generator, history: Sequence[int] = ()) -> GenerationRecord:
    return generate_group(lm, policy, [prompt], cfg, [rng], [history])[0]


def generate_base(lm: BaseLM, prompt: Sequence[int], cfg: WatermarkConfig, rng: np.random.Generator) -> tuple[int, ...]:
    """Unwatermarked completion from the base model alone."""
    return generate_group(lm, None, [prompt], cfg, [rng])[0].completion


def generate_document(lm: BaseLM, policy: Policy | None, prompts: Sequence[Sequence[int]], cfg: WatermarkConfig,
                      rng: np.random.Generator, min_code_tokens: int) -> tuple[tuple[int, ...], list[GenerationRecord]]:
    """Concatenate completions for successive prompts until the code-token count
    reaches ``min_code_tokens`` (prompts are reused cyclically)."""
    doc: list[int] = []
    recs = []
    n_code = 0
    i = 0
    while n_code < min_code_tokens:
        rec = generate_group(lm, policy, [prompts[i % len(prompts)]], cfg, [rng], [tuple(doc)])[0]
        recs.append(rec)
        doc.extend(rec.completion)
        n_code += int(rec.is_code.sum())
        i += 1
    return tuple(doc), recs


# ------------------------------------------------------------------ detection


def reconstruct_decisions(policy: Policy, seq: Sequence[int], cfg: WatermarkConfig,
                          vocab: Vocabulary = VOCAB) -> tuple[np.ndarray, np.ndarray]:
    """Per position: (gate w, whether the observed token lies in G)."""
    seq = np.asarray(seq, dtype=np.int64)
    if len(seq) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    dec = decide(policy, sequence_windows(seq, cfg.context, vocab), cfg)
    in_g = dec.member[np.arange(len(seq)), seq]
    return dec.w.astype(np.int64), in_g


def z_score(n_green, T, gamma: float):
    """One-proportion z statistic ``(N_G - T gamma) / sqrt(T gamma (1 - gamma))``."""
    n_green = np.asarray(n_green, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if not 0 < gamma < 1:
        raise DomainError("gamma must lie in (0, 1)")
    if np.any(T < 1) or np.any(n_green < 0) or np.any(n_green > T):
        raise DomainError("need T >= 1 and 0 <= N_G <= T")
    z = (n_green - T * gamma) / np.sqrt(T * gamma * (1.0 - gamma))
    return float(z) if z.ndim == 0 else z


@dataclass
class DetectionReport:
    T: int
    N_G: int
    z: float | None
    verdict: str  # watermarked | not_watermarked | insufficient_data
    gamma: float
    tau: float
    w: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=np.int64))
    in_green: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def score(self) -> float:
        """z whenever at least one position was gated, else 0.0 (used for rankings and rewards)."""
        if self.z is not None:
            return self.z
        return z_score(self.N_G, self.T, self.gamma) if self.T >= 1 else 0.0

    def to_dict(self, policy_hash: str = "") -> dict:
        return {
            "T": self.T,
            "N_G": self.N_G,
            "z": self.z,
            "verdict": self.verdict,
            "gamma": self.gamma,
            "tau": self.tau,
            "policy_checkpoint_hash": policy_hash,
            "per_position": [{"t": t, "w": int(self.w[t]), "in_G": bool(self.in_green[t])}
                             for t in range(len(self.w))],
        }


def report_from_decisions(w: np.ndarray, in_g: np.ndarray, seq: Sequence[int], cfg: WatermarkConfig,
                          vocab: Vocabulary = VOCAB) -> DetectionReport:
    seq = np.asarray(seq, dtype=np.int64)
    counted = (w == 1) & (seq != vocab.PAD)
    T = int(counted.sum())
    n_g = int((counted & in_g).sum())
    if T < cfg.min_positions:
        return DetectionReport(T, n_g, None, "insufficient_data", cfg.gamma, cfg.tau, w, in_g)
    z = z_score(n_g, T, cfg.gamma)
    verdict = "watermarked" if z > cfg.tau else "not_watermarked"
    return DetectionReport(T, n_g, z, verdict, cfg.gamma, cfg.tau, w, in_g)


def detect(policy: Policy, seq: Sequence[int], cfg: WatermarkConfig, vocab: Vocabulary = VOCAB) -> DetectionReport:
    w, in_g = reconstruct_decisions(policy, seq, cfg, vocab)
    return report_from_decisions(w, in_g, seq, cfg, vocab)


def detect_many(policy: Policy, seqs: Sequence[Sequence[int]], cfg: WatermarkConfig,
                vocab: Vocabulary = VOCAB) -> list[DetectionReport]:
    """Batched :func:`detect` (one policy forward over all windows)."""
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    lens = [len(s) for s in seqs]
    if sum(lens) == 0:
        return [detect(policy, s, cfg, vocab) for s in seqs]
    windows = np.concatenate([sequence_windows(s, cfg.context, vocab) for s in seqs if len(s)])
    dec = decide(policy, windows, cfg)
    flat = np.concatenate([s for s in seqs if len(s)])
    in_g_all = dec.member[np.arange(len(flat)), flat]
    out, off = [], 0
    for s in seqs:
        n = len(s)
        out.append(report_from_decisions(dec.w[off:off + n].astype(np.int64), in_g_all[off:off + n], s, cfg, vocab))
        off += n
    return out
