"""Rewards, group-relative advantages, SFT warm start and GRPO training of the policy.

Only the watermark policy is trained; the base model is frozen. Gradients reach
the policy through the watermarked log-probability of each sampled token, via
the relaxed gate and relaxed green-list membership.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .codec import (
    GenerationRecord,
    WatermarkConfig,
    decide,
    detect_many,
    generate_group,
    head_anchor,
    sequence_windows,
    watermark_head,
    watermark_head_backward,
    z_score,
)
from .corpus import Task
from .evaluation import auroc, clean_negatives
from .minilang import TestReport, run_tests
from .ngram import BaseLM, token_entropy
from .policy import Policy, sigmoid

__all__ = [
    "TrainConfig",
    "RewardBundle",
    "RolloutGroup",
    "AdvantageTable",
    "NonFiniteLoss",
    "exec_reward",
    "detect_reward",
    "token_reward",
    "outcome_advantages",
    "process_advantages",
    "combine_and_mask",
    "score_group",
    "build_advantages",
    "sft_loss_and_grads",
    "sft_step",
    "sft_train",
    "entropy_threshold",
    "grpo_update",
    "lr_at",
    "evaluate_policy",
    "train",
]

EPS_NUM = 1e-8


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.5
    min_lr_ratio: float = 0.1
    warmup_ratio: float = 0.03
    steps: int = 200
    group_size: int = 8
    clip_eps: float = 0.2
    beta: float = 0.0
    ent_coef: float = 0.01
    alpha: float = 3.0
    grad_clip: float = 1.0
    w_exec: float = 1.0
    w_wm: float = 1.0
    seed: int = 0
    ref_refresh: int = 50
    eval_every: int = 50
    eval_tasks: int = 100

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.beta < 0 or self.lr <= 0 or self.grad_clip <= 0 or self.clip_eps <= 0:
            raise ValueError("lr, grad_clip, clip_eps must be > 0 and beta >= 0")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if self.steps < 0 or self.ref_refresh < 1 or self.eval_every < 1:
            raise ValueError("steps >= 0, ref_refresh >= 1 and eval_every >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- rewards


def exec_reward(report: TestReport) -> int:
    """1 iff the program parsed and every test case returned the expected value."""
    return int(report.passed)


def detect_reward(z) -> float:
    """0 for z <= 0, z / 3 in between, 1 for z >= 3."""
    return float(np.clip(np.asarray(z, dtype=np.float64) / 3.0, 0.0, 1.0))


def token_reward(w, in_green, alpha: float) -> np.ndarray:
    """+1 for a gated green token, -alpha for a gated red one, 0 when ungated."""
    w = np.asarray(w)
    g = np.asarray(in_green, dtype=bool)
    return np.where(w == 1, np.where(g, 1.0, -float(alpha)), 0.0)


def trace_score(rec: GenerationRecord, gamma: float) -> float:
    """z over the gated positions of one completion (0 when nothing was gated)."""
    T = int(rec.gate.sum())
    if T == 0:
        return 0.0
    return float(z_score(int((rec.gate.astype(bool) & rec.in_green).sum()), T, gamma))


@dataclass
class RewardBundle:
    r1: int
    r2: float
    r3: np.ndarray
    z: float


@dataclass
class RolloutGroup:
    task: Task
    records: list[GenerationRecord]
    rewards: list[RewardBundle]


@dataclass
class AdvantageTable:
    a1: np.ndarray  # (N,)
    a2: list[np.ndarray]  # per completion, per token
    total: list[np.ndarray]
    masked: list[np.ndarray]
    is_code: list[np.ndarray]


def outcome_advantages(r1, r2, w_exec: float = 1.0, w_wm: float = 1.0) -> np.ndarray:
    R = w_exec * np.asarray(r1, dtype=np.float64) + w_wm * np.asarray(r2, dtype=np.float64)
    if len(R) < 2:
        raise ValueError("group size must be >= 2")
    sd = R.std()
    if sd == 0:
        return np.zeros_like(R)
    return (R - R.mean()) / (sd + EPS_NUM)


def process_advantages(r3: Sequence[np.ndarray], is_code: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Normalize per-token rewards over the code tokens of every rollout in the group."""
    vals = np.concatenate([np.asarray(r, dtype=np.float64)[np.asarray(m, dtype=bool)] for r, m in zip(r3, is_code)])
    out = []
    if len(vals) == 0:
        return [np.zeros(len(r)) for r in r3]
    mu, sd = vals.mean(), vals.std()
    for r, m in zip(r3, is_code):
        m = np.asarray(m, dtype=bool)
        a = np.zeros(len(r))
        if sd > 0:
            a[m] = (np.asarray(r, dtype=np.float64)[m] - mu) / (sd + EPS_NUM)
        out.append(a)
    return out


def combine_and_mask(a1: float, a2: np.ndarray, is_code: np.ndarray) -> np.ndarray:
    return (a1 + np.asarray(a2, dtype=np.float64)) * np.asarray(is_code, dtype=np.float64)


def score_group(task: Task, records: Sequence[GenerationRecord], wcfg: WatermarkConfig, alpha: float) -> RolloutGroup:
    rewards = []
    for rec in records:
        r1 = exec_reward(run_tests(task.prompt + rec.completion, task.tests))
        z = trace_score(rec, wcfg.gamma)
        rewards.append(RewardBundle(r1, detect_reward(z), token_reward(rec.gate, rec.in_green, alpha), z))
    return RolloutGroup(task, list(records), rewards)


def build_advantages(group: RolloutGroup, tcfg: TrainConfig) -> AdvantageTable:
    a1 = outcome_advantages([r.r1 for r in group.rewards], [r.r2 for r in group.rewards], tcfg.w_exec, tcfg.w_wm)
    is_code = [rec.is_code for rec in group.records]
    a2 = process_advantages([r.r3 for r in group.rewards], is_code)
    total = [a1[i] + a2[i] for i in range(len(a1))]
    masked = [combine_and_mask(a1[i], a2[i], is_code[i]) for i in range(len(a1))]
    return AdvantageTable(a1, a2, total, masked, is_code)


# ------------------------------------------------------------------------ SFT


def sft_loss_and_grads(policy: Policy, windows: np.ndarray, base_probs: np.ndarray, entropies: np.ndarray,
                       h_threshold: float) -> tuple[float, dict[str, np.ndarray]]:
    """BCE of the gate against ``1[H > h]`` plus cross-entropy of ``softmax(l_phi)``
    against the base model's next-token distribution; both averaged over the batch."""
    B = len(windows)
    if B == 0:
        raise ValueError("empty batch")
    w_phi, l_phi, cache = policy.forward(windows)
    target = (np.asarray(entropies) > h_threshold).astype(np.float64)
    # BCE with logits, stable form
    bce = np.maximum(w_phi, 0) - w_phi * target + np.log1p(np.exp(-np.abs(w_phi)))
    lq = l_phi - l_phi.max(-1, keepdims=True)
    lq = lq - np.log(np.exp(lq).sum(-1, keepdims=True))
    ce = -(base_probs * lq).sum(-1)
    loss = float(bce.mean() + ce.mean())
    d_w = (np.asarray(sigmoid(w_phi)) - target) / B
    d_l = (np.exp(lq) - base_probs) / B
    return loss, policy.backward(d_w, d_l, cache)


def _sgd(policy: Policy, grads: dict[str, np.ndarray], lr: float, clip: float | None = None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    scale = 1.0
    if clip is not None and norm > clip:
        scale = clip / norm
    for k, g in grads.items():
        policy.params[k] -= lr * scale * g
    return norm


def sft_step(policy: Policy, windows, base_probs, entropies, h_threshold: float, lr: float) -> float:
    loss, grads = sft_loss_and_grads(policy, windows, base_probs, entropies, h_threshold)
    if not np.isfinite(loss):
        raise NonFiniteLoss("SFT loss is not finite")
    _sgd(policy, grads, lr)
    return loss


def sft_dataset(lm: BaseLM, tasks: Sequence[Task], context: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(window, base next-token distribution, base entropy) at every reference position."""
    wins, probs = [], []
    for t in tasks:
        body = tuple(t.reference) + (lm.vocab.END,)
        W = sequence_windows(body, context, lm.vocab)
        for i in range(len(body)):
            wins.append(W[i])
            probs.append(lm.next_probs(t.prompt + body[:i]))
    P = np.array(probs)
    return np.array(wins), P, token_entropy(np.log(np.maximum(P, 1e-300)))


def entropy_threshold(entropies: np.ndarray) -> float:
    return float(np.median(entropies))


def sft_train(policy: Policy, lm: BaseLM, tasks: Sequence[Task], steps: int, lr: float = 0.1,
              batch_size: int = 64, seed: int = 0) -> list[float]:
    wins, P, H = sft_dataset(lm, tasks, policy.context)
    h = entropy_threshold(H)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = rng.integers(len(wins), size=batch_size)
        losses.append(sft_step(policy, wins[idx], P[idx], H[idx], h, lr))
    return losses


# ----------------------------------------------------------------------- GRPO


@dataclass
class UpdateResult:
    loss: float
    surrogate: float
    kl: float
    entropy_term: float
    grad_norm: float
    clip_fraction: float
    n_tokens: int
    ratios: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def _group_batch(records: Sequence[GenerationRecord], masked: Sequence[np.ndarray], c: int, vocab):
    wins, base, toks, old, adv = [], [], [], [], []
    for rec, a in zip(records, masked):
        W = sequence_windows(rec.history + rec.completion, c, vocab)[len(rec.history):]
        keep = np.asarray(rec.is_code, dtype=bool)
        wins.append(W[keep])
        base.append(rec.base_logits[keep])
        toks.append(np.asarray(rec.completion)[keep])
        old.append(rec.logprob[keep])
        adv.append(np.asarray(a)[keep])
    return (np.concatenate(wins), np.concatenate(base), np.concatenate(toks),
            np.concatenate(old), np.concatenate(adv))


def grpo_loss_and_grads(policy: Policy, ref: Policy | None, records: Sequence[GenerationRecord],
                        masked: Sequence[np.ndarray], wcfg: WatermarkConfig, tcfg: TrainConfig):
    """Clipped surrogate over code tokens, optional KL to ``ref`` and gate-entropy regularizer."""
    vocab = policy.vocab
    wins, base, toks, old, adv = _group_batch(records, masked, wcfg.context, vocab)
    M = len(toks)
    if M == 0:
        return UpdateResult(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0), None
    rows = np.arange(M)
    w_phi, l_phi, cache = policy.forward(wins)
    anchor = head_anchor(decide(policy, wins, wcfg), wcfg)
    st = watermark_head(w_phi, l_phi, base, wcfg, anchor, vocab)
    new = st.logp[rows, toks]
    ratio = np.exp(new - old)
    clipped = np.clip(ratio, 1 - tcfg.clip_eps, 1 + tcfg.clip_eps)
    unclipped_wins = ratio * adv <= clipped * adv
    surr = np.where(unclipped_wins, ratio * adv, clipped * adv)
    surrogate = float(surr.mean())
    d_logp = np.zeros_like(st.logp)
    d_logp[rows, toks] = -np.where(unclipped_wins, ratio * adv, 0.0) / M
    kl = 0.0
    if tcfg.beta > 0:
        if ref is None:
            raise ValueError("beta > 0 needs a reference policy")
        rw, rl, _ = ref.forward(wins)
        rst = watermark_head(rw, rl, base, wcfg, head_anchor(decide(ref, wins, wcfg), wcfg), vocab)
        pos = st.p > 0
        diff = np.where(pos, st.logp - np.where(pos, rst.logp, 0.0), 0.0)
        kl_t = (st.p * diff).sum(-1)
        kl = float(kl_t.mean())
        d_logp += tcfg.beta * st.p * (diff + 1.0) / M
    sig = st.sig
    neg_h = sig * np.log(np.maximum(sig, 1e-300)) + (1 - sig) * np.log(np.maximum(1 - sig, 1e-300))
    ent_term = float(neg_h.mean())
    loss = -surrogate + tcfg.beta * kl + tcfg.ent_coef * ent_term
    d_w, d_l = watermark_head_backward(st, d_logp, wcfg)
    d_w = d_w + tcfg.ent_coef * sig * (1 - sig) * w_phi / M
    grads = policy.backward(d_w, d_l, cache)
    res = UpdateResult(float(loss), surrogate, kl, ent_term, 0.0, float(np.mean(~unclipped_wins & (adv != 0))), M, ratio)
    return res, grads


def grpo_update(policy: Policy, ref: Policy | None, records: Sequence[GenerationRecord],
                masked: Sequence[np.ndarray], wcfg: WatermarkConfig, tcfg: TrainConfig, lr: float) -> UpdateResult:
    """One clipped-norm SGD step; raises :class:`NonFiniteLoss` without touching ``policy``."""
    res, grads = grpo_loss_and_grads(policy, ref, records, masked, wcfg, tcfg)
    if grads is None:
        return res
    if not np.isfinite(res.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NonFiniteLoss("GRPO loss or gradient is not finite")
    res.grad_norm = _sgd(policy, grads, lr, tcfg.grad_clip)
    return res


def lr_at(step: int, tcfg: TrainConfig) -> float:
    """Linear warmup, then cosine decay from ``lr`` to ``min_lr_ratio * lr``."""
    total = max(tcfg.steps, 1)
    warm = int(math.ceil(tcfg.warmup_ratio * total))
    if step < warm:
        return tcfg.lr * (step + 1) / warm
    prog = (step - warm) / max(total - warm, 1)
    floor = tcfg.min_lr_ratio * tcfg.lr
    return floor + 0.5 * (tcfg.lr - floor) * (1 + math.cos(math.pi * min(prog, 1.0)))


# ------------------------------------------------------------------ training


@dataclass
class EvalSnapshot:
    mean_z: float
    pass_rate: float
    mean_r2: float
    auroc: float


def evaluate_policy(policy: Policy, lm: BaseLM, tasks: Sequence[Task], wcfg: WatermarkConfig, seed: int,
                    negatives: Sequence[Sequence[int]] | None = None) -> EvalSnapshot:
    """One watermarked completion per task; z from detection of the completion alone."""
    rngs = [np.random.default_rng([seed, i, 0xE7A1]) for i in range(len(tasks))]
    recs = generate_group(lm, policy, [t.prompt for t in tasks], wcfg, rngs)
    passed = [run_tests(t.prompt + r.completion, t.tests).passed for t, r in zip(tasks, recs)]
    if negatives is None:
        negatives = clean_negatives(lm, tasks, wcfg, seed)
    reps = detect_many(policy, [r.completion for r in recs] + list(negatives), wcfg)
    z = np.array([r.score for r in reps])
    pos = z[: len(recs)]
    labels = np.r_[np.ones(len(recs)), np.zeros(len(negatives))]
    return EvalSnapshot(float(pos.mean()), float(np.mean(passed)),
                        float(np.mean([detect_reward(v) for v in pos])), auroc(z, labels))


@dataclass
class TrainResult:
    policy: Policy
    metrics: list[dict]
    history: list[dict]


def train(policy: Policy, lm: BaseLM, train_tasks: Sequence[Task], eval_tasks: Sequence[Task],
          wcfg: WatermarkConfig, tcfg: TrainConfig, log: Callable[[dict], None] | None = None) -> TrainResult:
    """GRPO loop. Evaluates at step 0 and every ``eval_every`` steps, and after the last step.

    ``policy`` is updated in place. Each metrics row carries the means of the
    training rewards since the previous row.
    """
    if not train_tasks:
        raise ValueError("no training tasks")
    ev_tasks = list(eval_tasks[: tcfg.eval_tasks])
    negatives = clean_negatives(lm, ev_tasks, wcfg, tcfg.seed) if ev_tasks else None
    ref = policy.copy() if tcfg.beta > 0 else None
    metrics, history = [], []
    window: list[dict] = []

    def do_eval(step: int, last: UpdateResult | None, lr: float):
        snap = evaluate_policy(policy, lm, ev_tasks, wcfg, tcfg.seed, negatives) if ev_tasks else None
        row = {
            "step": step,
            "mean_r1": float(np.mean([h["r1"] for h in window])) if window else None,
            "mean_r2": float(np.mean([h["r2"] for h in window])) if window else None,
            "mean_z_eval": snap.mean_z if snap else None,
            "pass_rate_eval": snap.pass_rate if snap else None,
            "auroc_eval": snap.auroc if snap else None,
            "loss": last.loss if last else None,
            "grad_norm": last.grad_norm if last else None,
            "lr": lr,
        }
        metrics.append(row)
        window.clear()
        if log:
            log(row)

    do_eval(0, None, lr_at(0, tcfg))
    last = None
    for step in range(tcfg.steps):
        if ref is not None and step > 0 and step % tcfg.ref_refresh == 0:
            ref = policy.copy()
        lr = lr_at(step, tcfg)
        task = train_tasks[int(np.random.default_rng([tcfg.seed, step, 1]).integers(len(train_tasks)))]
        ss = np.random.SeedSequence([tcfg.seed, step, 2]).spawn(tcfg.group_size)
        recs = generate_group(lm, policy, [task.prompt] * tcfg.group_size, wcfg,
                              [np.random.default_rng(s) for s in ss])
        group = score_group(task, recs, wcfg, tcfg.alpha)
        adv = build_advantages(group, tcfg)
        last = grpo_update(policy, ref, recs, adv.masked, wcfg, tcfg, lr)
        h = {"step": step + 1, "r1": float(np.mean([r.r1 for r in group.rewards])),
             "r2": float(np.mean([r.r2 for r in group.rewards])), "loss": last.loss, "grad_norm": last.grad_norm,
             "lr": lr, "gate_rate": float(np.mean(np.concatenate([r.gate for r in recs])))}
        history.append(h)
        window.append(h)
        if (step + 1) % tcfg.eval_every == 0 or step + 1 == tcfg.steps:
            do_eval(step + 1, last, lr)
    return TrainResult(policy, metrics, history)


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))

