"""Detection and functional metrics, the identifier-renaming attack, and full evaluations."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .codec import DomainError, WatermarkConfig, detect_many, generate_group
from .corpus import Task
from .minilang import IDENTIFIERS, VOCAB, Vocabulary, run_tests
from .ngram import BaseLM
from .policy import Policy

__all__ = [
    "DegenerateLabels",
    "EvalReport",
    "auroc",
    "tpr_at_fpr",
    "pass_at_k",
    "rename_attack",
    "clean_negatives",
    "run_evaluation",
]


class DegenerateLabels(ValueError):
    pass


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same shape")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise DegenerateLabels("need at least one sample of each label")
    return pos, neg


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of ``P(pos > neg) + P(pos == neg) / 2``.

    ``labels`` is truthy for watermarked samples.
    """
    pos, neg = _split(scores, labels)
    ranks = rankdata(np.concatenate([pos, neg]))  # ties get their average rank
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def tpr_at_fpr(scores, labels, fpr_cap: float = 0.05) -> float:
    """True-positive rate of ``score > t`` at the smallest ``t`` whose clean
    false-positive rate is at most ``fpr_cap``."""
    pos, neg = _split(scores, labels)
    if not 0 <= fpr_cap <= 1:
        raise ValueError("fpr_cap must lie in [0, 1]")
    for t in np.concatenate([[-np.inf], np.unique(neg)]):
        if np.mean(neg > t) <= fpr_cap:
            return float(np.mean(pos > t))
    raise AssertionError("unreachable: the largest clean score always qualifies")


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased ``1 - C(n - c, k) / C(n, k)`` in product form."""
    if not (0 <= c <= n and 1 <= k <= n):
        raise DomainError(f"need 0 <= c <= n and 1 <= k <= n, got n={n}, c={c}, k={k}")
    if n - c < k:
        return 1.0
    return float(1.0 - np.prod(1.0 - k / np.arange(n - c + 1, n + 1)))


def rename_attack(seq: Sequence[int], seed: int, vocab: Vocabulary = VOCAB) -> tuple[int, ...]:
    """Rename identifiers by one random permutation of the identifier pool."""
    ids = [vocab.id(v) for v in IDENTIFIERS]
    perm = np.random.default_rng(seed).permutation(len(ids))
    mapping = {src: ids[j] for src, j in zip(ids, perm)}
    return tuple(mapping.get(int(t), int(t)) for t in seq)


def clean_negatives(lm: BaseLM, tasks: Sequence[Task], cfg: WatermarkConfig, seed: int) -> list[tuple[int, ...]]:
    """Even-indexed tasks give an unwatermarked base completion, odd ones the reference."""
    prompts = [t.prompt for t in tasks[0::2]]
    rngs = [np.random.default_rng([seed, i, 0xC1EA]) for i in range(len(prompts))]
    base = [r.completion for r in generate_group(lm, None, prompts, cfg, rngs)]
    refs = [tuple(t.reference) + (lm.vocab.END,) for t in tasks[1::2]]
    out: list[tuple[int, ...]] = []
    for i in range(len(tasks)):
        out.append(base[i // 2] if i % 2 == 0 else refs[i // 2])
    return out


@dataclass
class EvalReport:
    pass_at_1: float
    pass_at_10: float
    auroc: float
    tpr_at_5fpr: float
    mean_z_watermarked: float
    mean_z_clean: float
    attack: str
    n_tasks: int
    n_samples: int
    n_positive: int
    n_negative: int
    seed: int
    config: dict
    partial: bool = False
    per_sequence: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("per_sequence")
        return json.dumps(d, sort_keys=True, indent=2) + "\n"

    def write(self, path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(path).write_text(self.to_json())
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["sequence_id", "label", "z"])
                wr.writerows(self.per_sequence)


def run_evaluation(policy: Policy, lm: BaseLM, tasks: Sequence[Task], cfg: WatermarkConfig, seed: int = 0,
                   attack: str = "none", n_samples: int = 10) -> EvalReport:
    """Pass@1/Pass@10 over ``n_samples`` watermarked completions per task and
    detection quality of the first completion per task against clean negatives.

    With ``attack="rename"`` the whole program (prompt and completion) is renamed
    before testing; detection sees the renamed completion.
    """
    if attack not in ("none", "rename"):
        raise ValueError("attack must be 'none' or 'rename'")
    if not tasks:
        raise ValueError("no tasks to evaluate")
    vocab = lm.vocab
    p1, p10, positives = [], [], []
    for ti, task in enumerate(tasks):
        rngs = [np.random.default_rng([seed, ti, j]) for j in range(n_samples)]
        recs = generate_group(lm, policy, [task.prompt] * n_samples, cfg, rngs)
        n_pass = 0
        for j, rec in enumerate(recs):
            prog = task.prompt + rec.completion
            if attack == "rename":
                prog = rename_attack(prog, int(np.random.default_rng([seed, ti, j, 0xA7]).integers(2**31)), vocab)
            n_pass += run_tests(prog, task.tests, vocab=vocab).passed
            if j == 0:
                positives.append(prog[len(task.prompt):])
        p1.append(pass_at_k(n_samples, n_pass, 1))
        p10.append(pass_at_k(n_samples, n_pass, min(10, n_samples)))
    negatives = clean_negatives(lm, tasks, cfg, seed)
    reps = detect_many(policy, positives + negatives, cfg, vocab)
    z = np.array([r.score for r in reps])
    labels = np.array([1] * len(positives) + [0] * len(negatives))
    ids = [f"{t.task_id}:wm" for t in tasks] + [f"{t.task_id}:clean" for t in tasks]
    per_seq = [(i, int(l), float(s)) for i, l, s in zip(ids, labels, z)]
    return EvalReport(
        pass_at_1=float(np.mean(p1)),
        pass_at_10=float(np.mean(p10)),
        auroc=auroc(z, labels),
        tpr_at_5fpr=tpr_at_fpr(z, labels, 0.05),
        mean_z_watermarked=float(z[labels == 1].mean()),
        mean_z_clean=float(z[labels == 0].mean()),
        attack=attack,
        n_tasks=len(tasks),
        n_samples=n_samples,
        n_positive=int(labels.sum()),
        n_negative=int((labels == 0).sum()),
        seed=seed,
        config=cfg.to_dict(),
        per_sequence=per_seq,
    )
