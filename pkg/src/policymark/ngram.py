"""Frozen back-off n-gram model over MiniLang tokens (the base generator)."""

from __future__ import annotations

import hashlib
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .minilang import VOCAB, Vocabulary

__all__ = ["BaseLM", "EmptyCorpus", "fit_ngram", "sample_token", "token_entropy", "softmax", "log_softmax"]

LM_FORMAT = "ngram-lm"
LM_FORMAT_VERSION = 1

# a long context lets the model keep track of the template (named by the prompt's
# comment) and of the parameter names through the whole body
DEFAULT_ORDER = 24
DEFAULT_LAMBDA = 0.003
DEFAULT_MIN_COUNT = 1


class EmptyCorpus(ValueError):
    pass


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(x, axis))


def token_entropy(logits: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of ``softmax(logits)`` along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(logits)
    p = np.exp(lp)
    # 0 * log 0 := 0, including -inf logits
    return -np.sum(np.where(p > 0, p * np.where(p > 0, lp, 0.0), 0.0), axis=-1)


def sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``softmax(logits / temperature)``; one uniform per call."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    p = softmax(np.asarray(logits, dtype=np.float64) / temperature)
    cdf = np.cumsum(p)
    r = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, r, side="right"), len(p) - 1))


class BaseLM:
    """Stupid back-off n-gram with add-lambda smoothing at the chosen order.

    The longest context suffix (up to ``order - 1`` tokens) seen at least
    ``min_count`` times in training is used; the distribution there is
    ``(c(ctx, w) + lam) / (c(ctx) + lam |V|)``. The empty context always qualifies.
    """

    def __init__(self, order: int, lam: float, counts: dict[tuple[int, ...], dict[int, int]],
                 vocab: Vocabulary = VOCAB, min_count: int = 1):
        if order < 1:
            raise ValueError("order must be >= 1")
        if lam <= 0:
            raise ValueError("lambda must be > 0")
        if min_count < 1:
            raise ValueError("min_count must be >= 1")
        self.order = order
        self.lam = float(lam)
        self.min_count = int(min_count)
        self.vocab = vocab
        self._counts = {ctx: dict(nxt) for ctx, nxt in counts.items()}
        self._totals = {ctx: sum(nxt.values()) for ctx, nxt in self._counts.items()}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def V(self) -> int:
        return self.vocab.size

    def counts(self, ctx: Sequence[int]) -> dict[int, int]:
        return dict(self._counts.get(tuple(ctx), {}))

    def table_digest(self) -> str:
        h = hashlib.sha256()
        for ctx in sorted(self._counts):
            for nxt in sorted(self._counts[ctx]):
                h.update(f"{ctx}|{nxt}|{self._counts[ctx][nxt]};".encode())
        return h.hexdigest()

    def _dist_for(self, ctx: tuple[int, ...]) -> np.ndarray:
        nxt = self._counts[ctx]
        p = np.full(self.V, self.lam)
        for tid, c in nxt.items():
            p[tid] += c
        return p / (self._totals[ctx] + self.lam * self.V)

    def next_probs(self, context: Sequence[int]) -> np.ndarray:
        ctx = tuple(int(t) for t in context[max(0, len(context) - (self.order - 1)):]) if self.order > 1 else ()
        key = ctx
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        for start in range(len(ctx) + 1):
            suffix = ctx[start:]
            if suffix in self._counts and (not suffix or self._totals[suffix] >= self.min_count):
                p = self._dist_for(suffix)
                break
        else:  # unreachable once fitted: the unigram table always exists
            p = np.full(self.V, 1.0 / self.V)
        p.setflags(write=False)
        if len(self._cache) < 500_000:
            self._cache[key] = p
        return p

    def next_logits(self, context: Sequence[int]) -> np.ndarray:
        return np.log(self.next_probs(context))

    # ------------------------------------------------------------ persistence

    def save(self, path: str | Path) -> None:
        lines = [f"{LM_FORMAT}\tversion={LM_FORMAT_VERSION}\torder={self.order}\tlambda={self.lam!r}"
                 f"\tmin_count={self.min_count}\tvocab={self.vocab.hash}\tV={self.V}"]
        for ctx in sorted(self._counts, key=lambda c: (len(c), c)):
            ctx_s = " ".join(map(str, ctx)) if ctx else "-"
            for nxt in sorted(self._counts[ctx]):
                lines.append(f"{ctx_s}\t{nxt}\t{self._counts[ctx][nxt]}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary = VOCAB) -> "BaseLM":
        lines = Path(path).read_text().splitlines()
        if not lines or not lines[0].startswith(LM_FORMAT):
            raise ValueError(f"{path}: not an n-gram model file")
        fields = dict(kv.split("=", 1) for kv in lines[0].split("\t")[1:])
        if int(fields["version"]) != LM_FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported model version {fields['version']}")
        if fields["vocab"] != vocab.hash:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
        for n, line in enumerate(lines[1:], start=2):
            try:
                ctx_s, nxt, c = line.split("\t")
                ctx = () if ctx_s == "-" else tuple(int(x) for x in ctx_s.split())
                counts[ctx][int(nxt)] = int(c)
            except ValueError:
                raise ValueError(f"{path}:{n}: malformed count record") from None
        return cls(int(fields["order"]), float(fields["lambda"]), counts, vocab, int(fields["min_count"]))


def fit_ngram(sequences: Iterable[Sequence[int]], order: int = DEFAULT_ORDER, lam: float = DEFAULT_LAMBDA,
              vocab: Vocabulary = VOCAB, min_count: int = DEFAULT_MIN_COUNT) -> BaseLM:
    """Count every order-1..n context in each sequence (callers append ``<end>``)."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(dict)
    n_seq = 0
    for seq in sequences:
        seq = [int(t) for t in seq]
        if not seq:
            continue
        n_seq += 1
        for i, tok in enumerate(seq):
            for m in range(0, min(order - 1, i) + 1):
                ctx = tuple(seq[i - m:i])
                tab = counts[ctx]
                tab[tok] = tab.get(tok, 0) + 1
    if n_seq == 0:
        raise EmptyCorpus("no non-empty sequences to fit")
    return BaseLM(order, lam, counts, vocab, min_count)


def fit_on_tasks(tasks, order: int = DEFAULT_ORDER, lam: float = DEFAULT_LAMBDA, vocab: Vocabulary = VOCAB,
                 min_count: int = DEFAULT_MIN_COUNT) -> BaseLM:
    return fit_ngram((t.prompt + t.reference + (vocab.END,) for t in tasks), order, lam, vocab, min_count)
