"""Watermark policy: context window -> (gate logit, green-list logits) -> action.

The hard action is a gate ``w`` and a green set ``G`` of exactly ``k`` tokens.
Both carry straight-through relaxations: ``sigmoid(w_phi)`` for the gate and a
sigmoid around the k-th/(k+1)-th threshold of the Gumbel-perturbed logits for
membership.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import nn
from .minilang import VOCAB, Vocabulary
from .nn import PolicyConfig

__all__ = [
    "Policy",
    "WGate",
    "GreenSelection",
    "ShapeMismatch",
    "VersionMismatch",
    "VocabHashMismatch",
    "NonFiniteGradient",
    "sigmoid",
    "gate_decision",
    "green_size",
    "gumbel_from_uniform",
    "keyed_uniforms",
    "gumbel_green_selection",
    "select_top_k",
    "membership_relaxation",
    "gradient_check",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"WMPOLICY"
CHECKPOINT_VERSION = 1


class ShapeMismatch(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class VocabHashMismatch(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out if out.ndim else float(out)


# ------------------------------------------------------------------------ gate


@dataclass(frozen=True)
class WGate:
    hard: np.ndarray  # {0,1}
    relaxed: np.ndarray  # sigmoid(w_phi)
    raw: np.ndarray  # w_phi

    @property
    def grad_scale(self) -> np.ndarray:
        """d relaxed / d raw; the only path gradients take through the gate."""
        return self.relaxed * (1.0 - self.relaxed)


def gate_decision(w_phi, switch_threshold: float = 0.5) -> WGate:
    """Hard gate fires when ``sigmoid(w_phi) > switch_threshold`` (strict)."""
    raw = np.asarray(w_phi, dtype=np.float64)
    relaxed = np.asarray(sigmoid(raw))
    return WGate((relaxed > switch_threshold).astype(np.int64), relaxed, raw)


# ------------------------------------------------------------- green selection


def green_size(gamma: float, vocab_size: int) -> int:
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return int(np.floor(gamma * vocab_size))


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def window_seeds(key: int, windows: np.ndarray) -> np.ndarray:
    """64-bit seed per context window from a keyed BLAKE2b hash."""
    windows = np.asarray(windows, dtype=np.int64)
    kb = int(key).to_bytes(16, "little", signed=True)
    seeds = np.empty(len(windows), dtype=np.uint64)
    for i, row in enumerate(windows):
        digest = hashlib.blake2b(row.astype("<i8").tobytes(), digest_size=8, key=kb).digest()
        seeds[i] = np.uint64(int.from_bytes(digest, "little"))
    return seeds


def uniforms_from_seeds(seeds: np.ndarray, vocab_size: int) -> np.ndarray:
    """Counter-mode SplitMix64 stream: (B,) seeds -> (B, V) uniforms in (0, 1)."""
    seeds = np.asarray(seeds, dtype=np.uint64)
    with np.errstate(over="ignore"):
        ctr = np.arange(1, vocab_size + 1, dtype=np.uint64) * np.uint64(0xD1B54A32D192ED03)
        z = _splitmix64(seeds[:, None] + ctr[None, :])
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53


def keyed_uniforms(key: int, windows: np.ndarray, vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    seeds = window_seeds(key, windows)
    return uniforms_from_seeds(seeds, vocab_size), seeds


NOISELESS_U = float(np.exp(-1.0))  # gumbel_from_uniform(e^-1) == 0


@dataclass(frozen=True)
class GreenSelection:
    green: np.ndarray  # (..., k) token ids, descending by g
    member: np.ndarray  # (..., V) bool, hard indicator
    g: np.ndarray  # perturbed logits
    threshold: np.ndarray  # midpoint of k-th and (k+1)-th largest g
    u: np.ndarray
    k: int

    @property
    def red(self) -> np.ndarray:
        return ~self.member


def select_top_k(g: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k per row, ties broken by ascending token id."""
    g = np.atleast_2d(g)
    order = np.argsort(-g, axis=-1, kind="stable")
    green = order[:, :k]
    member = np.zeros(g.shape, dtype=bool)
    np.put_along_axis(member, green, True, axis=-1)
    rows = np.arange(g.shape[0])
    if k < g.shape[1]:
        theta = 0.5 * (g[rows, order[:, k - 1]] + g[rows, order[:, k]])
    else:
        theta = g[rows, order[:, k - 1]] - 1.0
    return green, member, theta


def gumbel_green_selection(l_phi, gamma: float, rng: np.random.Generator | None = None,
                           u: np.ndarray | None = None) -> GreenSelection:
    """``G = top-k(l_phi + Gumbel(u))`` with ``k = floor(gamma |V|)``.

    ``u`` is drawn from ``rng`` unless given (replay / keyed noise).
    """
    l_phi = np.atleast_2d(np.asarray(l_phi, dtype=np.float64))
    V = l_phi.shape[-1]
    k = green_size(gamma, V)
    if u is None:
        if rng is None:
            raise ValueError("need either rng or u")
        u = rng.random(l_phi.shape)
        u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    u = np.broadcast_to(np.asarray(u, dtype=np.float64), l_phi.shape)
    g = l_phi + gumbel_from_uniform(u)
    green, member, theta = select_top_k(g, k)
    return GreenSelection(green, member, g, theta, u, k)


def membership_relaxation(g, theta, relax_temperature: float = 1.0) -> np.ndarray:
    """``S(g)_v = sigmoid((g_v - theta) / relax_temperature)``; theta is a constant."""
    if relax_temperature <= 0:
        raise ValueError("relax_temperature must be > 0")
    g = np.asarray(g, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == g.ndim - 1:
        theta = theta[..., None]
    return np.asarray(sigmoid((g - theta) / relax_temperature))


# ---------------------------------------------------------------------- policy


class Policy:
    """Parameters plus architecture; the trainable half of the composite model."""

    def __init__(self, cfg: PolicyConfig, params: dict[str, np.ndarray], vocab: Vocabulary = VOCAB):
        if cfg.vocab_size != vocab.size:
            raise ShapeMismatch("policy vocabulary size does not match the vocabulary")
        self.cfg = cfg
        self.params = params
        self.vocab = vocab

    @classmethod
    def init(cls, cfg: PolicyConfig, seed: int, vocab: Vocabulary = VOCAB, zero_head: bool = False,
             std: float = 0.02) -> "Policy":
        return cls(cfg, nn.init_params(cfg, np.random.default_rng(seed), std=std, zero_head=zero_head), vocab)

    @property
    def context(self) -> int:
        return self.cfg.context

    def copy(self) -> "Policy":
        return Policy(self.cfg, {k: v.copy() for k, v in self.params.items()}, self.vocab)

    def forward(self, windows, rng: np.random.Generator | None = None):
        """Batch of windows (B, c) -> (w_phi (B,), l_phi (B, V), cache)."""
        windows = np.atleast_2d(np.asarray(windows, dtype=np.int64))
        if windows.shape[-1] != self.cfg.context:
            raise ShapeMismatch(f"context window must have length {self.cfg.context}, got {windows.shape[-1]}")
        out, cache = nn.forward(self.params, self.cfg, windows, rng)
        return out[:, 0], out[:, 1:], cache

    def backward(self, d_w_phi, d_l_phi, cache) -> dict[str, np.ndarray]:
        dout = np.concatenate([np.asarray(d_w_phi)[:, None], d_l_phi], axis=1)
        return nn.backward(self.params, self.cfg, dout, cache)

    def __call__(self, window):
        """Single window -> (w_phi, l_phi)."""
        w, l, _ = self.forward(np.asarray(window)[None, :])
        return float(w[0]), l[0]

    def param_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    # -------------------------------------------------------------- checkpoint

    def to_bytes(self, extra: dict | None = None) -> bytes:
        tensors = []
        for name in nn.param_names(self.cfg):
            tensors.append({"name": name, "shape": list(self.params[name].shape)})
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "vocab_hash": self.vocab.hash,
            "tensors": tensors,
            "extra": extra or {},
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<Q", len(hb)))
        buf.write(hb)
        for t in tensors:
            buf.write(np.ascontiguousarray(self.params[t["name"]], dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        for name, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"refusing to save non-finite tensor {name}")
        Path(path).write_bytes(self.to_bytes(extra))

    @classmethod
    def from_bytes(cls, data: bytes, vocab: Vocabulary = VOCAB) -> tuple["Policy", dict]:
        if data[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a policy checkpoint")
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        if header["format_version"] != CHECKPOINT_VERSION:
            raise VersionMismatch(f"checkpoint format {header['format_version']} != {CHECKPOINT_VERSION}")
        if header["vocab_hash"] != vocab.hash:
            raise VocabHashMismatch("checkpoint was written for a different vocabulary")
        cfg = PolicyConfig(**header["config"])
        off = 16 + hlen
        params = {}
        for t in header["tensors"]:
            n = int(np.prod(t["shape"])) if t["shape"] else 1
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(t["shape"])
            params[t["name"]] = arr.astype(np.float64)
            off += 8 * n
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(cfg, params, vocab), header.get("extra", {})

    @classmethod
    def load(cls, path: str | Path, vocab: Vocabulary = VOCAB) -> "Policy":
        return cls.from_bytes(Path(path).read_bytes(), vocab)[0]


# ------------------------------------------------------------ gradient check


def _flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def gradient_check(forward: Callable[[dict], float], grads: dict[str, np.ndarray],
                   params: dict[str, np.ndarray], eps: float = 1e-5, n_coords: int = 40,
                   n_directions: int = 4, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic ``grads`` and central differences.

    ``forward(params) -> scalar`` must be evaluated on the relaxed path with all
    noise and hard decisions frozen. Checks ``n_coords`` random coordinates
    (spread over tensors) and ``n_directions`` random directional derivatives.
    Mutates ``params`` temporarily; restores it before returning.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    rng = rng or np.random.default_rng(0)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite analytic gradient in {name}")
    names = list(params)

    def rel(a: float, n: float, scale: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), scale)

    # absolute floor relative to the overall gradient size keeps entries that are
    # negligible next to the whole gradient from being judged on round-off alone
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    floor = max(1e-6 * gnorm, 1e-12)
    worst = 0.0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        arr = params[name]
        g = grads[name]
        flat_idx = int(np.argmax(np.abs(g))) if rng.random() < 0.3 else int(rng.integers(arr.size))
        idx = np.unravel_index(flat_idx, arr.shape)
        old = arr[idx]
        arr[idx] = old + eps
        fp = forward(params)
        arr[idx] = old - eps
        fm = forward(params)
        arr[idx] = old
        num = (fp - fm) / (2 * eps)
        if not np.isfinite(num):
            raise NonFiniteGradient("non-finite finite-difference estimate")
        worst = max(worst, rel(float(g[idx]), num, floor))
    for _ in range(n_directions):
        direction = {k: rng.normal(size=v.shape) for k, v in params.items()}
        norm = float(np.sqrt(sum(float((d * d).sum()) for d in direction.values())))
        direction = {k: d / norm for k, d in direction.items()}
        analytic = float(sum(float((grads[k] * direction[k]).sum()) for k in params))
        saved = {k: v.copy() for k, v in params.items()}
        for k in params:
            params[k][...] = saved[k] + eps * direction[k]
        fp = forward(params)
        for k in params:
            params[k][...] = saved[k] - eps * direction[k]
        fm = forward(params)
        for k in params:
            params[k][...] = saved[k]
        num = (fp - fm) / (2 * eps)
        worst = max(worst, rel(analytic, num, floor))
    return worst
