"""Command-line entry point: ``policymark <command> [flags]``.

Commands::

    corpus-gen   sample a task corpus (JSONL)
    fit-lm       fit the frozen n-gram base model
    sft          supervised warm start of the watermark policy
    train        GRPO training of the watermark policy
    generate     watermarked completions for the prompts of a corpus
    detect       score a MiniLang text or token-id file
    eval         Pass@k and detection metrics
    attack-eval  the same under the identifier-renaming attack

Every option can also come from ``--config FILE`` (lines of ``key = value``,
``#`` starts a comment, keys are the flag names with ``_`` or ``-``). Flags
given on the command line win over the file. Each run writes
``<out>.meta.json`` with every effective parameter, the seeds and the SHA-256
of every input file.

Exit status: 0 on success, 1 on usage errors (nothing is written), 2 when the
command fails at run time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "run_command", "UsageError", "read_config_file"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def _dest(flag: str) -> str:
    return flag.replace("-", "_")


# (flag, type, default, help); defaults mirror WatermarkConfig / TrainConfig
WATERMARK_OPTS = [
    ("delta", float, 2.0, "green-list logit bias"),
    ("gamma", float, 0.5, "green-list fraction"),
    ("context", int, 4, "policy context window length"),
    ("switch-threshold", float, 0.5, "gate fires when sigmoid(w) exceeds this"),
    ("tau", float, 4.0, "detection threshold on z"),
    ("min-positions", int, 10, "fewest gated positions needed for a verdict"),
    ("max-completion-length", int, 256, "token cap per completion"),
    ("temperature", float, 1.0, "sampling temperature"),
    ("relax-temperature", float, 1.0, "temperature of the relaxed green membership"),
    ("key", int, 15485863, "secret key of the keyed noise"),
    ("noise", str, "keyed", "keyed | none"),
]
POLICY_OPTS = [
    ("d-model", int, 64, "policy width"),
    ("n-layers", int, 2, "policy depth"),
    ("n-heads", int, 4, "attention heads"),
    ("d-ff", int, 256, "feed-forward width"),
]
TRAIN_OPTS = [
    ("lr", float, 0.5, "peak learning rate"),
    ("min-lr-ratio", float, 0.1, "cosine floor as a fraction of lr"),
    ("warmup-ratio", float, 0.03, "fraction of steps spent warming up"),
    ("steps", int, 200, "optimizer steps"),
    ("group-size", int, 8, "rollouts per prompt"),
    ("clip-eps", float, 0.2, "surrogate clip range"),
    ("beta", float, 0.0, "KL weight"),
    ("ent-coef", float, 0.01, "gate entropy regularizer weight"),
    ("alpha", float, 3.0, "red-token penalty"),
    ("grad-clip", float, 1.0, "gradient norm cap"),
    ("w-exec", float, 1.0, "weight of the execution reward"),
    ("w-wm", float, 1.0, "weight of the detection reward"),
    ("ref-refresh", int, 50, "steps between reference-policy refreshes"),
    ("eval-every", int, 50, "steps between held-out evaluations"),
    ("eval-tasks", int, 100, "held-out tasks per evaluation"),
]
COMMON_OPTS = [
    ("seed", int, 0, "global seed"),
    ("threads", int, 1, "cap on numeric worker threads"),
]

COMMANDS = {
    "corpus-gen": {
        "opts": [("n", int, 2000, "number of tasks"), ("prefix", str, "task", "task id prefix"),
                 ("n-cases", int, 3, "test cases per task")],
        "out": "tasks.jsonl", "inputs": [],
    },
    "fit-lm": {
        "opts": [("order", int, 24, "n-gram order"), ("lam", float, 0.003, "add-lambda smoothing"),
                 ("min-count", int, 1, "back off past contexts seen fewer times")],
        "out": "base_lm.tsv", "inputs": ["corpus"],
    },
    "sft": {
        "opts": [("sft-steps", int, 1000, "SFT steps"), ("sft-lr", float, 0.5, "SFT learning rate"),
                 ("batch-size", int, 64, "SFT batch size"), ("sft-tasks", int, 500, "tasks used for SFT")]
                + POLICY_OPTS + [("context", int, 4, "policy context window length")],
        "out": "policy_sft.ckpt", "inputs": ["corpus", "base-lm"], "optional": ["init"],
    },
    "train": {
        "opts": WATERMARK_OPTS + POLICY_OPTS + TRAIN_OPTS,
        "out": "policy.ckpt", "inputs": ["corpus", "base-lm"], "optional": ["init", "eval-corpus"],
    },
    "generate": {
        "opts": WATERMARK_OPTS + [("n", int, 10, "prompts to complete")],
        "out": "generations.jsonl", "inputs": ["policy", "base-lm", "corpus"], "optional": [],
    },
    "detect": {
        "opts": WATERMARK_OPTS,
        "out": "detection.json", "inputs": ["policy", "input"], "optional": [],
    },
    "eval": {
        "opts": WATERMARK_OPTS + [("n-samples", int, 10, "completions per task"),
                                  ("n-tasks", int, 0, "evaluate the first N tasks (0 = all)")],
        "out": "eval_report.json", "inputs": ["policy", "base-lm", "corpus"], "optional": [],
    },
}
COMMANDS["attack-eval"] = dict(COMMANDS["eval"], out="attack_report.json")

_ALL_KEYS = {_dest(f) for entry in COMMANDS.values() for f, *_ in entry["opts"]} | {
    _dest(f) for entry in COMMANDS.values() for f in entry["inputs"] + entry.get("optional", [])
} | {"seed", "threads", "out", "csv", "text_out"}


def _build_parser() -> _Parser:
    parser = _Parser(prog="policymark", description="Adaptive watermarking of MiniLang code.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, entry in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key = value file; flags override it")
        p.add_argument("--out", help=f"output path (default {entry['out']})")
        for flag in entry["inputs"] + entry.get("optional", []):
            p.add_argument(f"--{flag}", help="input path")
        seen = set()
        for flag, typ, default, text in entry["opts"] + COMMON_OPTS:
            if flag in seen:
                continue
            seen.add(flag)
            p.add_argument(f"--{flag}", type=typ, help=f"{text} (default {default})")
        if name in ("eval", "attack-eval"):
            p.add_argument("--csv", help="optional per-sequence z-score CSV")
        if name == "generate":
            p.add_argument("--text-out", help="also write all completions as one MiniLang text file")
    return parser


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Raises UsageError on malformed lines."""
    out: dict[str, str] = {}
    for i, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise UsageError(f"{path}:{i}: empty key")
        out[_dest(k)] = v
    return out


def _resolve(argv: list[str]) -> tuple[str, dict]:
    parser = _build_parser()
    ns = vars(parser.parse_args(argv))
    command = ns.pop("command")
    entry = COMMANDS[command]
    types, defaults = {}, {"out": entry["out"]}
    for flag, typ, default, _ in entry["opts"] + COMMON_OPTS:
        types[_dest(flag)] = typ
        defaults.setdefault(_dest(flag), default)
    path_keys = {_dest(f) for f in entry["inputs"] + entry.get("optional", [])} | {"out", "csv", "text_out"}
    file_cfg: dict = {}
    if "config" in ns:
        if not Path(ns["config"]).is_file():
            raise UsageError(f"--config: no such file: {ns['config']}")
        for k, v in read_config_file(ns.pop("config")).items():
            if k in types:
                try:
                    file_cfg[k] = types[k](v)
                except ValueError:
                    raise UsageError(f"config key {k!r}: cannot parse {v!r}") from None
            elif k in path_keys:
                file_cfg[k] = v
            elif k not in _ALL_KEYS:  # keys of other commands are allowed, so one file serves a pipeline
                raise UsageError(f"unknown config key {k!r}")
    cfg = {**defaults, **file_cfg, **ns}
    for flag in entry["inputs"]:
        if _dest(flag) not in cfg:
            raise UsageError(f"--{flag} is required")
    for flag in entry["inputs"] + entry.get("optional", []):
        p = cfg.get(_dest(flag))
        if p is not None and not Path(p).is_file():
            raise UsageError(f"--{flag}: no such file: {p}")
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return command, cfg


def _sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_meta(command: str, cfg: dict, inputs: dict[str, str], outputs: list[str]) -> None:
    from . import __version__

    meta = {
        "command": command,
        "version": __version__,
        "config": {k: v for k, v in sorted(cfg.items())},
        "seeds": {"seed": cfg["seed"]},
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "outputs": {str(p): _sha256(p) for p in outputs if Path(p).is_file()},
    }
    Path(str(cfg["out"]) + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def _wcfg(cfg: dict):
    from .codec import WatermarkConfig

    return WatermarkConfig(**{_dest(f): cfg[_dest(f)] for f, *_ in WATERMARK_OPTS})


def _pcfg(cfg: dict):
    from .minilang import VOCAB
    from .nn import PolicyConfig

    return PolicyConfig(VOCAB.size, cfg["context"], cfg["d_model"], cfg["n_layers"], cfg["n_heads"], cfg["d_ff"])


def _read_sequence(path: str) -> list[int]:
    """``.ids`` holds whitespace-separated token ids, ``.json`` a JSON list; anything else is MiniLang text."""
    from .minilang import VOCAB, tokenize

    suffix = Path(path).suffix.lower()
    text = Path(path).read_text(encoding="utf-8")
    if suffix == ".ids":
        ids = [int(t) for t in text.split()]
    elif suffix == ".json":
        ids = [int(t) for t in json.loads(text)]
    else:
        return tokenize(text)
    if any(not 0 <= t < VOCAB.size for t in ids):
        raise ValueError("token id outside the vocabulary")
    return ids


# ------------------------------------------------------------------ commands


def _corpus_gen(cfg: dict) -> tuple[dict, list[str]]:
    from .corpus import make_corpus, save_tasks

    save_tasks(cfg["out"], make_corpus(cfg["n"], cfg["seed"], cfg["n_cases"], cfg["prefix"]))
    print(f"wrote {cfg['n']} tasks to {cfg['out']}")
    return {}, [cfg["out"]]


def _fit_lm(cfg: dict) -> tuple[dict, list[str]]:
    from .corpus import load_tasks
    from .ngram import fit_on_tasks

    lm = fit_on_tasks(load_tasks(cfg["corpus"]), cfg["order"], cfg["lam"], min_count=cfg["min_count"])
    lm.save(cfg["out"])
    print(f"fitted order-{lm.order} model, table digest {lm.table_digest()[:16]}")
    return {"corpus": cfg["corpus"]}, [cfg["out"]]


def _load_or_init(cfg: dict):
    from .policy import Policy

    if cfg.get("init"):
        return Policy.load(cfg["init"])
    return Policy.init(_pcfg(cfg), cfg["seed"])


def _sft(cfg: dict) -> tuple[dict, list[str]]:
    from .corpus import load_tasks
    from .ngram import BaseLM
    from .rl import sft_train

    pol = _load_or_init(cfg)
    lm = BaseLM.load(cfg["base_lm"])
    tasks = load_tasks(cfg["corpus"])[: cfg["sft_tasks"]]
    losses = sft_train(pol, lm, tasks, cfg["sft_steps"], lr=cfg["sft_lr"], batch_size=cfg["batch_size"],
                       seed=cfg["seed"])
    pol.save(cfg["out"])
    if losses:
        print(f"SFT loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    ins = {"corpus": cfg["corpus"], "base_lm": cfg["base_lm"]}
    if cfg.get("init"):
        ins["init"] = cfg["init"]
    return ins, [cfg["out"]]


def _train(cfg: dict) -> tuple[dict, list[str]]:
    from .corpus import load_tasks
    from .ngram import BaseLM
    from .rl import TrainConfig, train, write_metrics

    pol = _load_or_init(cfg)
    lm = BaseLM.load(cfg["base_lm"])
    tasks = load_tasks(cfg["corpus"])
    eval_tasks = load_tasks(cfg["eval_corpus"]) if cfg.get("eval_corpus") else []
    tcfg = TrainConfig(**{_dest(f): cfg[_dest(f)] for f, *_ in TRAIN_OPTS}, seed=cfg["seed"])
    wcfg = _wcfg(cfg)

    def log(row):
        shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()}
        print(json.dumps(shown, sort_keys=True), flush=True)

    res = train(pol, lm, tasks, eval_tasks, wcfg, tcfg, log)
    pol.save(cfg["out"])
    metrics = str(cfg["out"]) + ".metrics.jsonl"
    write_metrics(metrics, res.metrics)
    ins = {"corpus": cfg["corpus"], "base_lm": cfg["base_lm"]}
    for k in ("init", "eval_corpus"):
        if cfg.get(k):
            ins[k] = cfg[k]
    return ins, [cfg["out"], metrics]


def _generate(cfg: dict) -> tuple[dict, list[str]]:
    import numpy as np

    from .codec import generate_group
    from .corpus import load_tasks
    from .minilang import detokenize
    from .ngram import BaseLM
    from .policy import Policy

    pol = Policy.load(cfg["policy"])
    lm = BaseLM.load(cfg["base_lm"])
    tasks = load_tasks(cfg["corpus"])[: cfg["n"]]
    if not tasks:
        raise ValueError("corpus has no tasks")
    wcfg = _wcfg(cfg)
    rngs = [np.random.default_rng([cfg["seed"], i]) for i in range(len(tasks))]
    recs = generate_group(lm, pol, [t.prompt for t in tasks], wcfg, rngs)
    with open(cfg["out"], "w") as fh:
        for t, r in zip(tasks, recs):
            d = r.to_dict()
            d["task_id"] = t.task_id
            d["text"] = detokenize(r.completion)
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    outs = [cfg["out"]]
    if cfg.get("text_out"):
        doc = [tok for r in recs for tok in r.completion]
        Path(cfg["text_out"]).write_text(detokenize(doc))  # a trailing newline would be a token
        outs.append(cfg["text_out"])
    print(f"wrote {len(recs)} completions to {cfg['out']}")
    return {"policy": cfg["policy"], "base_lm": cfg["base_lm"], "corpus": cfg["corpus"]}, outs


def _detect(cfg: dict) -> tuple[dict, list[str]]:
    from .codec import detect
    from .policy import Policy

    pol = Policy.load(cfg["policy"])
    seq = _read_sequence(cfg["input"])
    rep = detect(pol, seq, _wcfg(cfg))
    Path(cfg["out"]).write_text(json.dumps(rep.to_dict(_sha256(cfg["policy"])), sort_keys=True, indent=2) + "\n")
    z = "n/a" if rep.z is None else f"{rep.z:.4f}"
    print(f"z = {z}  T = {rep.T}  N_G = {rep.N_G}  verdict = {rep.verdict}")
    return {"policy": cfg["policy"], "input": cfg["input"]}, [cfg["out"]]


def _eval(cfg: dict, attack: str) -> tuple[dict, list[str]]:
    from .corpus import load_tasks
    from .evaluation import run_evaluation
    from .ngram import BaseLM
    from .policy import Policy

    pol = Policy.load(cfg["policy"])
    lm = BaseLM.load(cfg["base_lm"])
    tasks = load_tasks(cfg["corpus"])
    if cfg["n_tasks"] > 0:
        tasks = tasks[: cfg["n_tasks"]]
    rep = run_evaluation(pol, lm, tasks, _wcfg(cfg), cfg["seed"], attack, cfg["n_samples"])
    rep.write(cfg["out"], cfg.get("csv"))
    print(f"pass@1 {rep.pass_at_1:.3f}  pass@10 {rep.pass_at_10:.3f}  AUROC {rep.auroc:.3f}  "
          f"TPR@5%FPR {rep.tpr_at_5fpr:.3f}  mean z {rep.mean_z_watermarked:.3f} / clean {rep.mean_z_clean:.3f}")
    outs = [cfg["out"]] + ([cfg["csv"]] if cfg.get("csv") else [])
    return {"policy": cfg["policy"], "base_lm": cfg["base_lm"], "corpus": cfg["corpus"]}, outs


HANDLERS = {
    "corpus-gen": _corpus_gen,
    "fit-lm": _fit_lm,
    "sft": _sft,
    "train": _train,
    "generate": _generate,
    "detect": _detect,
    "eval": lambda cfg: _eval(cfg, "none"),
    "attack-eval": lambda cfg: _eval(cfg, "rename"),
}


def run_command(argv: list[str]) -> int:
    try:
        command, cfg = _resolve(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(cfg["threads"])
    try:
        inputs, outputs = HANDLERS[command](cfg)
        _write_meta(command, cfg, inputs, outputs)
    except Exception as err:  # noqa: BLE001 - every runtime failure maps to status 2
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
