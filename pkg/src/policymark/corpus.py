"""Template-driven task generator and the JSONL task format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .minilang import (
    IDENTIFIERS,
    VOCAB,
    Program,
    TestCase,
    Vocabulary,
    execute,
    parse_program,
    run_tests,
    tokenize,
)

__all__ = [
    "Template",
    "TEMPLATES",
    "Task",
    "DegenerateTemplate",
    "FormatError",
    "render_variant",
    "sample_task",
    "derive_tests",
    "make_corpus",
    "save_tasks",
    "load_tasks",
]

TASK_FORMAT = "minilang-tasks"
TASK_FORMAT_VERSION = 1


class DegenerateTemplate(RuntimeError):
    pass


class FormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


# Expressions are nested tuples: (op, lhs, rhs); leaves are "P0"/"P1" (parameters),
# "T0".. (temporaries) or ints. Statements: ("let", name, expr), ("return", expr),
# ("if", cond, stmt, stmt).
COMMUTATIVE = ("+", "*", "==")
# parameters are named from a small pool so each prompt is well represented in
# the base model's counts; temporaries use the full identifier pool
PARAM_POOL = ("a", "b")


@dataclass(frozen=True)
class Template:
    template_id: int
    name: str
    comment: tuple[str, str]
    arity: int
    body: tuple


def _ret(e):
    return ("return", e)


TEMPLATES: tuple[Template, ...] = (
    Template(0, "add", ("adds", "value"), 2, (_ret(("+", "P0", "P1")),)),
    Template(1, "subtract", ("value", "note"), 2, (_ret(("-", "P0", "P1")),)),
    Template(2, "multiply", ("fast", "result"), 2, (_ret(("*", "P0", "P1")),)),
    Template(3, "double", ("adds", "this"), 1, (_ret(("*", "P0", 2)),)),
    Template(4, "affine", ("temp", "result"), 1, (_ret(("+", ("*", "P0", 3), 1)),)),
    Template(5, "max", ("result", "value"), 2,
             (("if", ("<", "P0", "P1"), _ret("P1"), _ret("P0")),)),
    Template(6, "min", ("note", "this"), 2,
             (("if", ("<", "P0", "P1"), _ret("P0"), _ret("P1")),)),
    Template(7, "relu", ("fast", "value"), 1,
             (("if", ("<", "P0", 0), _ret(0), _ret("P0")),)),
    Template(8, "abs", ("todo", "value"), 1,
             (("if", ("<", "P0", 0), _ret(("-", 0, "P0")), _ret("P0")),)),
    Template(9, "remainder", ("note", "result"), 2, (_ret(("%", "P0", "P1")),)),
    Template(10, "square_of_sum", ("temp", "value"), 2,
             (("let", "T0", ("+", "P0", "P1")), _ret(("*", "T0", "T0")))),
    Template(11, "sum_of_squares", ("adds", "result"), 2,
             (_ret(("+", ("*", "P0", "P0"), ("*", "P1", "P1"))),)),
    Template(12, "equal", ("this", "value"), 2, (_ret(("==", "P0", "P1")),)),
    Template(13, "let_chain", ("todo", "temp"), 2,
             (("let", "T0", ("*", "P0", 2)), ("let", "T1", ("+", "T0", "P1")),
              _ret(("-", "T1", "P0")))),
    Template(14, "mod_three", ("fast", "note"), 1, (_ret(("%", "P0", 3)),)),
    Template(15, "square", ("todo", "this"), 1, (_ret(("*", "P0", "P0")),)),
)


@dataclass(frozen=True)
class Task:
    task_id: str
    template_id: int
    prompt: tuple[int, ...]
    reference: tuple[int, ...]
    tests: tuple[TestCase, ...]

    @property
    def program(self) -> tuple[int, ...]:
        return self.prompt + self.reference


# ------------------------------------------------------------------ rendering


def _subst(node, names: dict):
    if isinstance(node, str):
        return names.get(node, node)
    if isinstance(node, tuple):
        return tuple(_subst(n, names) for n in node)
    return node


def _render_expr(e, rng: np.random.Generator, parent_prec: int = 0) -> list[str]:
    prec = {"<": 1, "==": 1, "+": 2, "-": 2, "*": 3, "%": 3}
    if isinstance(e, int):
        return [str(e)]
    if isinstance(e, str):
        return [e]
    op, lhs, rhs = e
    if op in COMMUTATIVE and rng.random() < 0.5:
        lhs, rhs = rhs, lhs
    p = prec[op]
    # left-assoc: the right operand needs brackets at equal precedence
    toks = _render_expr(lhs, rng, p) + [op] + _render_expr(rhs, rng, p + 1)
    if p < parent_prec:
        toks = ["("] + toks + [")"]
    return toks


def _render_stmt(s, rng) -> list[str]:
    kind = s[0]
    if kind == "let":
        return ["let", s[1], "="] + _render_expr(s[2], rng) + ["NEWLINE"]
    if kind == "return":
        return ["return"] + _render_expr(s[1], rng) + ["NEWLINE"]
    _, cond, then, orelse = s
    return (["if"] + _render_expr(cond, rng) + [":", "NEWLINE"] + _render_stmt(then, rng)
            + ["else", ":", "NEWLINE"] + _render_stmt(orelse, rng))


def render_variant(template: Template, rng: np.random.Generator,
                   n_redundant: int | None = None,
                   param_pool: Sequence[str] = PARAM_POOL) -> tuple[list[str], list[str]]:
    """Render one surface variant; returns (prompt words, body words).

    Variant axes: parameter/temporary names, commutative operand order and
    0-2 redundant ``let`` bindings.
    """
    pp = list(param_pool)
    params = [pp[i] for i in rng.permutation(len(pp))[: template.arity]]
    temps = [v for v in (IDENTIFIERS[i] for i in rng.permutation(len(IDENTIFIERS))) if v not in params]
    if n_redundant is None:
        n_redundant = int(rng.integers(0, 3))
    mapping = {f"P{i}": p for i, p in enumerate(params)}
    n_temps = sum(1 for s in template.body if s[0] == "let")
    mapping.update({f"T{i}": temps[i] for i in range(n_temps)})
    spare = temps[n_temps:]
    body = [_subst(s, mapping) for s in template.body]

    *lets, last = body
    extra = []
    if n_redundant:
        if last[0] == "return":
            prev = last[1]
            for r in range(n_redundant):
                extra.append(("let", spare[r], prev))
                prev = spare[r]
            last = ("return", prev)
        else:
            prev = params[0]
            for r in range(n_redundant):
                extra.append(("let", spare[r], prev))
                prev = spare[r]
            last = _subst(last, {params[0]: prev})
    stmts = lets + extra + [last]

    prompt = ["#", *template.comment, "NEWLINE", "fn", "f", "("]
    for i, p in enumerate(params):
        if i:
            prompt.append(",")
        prompt.append(p)
    prompt += [")", ":", "NEWLINE"]
    words = [w for s in stmts for w in _render_stmt(s, rng)]
    return prompt, words


def _ids(words: Sequence[str], vocab: Vocabulary) -> tuple[int, ...]:
    return tuple(vocab.id(w) for w in words)


def derive_tests(reference: Program, n_cases: int, seed: int, max_draws: int = 100) -> tuple[TestCase, ...]:
    """Random argument tuples in [-9, 9]; draws whose execution errors are skipped."""
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    rng = np.random.default_rng(seed)
    cases: list[TestCase] = []
    draws = 0
    while len(cases) < n_cases:
        if draws >= max_draws:
            if not cases:
                raise DegenerateTemplate(f"no valid test case in {max_draws} draws")
            break
        draws += 1
        args = tuple(int(a) for a in rng.integers(-9, 10, size=reference.arity))
        out = execute(reference, args)
        if out.ok:
            cases.append(TestCase(args, int(out.value)))
    return tuple(cases)


def sample_task(seed: int, pool: Sequence[Template] = TEMPLATES, n_cases: int = 3,
                vocab: Vocabulary = VOCAB, task_id: str | None = None) -> Task:
    if not pool:
        raise ValueError("template pool is empty")
    rng = np.random.default_rng([seed, 0x7A5C])
    template = pool[int(rng.integers(len(pool)))]
    prompt_w, body_w = render_variant(template, rng)
    prompt = _ids(prompt_w, vocab)
    body = _ids(body_w, vocab)
    prog = parse_program(prompt + body, vocab)
    tests = derive_tests(prog, n_cases, int(rng.integers(2**31)))
    return Task(task_id or f"task-{seed}", template.template_id, prompt, body, tests)


def make_corpus(n_tasks: int, seed: int, n_cases: int = 3, prefix: str = "task") -> list[Task]:
    base = np.random.SeedSequence(seed)
    seeds = base.generate_state(n_tasks, dtype=np.uint32)
    return [sample_task(int(s), n_cases=n_cases, task_id=f"{prefix}-{i:05d}")
            for i, s in enumerate(seeds)]


def check_task(task: Task, vocab: Vocabulary = VOCAB) -> bool:
    return run_tests(task.program, task.tests, vocab=vocab).passed


# ----------------------------------------------------------------------- file io


def save_tasks(path: str | Path, tasks: Iterable[Task], vocab: Vocabulary = VOCAB) -> None:
    lines = [json.dumps({"format": TASK_FORMAT, "version": TASK_FORMAT_VERSION,
                         "vocab_hash": vocab.hash}, sort_keys=True)]
    for t in tasks:
        rec = {
            "task_id": t.task_id,
            "template_id": t.template_id,
            "prompt_ids": list(t.prompt),
            "reference_ids": list(t.reference),
            "tests": [{"args": list(c.args), "expected": c.expected} for c in t.tests],
        }
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def _int_list(v, line: int, key: str) -> tuple[int, ...]:
    if not isinstance(v, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
        raise FormatError(line, f"{key} must be a list of integers")
    return tuple(v)


def load_tasks(path: str | Path, vocab: Vocabulary = VOCAB) -> list[Task]:
    text = Path(path).read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as err:
        raise FormatError(1, f"bad header: {err.msg}") from None
    if not isinstance(header, dict) or header.get("format") != TASK_FORMAT:
        raise FormatError(1, "not a task file")
    if header.get("vocab_hash") != vocab.hash:
        raise FormatError(1, "vocabulary hash mismatch")
    tasks = []
    for n, raw in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as err:
            raise FormatError(n, f"malformed record: {err.msg}") from None
        try:
            tests = tuple(TestCase(_int_list(c["args"], n, "args"), int(c["expected"])) for c in rec["tests"])
            task = Task(str(rec["task_id"]), int(rec["template_id"]),
                        _int_list(rec["prompt_ids"], n, "prompt_ids"),
                        _int_list(rec["reference_ids"], n, "reference_ids"), tests)
        except (KeyError, TypeError) as err:
            raise FormatError(n, f"missing or invalid field: {err}") from None
        if any(i < 0 or i >= vocab.size for i in task.prompt + task.reference):
            raise FormatError(n, "token id out of range")
        tasks.append(task)
    return tasks


def task_from_text(prompt_text: str, body_text: str, tests: Sequence[TestCase], template_id: int = -1,
                   task_id: str = "adhoc") -> Task:
    return Task(task_id, template_id, tuple(tokenize(prompt_text)), tuple(tokenize(body_text)), tuple(tests))
