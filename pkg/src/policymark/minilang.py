"""MiniLang: a tiny single-function language used as the execution substrate.

A program looks like::

    # adds value
    fn f ( a , b ) :
    let t = a + b
    return t

Tokens are whitespace separated; ``NEWLINE`` is an explicit token (written as a
real line break in source text). Indentation carries no meaning. An ``if``
statement takes exactly one statement per branch::

    if a < b :
    return b
    else :
    return a
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

__all__ = [
    "Vocabulary",
    "VOCAB",
    "UnknownLexeme",
    "ParseError",
    "Program",
    "ExecOutcome",
    "TestCase",
    "TestReport",
    "tokenize",
    "detokenize",
    "parse_program",
    "execute",
    "run_tests",
    "code_mask",
    "DEFAULT_FUEL",
]

DEFAULT_FUEL = 10_000
INT_MIN = -(2**63)
INT_MAX = 2**63 - 1

KEYWORDS = ("fn", "let", "return", "if", "else")
PUNCT = ("(", ")", ":", ",", "=", "#", "NEWLINE")
OPERATORS = ("+", "-", "*", "%")
COMPARISONS = ("<", "==")
DIGITS = tuple(str(i) for i in range(10))
FUNCTION_NAMES = ("f",)
IDENTIFIERS = ("a", "b", "c", "x", "y", "z", "t", "u")
COMMENT_WORDS = ("note", "this", "adds", "value", "result", "temp", "fast", "todo")
SPECIALS = ("<pad>", "<end>")


class UnknownLexeme(ValueError):
    def __init__(self, lexeme: str, position: int):
        super().__init__(f"unknown lexeme {lexeme!r} at token position {position}")
        self.lexeme = lexeme
        self.position = position


class ParseError(ValueError):
    """Syntax or scope error at token ``position`` of the (PAD-free) input."""

    def __init__(self, position: int, expected: Sequence[str], message: str = ""):
        exp = ", ".join(expected)
        super().__init__(message or f"parse error at token {position}: expected one of {{{exp}}}")
        self.position = position
        self.expected = tuple(expected)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    kinds: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("token spellings must be unique")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def default(cls) -> "Vocabulary":
        groups = [
            ("keyword", KEYWORDS),
            ("punct", PUNCT),
            ("op", OPERATORS),
            ("cmp", COMPARISONS),
            ("digit", DIGITS),
            ("fname", FUNCTION_NAMES),
            ("ident", IDENTIFIERS),
            ("comment", COMMENT_WORDS),
            ("special", SPECIALS),
        ]
        toks, kinds = [], []
        for kind, spellings in groups:
            toks.extend(spellings)
            kinds.extend([kind] * len(spellings))
        return cls(tuple(toks), tuple(kinds))

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, spelling: str) -> int:
        return self._index[spelling]

    def get(self, spelling: str) -> int | None:
        return self._index.get(spelling)

    def spelling(self, token_id: int) -> str:
        return self.tokens[token_id]

    @property
    def PAD(self) -> int:
        return self._index["<pad>"]

    @property
    def END(self) -> int:
        return self._index["<end>"]

    @property
    def HASH(self) -> int:
        return self._index["#"]

    @property
    def NEWLINE(self) -> int:
        return self._index["NEWLINE"]

    def is_code_token(self, token_id: int) -> bool:
        # vocabulary-level class; <end> is a control token, not program text
        return self.kinds[token_id] not in ("comment", "special")

    def ids_of_kind(self, *kinds: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k in kinds]

    @property
    def variable_ids(self) -> list[int]:
        return self.ids_of_kind("ident")

    @property
    def hash(self) -> str:
        payload = "\n".join(f"{t}\t{k}" for t, k in zip(self.tokens, self.kinds))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


VOCAB = Vocabulary.default()


def tokenize(text: str, vocab: Vocabulary = VOCAB) -> list[int]:
    """Map source text to token ids. Line breaks become ``NEWLINE``."""
    ids: list[int] = []
    for li, line in enumerate(text.split("\n")):
        if li > 0:
            ids.append(vocab.NEWLINE)
        for word in line.split():
            tid = vocab.get(word)
            if tid is None:
                raise UnknownLexeme(word, len(ids))
            ids.append(tid)
    return ids


def detokenize(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> str:
    out: list[str] = []
    line: list[str] = []
    for tid in ids:
        tid = int(tid)
        if tid == vocab.PAD:
            continue
        if tid == vocab.NEWLINE:
            out.append(" ".join(line))
            line = []
        else:
            line.append(vocab.spelling(tid))
    out.append(" ".join(line))
    return "\n".join(out)


def code_mask(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> list[bool]:
    """Sequence-level code classification.

    Comment spans (``#`` up to, not including, the next ``NEWLINE``), PAD,
    comment-pool words and ``<end>`` are non-code.
    """
    mask = []
    in_comment = False
    for tid in ids:
        tid = int(tid)
        if tid == vocab.HASH:
            in_comment = True
        elif tid == vocab.NEWLINE:
            in_comment = False
        mask.append(not in_comment and vocab.is_code_token(tid))
    return mask


# --------------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: int
    pos: int


@dataclass(frozen=True)
class Var:
    name: str
    pos: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int


Expr = Num | Var | BinOp


@dataclass(frozen=True)
class Let:
    name: str
    expr: Expr


@dataclass(frozen=True)
class Return:
    expr: Expr


@dataclass(frozen=True)
class If:
    cond: Expr
    then: "Stmt"
    orelse: "Stmt"


Stmt = Let | Return | If


@dataclass(frozen=True)
class Program:
    name: str
    params: tuple[str, ...]
    body: tuple[Stmt, ...]

    @property
    def arity(self) -> int:
        return len(self.params)


class _Parser:
    # binary precedence levels, loosest first
    LEVELS = (("<", "=="), ("+", "-"), ("*", "%"))

    def __init__(self, toks: list[str], positions: list[int]):
        self.toks = toks
        self.positions = positions
        self.i = 0

    def pos(self) -> int:
        if self.i < len(self.positions):
            return self.positions[self.i]
        return self.positions[-1] + 1 if self.positions else 0

    def peek(self) -> str | None:
        return self.toks[self.i] if self.i < len(self.toks) else None

    def fail(self, *expected: str):
        raise ParseError(self.pos(), expected)

    def expect(self, *spellings: str) -> str:
        tok = self.peek()
        if tok not in spellings:
            self.fail(*spellings)
        self.i += 1
        return tok

    def skip_blank(self):
        while self.peek() == "NEWLINE":
            self.i += 1

    def ident(self) -> str:
        tok = self.peek()
        if tok not in IDENTIFIERS:
            self.fail("identifier")
        self.i += 1
        return tok

    def program(self) -> Program:
        self.skip_blank()
        self.expect("fn")
        tok = self.peek()
        if tok not in FUNCTION_NAMES and tok not in IDENTIFIERS:
            self.fail("function name")
        self.i += 1
        name = tok
        self.expect("(")
        params: list[str] = []
        if self.peek() != ")":
            params.append(self.ident())
            if self.peek() == ",":
                self.i += 1
                at = self.pos()
                p = self.ident()
                if p in params:
                    raise ParseError(at, ("identifier",), f"duplicate parameter {p!r} at token {at}")
                params.append(p)
        self.expect(")")
        self.expect(":")
        self.expect("NEWLINE")
        scope = set(params)
        body: list[Stmt] = []
        while True:
            self.skip_blank()
            if self.peek() == "let":
                body.append(self.let(scope))
                continue
            body.append(self.terminal(scope))
            break
        self.skip_blank()
        if self.peek() == "<end>":
            self.i += 1
        if self.peek() is not None:
            self.fail("<end>")
        return Program(name, tuple(params), tuple(body))

    def let(self, scope: set[str]) -> Let:
        self.expect("let")
        name = self.ident()
        self.expect("=")
        expr = self.expr(scope)
        self.expect("NEWLINE")
        scope.add(name)
        return Let(name, expr)

    def terminal(self, scope: set[str]) -> Stmt:
        tok = self.peek()
        if tok == "return":
            self.i += 1
            expr = self.expr(scope)
            self.expect("NEWLINE")
            return Return(expr)
        if tok == "if":
            self.i += 1
            cond = self.expr(scope)
            self.expect(":")
            self.expect("NEWLINE")
            self.skip_blank()
            then = self.terminal(scope)
            self.skip_blank()
            self.expect("else")
            self.expect(":")
            self.expect("NEWLINE")
            self.skip_blank()
            orelse = self.terminal(scope)
            return If(cond, then, orelse)
        self.fail("let", "return", "if")

    def expr(self, scope: set[str], level: int = 0) -> Expr:
        if level == len(self.LEVELS):
            return self.atom(scope)
        left = self.expr(scope, level + 1)
        while self.peek() in self.LEVELS[level]:
            at = self.pos()
            op = self.toks[self.i]
            self.i += 1
            right = self.expr(scope, level + 1)
            left = BinOp(op, left, right, at)
        return left

    def atom(self, scope: set[str]) -> Expr:
        tok = self.peek()
        at = self.pos()
        if tok in DIGITS:
            self.i += 1
            return Num(int(tok), at)
        if tok in IDENTIFIERS:
            if tok not in scope:
                raise ParseError(at, ("bound identifier",), f"unbound identifier {tok!r} at token {at}")
            self.i += 1
            return Var(tok, at)
        if tok == "(":
            self.i += 1
            inner = self.expr(scope)
            self.expect(")")
            return inner
        self.fail("digit", "identifier", "(")


def parse_program(ids: Sequence[int], vocab: Vocabulary = VOCAB) -> Program:
    """Parse a token sequence into a :class:`Program`.

    PAD tokens are dropped and comment spans are blanked before parsing;
    reported positions index the original sequence. Raises :class:`ParseError`.
    """
    toks: list[str] = []
    positions: list[int] = []
    in_comment = False
    for pos, tid in enumerate(ids):
        tid = int(tid)
        if tid == vocab.PAD:
            continue
        if tid == vocab.HASH:
            in_comment = True
            continue
        if tid == vocab.NEWLINE:
            in_comment = False
        if in_comment:
            continue
        toks.append(vocab.spelling(tid))
        positions.append(pos)
    return _Parser(toks, positions).program()


# --------------------------------------------------------------------- execution


@dataclass(frozen=True)
class ExecOutcome:
    kind: str  # value | parse_error | runtime_error | fuel_exhausted
    value: int | None = None
    steps_used: int = 0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.kind == "value"


class _Halt(Exception):
    def __init__(self, kind: str, detail: str):
        self.kind = kind
        self.detail = detail


class _Machine:
    def __init__(self, fuel: int):
        self.fuel = fuel
        self.steps = 0

    def tick(self):
        if self.steps >= self.fuel:
            raise _Halt("fuel_exhausted", f"fuel {self.fuel} exhausted")
        self.steps += 1

    def eval(self, e: Expr, env: dict[str, int]) -> int:
        self.tick()
        if isinstance(e, Num):
            return e.value
        if isinstance(e, Var):
            if e.name not in env:
                raise _Halt("runtime_error", f"unbound identifier {e.name!r}")
            return env[e.name]
        a = self.eval(e.left, env)
        b = self.eval(e.right, env)
        if e.op == "+":
            r = a + b
        elif e.op == "-":
            r = a - b
        elif e.op == "*":
            r = a * b
        elif e.op == "%":
            if b == 0:
                raise _Halt("runtime_error", "modulo by zero")
            r = a % b
        elif e.op == "<":
            r = int(a < b)
        else:
            r = int(a == b)
        if r < INT_MIN or r > INT_MAX:
            raise _Halt("runtime_error", "arithmetic overflow")
        return r

    def run(self, stmts: Sequence[Stmt], env: dict[str, int]) -> int:
        for s in stmts:
            self.tick()
            if isinstance(s, Let):
                env[s.name] = self.eval(s.expr, env)
            elif isinstance(s, Return):
                return self.eval(s.expr, env)
            else:
                branch = s.then if self.eval(s.cond, env) != 0 else s.orelse
                return self.run([branch], env)
        raise _Halt("runtime_error", "fell off the end of the function")


def execute(prog: Program, args: Sequence[int], fuel: int = DEFAULT_FUEL) -> ExecOutcome:
    """Run ``prog`` on ``args``. Never raises for program-level failures."""
    if len(args) != prog.arity:
        raise ValueError(f"expected {prog.arity} arguments, got {len(args)}")
    if fuel < 1:
        raise ValueError("fuel must be >= 1")
    m = _Machine(fuel)
    env = {p: int(a) for p, a in zip(prog.params, args)}
    try:
        value = m.run(prog.body, env)
    except _Halt as h:
        return ExecOutcome(h.kind, None, m.steps, h.detail)
    return ExecOutcome("value", value, m.steps)


@dataclass(frozen=True)
class TestCase:
    args: tuple[int, ...]
    expected: int

    __test__ = False  # keep pytest from collecting this


@dataclass
class TestReport:
    passed: bool
    outcomes: list[ExecOutcome] = field(default_factory=list)
    parse_error: ParseError | None = None

    __test__ = False


def run_tests(prog_ids: Sequence[int], suite: Sequence[TestCase], fuel: int = DEFAULT_FUEL,
              vocab: Vocabulary = VOCAB) -> TestReport:
    """Parse and run ``prog_ids`` against ``suite``; all failures fold into ``passed``."""
    try:
        prog = parse_program(prog_ids, vocab)
    except ParseError as err:
        return TestReport(False, [], err)
    outcomes = []
    passed = len(suite) > 0
    for case in suite:
        if len(case.args) != prog.arity:
            out = ExecOutcome("runtime_error", detail="arity mismatch")
        else:
            out = execute(prog, case.args, fuel)
        outcomes.append(out)
        passed = passed and out.ok and out.value == case.expected
    return TestReport(passed, outcomes, None)
