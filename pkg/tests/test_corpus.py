import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policymark.corpus import (
    TEMPLATES,
    DegenerateTemplate,
    FormatError,
    check_task,
    derive_tests,
    load_tasks,
    make_corpus,
    render_variant,
    sample_task,
    save_tasks,
)
from policymark.minilang import VOCAB, execute, parse_program, tokenize


def test_pool_size():
    assert len(TEMPLATES) >= 12
    assert len({t.template_id for t in TEMPLATES}) == len(TEMPLATES)


def test_sample_task_deterministic():
    assert sample_task(0) == sample_task(0)
    assert sample_task(0) != sample_task(1)


def test_template_coverage_over_1000_samples():
    seen = {sample_task(s).template_id for s in range(1000)}
    assert seen == {t.template_id for t in TEMPLATES}


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sampled_task_passes_own_suite(seed):
    task = sample_task(seed)
    assert check_task(task)
    assert task.prompt[-1] == VOCAB.NEWLINE
    assert task.prompt[-2] == VOCAB.id(":")
    assert len(task.tests) == 3


def test_empty_pool_rejected():
    with pytest.raises(ValueError):
        sample_task(0, pool=())


def test_derive_tests_add():
    prog = parse_program(tokenize("fn f ( a , b ) :\nreturn a + b\n"))
    cases = derive_tests(prog, 3, seed=7)
    assert len(cases) == 3
    for c in cases:
        assert c.expected == sum(c.args)
        assert all(-9 <= a <= 9 for a in c.args)
    assert derive_tests(prog, 3, seed=7) == cases


def test_derive_tests_skips_erroring_draws():
    prog = parse_program(tokenize("fn f ( a , b ) :\nreturn a % b\n"))
    cases = derive_tests(prog, 50, seed=3)
    assert len(cases) == 50
    assert all(c.args[1] != 0 for c in cases)


def test_derive_tests_degenerate():
    prog = parse_program(tokenize("fn f ( a ) :\nreturn a % 0\n"))
    with pytest.raises(DegenerateTemplate):
        derive_tests(prog, 3, seed=0)


def test_derive_tests_needs_a_case():
    prog = parse_program(tokenize("fn f ( a ) :\nreturn a\n"))
    with pytest.raises(ValueError):
        derive_tests(prog, 0, seed=0)


def test_variant_axes_are_exercised():
    rng = np.random.default_rng(0)
    bodies = {tuple(render_variant(TEMPLATES[0], rng)[1]) for _ in range(200)}
    assert len(bodies) > 5
    assert any(b.count("let") == 2 for b in bodies)


def test_file_round_trip(tmp_path):
    tasks = make_corpus(100, seed=5)
    path = tmp_path / "tasks.jsonl"
    save_tasks(path, tasks)
    assert load_tasks(path) == tasks


def test_empty_file_has_header_only(tmp_path):
    path = tmp_path / "empty.jsonl"
    save_tasks(path, [])
    assert len(path.read_text().splitlines()) == 1
    assert load_tasks(path) == []


def test_truncated_file_reports_line(tmp_path):
    path = tmp_path / "tasks.jsonl"
    save_tasks(path, make_corpus(5, seed=1))
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(FormatError) as err:
        load_tasks(path)
    assert err.value.line == 6


def test_vocab_hash_checked(tmp_path):
    path = tmp_path / "tasks.jsonl"
    save_tasks(path, make_corpus(2, seed=1))
    path.write_text(path.read_text().replace(VOCAB.hash, "0" * 16))
    with pytest.raises(FormatError):
        load_tasks(path)


def test_all_variants_agree_on_100_inputs():
    """Exhaustive over the pool: many variants per template, each checked on 100 inputs."""
    rng = np.random.default_rng(11)
    for tpl in TEMPLATES:
        p0, b0 = render_variant(tpl, np.random.default_rng(0), n_redundant=0)
        ref = parse_program(tokenize(" ".join(p0 + b0)))
        args = rng.integers(-9, 10, size=(100, tpl.arity))
        expected = [execute(ref, [int(x) for x in a]) for a in args]
        for _ in range(20):
            p, b = render_variant(tpl, rng)
            var = parse_program(tokenize(" ".join(p + b)))
            for a, e in zip(args, expected):
                got = execute(var, [int(x) for x in a])
                assert (got.kind, got.value) == (e.kind, e.value)
