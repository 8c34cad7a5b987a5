import hashlib
import json
from pathlib import Path

import pytest

from policymark.cli import UsageError, read_config_file, run_command

SMALL_CFG = """# tiny policy so the tests stay fast
seed = 3
d_model = 16
n-layers = 1
n_heads = 2
d_ff = 32
group_size = 3
eval_tasks = 6
"""


def _run(*argv):
    return run_command([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("pipeline")
    (d / "run.cfg").write_text(SMALL_CFG)
    assert _run("corpus-gen", "--n", 120, "--out", d / "train.jsonl") == 0
    assert _run("corpus-gen", "--n", 20, "--seed", 1, "--prefix", "eval", "--out", d / "eval.jsonl") == 0
    assert _run("fit-lm", "--corpus", d / "train.jsonl", "--out", d / "lm.tsv") == 0
    assert _run("train", "--config", d / "run.cfg", "--corpus", d / "train.jsonl", "--base-lm", d / "lm.tsv",
                "--steps", 2, "--out", d / "p.ckpt") == 0
    return d


def test_config_file_parsing(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text("# header\n delta = 3.0  # trailing\n\nmax-completion-length=12\n")
    assert read_config_file(p) == {"delta": "3.0", "max_completion_length": "12"}
    p.write_text("delta 3\n")
    with pytest.raises(UsageError):
        read_config_file(p)


def test_unknown_flag_exits_1_without_files(tmp_path, capsys):
    out = tmp_path / "x.jsonl"
    assert _run("corpus-gen", "--n", 5, "--bogus", 1, "--out", out) == 1
    assert "--bogus" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_unknown_command_and_config_key(tmp_path):
    assert _run("frobnicate") == 1
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert _run("corpus-gen", "--config", cfg, "--out", tmp_path / "t.jsonl") == 1
    assert not (tmp_path / "t.jsonl").exists()


def test_missing_input_is_usage_error(tmp_path):
    assert _run("fit-lm", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "lm.tsv") == 1
    assert _run("fit-lm", "--out", tmp_path / "lm.tsv") == 1


def test_runtime_failure_exits_2(workdir, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("return @\n")
    assert _run("detect", "--policy", workdir / "p.ckpt", "--input", bad, "--out", tmp_path / "d.json") == 2


def test_flags_override_config(workdir, tmp_path):
    out = tmp_path / "t.jsonl"
    cfg = tmp_path / "c.cfg"
    cfg.write_text("n = 7\nseed = 2\n")
    assert _run("corpus-gen", "--config", cfg, "--n", 4, "--out", out) == 0
    assert len(out.read_text().splitlines()) == 1 + 4
    meta = json.loads(Path(str(out) + ".meta.json").read_text())
    assert meta["config"]["n"] == 4 and meta["config"]["seed"] == 2


def test_metadata_lists_every_parameter(workdir):
    meta = json.loads((workdir / "p.ckpt.meta.json").read_text())
    for key in ("delta", "gamma", "tau", "switch_threshold", "group_size", "lr", "alpha", "beta", "ent_coef",
                "steps", "d_model", "threads", "seed"):
        assert key in meta["config"]
    assert meta["seeds"] == {"seed": 3}
    assert set(meta["inputs"]) == {"corpus", "base_lm"}


def test_train_zero_steps_keeps_init(workdir, tmp_path):
    out = tmp_path / "same.ckpt"
    assert _run("train", "--config", workdir / "run.cfg", "--corpus", workdir / "train.jsonl",
                "--base-lm", workdir / "lm.tsv", "--init", workdir / "p.ckpt", "--steps", 0, "--out", out) == 0
    assert out.read_bytes() == (workdir / "p.ckpt").read_bytes()


def test_detect_text_and_id_files_agree(workdir, tmp_path, capsys):
    assert _run("generate", "--policy", workdir / "p.ckpt", "--base-lm", workdir / "lm.tsv",
                "--corpus", workdir / "eval.jsonl", "--n", 4,
                "--out", tmp_path / "g.jsonl", "--text-out", tmp_path / "g.txt") == 0
    rows = [json.loads(l) for l in (tmp_path / "g.jsonl").read_text().splitlines()]
    ids = [t for r in rows for t in r["completion"]]
    (tmp_path / "g.ids").write_text(" ".join(map(str, ids)))
    (tmp_path / "g.json").write_text(json.dumps(ids))
    capsys.readouterr()
    reports = []
    for name in ("g.txt", "g.ids", "g.json"):
        assert _run("detect", "--policy", workdir / "p.ckpt", "--input", tmp_path / name,
                    "--out", tmp_path / f"{name}.det") == 0
        reports.append(json.loads((tmp_path / f"{name}.det").read_text()))
    assert reports[0] == reports[1] == reports[2]
    printed = capsys.readouterr().out
    assert "z = " in printed and "verdict = " in printed
    # per-position decisions agree with the generation-time trace
    trace = [p for r in rows for p in r["trace"]]
    assert [p["w"] for p in reports[0]["per_position"]] == [p["w"] for p in trace]
    assert [p["in_G"] for p in reports[0]["per_position"]] == [p["in_G"] for p in trace]


def _digest_dir(d: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


def run_full_pipeline(d: Path) -> None:
    """Every command once, small sizes, all outputs inside ``d``."""
    d.mkdir(parents=True, exist_ok=True)
    (d / "run.cfg").write_text(SMALL_CFG)
    steps = [
        ("corpus-gen", "--n", 80, "--out", d / "train.jsonl"),
        ("corpus-gen", "--n", 12, "--seed", 1, "--prefix", "eval", "--out", d / "eval.jsonl"),
        ("fit-lm", "--corpus", d / "train.jsonl", "--out", d / "lm.tsv"),
        ("sft", "--config", d / "run.cfg", "--corpus", d / "train.jsonl", "--base-lm", d / "lm.tsv",
         "--sft-steps", 5, "--out", d / "sft.ckpt"),
        ("train", "--config", d / "run.cfg", "--corpus", d / "train.jsonl", "--eval-corpus", d / "eval.jsonl",
         "--base-lm", d / "lm.tsv", "--init", d / "sft.ckpt", "--steps", 2, "--out", d / "p.ckpt"),
        ("generate", "--config", d / "run.cfg", "--policy", d / "p.ckpt", "--base-lm", d / "lm.tsv",
         "--corpus", d / "eval.jsonl", "--n", 4, "--out", d / "g.jsonl", "--text-out", d / "g.txt"),
        ("detect", "--config", d / "run.cfg", "--policy", d / "p.ckpt", "--input", d / "g.txt",
         "--out", d / "det.json"),
        ("eval", "--config", d / "run.cfg", "--policy", d / "p.ckpt", "--base-lm", d / "lm.tsv",
         "--corpus", d / "eval.jsonl", "--n-samples", 2, "--out", d / "ev.json", "--csv", d / "ev.csv"),
        ("attack-eval", "--config", d / "run.cfg", "--policy", d / "p.ckpt", "--base-lm", d / "lm.tsv",
         "--corpus", d / "eval.jsonl", "--n-samples", 2, "--out", d / "at.json"),
    ]
    for argv in steps:
        assert _run(*argv) == 0, argv


def test_every_command_is_byte_identical(tmp_path, monkeypatch):
    digests = []
    for run in ("a", "b"):
        # same relative paths in both runs, so metadata files match too
        base = tmp_path / run
        base.mkdir()
        monkeypatch.chdir(base)
        run_full_pipeline(Path("w"))
        digests.append(_digest_dir(base / "w"))
    assert digests[0] == digests[1]
    assert len(digests[0]) >= 20
