import json
import subprocess
import sys

import pytest

from queryclf.cli import ABLATION_COLUMNS, run


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.cfg").write_text("learning_rate = 0.001\nepochs = 2\ndim = 16\nbatch_size = 32\n")
    assert run(["synth", "--labels", "10", "--queries", "200", "--tail-fraction", "0.2", "--probes", "40", "--seed", "3", "--out-dir", str(d / "corpus")]) == 0
    return d


def corpus_args(d, knowledge=True):
    args = ["--taxonomy", str(d / "corpus" / "taxonomy.jsonl"), "--clicks", str(d / "corpus" / "clicks.jsonl")]
    if knowledge:
        args += ["--knowledge", str(d / "corpus" / "knowledge.jsonl")]
    return args


@pytest.fixture(scope="module")
def trained_dir(workdir):
    out = workdir / "run"
    code = run(["train", *corpus_args(workdir), "--config", str(workdir / "small.cfg"), "--out-dir", str(out)])
    assert code == 0
    return out


def test_synth_writes_files(workdir):
    names = {p.name for p in (workdir / "corpus").iterdir()}
    assert {"taxonomy.jsonl", "clicks.jsonl", "knowledge.jsonl", "probes.jsonl"} <= names


def test_stats_prints_json(workdir, capsys):
    assert run(["stats", "--clicks", str(workdir / "corpus" / "clicks.jsonl")]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["num_queries"] == 200
    assert stats["min_labels"] <= stats["avg_labels"] <= stats["max_labels"]


def test_build_graph(workdir, trained_dir):
    out = workdir / "g.txt"
    assert run(["build-graph", *corpus_args(workdir), "--out", str(out), "--config", str(workdir / "small.cfg")]) == 0
    assert out.read_text().startswith("{")
    rebuilt = workdir / "g2.txt"
    assert run(["build-graph", *corpus_args(workdir), "--model", str(trained_dir / "last.ckpt"), "--out", str(rebuilt)]) == 0
    assert rebuilt.read_text() != out.read_text()  # similarity edges now come from the trained encoder


def test_train_outputs(trained_dir):
    names = {p.name for p in trained_dir.iterdir()}
    assert {"last.ckpt", "best.ckpt", "graph.txt", "vocab.jsonl", "metrics.jsonl", "events.jsonl", "config.cfg"} <= names
    records = [json.loads(l) for l in (trained_dir / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    assert {"epoch", "tau", "train_loss", "val_micro_f1", "val_macro_f1"} <= set(records[0])


def test_eval_with_per_label(workdir, trained_dir, capsys):
    tsv = workdir / "per_label.tsv"
    code = run(
        [
            "eval",
            *corpus_args(workdir, knowledge=False),
            "--model", str(trained_dir / "last.ckpt"),
            "--graph", str(trained_dir / "graph.txt"),
            "--per-label", str(tsv),
            "--threshold", "0.4",
        ]
    )
    assert code == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"micro", "macro", "head_bucket", "tail_bucket"}
    lines = tsv.read_text().splitlines()
    assert lines[0].split("\t") == ["id", "name", "clicks", "tp", "fp", "fn", "p", "r", "f1"]
    assert len(lines) == 11


@pytest.fixture(scope="module")
def cache_path(workdir, trained_dir):
    out = workdir / "leaf.cache"
    code = run(
        [
            "export-cache",
            "--taxonomy", str(workdir / "corpus" / "taxonomy.jsonl"),
            "--model", str(trained_dir / "last.ckpt"),
            "--graph", str(trained_dir / "graph.txt"),
            "--out", str(out),
        ]
    )
    assert code == 0
    return out


def test_predict(cache_path, capsys):
    assert run(["predict", "--cache", str(cache_path), "--query", "s003 n01"]) == 0
    resp = json.loads(capsys.readouterr().out)
    assert resp["labels"] and {"id", "name", "score"} == set(resp["labels"][0])


def test_batch_predict(workdir, cache_path):
    (workdir / "q.jsonl").write_text('{"query": "s001"}\n{"query": "s002 a002"}\n')
    assert run(["batch-predict", "--cache", str(cache_path), "--in", str(workdir / "q.jsonl"), "--out", str(workdir / "p.jsonl")]) == 0
    assert len((workdir / "p.jsonl").read_text().splitlines()) == 2


def test_serve_over_stdio(cache_path):
    proc = subprocess.run(
        [sys.executable, "-m", "queryclf", "serve", "--cache", str(cache_path)],
        input='{"query": "s004"}\nnope\n',
        capture_output=True,
        text=True,
        timeout=60,
    )
    assert proc.returncode == 0
    lines = [json.loads(l) for l in proc.stdout.splitlines()]
    assert "labels" in lines[0] and lines[1]["error"]["code"] == "bad_request"


def test_semi_targets_dump(workdir, trained_dir):
    out = workdir / "semi.jsonl"
    code = run(
        [
            "semi-targets", *corpus_args(workdir),
            "--model", str(trained_dir / "last.ckpt"),
            "--graph", str(trained_dir / "graph.txt"),
            "--tau", "0.5",
            "--out", str(out),
        ]
    )
    assert code == 0
    rows = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(rows) == 200
    assert all(v >= 0.5 for r in rows for _, v in r["targets"])


def test_ablate_table(workdir, capsys):
    out = workdir / "abl"
    code = run(
        [
            "ablate", *corpus_args(workdir),
            "--config", str(workdir / "small.cfg"),
            "--eval-clicks", str(workdir / "corpus" / "probes.jsonl"),
            "--out-dir", str(out),
        ]
    )
    assert code == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    header = lines[0].split("\t")
    assert header[0] == "variant" and len(header) == 13
    assert header[1:7] == [f"test_{c}" for c in ABLATION_COLUMNS]
    assert [l.split("\t")[0] for l in lines[1:]] == ["full", "w/o SE-S", "w/o SE-C", "w/o SE-H", "w/o SE", "w/o KE", "w/o LE&KE"]


def test_resolved_config_is_echoed(workdir, capsys):
    run(["stats", "--clicks", str(workdir / "corpus" / "clicks.jsonl"), "--config", str(workdir / "small.cfg")])
    first = capsys.readouterr().err.splitlines()[0]
    echoed = json.loads(first)
    assert echoed["command"] == "stats" and echoed["resolved"]["config"]["epochs"] == 2


def test_no_semi_flag_turns_the_key_off(workdir, capsys):
    out = workdir / "nosemi"
    args = ["train", *corpus_args(workdir), "--config", str(workdir / "small.cfg"), "--no-semi", "--no-knowledge", "--out-dir", str(out)]
    assert run(args) == 0
    cfg = json.loads(capsys.readouterr().err.splitlines()[0])["resolved"]["config"]
    assert cfg["use_semi"] is False and cfg["use_knowledge"] is False
    assert "use_semi = false" in (out / "config.cfg").read_text()


def test_global_flags_before_the_subcommand(workdir, capsys):
    assert run(["--seed", "5", "synth", "--labels", "4", "--queries", "8", "--out-dir", str(workdir / "s5")]) == 0
    assert json.loads(capsys.readouterr().err.splitlines()[0])["resolved"]["seed"] == 5


# ---------------------------------------------------------------------------
# exit codes


def test_unknown_flag_exits_1(capsys):
    assert run(["stats", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_exits_1():
    assert run([]) == 1


def test_invalid_config_value_names_the_key(workdir, capsys):
    bad = workdir / "bad.cfg"
    bad.write_text("alpha_threshold = 1.7\n")
    assert run(["train", *corpus_args(workdir), "--config", str(bad), "--out-dir", str(workdir / "x")]) == 1
    assert "alpha_threshold" in capsys.readouterr().err


def test_invalid_split_ratio_exits_1(workdir, capsys):
    code = run(["train", *corpus_args(workdir), "--split", "0.5,0.5,0.5", "--out-dir", str(workdir / "y")])
    assert code == 1
    assert "split_ratios" in capsys.readouterr().err


def test_missing_file_exits_1(workdir):
    assert run(["stats", "--clicks", str(workdir / "nope.jsonl")]) == 1


def test_corrupt_checkpoint_is_a_runtime_error(workdir, cache_path):
    # a cache file is not a checkpoint
    code = run(["eval", *corpus_args(workdir, knowledge=False), "--model", str(cache_path)])
    assert code == 2


def test_help_exits_0(capsys):
    assert run(["--help"]) == 0
    assert "ablate" in capsys.readouterr().out
