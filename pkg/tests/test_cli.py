import json

import pytest

from attrgau import checkpoint
from attrgau.cli import build_parser, run

VERBS = ["synth", "preprocess", "build-graph", "train", "evaluate", "analyze-attributes", "robustness"]
FAST = ["--set", "hidden_dim=8", "--set", "max_epochs=1", "--set", "batch_size=100"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--items", "50", "--sessions", "200", "--coherence", "0.8", "--seed", "1",
                "--out", str(d / "raw")]) == 0
    assert run(["preprocess", "--events", str(d / "raw" / "events.tsv"), "--attributes",
                str(d / "raw" / "attributes.tsv"), "--min-count", "1", "--test-fraction", "0.2",
                "--out", str(d / "b.npz")]) == 0
    assert run(["build-graph", "--bundle", str(d / "b.npz"), "--out", str(d / "g.npz")]) == 0
    return d


@pytest.mark.parametrize("verb", VERBS)
def test_help_for_every_verb(verb, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([verb, "--help"])
    assert info.value.code == 0
    assert "file formats" in capsys.readouterr().out


def test_usage_errors_exit_1(workdir, capsys):
    assert run([]) == 1
    assert run(["train", "--bogus"]) == 1
    assert run(["train", "--bundle", str(workdir / "b.npz"), "--config", str(workdir / "missing.cfg")]) == 1
    assert run(["train", "--bundle", str(workdir / "b.npz"), "--set", "nope=1"]) == 1
    assert run(["train", "--bundle", str(workdir / "b.npz"), "--set", "novalue"]) == 1
    assert run(["train", "--bundle", str(workdir / "b.npz"), "--variant", "xyz"]) == 1


def test_data_errors_exit_2(workdir, tmp_path):
    assert run(["preprocess", "--events", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "x.npz")]) == 2
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    assert run(["evaluate", "--bundle", str(workdir / "b.npz"), "--checkpoint", str(bad)]) == 2


def test_train_and_evaluate(workdir, capsys):
    ck, rep = workdir / "m.ckpt", workdir / "r.jsonl"
    args = ["train", "--bundle", str(workdir / "b.npz"), "--graph", str(workdir / "g.npz"), *FAST,
            "--seed", "3", "--report", str(rep), "--checkpoint", str(ck)]
    assert run(args) == 0
    first = rep.read_text()
    lines = [json.loads(x) for x in first.splitlines()]
    assert lines[-1]["type"] == "summary" and lines[-1]["config"]["seed"] == 3
    assert "wall_clock_seconds" not in lines[-1]
    meta = checkpoint.load(ck)[1]
    assert meta["config"]["hidden_dim"] == 8
    assert run(args) == 0
    assert rep.read_text() == first

    capsys.readouterr()
    assert run(["evaluate", "--bundle", str(workdir / "b.npz"), "--checkpoint", str(ck), "--groups", "3",
                "--plot-data", str(workdir / "groups.dat")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["HR@5"] == lines[-1]["best_metrics"]["HR@5"]
    assert len(out["groups"]) == 3 and (workdir / "groups.dat").read_text().startswith("# group")
    assert run(["evaluate", "--bundle", str(workdir / "b.npz"), "--checkpoint", str(ck),
                "--noise-ratio", "0.5", "--out", str(workdir / "noisy.json")]) == 0
    assert "MRR@5" in json.loads((workdir / "noisy.json").read_text())


def test_precedence(workdir, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("hidden_dim = 6\nseed = 9\nmax_epochs = 1\n")
    rep = tmp_path / "r.jsonl"
    assert run(["train", "--bundle", str(workdir / "b.npz"), "--config", str(cfg), "--set", "hidden_dim=4",
                "--seed", "2", "--variant", "vanilla", "--report", str(rep)]) == 0
    conf = json.loads(rep.read_text().splitlines()[-1])["config"]
    assert conf["hidden_dim"] == 4 and conf["seed"] == 2 and conf["use_attributes"] is False


def test_analyze_and_data_dir(workdir, monkeypatch, capsys):
    monkeypatch.setenv("ATTRGAU_DATA_DIR", str(workdir))
    capsys.readouterr()
    assert run(["analyze-attributes", "--bundle", "b.npz"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["parent_MRR"] >= out["leaf_MRR"] >= 0 and out["split"] == "test"


def test_robustness(workdir, tmp_path):
    out = tmp_path / "rob"
    assert run(["robustness", "--bundle", str(workdir / "b.npz"), *FAST, "--fractions", "0.5",
                "--noise-ratios", "0.5", "--depths", "1", "--out", str(out)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"fraction_0.5_enhanced.jsonl", "fraction_0.5_vanilla.jsonl", "depth_1.jsonl", "noise_base_vanilla.jsonl"} <= names
    assert {"fractions.dat", "noise.dat", "depths.dat"} <= names
    assert run(["robustness", "--bundle", str(workdir / "b.npz"), "--out", str(out)]) == 1


def test_named_test_window(workdir, capsys):
    events = str(workdir / "raw" / "events.tsv")
    capsys.readouterr()
    assert run(["preprocess", "--events", events, "--min-count", "1", "--test-window", "retailrocket",
                "--out", str(workdir / "w.npz")]) == 0
    named = json.loads(capsys.readouterr().out)
    assert run(["preprocess", "--events", events, "--min-count", "1", "--test-window-ms", str(2 * 86_400_000),
                "--out", str(workdir / "w2.npz")]) == 0
    assert json.loads(capsys.readouterr().out) == named
    assert run(["preprocess", "--events", events, "--test-window", "diginetica", "--test-window-ms", "5",
                "--out", str(workdir / "w3.npz")]) == 1
