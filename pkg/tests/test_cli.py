import csv
import io

import pytest

from topomix import cli
from topomix.domain import N_ACTIONS, RunConfig
from topomix.metrics import COLUMNS, read_metrics
from topomix.numerics import TrainingFault

SMALL = "hidden_dim = 8\nmixing_dim = 4\nhyper_hidden = 4\nepisodes = 30\ncheckpoint_interval = 10\n"


def run(*argv):
    out = io.StringIO()
    code = cli.main(list(argv), out=out)
    return code, out.getvalue()


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "small.cfg"
    p.write_text(SMALL)
    return p


@pytest.fixture
def checkpoint(tmp_path, small_config):
    code, _ = run("train", "--config", str(small_config), "--out", str(tmp_path / "ck"),
                  "--suite", "easy")
    assert code == 0
    return tmp_path / "ck" / "checkpoint_000010.aqmx"


def test_missing_config_exit_2(tmp_path):
    code, _ = run("train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path))
    assert code == 2


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("learning_rate = 3\n")
    assert run("train", "--config", str(p), "--out", str(tmp_path / "o"))[0] == 2


def test_unknown_verb_exit_2():
    assert run("fly")[0] == 2


def test_train_outputs_and_determinism(tmp_path, small_config):
    for d in ("a", "b"):
        code, _ = run("train", "--config", str(small_config), "--seed", "3",
                      "--out", str(tmp_path / d))
        assert code == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "final.aqmx").read_bytes() == (b / "final.aqmx").read_bytes()
    for k in (10, 20, 30):
        assert (a / f"checkpoint_{k:06d}.aqmx").exists()
    with open(a / "metrics.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == COLUMNS
    assert len(rows) - 1 == 30
    recs = read_metrics(a / "metrics.csv")
    assert all(sum(r.action_counts) == 6 for r in recs)
    assert RunConfig.from_text((a / "config.txt").read_text()).seed == 3


def test_training_fault_exit_3(tmp_path, small_config, monkeypatch):
    def boom(self, batch):
        raise TrainingFault("injected")

    monkeypatch.setattr("topomix.trainer.Trainer.train_step", boom)
    assert run("train", "--config", str(small_config), "--out", str(tmp_path / "f"))[0] == 3


def test_eval_untrained_easy_is_accurate_and_solo(tmp_path):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text(SMALL.replace("episodes = 30", "episodes = 1"))
    run("train", "--config", str(cfg), "--out", str(tmp_path / "z"), "--suite", "easy")
    # one episode never reaches a gradient step, so the network is untouched
    code, text = run("eval", "--checkpoint", str(tmp_path / "z" / "final.aqmx"))
    assert code == 0
    report = dict(line.split(",") for line in text.strip().splitlines()[1:])
    assert float(report["accuracy"]) == 1.0
    assert float(report["tokens"]) == 2 * 200 * 3
    code, text = run("analyze", "--checkpoint", str(tmp_path / "z" / "final.aqmx"))
    hist = text.split("# round_density")[0].strip().splitlines()[2:]
    for row in hist:
        counts = [int(c) for c in row.split(",")[1:]]
        assert counts[0] == sum(counts) == 3 * 15


def test_eval_adversary_report(checkpoint):
    code, text = run("eval", "--checkpoint", str(checkpoint), "--suite", "hard", "--adversary")
    assert code == 0
    report = dict(line.split(",") for line in text.strip().splitlines()[1:])
    for key in ("delta", "adversary_out_edges", "clean_out_edges", "baseline_delta"):
        assert key in report
    assert float(report["adversary_out_edges"]) >= 0


def test_eval_empty_or_mismatched_suite(tmp_path, checkpoint):
    empty = tmp_path / "empty.txt"
    empty.write_text("# nothing here\n")
    assert run("eval", "--checkpoint", str(checkpoint), "--suite", str(empty))[0] == 2
    two = tmp_path / "two.txt"
    two.write_text("K=2 kappa=2 clues=0;1\n")
    assert run("eval", "--checkpoint", str(checkpoint), "--suite", str(two))[0] == 2
    assert run("eval", "--checkpoint", str(tmp_path / "missing.aqmx"))[0] == 2


def test_analyze_tables(tmp_path, checkpoint):
    code, text = run("analyze", "--checkpoint", str(checkpoint), "--suite", "hard",
                     "--out", str(tmp_path / "an"))
    assert code == 0
    with open(tmp_path / "an" / "action_histogram.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows[0]) == 1 + N_ACTIONS
    for row in rows[1:]:
        assert sum(int(c) for c in row[1:]) == 3 * 15
    for name in ("round_density", "mean_adjacency"):
        assert (tmp_path / "an" / f"{name}.csv").exists()


def test_oracle_easy_and_bounds(tmp_path):
    code, text = run("oracle", "--suite", "easy")
    assert code == 0
    rows = list(csv.reader(io.StringIO(text)))
    body = [r for r in rows[1:] if not r[0].startswith("#")]
    assert len(body) == 15
    assert all(r[4] == "000|000" for r in body)
    big = tmp_path / "big.cfg"
    big.write_text("n_rounds = 3\n")
    assert run("oracle", "--config", str(big))[0] == 2


def test_oracle_free_tokens(tmp_path):
    p = tmp_path / "free.cfg"
    p.write_text("w_tok = 0.0\n")
    code, text = run("oracle", "--config", str(p), "--suite", "hard")
    body = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith(("#", "task"))]
    assert code == 0 and all(float(r[2]) == 1.0 for r in body)


def test_verify_and_fault_injection():
    code, text = run("verify")
    assert code == 0, text
    assert text.count("PASS") == 4
    code, text = run("verify", "--no-abs")
    assert code == 1
    assert "FAIL igm" in text and "counterexample" in text
