import json
import math

import numpy as np
import pytest

from cdvat import cli, dataio, evaluation

from conftest import tiny_experiment


@pytest.fixture
def config_file(tmp_path):
    _, d = tiny_experiment(max_epochs=2)
    d["output_dir"] = str(tmp_path / "out")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(d))
    return path, tmp_path / "out"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_synth_writes_loadable_reproducible_corpus(config_file, tmp_path):
    cfg, out = config_file
    assert run("synth", "--config", cfg) == 0
    corpus = dataio.load_corpus(out / "corpus.bin")
    assert len(corpus) == 16 * 8
    first = (out / "corpus.bin").read_bytes()
    assert run("synth", "--config", cfg) == 0
    assert (out / "corpus.bin").read_bytes() == first
    dataio.load_norm_stats(out / "norm.bin")
    assert evaluation.read_trials(out / "trials.txt")


def test_invalid_field_is_a_config_error_naming_it(config_file, capsys):
    cfg, _ = config_file
    assert run("synth", "--config", cfg, "--set", "synth.ar_coeff=1.5") == cli.EXIT_CONFIG
    assert "synth.ar_coeff" in capsys.readouterr().err
    assert run("synth", "--config", cfg, "--set", "train.hp.bogus=1") == cli.EXIT_CONFIG
    assert "train.hp.bogus" in capsys.readouterr().err


def test_missing_config_file_is_an_io_error(tmp_path):
    assert run("synth", "--config", tmp_path / "nope.json") == cli.EXIT_IO


def test_train_eval_perturb_demo(config_file, tmp_path):
    cfg, out = config_file
    assert run("synth", "--config", cfg) == 0
    for mode in ("supervised", "cdvat"):
        assert run("train", "--config", cfg, "--mode", mode) == 0
    sup = [json.loads(l) for l in (out / "supervised" / "metrics.jsonl").read_text().splitlines()]
    vat = [json.loads(l) for l in (out / "cdvat" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["R_cdvat"] == 0 for r in sup if r["kind"] == "step")
    assert all(r["R_cdvat"] > 0 for r in vat if r["kind"] == "step")
    assert all("timestamp" not in r for r in vat)
    assert (out / "cdvat" / "timings.jsonl").exists()

    assert run("eval", "--config", cfg, "--mode", "cdvat") == 0
    report = json.loads((out / "cdvat" / "eval.json").read_text())
    assert {"eer", "isc", "iss"} <= set(report)
    again = tmp_path / "again.json"
    assert run("eval", "--config", cfg, "--mode", "cdvat", "--out", again) == 0
    assert again.read_bytes() == (out / "cdvat" / "eval.json").read_bytes()

    bad = tmp_path / "bad_trials.txt"
    bad.write_text("1 spk0000-utt000 missing-utterance\n")
    assert run("eval", "--config", cfg, "--trials", bad, "--out", tmp_path / "x.json") == cli.EXIT_IO

    assert run("perturb-demo", "--config", cfg, "-n", 6) == 0
    doc = json.loads((out / "perturb_demo.json").read_text())
    assert len(doc["rows"]) == 6
    for row in doc["rows"]:
        assert row["r_norm"] == pytest.approx(doc["epsilon"], rel=1e-9)
        assert len(row["iterates_dot"]) == doc["K"]


def test_perturb_demo_on_untrained_model(config_file, tmp_path):
    cfg, out = config_file
    assert run("synth", "--config", cfg, "--set", "train.max_epochs=1", "--set", "train.lr0=1e-9") == 0
    assert run("train", "--config", cfg, "--set", "train.max_epochs=1", "--set", "train.lr0=1e-9") == 0
    assert run("perturb-demo", "--config", cfg, "-n", 4) == 0


def test_experiment_table_and_recovery(config_file):
    cfg, out = config_file
    assert run("experiment", "--config", cfg) == 0
    lines = (out / "summary.txt").read_text().splitlines()
    assert [l.split()[0] for l in lines[1:4]] == ["supervised", "cdvat", "oracle"]
    summary = json.loads((out / "summary.json").read_text())
    rows = summary["rows"]
    sup, vat, orc = (rows[m]["eer"] for m in ("supervised", "cdvat", "oracle"))
    expected = (sup - vat) / (sup - orc) if sup != orc else math.nan
    assert summary["eer_recovery"] == pytest.approx(expected, nan_ok=True)


def test_divergence_exit_code(config_file):
    cfg, out = config_file
    assert run("synth", "--config", cfg) == 0
    with np.errstate(all="ignore"):
        code = run("train", "--config", cfg, "--set", "train.lr0=1e300", "--set", "train.hp.alpha=0")
    assert code == cli.EXIT_DIVERGED
    assert (out / "cdvat" / "checkpoint.diverged.bin").exists()
