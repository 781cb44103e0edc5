import json

import pytest

from pulselab import cli

GEN = ["generate", "--family", "lorenz", "--sigma", "0.5", "--n-classes", "2", "--window", "20",
       "--trials", "1", "--steps", "1600", "--seed", "4"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def model_yaml(tmp_path):
    p = tmp_path / "cfg.yaml"
    p.write_text("model:\n  depth: 2\n  width: 6\n  init_kernel: 3\n  init_hidden: 6\n"
                 "  decoder_hidden: 6\n  tv_segments: 2\n  pseudo_pairs: 1\n"
                 "train:\n  epochs: 2\n  batch_size: 16\n")
    return p


def _dataset(runs):
    (d,) = [p for p in runs.iterdir() if (p / "dataset.bin").exists()]
    return d


def test_generate_is_reproducible(runs, tmp_path):
    assert cli.main(GEN) == 0
    first = (_dataset(runs) / "dataset.bin").read_bytes()
    assert cli.main(GEN) == 1  # finished run, no --force
    assert cli.main(GEN + ["--force"]) == 0
    assert (_dataset(runs) / "dataset.bin").read_bytes() == first
    other = tmp_path / "other"
    assert cli.main(["--runs", str(other)] + GEN) == 0
    assert next(other.glob("*/dataset.bin")).read_bytes() == first


def test_generate_rejects_negative_sigma(runs, capsys):
    assert cli.main(GEN[:3] + ["--sigma", "-1"]) == 1
    assert "noise level" in capsys.readouterr().err


def test_generate_csv_and_summary(runs):
    assert cli.main(GEN + ["--csv"]) == 0
    d = _dataset(runs)
    assert (d / "csv" / "train.csv").exists()
    summary = json.loads((d / "summary.json").read_text())
    assert summary["n_classes"] == 2 and summary["window"] == 20


def test_bad_config_file(runs, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    assert cli.main(["generate", "--config", str(bad)]) == 1
    assert cli.main(["generate", "--config", str(tmp_path / "missing.yaml")]) == 1
    unknown = tmp_path / "u.yaml"
    unknown.write_text("dataset:\n  colour: red\n")
    assert cli.main(["generate", "--config", str(unknown)]) == 1


def test_verify_theorem_exit_codes(runs, capsys):
    assert cli.main(["verify-theorem", "--w-max", "3"]) == 0
    assert "counterexamples: 0" in capsys.readouterr().out
    assert cli.main(["verify-theorem", "--w-max", "1"]) == 1


def test_train_eval_table_flow(runs, model_yaml, tmp_path, capsys):
    assert cli.main(GEN) == 0
    ds = str(_dataset(runs))
    assert cli.main(["train", "--config", str(model_yaml), "--dataset", ds]) == 0
    run_dir = capsys.readouterr().out.split("run: ")[1].split()[0]
    summary = json.loads(open(f"{run_dir}/summary.json").read())
    assert len(summary["history"]) == 2
    assert cli.main(["train", "--config", str(model_yaml), "--dataset", ds]) == 1

    assert cli.main(["eval", "--run", run_dir, "--semi", "0.1", "--semi", "0.5",
                     "--subsets", "2"]) == 0
    out = capsys.readouterr().out
    ev = out.split("report: ")[1].split()[0]
    for name in ("report.json", "semi-0.1.json", "semi-0.5.json", "results.csv"):
        assert (runs / ev.split("/")[-1] / name).exists()

    assert cli.main(["eval", "--dataset", ds, "--untrained", "--config", str(model_yaml)]) == 0
    table = tmp_path / "table.csv"
    assert cli.main(["table", "--output", str(table)]) == 0
    text = table.read_text()
    assert "pulse" in text and "untrained" in text


def test_resume_continues(runs, model_yaml, capsys):
    assert cli.main(GEN) == 0
    ds = str(_dataset(runs))
    assert cli.main(["train", "--config", str(model_yaml), "--dataset", ds, "--epochs", "1"]) == 0
    assert cli.main(["train", "--config", str(model_yaml), "--dataset", ds, "--epochs", "1",
                     "--resume"]) == 0
    assert cli.main(["train", "--config", str(model_yaml), "--dataset", ds, "--epochs", "3",
                     "--resume"]) == 1


def test_train_missing_dataset(runs):
    assert cli.main(["train", "--dataset", "/nonexistent/ds.bin"]) == 1


def test_table_without_results(runs):
    assert cli.main(["table"]) == 1


def test_sweep_runs_grid(runs, tmp_path):
    cfg = tmp_path / "sweep.yaml"
    cfg.write_text("dataset: {family: lorenz, n_classes: 2, W: 20, trials_per_class: 1, "
                   "steps_per_trial: 1600}\n"
                   "model: {depth: 2, width: 6, init_kernel: 3, init_hidden: 6, "
                   "decoder_hidden: 6, tv_segments: 2, pseudo_pairs: 1}\n"
                   "train: {epochs: 1, batch_size: 32}\n"
                   "sweep: {seeds: [0, 1], sigmas: [0.0], variants: [pulse, abl-no-tv]}\n")
    assert cli.main(["sweep", "--config", str(cfg)]) == 0
    _, summary = cli.run_table()
    assert {(s["variant"], s["n"]) for s in summary} == {("pulse", 2), ("abl-no-tv", 2)}
