import io
import json

import pytest

from intervention_ltr import cli
from intervention_ltr.cli import ConfigError, config_from_dict, config_to_dict, main, parse_config, preset_path
from intervention_ltr.clicksim import PAPER_ALPHA, PAPER_BETA
from intervention_ltr.dataset import generate_synthetic_corpus, format_ranking_corpus
from intervention_ltr.experiment import ExperimentConfig

SMALL = """
T = 300
n_interventions = 1
t_min = 50
n_runs = 2
eval_points = [100, 300]
marginal_samples = 100
eval_samples = 100

[dataset]
n_train = 8
n_validation = 3
n_test = 5
n_docs = 5
n_features = 3

[optimizer]
n_epochs_max = 2

[bootstrap]
steps = 50
temperature = 0.1
"""


@pytest.fixture
def small_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL)
    return p


def test_minimal_config_gives_defaults():
    assert parse_config(io.StringIO("")) == ExperimentConfig()


def test_bias_vectors_are_echoed():
    text = "[bias]\nalpha = [0.35, 0.53, 0.55, 0.54, 0.52]\nbeta = [0.65, 0.26, 0.15, 0.11, 0.08]\n"
    cfg = parse_config(io.StringIO(text))
    assert cfg.bias.alpha == PAPER_ALPHA and cfg.bias.beta == PAPER_BETA


@pytest.mark.parametrize(
    "text,key",
    [
        ("n_interventions = -1", "n_interventions"),
        ("colour = 1", "colour"),
        ("[bias]\nalpah = [0.1]", "bias.alpah"),
        ("T = 'many'", "T"),
        ("T = 1.5", "T"),
        ("kind = 'best'", "kind"),
        ("[optimizer]\nlearning_rate = -1.0", "optimizer.learning_rate"),
        ("[bias]\nalpha = [0.9]\nbeta = [0.9]", "bias.alpha"),
        ("eval_points = [0]", "eval_points"),
        ("dataset = 3", "dataset"),
    ],
)
def test_config_errors_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        parse_config(io.StringIO(text))
    assert err.value.key == key


def test_syntax_error_is_a_config_error():
    with pytest.raises(ConfigError):
        parse_config(io.StringIO("T = = 3"))


@pytest.mark.parametrize("name", ["paper", "desk"])
def test_presets_parse_and_round_trip(name):
    cfg = parse_config(preset_path(name))
    assert cfg.bias.alpha == PAPER_ALPHA and cfg.bias.beta == PAPER_BETA
    assert config_from_dict(json.loads(json.dumps(config_to_dict(cfg)))) == cfg


def test_paper_preset_constants():
    cfg = parse_config(preset_path("paper"))
    assert (cfg.t_min, cfg.n_runs, cfg.bootstrap_fraction, cfg.bootstrap.cutoff) == (100, 20, 0.01, 5)


def test_schedule_command(capsys):
    assert main(["schedule", "--m", "3", "--T", "1000000", "--t-min", "100"]) == 0
    assert capsys.readouterr().out.strip() == "1000 10000 100000"


def test_schedule_with_no_interventions_prints_empty_line(capsys):
    assert main(["schedule", "--m", "0", "--T", "1000"]) == 0
    assert capsys.readouterr().out == "\n"


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_schedule_arguments_are_usage_errors():
    assert main(["schedule", "--m", "-1", "--T", "100"]) == 2
    assert main(["schedule", "--m", "1", "--T", "100", "--t-min", "100"]) == 2


def test_run_writes_outputs_and_replays_byte_identically(tmp_path, small_config):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small_config), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json", "results.csv", "summary.csv"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["outputs"] == {"results": "results.csv", "summary": "summary.csv"}
    assert len(manifest["seeds"]["runs"]) == 2 and manifest["code_version"]
    again = tmp_path / "again"
    assert main(["run", "--replay", str(out / "manifest.json"), "--out", str(again)]) == 0
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()
    assert (again / "manifest.json").read_bytes() == (out / "manifest.json").read_bytes()


def test_overrides_reach_the_manifest(tmp_path, small_config):
    out = tmp_path / "o"
    args = ["run", "--config", str(small_config), "--out", str(out), "--seed", "5", "--T", "200", "--m", "0",
            "--kind", "affine", "--n-runs", "3"]
    assert main(args) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert (cfg["seed"], cfg["T"], cfg["n_interventions"], cfg["kind"], cfg["n_runs"]) == (5, 200, 0, "affine", 3)
    assert cfg["eval_points"] == [100, 200]


def test_failed_run_leaves_no_outputs(tmp_path, small_config, monkeypatch):
    def boom(cfg, parallel=1):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(cli, "run_experiment", boom)
    out = tmp_path / "out"
    assert main(["run", "--config", str(small_config), "--out", str(out)]) == 1
    assert list(out.iterdir()) == []


def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("n_interventions = -1\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "n_interventions" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_output_directory_from_environment(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert main(["run", "--config", str(small_config), "--T", "120", "--m", "0"]) == 0
    assert (tmp_path / "envout" / "results.csv").is_file()


def test_simulate_then_evaluate(tmp_path, small_config, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(small_config), "--out", str(out)]) == 0
    lines = (out / "log.txt").read_text().splitlines()
    assert len(lines) == 300
    capsys.readouterr()
    ckpt = str(out / "logging_policy.json")
    args = ["evaluate", "--config", str(small_config), "--log", str(out / "log.txt"), "--policy", ckpt,
            "--logging-policy", ckpt]
    assert main(args) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["kind"] == "intervention_aware"
    assert 0 <= report["true_reward"] and report["estimated_reward"] == report["estimated_reward"]
    # A log with one segment cannot be evaluated against two logging policies.
    assert main(args + ["--logging-policy", ckpt]) == 2


def test_dataset_directory_override(tmp_path, small_config):
    d = tmp_path / "fold"
    d.mkdir()
    for name, seed, part in (("train.txt", 0, "train"), ("vali.txt", 1, "validation"), ("test.txt", 2, "test")):
        c = generate_synthetic_corpus(6, 4, 3, seed=seed, model_seed=0, partition=part)
        (d / name).write_text(format_ranking_corpus(c))
    out = tmp_path / "o"
    assert main(["run", "--config", str(small_config), "--dataset", str(d), "--out", str(out), "--T", "120"]) == 0
    cfg = json.loads((out / "manifest.json").read_text())["config"]
    assert cfg["dataset"]["train_path"].endswith("train.txt")
    assert main(["run", "--config", str(small_config), "--dataset", str(tmp_path / "nowhere")]) == 2


def test_config_and_preset_are_exclusive(small_config):
    assert main(["run", "--config", str(small_config), "--preset", "desk"]) == 2
