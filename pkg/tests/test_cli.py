"""End-to-end tests for the command-line pipeline."""

import json

import numpy as np
import pytest

from forecaster import cli
from forecaster import dataio as dio
from forecaster import training as tr
from forecaster.baselines import load_var_model
from forecaster.gmrf import load_graph
from forecaster.transformer import load_model


PIPELINE_DOC = {
    "seed": 11,
    "horizon": 3,
    "synth": {
        "n_locations": 3,
        "length": 2040,
        "precision": {"kind": "chain", "diagonal": 1.0, "coupling": -0.4},
        "ar_coefficient": 0.6,
        "daily_amplitude": 4.0,
        "weekly_amplitude": 2.0,
        "weekend_boost": 0.3,
        "aux_effect_scale": 0.5,
        "noise_scale": 1.5,
        "base_level": 40.0,
    },
    "graph": {"penalty": 0.05, "threshold": 0.1},
    "model": {"per_location": 2, "aux_neurons": 4, "n_heads": 1, "n_layers": 1},
    "training": {"epochs": 3, "batch_size": 8, "learning_rate": 1e-3},
    "split": {"train": [[0, 680]], "validation": [680, 1360], "test": [1360, 2040]},
    "var": {"order": 4},
}


def _write_config(directory, doc):
    path = directory / "config.json"
    path.write_text(json.dumps(doc))
    return str(path)


def _run(command, config_path, out_dir, *extra):
    return cli.main([command, "--config", config_path, "--out", str(out_dir), *extra])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole pipeline once; individual tests inspect its artifacts."""
    out = tmp_path_factory.mktemp("pipeline")
    config_path = _write_config(out, PIPELINE_DOC)
    for command in ("synth", "learn-graph", "train", "forecast", "evaluate",
                    "baseline-var"):
        assert _run(command, config_path, out) == 0, command
    return out, config_path


def test_pipeline_writes_all_artifacts(pipeline):
    out, _ = pipeline
    expected = ["signals.csv", "aux.csv", "synth_meta.json", "graph.json",
                "correlation_matrix.csv", "correlation_structure.csv",
                "graph_stats.json", "checkpoint.bin", "loss_curve.csv",
                "val_loss_curve.csv", "predictions.csv", "eval_report.json",
                "per_step_metrics.csv", "var_model.csv", "var_eval_report.json",
                "var_per_step_metrics.csv"]
    for name in expected:
        assert (out / name).exists(), name


def test_pipeline_artifacts_carry_the_config_hash(pipeline):
    out, _ = pipeline
    expected_hash = cli.config_hash(PIPELINE_DOC)
    meta = json.loads((out / "synth_meta.json").read_text())
    assert meta["config_hash"] == expected_hash
    _, graph_meta = load_graph(out / "graph.json")
    assert graph_meta["config_hash"] == expected_hash
    report = tr.EvalReport.load(out / "eval_report.json")
    assert report.config_hash == expected_hash
    _, var_header = load_var_model(out / "var_model.csv")
    assert var_header["config_hash"] == expected_hash


def test_pipeline_reports_are_consistent(pipeline):
    out, _ = pipeline
    report = tr.EvalReport.load(out / "eval_report.json")
    assert report.horizon == 3
    assert report.n_jobs == 2040 - 1360 - 673 - 3  # one job per valid origin
    assert np.isfinite(report.rmse) and report.rmse > 0
    var_report = tr.EvalReport.load(out / "var_eval_report.json")
    assert var_report.n_jobs == report.n_jobs
    assert var_report.extra["model"] == "var" and report.extra["model"] == "forecaster"


def test_predictions_csv_matches_recomputed_forecasts(pipeline):
    out, _ = pipeline
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "timestamp,step,loc_0,loc_1,loc_2"
    n_jobs = tr.EvalReport.load(out / "eval_report.json").n_jobs
    assert len(lines) == 2 + 3 * n_jobs

    model, _ = load_model(out / "checkpoint.bin")
    series = dio.load_csv(out / "signals.csv", out / "aux.csv")
    test_piece = dio.split(series, [[0, 680]], [680, 1360], [1360, 2040]).test
    job = dio.make_jobs(test_piece, horizon=3)[0]
    pred = tr.forecast_job(model, job, model.standardizer)
    first = [float(v) for v in lines[2].split(",")]
    assert first[0] == job.timestamp + 1 and first[1] == 1
    np.testing.assert_allclose(first[2:], pred[0], atol=1e-12)


def test_training_artifacts_shapes(pipeline):
    out, _ = pipeline
    curve = (out / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,loss" and len(curve) == 1 + 3
    model, header = load_model(out / "checkpoint.bin")
    assert header["config_hash"] == cli.config_hash(PIPELINE_DOC)
    assert model.standardizer is not None  # training persisted the transform


def test_rerunning_evaluate_is_bitwise_reproducible(pipeline):
    out, config_path = pipeline
    before = (out / "eval_report.json").read_bytes()
    assert _run("evaluate", config_path, out) == 0
    assert (out / "eval_report.json").read_bytes() == before


def test_seed_override_changes_hash_and_rejects_stale_artifacts(pipeline, capsys):
    out, config_path = pipeline
    assert _run("evaluate", config_path, out, "--seed", "99") == 1
    err = capsys.readouterr().err
    assert err.startswith("forecaster-error ")
    payload = json.loads(err.split(" ", 1)[1])
    assert payload["error"] == "ConfigurationError"
    assert "config hash" in payload["message"]


def test_missing_checkpoint_fails_cleanly(tmp_path, capsys):
    doc = dict(PIPELINE_DOC)
    config_path = _write_config(tmp_path, doc)
    assert _run("synth", config_path, tmp_path) == 0
    assert _run("forecast", config_path, tmp_path) == 1
    err = capsys.readouterr().err
    payload = json.loads(err.split(" ", 1)[1])
    assert payload["error"] == "DependencyError"
    assert "checkpoint.bin" in payload["message"]


def test_unknown_config_key_is_rejected(tmp_path, capsys):
    doc = dict(PIPELINE_DOC)
    doc["typo_section"] = {}
    config_path = _write_config(tmp_path, doc)
    assert _run("synth", config_path, tmp_path) == 1
    payload = json.loads(capsys.readouterr().err.split(" ", 1)[1])
    assert payload["error"] == "ConfigurationError"
    assert "typo_section" in payload["message"]


def test_unknown_section_key_is_rejected(tmp_path, capsys):
    doc = json.loads(json.dumps(PIPELINE_DOC))
    doc["training"]["momentum"] = 0.9
    config_path = _write_config(tmp_path, doc)
    assert _run("synth", config_path, tmp_path) == 1
    payload = json.loads(capsys.readouterr().err.split(" ", 1)[1])
    assert "momentum" in payload["message"]


def test_invalid_json_config_fails_cleanly(tmp_path, capsys):
    config_path = tmp_path / "config.json"
    config_path.write_text("{not json")
    assert cli.main(["synth", "--config", str(config_path), "--out", str(tmp_path)]) == 1
    payload = json.loads(capsys.readouterr().err.split(" ", 1)[1])
    assert payload["error"] == "ConfigurationError"


def test_missing_config_file_fails_cleanly(tmp_path, capsys):
    missing = str(tmp_path / "nope.json")
    assert cli.main(["synth", "--config", missing, "--out", str(tmp_path)]) == 1
    payload = json.loads(capsys.readouterr().err.split(" ", 1)[1])
    assert payload["error"] == "DependencyError"


def test_short_test_range_fails_cleanly(tmp_path, capsys):
    doc = json.loads(json.dumps(PIPELINE_DOC))
    doc["split"]["test"] = [1360, 1500]  # < 674 + horizon rows
    config_path = _write_config(tmp_path, doc)
    assert _run("synth", config_path, tmp_path) == 0
    assert _run("baseline-var", config_path, tmp_path) == 1
    payload = json.loads(capsys.readouterr().err.split(" ", 1)[1])
    assert payload["error"] == "ConfigurationError"
    assert "test range" in payload["message"]


def test_help_exits_zero_for_every_subcommand(capsys):
    for command in ("synth", "learn-graph", "train", "forecast", "evaluate",
                    "baseline-var"):
        with pytest.raises(SystemExit) as exc:
            cli.main([command, "--help"])
        assert exc.value.code == 0
        assert "--config" in capsys.readouterr().out


def test_derive_seed_is_stable_and_label_separated():
    assert cli.derive_seed(11, "synth") == cli.derive_seed(11, "synth")
    assert cli.derive_seed(11, "synth") != cli.derive_seed(11, "shuffle")
    assert cli.derive_seed(11, "synth") != cli.derive_seed(12, "synth")


def test_config_hash_is_order_insensitive_but_seed_sensitive():
    a = {"seed": 1, "horizon": 3}
    b = {"horizon": 3, "seed": 1}
    assert cli.config_hash(a) == cli.config_hash(b)
    assert cli.config_hash({"seed": 2, "horizon": 3}) != cli.config_hash(a)
