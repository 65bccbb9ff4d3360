"""Acceptance suite: the must-hold guarantees of the whole package.

Each test covers one numbered criterion and prints a single
``criterion NN: PASS/FAIL`` line with the measured margin before asserting.
The end-to-end runs (criteria 9 and 10) share one module-scoped set of
pipeline artifacts so the suite stays inside its runtime budget.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from forecaster import cli
from forecaster import dataio as dio
from forecaster import gmrf
from forecaster import training as tr
from forecaster.baselines import VarModel, fit_var, forecast_var
from forecaster.gmrf import DependencyGraph, SolverOptions
from forecaster.transformer import (Forecaster, ModelConfig, SequenceBatch,
                                    decoder_forward, encoder_forward,
                                    query_scaling_vector)
from forecaster import autodiff as ad

from helpers import (check_tensor_gradients, glasso_reference,
                     kkt_max_violation, penalized_objective_reference)


def _verdict(number: int, ok: bool, detail: str):
    print(f"criterion {number:02d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {number:02d} failed: {detail}"


SMALL_FILTER = dio.HistoryFilterSpec(recent_hours=2, weekly_days=1, monthly_weeks=0)


# ---------------------------------------------------------------------------
# 1. dependency-graph recovery on a planted chain-plus-chords structure


def test_criterion_01(tmp_path):
    doc = {
        "seed": 7,
        "synth": {"n_locations": 20, "length": 20000,
                  "precision": {"kind": "chain", "diagonal": 1.0, "coupling": -0.25,
                                "chords": [[0, 10], [5, 15]]},
                  "ar_coefficient": 0.5, "noise_scale": 1.0, "base_level": 50.0},
        "graph": {"penalty_candidates": [1e-3, 1e-2, 1e-1, 3e-1], "threshold": 0.1,
                  "holdout_fraction": 0.25},
    }
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(doc))
    t0 = time.monotonic()
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert cli.main(["learn-graph", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    took = time.monotonic() - t0

    meta = json.loads((tmp_path / "synth_meta.json").read_text())
    truth = {tuple(sorted((e["i"], e["j"]))) for e in meta["true_graph"]["edges"]}
    recovered, _ = gmrf.load_graph(tmp_path / "graph.json")
    got = {tuple(sorted(e)) for e in recovered.edges}
    tp = len(truth & got)
    f1 = 2.0 * tp / (2.0 * tp + len(got - truth) + len(truth - got))
    _verdict(1, f1 >= 0.9 and took < 60.0,
             f"edge F1 {f1:.4f} ({tp}/{len(truth)} true edges, "
             f"{len(got)} recovered) in {took:.1f}s")


# ---------------------------------------------------------------------------
# 2. penalized precision estimation agrees with a search-based oracle


def test_criterion_02():
    rng = np.random.default_rng(42)
    worst_obj, worst_kkt = 0.0, 0.0
    for trial in range(25):
        n = 2 if trial % 2 == 0 else 3
        b = rng.standard_normal((n, n))
        s = b @ b.T / n + 0.3 * np.eye(n)
        penalty = rng.uniform(0.02, 0.4)
        cov = gmrf.CovarianceEstimate(mean=np.zeros(n), matrix=s, sample_count=100)
        estimate = gmrf.graphical_lasso(cov, penalty, SolverOptions())
        _, oracle_obj = glasso_reference(s, penalty)
        solver_obj = penalized_objective_reference(s, estimate.matrix, penalty)
        worst_obj = max(worst_obj, abs(solver_obj - oracle_obj))
        worst_kkt = max(worst_kkt, kkt_max_violation(s, estimate.matrix, penalty))
    _verdict(2, worst_obj <= 1e-6 and worst_kkt < 1e-5,
             f"25 instances: max objective gap {worst_obj:.2e} (tol 1e-6), "
             f"max stationarity residual {worst_kkt:.2e} (tol 1e-5)")


# ---------------------------------------------------------------------------
# 3. full-model finite-difference gradient check


def test_criterion_03():
    graph = DependencyGraph(3, [(0, 1, 0.4), (1, 2, 0.4)], 0.1)
    config = ModelConfig(n_locations=3, n_aux_features=2, per_location=1,
                         aux_neurons=2, n_heads=1, n_layers=1)
    model = Forecaster(config, graph, seed=3)
    rng = np.random.default_rng(0)
    enc = rng.uniform(-1.0, 1.0, size=(5, 4))
    dec = rng.uniform(-1.0, 1.0, size=(5, 2))
    truths = np.array([[22.0, 18.0], [5.0, 26.0], [14.0, 31.0]])  # one below threshold

    def build_loss():
        return tr.loss(model.forward(SequenceBatch(enc, dec)), truths)

    t0 = time.monotonic()
    worst = check_tensor_gradients(build_loss, model.params, tol=1e-4)
    took = time.monotonic() - t0
    n_params = sum(t.values.size for t in model.params.values())
    _verdict(3, worst < 1e-4 and took < 120.0,
             f"{len(model.params)} tensors / {n_params} parameters, "
             f"max relative error {worst:.2e} (tol 1e-4) in {took:.1f}s")


# ---------------------------------------------------------------------------
# 4. mask invariants survive 100 optimizer steps


def test_criterion_04():
    q = np.eye(4)
    for i in range(3):
        q[i, i + 1] = q[i + 1, i] = -0.3
    spec = dio.SyntheticSpec(n_locations=4, true_precision=q, ar_coefficient=0.5,
                             daily_amplitude=3.0, noise_scale=0.5, base_level=30.0,
                             seed=4)
    series = dio.synth_generate(spec, 60)
    jobs = dio.make_jobs(series, SMALL_FILTER, horizon=2)  # 33 jobs
    graph = spec.true_graph
    assert {tuple(sorted(e)) for e in graph.edges} == {(0, 1), (1, 2), (2, 3)}
    model = Forecaster(ModelConfig(n_locations=4, n_aux_features=series.aux.shape[1],
                                   per_location=2, aux_neurons=4), graph, seed=5)
    std = dio.Standardizer.fit(series.signals)
    # 33 jobs in batches of 9 -> 4 steps per epoch, 25 epochs = 100 steps
    tr.train(model, jobs, tr.TrainingSchedule(epochs=25, batch_size=9,
                                              learning_rate=1e-3), standardizer=std)

    masked_params = 0
    all_zero = True
    for name, tensor in model.params.items():
        mask = model.mask_for(name)
        if mask is None:
            continue
        masked_params += 1
        all_zero &= bool(np.all(tensor.values[mask == 0.0] == 0.0))

    # sparse embedding locality: location 3 is not a neighbor of 0 or 1
    w = model.params["encoder_embedding.weight"].values
    mask = model.mask_for("encoder_embedding.weight")
    x = np.concatenate([series.signals[40], series.aux[40]])
    perturbed = x.copy()
    perturbed[3] += 7.5
    base_out = (w * mask) @ x
    pert_out = (w * mask) @ perturbed
    local = (np.array_equal(base_out[0:4], pert_out[0:4])      # locations 0, 1
             and np.array_equal(base_out[8:], pert_out[8:])    # aux neurons
             and not np.array_equal(base_out[4:6], pert_out[4:6]))  # neighbor 2

    # future decoder positions must not leak into earlier outputs
    batch = tr.assemble_batch(jobs[0], std)
    memory = encoder_forward(model, batch.encoder_inputs)
    base = decoder_forward(model, batch.decoder_inputs, memory).values
    tampered = batch.decoder_inputs.copy()
    tampered[:, 1] += 3.0
    other = decoder_forward(model, tampered, memory).values
    causal = (np.array_equal(base[:, 0], other[:, 0])
              and not np.array_equal(base[:, 1], other[:, 1]))

    _verdict(4, all_zero and local and causal,
             f"after 100 steps: {masked_params} masked tensors exactly zero "
             f"off-mask={all_zero}, non-neighbor locality={local}, "
             f"causal invariance={causal}")


# ---------------------------------------------------------------------------
# 5. query scaling: neutral at equal widths, closed form otherwise


def test_criterion_05():
    graph = DependencyGraph(3, [(0, 1, 0.5), (1, 2, 0.5)], 0.1)
    kwargs = dict(n_locations=3, n_aux_features=2, per_location=2, aux_neurons=6,
                  n_heads=1, n_layers=1)
    scaled = Forecaster(ModelConfig(apply_query_scaling=True, **kwargs), graph, seed=9)
    plain = Forecaster(ModelConfig(apply_query_scaling=False, **kwargs), graph, seed=9)
    rng = np.random.default_rng(1)
    batch = SequenceBatch(rng.uniform(-1.0, 1.0, size=(5, 6)),
                          rng.uniform(-1.0, 1.0, size=(5, 2)))
    neutral = np.array_equal(scaled.forward(batch).values, plain.forward(batch).values)

    r = query_scaling_vector(4, 16)
    expected = np.concatenate([np.full(4, math.sqrt(0.5 + 16.0 / 8.0)),
                               np.full(16, math.sqrt(0.5 + 4.0 / 32.0))])
    gap = float(np.max(np.abs(r - expected)))
    ones = bool(np.all(query_scaling_vector(6, 6) == 1.0))
    _verdict(5, neutral and ones and gap <= 1e-15,
             f"equal widths bitwise neutral={neutral and ones}, "
             f"unequal widths closed-form gap {gap:.1e} (tol 1e-15)")


# ---------------------------------------------------------------------------
# 6. history filter offsets


def test_criterion_06():
    offsets = dio.HistoryFilterSpec().offsets()
    brute = set(range(6))
    brute |= {24 * j - i for j in range(1, 7) for i in range(-1, 6)}
    brute |= {168 * j - i for j in range(1, 5) for i in range(-1, 6)}
    match = set(offsets.tolist()) == brute
    _verdict(6, match and len(offsets) == 76 and int(offsets.max()) == 673,
             f"set match={match}, cardinality {len(offsets)} (want 76), "
             f"max lookback {int(offsets.max())} (want 673)")


# ---------------------------------------------------------------------------
# 7. exact recovery of a noiseless order-2 vector autoregression


def test_criterion_07():
    a1 = np.array([[0.4, 0.1, 0.0], [0.0, 0.3, 0.1], [0.1, 0.0, 0.2]])
    a2 = np.array([[0.15, 0.0, 0.05], [0.0, 0.1, 0.0], [0.05, 0.0, 0.15]])
    b = np.array([[1.0, 0.0], [0.5, -0.5], [0.0, 2.0]])
    c = np.array([0.3, -0.1, 0.5])
    rng = np.random.default_rng(17)
    steps = 160
    aux = rng.uniform(-1.0, 1.0, size=(steps, 2))
    signals = np.zeros((steps, 3))
    signals[:2] = rng.standard_normal((2, 3))
    for t in range(1, steps - 1):
        signals[t + 1] = a1 @ signals[t] + a2 @ signals[t - 1] + b @ aux[t + 1] + c
    series = dio.SpatialSeries(np.arange(steps), signals, aux)

    model = fit_var(series, p=2)
    coef_err = max(np.max(np.abs(model.lag_matrices[0] - a1)),
                   np.max(np.abs(model.lag_matrices[1] - a2)),
                   np.max(np.abs(model.aux_matrix - b)),
                   np.max(np.abs(model.intercept - c)))
    pred = forecast_var(model, signals[:120], aux[120:123], horizon=3)
    pred_err = float(np.max(np.abs(pred - signals[120:123])))
    _verdict(7, coef_err <= 1e-6 and pred_err <= 1e-5,
             f"max coefficient error {coef_err:.2e} (tol 1e-6), "
             f"3-step forecast error {pred_err:.2e} (tol 1e-5)")


# ---------------------------------------------------------------------------
# 8. metrics and combined loss on a hand-computed batch


def test_criterion_08():
    truths1 = np.array([[20.0, 40.0], [8.0, 30.0], [50.0, 12.0]])
    truths2 = np.array([[15.0, 22.0], [18.0, 11.0], [25.0, 60.0]])
    diff1 = np.array([[1.0, -2.0], [3.0, 0.5], [-4.0, 1.0]])
    diff2 = np.array([[2.0, -1.0], [0.25, -3.0], [5.0, -0.5]])

    sq_sum = (1.0 + 4.0 + 9.0 + 0.25 + 16.0 + 1.0
              + 4.0 + 1.0 + 0.0625 + 9.0 + 25.0 + 0.25)
    mape_sum = (1.0 / 20 + 2.0 / 40 + 0.5 / 30 + 4.0 / 50 + 1.0 / 12
                + 2.0 / 15 + 1.0 / 22 + 0.25 / 18 + 3.0 / 11 + 5.0 / 25 + 0.5 / 60)
    hand_rmse = math.sqrt(sq_sum / 12.0)       # 12 terms pooled
    hand_mape = mape_sum / 11.0                # the truth 8 is excluded
    hand_loss = 8e-3 * sq_sum / 12.0 + hand_mape

    preds = np.concatenate([truths1 + diff1, truths2 + diff2], axis=1)
    truths = np.concatenate([truths1, truths2], axis=1)
    rmse_err = abs(tr.rmse(preds, truths) - hand_rmse)
    mape_err = abs(tr.mape(preds, truths) - hand_mape)
    pairs = [(ad.Tensor(truths1 + diff1), truths1), (ad.Tensor(truths2 + diff2), truths2)]
    loss_err = abs(tr.batch_loss(pairs, tr.LossConfig(eta=8e-3)).item() - hand_loss)
    worst = max(rmse_err, mape_err, loss_err)
    _verdict(8, worst <= 1e-12,
             f"2 jobs x 2 steps x 3 locations: rmse gap {rmse_err:.1e}, "
             f"mape gap {mape_err:.1e}, loss gap {loss_err:.1e} (tol 1e-12)")


# ---------------------------------------------------------------------------
# 9 + 10. end-to-end relative performance and bitwise determinism


SEEDS = (101, 202, 303)

PIPELINE_STAGES = ("synth", "learn-graph", "train", "evaluate", "baseline-var")


def _pipeline_doc(seed: int) -> dict:
    return {
        "seed": seed,
        "horizon": 3,
        "synth": {
            "n_locations": 20,
            "length": 4392,  # six months of hourly rows
            "precision": {"kind": "chain", "diagonal": 1.0, "coupling": -0.3,
                          "chords": [[0, 10], [5, 15]]},
            "ar_coefficient": 0.6,
            "daily_amplitude": 14.0,
            "weekly_amplitude": 6.0,
            "weekend_boost": 0.8,
            "aux_effect_scale": 0.3,
            "noise_scale": 1.2,
            "base_level": 42.0,
        },
        "graph": {"penalty_candidates": [1e-3, 1e-2, 1e-1, 3e-1], "threshold": 0.1},
        "model": {"per_location": 4, "aux_neurons": 16, "n_heads": 2, "n_layers": 1},
        "training": {"epochs": 24, "batch_size": 32, "learning_rate": 3e-3,
                     "stride": 3, "patience": 6},
        "split": {"train": [[0, 2900]], "validation": [2900, 3640],
                  "test": [3640, 4392]},
        "var": {"order": 6},
    }


def _run_pipeline(seed: int, out: Path) -> float:
    cfg = out / "config.json"
    cfg.write_text(json.dumps(_pipeline_doc(seed)))
    t0 = time.monotonic()
    for command in PIPELINE_STAGES:
        rc = cli.main([command, "--config", str(cfg), "--out", str(out)])
        assert rc == 0, f"{command} failed for seed {seed}"
    return time.monotonic() - t0


@pytest.fixture(scope="module")
def relative_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("relative")
    runs = []
    for seed in SEEDS:
        out = base / f"seed{seed}"
        out.mkdir()
        runs.append((seed, out, _run_pipeline(seed, out)))
    return runs


def _table_layout_ok(path: Path) -> bool:
    lines = path.read_text().splitlines()
    return (lines[0] == "step,label,rmse,mape_pct"
            and lines[1].startswith("1,next,")
            and lines[2].startswith("2,second_next,")
            and lines[3].startswith("3,third_next,")
            and lines[4].startswith("all,pooled,"))


def test_criterion_09(relative_runs):
    wins, layout_ok, details = 0, True, []
    total = sum(elapsed for _, _, elapsed in relative_runs)
    for seed, out, _ in relative_runs:
        fc = tr.EvalReport.load(out / "eval_report.json")
        var = tr.EvalReport.load(out / "var_eval_report.json")
        wins += fc.rmse < var.rmse
        layout_ok &= _table_layout_ok(out / "per_step_metrics.csv")
        layout_ok &= _table_layout_ok(out / "var_per_step_metrics.csv")
        details.append(f"seed {seed}: {fc.rmse:.3f} vs var {var.rmse:.3f}")
    _verdict(9, wins >= 2 and layout_ok and total < 1800.0,
             f"held-out rmse wins {wins}/3 ({'; '.join(details)}), "
             f"per-step table layout={layout_ok}, runtime {total:.0f}s (budget 1800s)")


def test_criterion_10(relative_runs, tmp_path):
    seed, first_out, _ = relative_runs[0]
    _run_pipeline(seed, tmp_path)
    same_fc = ((tmp_path / "eval_report.json").read_bytes()
               == (first_out / "eval_report.json").read_bytes())
    same_var = ((tmp_path / "var_eval_report.json").read_bytes()
                == (first_out / "var_eval_report.json").read_bytes())
    _verdict(10, same_fc and same_var,
             f"seed {seed} rerun: eval report bitwise identical={same_fc}, "
             f"baseline report bitwise identical={same_var}")
