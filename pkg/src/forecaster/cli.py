"""Command-line pipeline: synth -> learn-graph -> train -> forecast/evaluate.

Every run is driven by a JSON config file plus a master seed. The SHA-256
hash of the effective config (with the seed folded in) is embedded in every
artifact; downstream commands refuse to mix artifacts produced under a
different hash. All stages are deterministic given (config, seed).

Subcommands: synth, learn-graph, train, forecast, evaluate, baseline-var.
Shared flags: --config <path> (required), --seed <u64> (overrides the config
seed), --out <dir> (artifact directory, default "."). FORECASTER_THREADS caps
evaluation fan-out; results are reduced in job order so the thread count
never changes any output byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import baselines, dataio, gmrf, training, transformer
from .errors import ConfigurationError, DependencyError, ForecasterError

__all__ = ["main", "RunConfig", "derive_seed", "config_hash"]


def derive_seed(master: int, label: str) -> int:
    """Stable per-stage sub-seed so stages in separate processes agree."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def config_hash(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_SECTION_KEYS = {
    "synth": {"n_locations", "length", "precision", "ar_coefficient", "daily_amplitude",
              "weekly_amplitude", "weekend_boost", "aux_effect_scale", "aux_effects",
              "noise_scale", "base_level", "start_hour", "burn_in", "floor_at_zero"},
    "graph": {"penalty", "penalty_candidates", "threshold", "holdout_fraction", "rho",
              "abs_tol", "rel_tol", "max_iterations", "penalize_diagonal"},
    "model": {"per_location", "aux_neurons", "n_heads", "n_layers", "apply_query_scaling"},
    "training": {"epochs", "batch_size", "learning_rate", "patience", "stride",
                 "eta", "mape_threshold"},
    "split": {"train", "validation", "test"},
    "evaluate": {"stride"},
    "var": {"order", "intercept"},
    "data": {"signals", "aux"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"seed", "horizon"}


class RunConfig:
    """Validated view of the JSON config for one pipeline run."""

    def __init__(self, doc: dict, seed_override=None, out_dir="."):
        unknown = set(doc) - _TOP_KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        for name, allowed in _SECTION_KEYS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"config section '{name}' must be an object")
            bad = set(section) - allowed
            if bad:
                raise ConfigurationError(f"unknown keys in config section '{name}': {sorted(bad)}")
        self.doc = dict(doc)
        if seed_override is not None:
            self.doc["seed"] = int(seed_override)
        self.doc.setdefault("seed", 0)
        self.seed = int(self.doc["seed"])
        self.hash = config_hash(self.doc)
        self.out_dir = out_dir

    def section(self, name: str) -> dict:
        return dict(self.doc.get(name, {}))

    @property
    def horizon(self) -> int:
        return int(self.doc.get("horizon", 3))

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def data_paths(self):
        data = self.section("data")
        sig = data.get("signals", "signals.csv")
        aux = data.get("aux", "aux.csv")
        join = lambda p: p if os.path.isabs(p) else os.path.join(self.out_dir, p)
        return join(sig), join(aux)


def _require(path: str) -> str:
    if not os.path.exists(path):
        raise DependencyError(f"missing required artifact: {path}")
    return path


def _check_hash(found, expected, where: str):
    if found is not None and found != expected:
        raise ConfigurationError(
            f"{where} was produced under config hash {found}, this run uses {expected}")


def _load_series(cfg: RunConfig) -> dataio.SpatialSeries:
    sig_path, aux_path = cfg.data_paths()
    _require(sig_path)
    _require(aux_path)
    _check_hash(dataio.csv_metadata(sig_path).get("config_hash"), cfg.hash, sig_path)
    _check_hash(dataio.csv_metadata(aux_path).get("config_hash"), cfg.hash, aux_path)
    return dataio.load_csv(sig_path, aux_path)


def _train_ranges(cfg: RunConfig, n_steps: int):
    split_cfg = cfg.section("split")
    return split_cfg.get("train", [[0, n_steps]])


def _split(cfg: RunConfig, series: dataio.SpatialSeries) -> dataio.SplitResult:
    split_cfg = cfg.section("split")
    for key in ("train", "validation", "test"):
        if key not in split_cfg:
            raise ConfigurationError(f"config section 'split' is missing '{key}'")
    return dataio.split(series, split_cfg["train"], split_cfg["validation"], split_cfg["test"])


# ---------------------------------------------------------------------------
# synth


def _build_precision(spec_doc, n: int) -> np.ndarray:
    if isinstance(spec_doc, list):
        return np.asarray(spec_doc, dtype=np.float64)
    kind = spec_doc.get("kind", "matrix")
    if kind == "matrix":
        return np.asarray(spec_doc["values"], dtype=np.float64)
    if kind == "chain":
        diagonal = float(spec_doc.get("diagonal", 1.0))
        coupling = float(spec_doc.get("coupling", -0.25))
        q = np.eye(n) * diagonal
        for i in range(n - 1):
            q[i, i + 1] = q[i + 1, i] = coupling
        for i, j in spec_doc.get("chords", []):
            q[i, j] = q[j, i] = coupling
        return q
    raise ConfigurationError(f"unknown precision kind {kind!r}")


def _build_synth_spec(cfg: RunConfig) -> tuple[dataio.SyntheticSpec, int]:
    s = cfg.section("synth")
    if "n_locations" not in s or "length" not in s or "precision" not in s:
        raise ConfigurationError("config section 'synth' needs n_locations, length, precision")
    n = int(s["n_locations"])
    synth_seed = derive_seed(cfg.seed, "synth")
    aux_effects = s.get("aux_effects")
    if aux_effects is not None:
        aux_effects = np.asarray(aux_effects, dtype=np.float64)
    elif s.get("aux_effect_scale"):
        eff_rng = np.random.default_rng(derive_seed(cfg.seed, "synth-aux-effects"))
        aux_effects = float(s["aux_effect_scale"]) * eff_rng.standard_normal(
            (n, len(dataio.AUX_FEATURE_NAMES)))
    spec = dataio.SyntheticSpec(
        n_locations=n,
        true_precision=_build_precision(s["precision"], n),
        ar_coefficient=s.get("ar_coefficient", 0.5),
        daily_amplitude=s.get("daily_amplitude", 0.0),
        weekly_amplitude=s.get("weekly_amplitude", 0.0),
        weekend_boost=s.get("weekend_boost", 0.0),
        aux_effects=aux_effects,
        noise_scale=s.get("noise_scale", 1.0),
        base_level=s.get("base_level", 50.0),
        seed=synth_seed,
        start_hour=int(s.get("start_hour", 0)),
        burn_in=int(s.get("burn_in", 336)),
        floor_at_zero=bool(s.get("floor_at_zero", True)),
    )
    return spec, int(s["length"])


def cmd_synth(cfg: RunConfig) -> int:
    spec, length = _build_synth_spec(cfg)
    series = dataio.synth_generate(spec, length)
    sig_path, aux_path = cfg.data_paths()
    dataio.save_csv(series, sig_path, aux_path, comments={"config_hash": cfg.hash})
    meta = {
        "config_hash": cfg.hash,
        "length": length,
        "n_locations": spec.n_locations,
        "true_graph": spec.true_graph.to_dict(),
    }
    with open(cfg.path("synth_meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"synth: wrote {sig_path} and {aux_path} "
          f"({length} hours, {spec.n_locations} locations)")
    return 0


# ---------------------------------------------------------------------------
# learn-graph


def cmd_learn_graph(cfg: RunConfig) -> int:
    series = _load_series(cfg)
    g = cfg.section("graph")
    threshold = float(g.get("threshold", 0.1))
    options = gmrf.SolverOptions(
        rho=float(g.get("rho", 1.0)),
        abs_tol=float(g.get("abs_tol", 1e-7)),
        rel_tol=float(g.get("rel_tol", 1e-6)),
        max_iterations=int(g.get("max_iterations", 2000)),
        penalize_diagonal=bool(g.get("penalize_diagonal", True)),
    )

    rows = np.vstack([series.signals[int(a):int(b)] for a, b in _train_ranges(cfg, series.n_steps)])
    if "penalty" in g:
        penalty = float(g["penalty"])
    else:
        candidates = g.get("penalty_candidates", [1e-3, 1e-2, 1e-1, 3e-1])
        holdout = float(g.get("holdout_fraction", 0.25))
        if not (0.0 < holdout < 1.0):
            raise ConfigurationError(f"holdout_fraction must be in (0, 1), got {holdout}")
        cut = int(round(rows.shape[0] * (1.0 - holdout)))
        if cut < 2 or rows.shape[0] - cut < 2:
            raise ConfigurationError("not enough rows to hold out a likelihood set")
        penalty = gmrf.select_penalty(rows[:cut], candidates, rows[cut:], options)

    estimate = gmrf.graphical_lasso(gmrf.empirical_covariance(rows), penalty, options)
    corr = gmrf.conditional_correlation(estimate)
    graph = gmrf.threshold_graph(corr, threshold)
    stats = gmrf.graph_stats(graph)

    gmrf.save_graph(graph, cfg.path("graph.json"), metadata={
        "config_hash": cfg.hash,
        "penalty": penalty,
        "solver_iterations": estimate.stats.iterations,
    })
    gmrf.save_matrix_csv(cfg.path("correlation_matrix.csv"), corr,
                         comments=[f"config_hash={cfg.hash}"])
    with open(cfg.path("correlation_structure.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        fh.write("i,j,weight\n")
        for i, j in graph.edges:
            fh.write(f"{i},{j},{graph.weight(i, j)!r}\n")
    with open(cfg.path("graph_stats.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "config_hash": cfg.hash,
            "penalty": penalty,
            "n_edges": graph.n_edges,
            "mean_degree": stats.mean_degree,
            "max_degree_node": stats.max_degree_node,
            "top_edges": [[i, j, w] for i, j, w in stats.top_edges],
        }, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"learn-graph: penalty {penalty}, {graph.n_edges} edges, "
          f"mean degree {stats.mean_degree:.3f}")
    return 0


# ---------------------------------------------------------------------------
# train


def _load_graph(cfg: RunConfig):
    graph_path = _require(cfg.path("graph.json"))
    graph, meta = gmrf.load_graph(graph_path)
    _check_hash(meta.get("config_hash"), cfg.hash, graph_path)
    return graph


def _model_config(cfg: RunConfig, series) -> transformer.ModelConfig:
    m = cfg.section("model")
    return transformer.ModelConfig(
        n_locations=series.n_locations,
        n_aux_features=series.n_aux,
        per_location=int(m.get("per_location", 4)),
        aux_neurons=int(m.get("aux_neurons", 64)),
        n_heads=int(m.get("n_heads", 1)),
        n_layers=int(m.get("n_layers", 1)),
        apply_query_scaling=bool(m.get("apply_query_scaling", True)),
    )


def _loss_config(cfg: RunConfig) -> training.LossConfig:
    t = cfg.section("training")
    return training.LossConfig(eta=float(t.get("eta", 8e-3)),
                               mape_threshold=float(t.get("mape_threshold", 10.0)))


def cmd_train(cfg: RunConfig) -> int:
    series = _load_series(cfg)
    graph = _load_graph(cfg)
    result_split = _split(cfg, series)
    t = cfg.section("training")
    stride = int(t.get("stride", 1))

    train_jobs = []
    for piece in result_split.train:
        train_jobs.extend(dataio.make_jobs(piece, horizon=cfg.horizon, stride=stride))
    val_jobs = dataio.make_jobs(result_split.validation, horizon=cfg.horizon, stride=stride)
    standardizer = dataio.Standardizer.fit_pieces(result_split.train)

    model = transformer.Forecaster(_model_config(cfg, series), graph,
                                   seed=derive_seed(cfg.seed, "model-init"))
    schedule = training.TrainingSchedule(
        epochs=int(t.get("epochs", 30)),
        batch_size=int(t.get("batch_size", 32)),
        learning_rate=float(t.get("learning_rate", 1e-3)),
        shuffle_seed=derive_seed(cfg.seed, "shuffle"),
        patience=int(t.get("patience", 5)),
    )
    result = training.train(model, train_jobs, schedule, _loss_config(cfg),
                            standardizer=standardizer, val_jobs=val_jobs)

    transformer.save_model(model, cfg.path("checkpoint.bin"), config_hash=cfg.hash)
    training.save_loss_curve(cfg.path("loss_curve.csv"), result.train_losses)
    if result.val_losses:
        training.save_loss_curve(cfg.path("val_loss_curve.csv"), result.val_losses)
    print(f"train: {len(train_jobs)} jobs, {len(result.train_losses)} epochs"
          f"{' (early stop)' if result.stopped_early else ''}, "
          f"best epoch {result.best_epoch}")
    return 0


# ---------------------------------------------------------------------------
# forecast / evaluate


def _load_checkpoint(cfg: RunConfig):
    path = _require(cfg.path("checkpoint.bin"))
    model, header = transformer.load_model(path, expected_config_hash=cfg.hash)
    return model


def _test_jobs(cfg: RunConfig, series):
    result_split = _split(cfg, series)
    stride = int(cfg.section("evaluate").get("stride", 1))
    jobs = dataio.make_jobs(result_split.test, horizon=cfg.horizon, stride=stride)
    if not jobs:
        raise ConfigurationError(
            "test range is too short to fit any forecast job (needs 674 + horizon rows)")
    return jobs


def cmd_forecast(cfg: RunConfig) -> int:
    series = _load_series(cfg)
    model = _load_checkpoint(cfg)
    jobs = _test_jobs(cfg, series)
    with open(cfg.path("predictions.csv"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_hash={cfg.hash}\n")
        fh.write("timestamp,step," + ",".join(f"loc_{i}" for i in series.location_ids) + "\n")
        for job in jobs:
            pred = training.forecast_job(model, job, model.standardizer)
            for k in range(pred.shape[0]):
                cells = [str(job.timestamp + 1 + k), str(k + 1)]
                cells += [repr(float(v)) for v in pred[k]]
                fh.write(",".join(cells) + "\n")
    print(f"forecast: wrote predictions for {len(jobs)} jobs")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    series = _load_series(cfg)
    model = _load_checkpoint(cfg)
    jobs = _test_jobs(cfg, series)
    report = training.evaluate(model, jobs, _loss_config(cfg), seed=cfg.seed,
                               config_hash=cfg.hash, extra={"model": "forecaster"})
    report.save(cfg.path("eval_report.json"))
    report.save_per_step_csv(cfg.path("per_step_metrics.csv"))
    print(f"evaluate: rmse {report.rmse:.4f}, mape {report.mape * 100.0:.4f}% "
          f"over {report.n_jobs} jobs")
    return 0


def cmd_baseline_var(cfg: RunConfig) -> int:
    series = _load_series(cfg)
    result_split = _split(cfg, series)
    v = cfg.section("var")
    order = int(v.get("order", 6))
    intercept = bool(v.get("intercept", True))
    model = baselines.fit_var(result_split.train, p=order, intercept=intercept)
    baselines.save_var_model(model, cfg.path("var_model.csv"), config_hash=cfg.hash)

    jobs = _test_jobs(cfg, series)
    test = result_split.test
    preds = []
    for job in jobs:
        history = test.signals[job.t_index - order + 1: job.t_index + 1]
        preds.append(baselines.forecast_var(model, history, job.decoder_aux, cfg.horizon))
    report = training.report_from_predictions(
        np.stack(preds), np.stack([j.truths for j in jobs]),
        threshold=_loss_config(cfg).mape_threshold, seed=cfg.seed,
        config_hash=cfg.hash, extra={"model": "var", "order": order})
    report.save(cfg.path("var_eval_report.json"))
    report.save_per_step_csv(cfg.path("var_per_step_metrics.csv"))
    print(f"baseline-var: rmse {report.rmse:.4f}, mape {report.mape * 100.0:.4f}% "
          f"over {report.n_jobs} jobs")
    return 0


# ---------------------------------------------------------------------------
# entry point


_COMMANDS = {
    "synth": cmd_synth,
    "learn-graph": cmd_learn_graph,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
    "baseline-var": cmd_baseline_var,
}


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to the JSON run config")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (overrides the config's seed)")
    common.add_argument("--out", default=".", help="artifact directory (default: .)")

    parser = argparse.ArgumentParser(
        prog="forecaster",
        description="Spatiotemporal forecasting with a dependency-graph-sparsified transformer")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic dataset from a planted dependency structure",
        "learn-graph": "estimate the sparse precision matrix and export the dependency graph",
        "train": "train the sparse transformer against the learned graph",
        "forecast": "write autoregressive predictions for the test range",
        "evaluate": "score autoregressive forecasts (pooled + per-step RMSE/MAPE)",
        "baseline-var": "fit and score the vector-autoregression baseline",
    }
    for name in _COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if not os.path.exists(args.config):
            raise DependencyError(f"missing required artifact: {args.config}")
        with open(args.config, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"config file is not valid JSON: {exc}")
        os.makedirs(args.out, exist_ok=True)
        cfg = RunConfig(doc, seed_override=args.seed, out_dir=args.out)
        return _COMMANDS[args.command](cfg)
    except ForecasterError as exc:
        line = json.dumps({"error": type(exc).__name__, "message": str(exc)}, sort_keys=True)
        print(f"forecaster-error {line}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
