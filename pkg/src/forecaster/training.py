"""Loss, metrics, the teacher-forced training loop, and evaluation reports.

Metrics are pooled over every (job, step, location) term:

    RMSE = sqrt(mean of squared errors)
    MAPE = mean of |pred - truth| / truth over terms with truth >= threshold

and the training loss is ``eta * RMSE^2 + MAPE`` built on the autodiff tape,
so MAPE-excluded terms contribute exactly zero gradient through the MAPE part.
Predictions are de-standardized inside the loss graph: losses and metrics are
always in original signal units even though the model works on standardized
inputs.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    ConfigurationError,
    EmptyEvaluationError,
    NonFiniteGradientError,
    NonFiniteLossError,
)
from .transformer import Forecaster, SequenceBatch, autoregressive_forecast

__all__ = [
    "LossConfig",
    "TrainingSchedule",
    "TrainingResult",
    "EvalReport",
    "rmse",
    "mape",
    "mape_detail",
    "loss",
    "batch_loss",
    "assemble_batch",
    "train",
    "forecast_job",
    "evaluate",
    "report_from_predictions",
    "evaluation_threads",
    "save_loss_curve",
]


@dataclass
class LossConfig:
    """Loss weights: eta scales the squared-RMSE term added to MAPE.

    ``apply_mape_threshold=False`` includes every term in MAPE regardless of
    the truth's magnitude (the exclusion rule is the default).
    """

    eta: float = 8e-3
    mape_threshold: float = 10.0
    mape_as_fraction: bool = True   # False scales the MAPE term by 100 (percent)
    apply_mape_threshold: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ConfigurationError(f"eta must be >= 0, got {self.eta}")
        if self.mape_threshold < 0:
            raise ConfigurationError(f"mape_threshold must be >= 0, got {self.mape_threshold}")


def rmse(predictions, truths) -> float:
    """Pooled root-mean-square error over all terms."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: predictions {p.shape}, truths {t.shape}")
    if p.size == 0:
        raise EmptyEvaluationError("rmse of an empty batch")
    d = p - t
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class MapeDetail:
    value: float
    included: int
    excluded: int
    all_excluded: bool


def mape_detail(predictions, truths, threshold: float = 10.0) -> MapeDetail:
    """MAPE restricted to terms with truth >= threshold, plus exclusion counts."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ConfigurationError(f"shape mismatch: predictions {p.shape}, truths {t.shape}")
    if p.size == 0:
        raise EmptyEvaluationError("mape of an empty batch")
    include = t >= threshold
    k = int(include.sum())
    if k == 0:
        return MapeDetail(value=0.0, included=0, excluded=int(t.size), all_excluded=True)
    value = float(np.mean(np.abs(p[include] - t[include]) / t[include]))
    return MapeDetail(value=value, included=k, excluded=int(t.size - k), all_excluded=False)


def mape(predictions, truths, threshold: float = 10.0) -> float:
    return mape_detail(predictions, truths, threshold).value


def loss(predictions, truths, config: LossConfig | None = None):
    """Differentiable eta * MSE + thresholded MAPE; returns a scalar Tensor.

    ``predictions`` is a Tensor (any shape) in original units; ``truths`` a
    constant array of the same shape.
    """
    config = config or LossConfig()
    pred = ad.as_tensor(predictions)
    truths = np.asarray(truths, dtype=np.float64)
    if pred.shape != truths.shape:
        raise ConfigurationError(f"shape mismatch: predictions {pred.shape}, truths {truths.shape}")
    count = truths.size
    if count == 0:
        raise EmptyEvaluationError("loss of an empty batch")
    diff = ad.sub(pred, truths)
    total = ad.mul(ad.sum_all(ad.mul(diff, diff)), config.eta / count)
    include = truths >= config.mape_threshold if config.apply_mape_threshold \
        else np.ones(truths.shape, dtype=bool)
    k = int(include.sum())
    if k > 0:
        denom = np.where(include, truths, 1.0)
        weights = include / (denom * k)
        if not config.mape_as_fraction:
            weights = weights * 100.0
        total = ad.add(total, ad.sum_all(ad.mul(ad.absval(diff), weights)))
    return total


def batch_loss(pairs, config: LossConfig | None = None):
    """Loss over a batch of (prediction Tensor (N, T'), truth array) pairs,
    pooled as one statistic (not a mean of per-job losses)."""
    if not pairs:
        raise EmptyEvaluationError("loss of an empty batch")
    preds = ad.concat([p for p, _ in pairs], axis=1)
    truths = np.concatenate([np.asarray(t, dtype=np.float64) for _, t in pairs], axis=1)
    return loss(preds, truths, config)


# ---------------------------------------------------------------------------
# batch assembly


def assemble_batch(job, standardizer=None) -> SequenceBatch:
    """ForecastJob -> model-ready SequenceBatch (standardized signals, raw aux).

    Truths stay in original units: the loss de-standardizes predictions
    instead of standardizing targets.
    """
    enc_sig = job.encoder_signals if standardizer is None else standardizer.transform(job.encoder_signals)
    dec_sig = job.teacher_signals if standardizer is None else standardizer.transform(job.teacher_signals)
    return SequenceBatch(
        encoder_inputs=np.concatenate([enc_sig, job.encoder_aux], axis=1).T,
        decoder_inputs=np.concatenate([dec_sig, job.decoder_aux], axis=1).T,
        truths=np.asarray(job.truths, dtype=np.float64).T,
        timestamps=job.encoder_timestamps,
    )


def _destandardized(pred, standardizer):
    """De-standardize an (N, T') prediction Tensor inside the autodiff graph."""
    if standardizer is None:
        return pred
    scaled = ad.scale_by_vector(pred, standardizer.scale, axis=0)
    return ad.add(scaled, standardizer.mean.reshape(-1, 1))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingSchedule:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    shuffle_seed: int = 0
    patience: int = 5      # early-stopping patience on validation loss

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {self.patience}")


@dataclass
class TrainingResult:
    train_losses: list
    val_losses: list
    best_epoch: int
    stopped_early: bool


def _teacher_forced_loss(model, batches, loss_config) -> float:
    """Mean over mini-chunks of the teacher-forced loss, without gradients."""
    chunk = 256
    values = []
    with ad.no_grad():
        for lo in range(0, len(batches), chunk):
            pairs = []
            for b in batches[lo:lo + chunk]:
                pred = _destandardized(model.forward(b), model.standardizer)
                pairs.append((pred, b.truths))
            values.append(batch_loss(pairs, loss_config).item())
    return float(np.mean(values))


def train(model: Forecaster, train_jobs, schedule: TrainingSchedule | None = None,
          loss_config: LossConfig | None = None, standardizer=None,
          val_jobs=None) -> TrainingResult:
    """Teacher-forced Adam training with deterministic shuffling.

    Decoder inputs are the ground-truth previous-step signals; each batch's
    predictions are pooled into a single loss. With validation jobs, training
    stops once validation loss has not improved for ``patience`` epochs and
    the best-validation parameters are restored.
    """
    schedule = schedule or TrainingSchedule()
    loss_config = loss_config or LossConfig()
    model.standardizer = standardizer

    batches = [assemble_batch(j, standardizer) for j in train_jobs]
    val_batches = [assemble_batch(j, standardizer) for j in (val_jobs or [])]
    if not batches and schedule.epochs > 0:
        raise EmptyEvaluationError("no training jobs")

    optimizer = ad.Adam(model.params, lr=schedule.learning_rate)
    rng = np.random.default_rng(schedule.shuffle_seed)
    train_losses, val_losses = [], []
    best = (np.inf, 0, None)  # (val loss, epoch, parameter snapshot)
    stopped_early = False

    for epoch in range(1, schedule.epochs + 1):
        order = rng.permutation(len(batches))
        epoch_values = []
        for lo in range(0, len(order), schedule.batch_size):
            batch_ids = order[lo: lo + schedule.batch_size]
            pairs = []
            for idx in batch_ids:
                b = batches[idx]
                pred = _destandardized(model.forward(b), model.standardizer)
                pairs.append((pred, b.truths))
            total = batch_loss(pairs, loss_config)
            if not np.isfinite(total.item()):
                raise NonFiniteLossError(
                    f"non-finite training loss at epoch {epoch}, batch starting at job {lo}")
            optimizer.zero_grad()
            ad.backward(total)
            try:
                optimizer.step()
            except NonFiniteGradientError as exc:
                raise NonFiniteGradientError(
                    f"{exc} (epoch {epoch}, batch starting at job {lo})")
            epoch_values.append(total.item())
        train_losses.append(float(np.mean(epoch_values)))

        if val_batches:
            val = _teacher_forced_loss(model, val_batches, loss_config)
            if not np.isfinite(val):
                raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
            val_losses.append(val)
            if val < best[0]:
                best = (val, epoch, {k: t.values.copy() for k, t in model.params.items()})
            elif epoch - best[1] >= schedule.patience:
                stopped_early = True
                break

    if best[2] is not None:
        for name, values in best[2].items():
            model.params[name].values = values
    return TrainingResult(train_losses=train_losses, val_losses=val_losses,
                          best_epoch=best[1] if val_losses else len(train_losses),
                          stopped_early=stopped_early)


def save_loss_curve(path, losses):
    """Two-column CSV: epoch, loss."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for epoch, value in enumerate(losses, start=1):
            fh.write(f"{epoch},{value!r}\n")


# ---------------------------------------------------------------------------
# evaluation


STEP_LABELS = {1: "next", 2: "second_next", 3: "third_next"}


@dataclass
class EvalReport:
    """Pooled and per-step metrics of one evaluation run.

    The pooled values are the full Eq.-style statistics over every term, not
    averages of the per-step values. MAPE is stored as a fraction.
    """

    n_jobs: int
    horizon: int
    rmse: float
    mape: float
    rmse_per_step: list
    mape_per_step: list
    mape_excluded_per_step: list
    mape_excluded_total: int
    mape_all_excluded: bool
    mape_threshold: float
    seed: int = None
    config_hash: str = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "n_jobs": self.n_jobs,
            "horizon": self.horizon,
            "rmse": self.rmse,
            "mape": self.mape,
            "rmse_per_step": list(self.rmse_per_step),
            "mape_per_step": list(self.mape_per_step),
            "mape_excluded_per_step": list(self.mape_excluded_per_step),
            "mape_excluded_total": self.mape_excluded_total,
            "mape_all_excluded": self.mape_all_excluded,
            "mape_threshold": self.mape_threshold,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }
        doc.update(self.extra)
        return doc

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        kwargs = {k: v for k, v in doc.items() if k in known}
        kwargs["extra"] = {k: v for k, v in doc.items() if k not in known}
        return cls(**kwargs)

    def save_per_step_csv(self, path):
        """Per-step metric table (rows: forecast steps, then the pooled row);
        MAPE shown in percent to match the usual reporting convention."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,label,rmse,mape_pct\n")
            for k in range(self.horizon):
                label = STEP_LABELS.get(k + 1, f"step_{k + 1}")
                fh.write(f"{k + 1},{label},{self.rmse_per_step[k]!r},"
                         f"{self.mape_per_step[k] * 100.0!r}\n")
            fh.write(f"all,pooled,{self.rmse!r},{self.mape * 100.0!r}\n")


def report_from_predictions(predictions, truths, threshold: float = 10.0,
                            seed=None, config_hash=None, extra=None) -> EvalReport:
    """Build an EvalReport from stacked (S, T', N) prediction/truth arrays."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.ndim != 3 or p.shape != t.shape:
        raise ConfigurationError(f"expected matching (jobs, steps, locations) stacks, "
                                 f"got {p.shape} and {t.shape}")
    if p.size == 0:
        raise EmptyEvaluationError("evaluation over an empty job list")
    horizon = p.shape[1]
    pooled = mape_detail(p, t, threshold)
    per_step = [mape_detail(p[:, k, :], t[:, k, :], threshold) for k in range(horizon)]
    return EvalReport(
        n_jobs=p.shape[0],
        horizon=horizon,
        rmse=rmse(p, t),
        mape=pooled.value,
        rmse_per_step=[rmse(p[:, k, :], t[:, k, :]) for k in range(horizon)],
        mape_per_step=[d.value for d in per_step],
        mape_excluded_per_step=[d.excluded for d in per_step],
        mape_excluded_total=pooled.excluded,
        mape_all_excluded=pooled.all_excluded,
        mape_threshold=threshold,
        seed=seed,
        config_hash=config_hash,
        extra=dict(extra or {}),
    )


def evaluation_threads() -> int | None:
    """Worker cap from FORECASTER_THREADS; None leaves the pool size to the executor."""
    raw = os.environ.get("FORECASTER_THREADS", "").strip()
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ConfigurationError(f"FORECASTER_THREADS must be >= 1, got {n}")
    return n


def forecast_job(model: Forecaster, job, standardizer=None) -> np.ndarray:
    """Autoregressive (T', N) forecast for one job, in original units."""
    enc_sig = job.encoder_signals if standardizer is None else standardizer.transform(job.encoder_signals)
    enc = np.concatenate([enc_sig, job.encoder_aux], axis=1).T
    pred = autoregressive_forecast(model, enc, job.decoder_aux.T, enc_sig[-1])
    pred = pred.T
    return pred if standardizer is None else standardizer.inverse_transform(pred)


def evaluate(model: Forecaster, jobs, loss_config: LossConfig | None = None,
             standardizer=None, seed=None, config_hash=None, extra=None) -> EvalReport:
    """Autoregressive evaluation over all jobs with pooled + per-step metrics.

    Jobs fan out over a thread pool (capped by FORECASTER_THREADS); results
    are reduced in job order, so the report is identical at any thread count.
    """
    if not jobs:
        raise EmptyEvaluationError("evaluation over an empty job list")
    loss_config = loss_config or LossConfig()
    standardizer = standardizer if standardizer is not None else model.standardizer

    def worker(job):
        return forecast_job(model, job, standardizer)

    workers = evaluation_threads()
    if workers == 1 or len(jobs) == 1:
        preds = [worker(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            preds = list(pool.map(worker, jobs))

    predictions = np.stack(preds)                      # (S, T', N)
    truths = np.stack([j.truths for j in jobs])
    return report_from_predictions(predictions, truths, loss_config.mape_threshold,
                                   seed=seed, config_hash=config_hash, extra=extra)
