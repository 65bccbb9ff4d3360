"""Series ingestion, history filtering, synthetic data, splits, standardization.

A :class:`SpatialSeries` holds hourly-regular signals for N locations plus P
auxiliary features per time step. The history filter selects the 76 relevant
past elements (recent hours, the same hours from the past week, and the same
weekday hours from the past four weeks) out of a 674-hour window; forecast
jobs pair such a filtered history with the next T' targets.

The synthetic generator is the verification oracle for the whole pipeline: it
plants a known precision matrix in the innovations of a per-location AR(1)
process, layers deterministic daily/weekly seasonality (optionally interacted
with weekends) and auxiliary effects on top, and floors demand at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CadenceError,
    ConfigurationError,
    DimensionError,
    InsufficientDataError,
    ParseError,
    WindowError,
)
from .gmrf import DependencyGraph, conditional_correlation, threshold_graph

__all__ = [
    "SpatialSeries",
    "HistoryFilterSpec",
    "FilteredHistory",
    "ForecastJob",
    "SyntheticSpec",
    "SplitResult",
    "Standardizer",
    "load_csv",
    "save_csv",
    "csv_metadata",
    "build_filtered_history",
    "make_jobs",
    "sample_innovations",
    "synth_generate",
    "split",
]

HOURS_PER_DAY = 24
HOURS_PER_WEEK = 168


@dataclass
class SpatialSeries:
    """Hourly signals (T, N) and auxiliary features (T, P) with epoch-hour stamps."""

    timestamps: np.ndarray
    signals: np.ndarray
    aux: np.ndarray
    location_ids: list = None
    aux_feature_names: list = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.signals = np.asarray(self.signals, dtype=np.float64)
        self.aux = np.asarray(self.aux, dtype=np.float64)
        t = self.timestamps.shape[0]
        if self.signals.ndim != 2 or self.aux.ndim != 2:
            raise DimensionError("signals and aux must be 2-D (time, feature) matrices")
        if self.signals.shape[0] != t or self.aux.shape[0] != t:
            raise DimensionError(
                f"row counts differ: {t} timestamps, {self.signals.shape[0]} signal rows, "
                f"{self.aux.shape[0]} aux rows")
        if t > 1 and not np.all(np.diff(self.timestamps) == 1):
            bad = int(np.argmax(np.diff(self.timestamps) != 1))
            raise CadenceError(
                f"timestamps must be gap-free hourly; break after row {bad} "
                f"({self.timestamps[bad]} -> {self.timestamps[bad + 1]})")
        if self.location_ids is None:
            self.location_ids = [str(i) for i in range(self.signals.shape[1])]
        if self.aux_feature_names is None:
            self.aux_feature_names = [f"aux_{i}" for i in range(self.aux.shape[1])]

    @property
    def n_steps(self) -> int:
        return self.signals.shape[0]

    @property
    def n_locations(self) -> int:
        return self.signals.shape[1]

    @property
    def n_aux(self) -> int:
        return self.aux.shape[1]

    def slice(self, start: int, stop: int) -> "SpatialSeries":
        """Copy of rows [start, stop); slicing preserves the hourly cadence."""
        return SpatialSeries(self.timestamps[start:stop].copy(),
                             self.signals[start:stop].copy(),
                             self.aux[start:stop].copy(),
                             list(self.location_ids), list(self.aux_feature_names))


# ---------------------------------------------------------------------------
# CSV formats
#
# signals: `timestamp,loc_<id>,...`; aux: `timestamp,<feature>,...`; one row
# per hour. Lines starting with `#` before the header carry `key=value`
# metadata (e.g. the run's config hash).


def _parse_table(path, what: str):
    comments, header, rows = {}, None, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    comments[key.strip()] = value.strip()
                continue
            if header is None:
                header = [c.strip() for c in line.split(",")]
                continue
            cells = line.split(",")
            if len(cells) != len(header):
                raise ParseError(f"{what} row {lineno}: expected {len(header)} fields, got {len(cells)}")
            parsed = []
            for col, cell in enumerate(cells):
                cell = cell.strip()
                if cell == "":
                    raise ParseError(f"{what} row {lineno}, column '{header[col]}': missing value")
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(f"{what} row {lineno}, column '{header[col]}': "
                                     f"cannot parse {cell!r}")
            rows.append(parsed)
    if header is None:
        raise ParseError(f"{what} file {path} has no header row")
    if header[0] != "timestamp":
        raise ParseError(f"{what} file must start with a 'timestamp' column, got '{header[0]}'")
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    ts = data[:, 0]
    if not np.all(ts == np.round(ts)):
        raise ParseError(f"{what} timestamps must be integer epoch hours")
    return comments, header[1:], ts.astype(np.int64), data[:, 1:]


def csv_metadata(path) -> dict:
    """`key=value` pairs from the leading comment lines of a data CSV."""
    comments, _, _, _ = _parse_table(path, "data")
    return comments


def load_csv(signals_path, aux_path=None) -> SpatialSeries:
    """Read a signals CSV and an optional aligned aux CSV into a SpatialSeries."""
    _, sig_names, ts, signals = _parse_table(signals_path, "signals")
    loc_ids = [n[4:] if n.startswith("loc_") else n for n in sig_names]
    if aux_path is not None:
        _, aux_names, aux_ts, aux = _parse_table(aux_path, "aux")
        if aux_ts.shape != ts.shape or not np.all(aux_ts == ts):
            raise CadenceError("aux timestamps do not align with signal timestamps")
    else:
        aux_names, aux = [], np.zeros((ts.shape[0], 0))
    return SpatialSeries(ts, signals, aux, loc_ids, aux_names)


def _write_table(path, header_names, ts, values, comments):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in (comments or {}).items():
            fh.write(f"# {key}={value}\n")
        fh.write(",".join(["timestamp"] + list(header_names)) + "\n")
        for i in range(ts.shape[0]):
            cells = [str(int(ts[i]))] + [repr(float(v)) for v in values[i]]
            fh.write(",".join(cells) + "\n")


def save_csv(series: SpatialSeries, signals_path, aux_path=None, comments: dict | None = None):
    """Write the series back out; full float64 precision, round-trip exact."""
    _write_table(signals_path, [f"loc_{i}" for i in series.location_ids],
                 series.timestamps, series.signals, comments)
    if aux_path is not None:
        _write_table(aux_path, series.aux_feature_names, series.timestamps, series.aux, comments)


# ---------------------------------------------------------------------------
# history filtering


@dataclass(frozen=True)
class HistoryFilterSpec:
    """Which past hours feed the encoder, as lookback offsets from time t.

    recent: offsets {0..5} (the current hour and five before);
    weekly: {24j - i : i = -1..5, j = 1..recent_days} — a 7-hour band around
    the same hour on each of the past ``weekly_days`` days;
    monthly: {168j - i : i = -1..5, j = 1..monthly_weeks} — the same band on
    the same weekday of the past ``monthly_weeks`` weeks.

    Defaults give exactly 76 distinct offsets with maximum lookback 673, so a
    job needs a 674-hour history span.
    """

    recent_hours: int = 6
    weekly_days: int = 6
    monthly_weeks: int = 4

    def offsets(self) -> np.ndarray:
        """Distinct lookback offsets, descending (oldest element first)."""
        offs = set(range(self.recent_hours))
        band = range(-1, 6)
        for j in range(1, self.weekly_days + 1):
            offs.update(HOURS_PER_DAY * j - i for i in band)
        for j in range(1, self.monthly_weeks + 1):
            offs.update(HOURS_PER_WEEK * j - i for i in band)
        return np.array(sorted(offs, reverse=True), dtype=np.int64)

    @property
    def size(self) -> int:
        return self.offsets().size

    @property
    def max_lookback(self) -> int:
        return int(self.offsets()[0])


@dataclass
class FilteredHistory:
    """The filtered encoder elements for one target time, oldest to newest."""

    signals: np.ndarray    # (n_elements, N)
    aux: np.ndarray        # (n_elements, P)
    timestamps: np.ndarray


def build_filtered_history(series: SpatialSeries, t: int,
                           spec: HistoryFilterSpec | None = None) -> FilteredHistory:
    """Filtered history for forecasting from index ``t`` (the current hour)."""
    spec = spec or HistoryFilterSpec()
    offs = spec.offsets()
    if t < spec.max_lookback:
        raise WindowError(
            f"index {t} has insufficient history: filter looks back {spec.max_lookback} hours")
    if t >= series.n_steps:
        raise WindowError(f"index {t} outside series of length {series.n_steps}")
    rows = t - offs
    return FilteredHistory(signals=series.signals[rows], aux=series.aux[rows],
                           timestamps=series.timestamps[rows])


@dataclass
class ForecastJob:
    """A filtered history plus everything needed to decode T' future steps.

    ``teacher_signals`` row k is the true signal at t+k (the decoder input
    signal for step k+1); ``truths`` row k is the target at t+k+1.
    """

    t_index: int
    timestamp: int
    encoder_signals: np.ndarray
    encoder_aux: np.ndarray
    encoder_timestamps: np.ndarray
    decoder_aux: np.ndarray
    teacher_signals: np.ndarray
    truths: np.ndarray


def make_jobs(series: SpatialSeries, spec: HistoryFilterSpec | None = None,
              horizon: int = 3, stride: int = 1) -> list:
    """One job per valid forecast origin t; consecutive origins ``stride`` apart.

    Targets of consecutive jobs are disjoint exactly when stride == horizon.
    """
    spec = spec or HistoryFilterSpec()
    if horizon < 1:
        raise ConfigurationError(f"horizon must be >= 1, got {horizon}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    jobs = []
    for t in range(spec.max_lookback, series.n_steps - horizon, stride):
        hist = build_filtered_history(series, t, spec)
        jobs.append(ForecastJob(
            t_index=t,
            timestamp=int(series.timestamps[t]),
            encoder_signals=hist.signals,
            encoder_aux=hist.aux,
            encoder_timestamps=hist.timestamps,
            decoder_aux=series.aux[t + 1: t + horizon + 1],
            teacher_signals=series.signals[t: t + horizon],
            truths=series.signals[t + 1: t + horizon + 1],
        ))
    return jobs


# ---------------------------------------------------------------------------
# synthetic data


def sample_innovations(precision, count: int, rng) -> np.ndarray:
    """Draw ``count`` vectors from N(0, Q^-1) via the precision Cholesky factor.

    With L = chol(Q) (lower), solving L^T z = u for standard-normal u gives
    cov(z) = (L L^T)^{-1} = Q^{-1} exactly.
    """
    q = np.asarray(getattr(precision, "matrix", precision), dtype=np.float64)
    chol = np.linalg.cholesky(q)
    u = np.random.default_rng(rng).standard_normal((q.shape[0], count))
    return np.linalg.solve(chol.T, u).T


@dataclass
class SyntheticSpec:
    """Generator settings: planted precision, temporal kernel, aux effects.

    Per location i, with deterministic seasonal/aux terms s_t and innovations
    eps_t ~ N(0, Q^-1):

        d_t = phi_i * d_{t-1} + noise_scale * eps_{t,i}
        x_{t,i} = max(0, base_i + d_t + s_{t,i})        (floor optional)

    Auxiliary features are six weekday dummies (Monday..Saturday, Sunday is
    the baseline so designs with an intercept stay full rank), hour-of-day
    sine/cosine, and a smooth weather-like AR signal.
    """

    n_locations: int
    true_precision: np.ndarray
    ar_coefficient: float = 0.5
    daily_amplitude: float = 0.0
    weekly_amplitude: float = 0.0
    weekend_boost: float = 0.0
    aux_effects: np.ndarray = None   # (N, P) linear response to aux features
    noise_scale: float = 1.0
    base_level: float = 50.0
    seed: int = 0
    start_hour: int = 0
    burn_in: int = 336
    floor_at_zero: bool = True
    graph_threshold: float = 0.1
    true_graph: DependencyGraph = field(default=None)

    def __post_init__(self):
        self.true_precision = np.asarray(self.true_precision, dtype=np.float64)
        n = self.n_locations
        if self.true_precision.shape != (n, n):
            raise DimensionError(
                f"precision shape {self.true_precision.shape} != ({n}, {n})")
        if np.linalg.eigvalsh(self.true_precision)[0] <= 0:
            raise ConfigurationError("true_precision must be positive definite")
        phi = np.broadcast_to(np.asarray(self.ar_coefficient, dtype=np.float64), (n,))
        if np.any(np.abs(phi) >= 1.0):
            raise ConfigurationError("AR coefficients must lie in (-1, 1)")
        if self.true_graph is None:
            corr = conditional_correlation(self.true_precision)
            self.true_graph = threshold_graph(corr, self.graph_threshold)


AUX_FEATURE_NAMES = [f"dow_{d}" for d in range(1, 7)] + ["hour_sin", "hour_cos", "weather"]


def _aux_features(hours: np.ndarray, rng) -> np.ndarray:
    """Calendar one-hots (Sunday baseline) + hour harmonics + smooth weather."""
    t = hours.shape[0]
    day = (hours // HOURS_PER_DAY) % 7
    aux = np.zeros((t, len(AUX_FEATURE_NAMES)))
    for d in range(1, 7):
        aux[:, d - 1] = day == d
    angle = 2.0 * np.pi * (hours % HOURS_PER_DAY) / HOURS_PER_DAY
    aux[:, 6] = np.sin(angle)
    aux[:, 7] = np.cos(angle)
    weather = np.zeros(t)
    shocks = rng.standard_normal(t)
    level = 0.0
    for i in range(t):
        level = 0.98 * level + 0.2 * shocks[i]
        weather[i] = level
    aux[:, 8] = weather
    return aux


def synth_generate(spec: SyntheticSpec, length: int) -> SpatialSeries:
    """Seed-deterministic synthetic SpatialSeries of the given length."""
    if length < 1:
        raise ConfigurationError(f"length must be >= 1, got {length}")
    n = spec.n_locations
    ss = np.random.SeedSequence(spec.seed)
    innov_rng, aux_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    hours = spec.start_hour + np.arange(length, dtype=np.int64)
    aux = _aux_features(hours, aux_rng)

    phi = np.broadcast_to(np.asarray(spec.ar_coefficient, dtype=np.float64), (n,))
    eps = spec.noise_scale * sample_innovations(spec.true_precision, spec.burn_in + length, innov_rng)
    deviation = np.zeros(n)
    for i in range(spec.burn_in):
        deviation = phi * deviation + eps[i]

    base = np.broadcast_to(np.asarray(spec.base_level, dtype=np.float64), (n,))
    daily = np.broadcast_to(np.asarray(spec.daily_amplitude, dtype=np.float64), (n,))
    weekly = np.broadcast_to(np.asarray(spec.weekly_amplitude, dtype=np.float64), (n,))
    boost = np.broadcast_to(np.asarray(spec.weekend_boost, dtype=np.float64), (n,))
    phase = 2.0 * np.pi * np.arange(n) / max(n, 1)

    hour_angle = 2.0 * np.pi * (hours % HOURS_PER_DAY) / HOURS_PER_DAY
    week_angle = 2.0 * np.pi * (hours % HOURS_PER_WEEK) / HOURS_PER_WEEK
    weekend = ((hours // HOURS_PER_DAY) % 7 == 0) | ((hours // HOURS_PER_DAY) % 7 == 6)

    signals = np.zeros((length, n))
    for t in range(length):
        deviation = phi * deviation + eps[spec.burn_in + t]
        seasonal = daily * np.sin(hour_angle[t] + phase) * (1.0 + boost * weekend[t])
        seasonal = seasonal + weekly * np.sin(week_angle[t] + phase)
        row = base + deviation + seasonal
        if spec.aux_effects is not None:
            row = row + np.asarray(spec.aux_effects, dtype=np.float64) @ aux[t]
        signals[t] = np.maximum(row, 0.0) if spec.floor_at_zero else row

    return SpatialSeries(hours, signals, aux,
                         location_ids=[str(i) for i in range(n)],
                         aux_feature_names=list(AUX_FEATURE_NAMES))


# ---------------------------------------------------------------------------
# splitting


@dataclass
class SplitResult:
    """Training pieces (each gap-free), validation, and test series.

    Training may cover several disjoint intervals; they are kept as separate
    series because a single SpatialSeries must be gap-free, and forecast jobs
    are built per piece so no window straddles an interior gap.
    """

    train: tuple
    validation: SpatialSeries
    test: SpatialSeries


def split(series: SpatialSeries, train_ranges, val_range, test_range) -> SplitResult:
    """Slice the series into train pieces / validation / test by row ranges.

    Ranges are [start, stop) row indices; they must be non-empty, in bounds,
    and pairwise disjoint.
    """
    ranges = [tuple(r) for r in train_ranges] + [tuple(val_range), tuple(test_range)]
    for start, stop in ranges:
        if not (0 <= start < stop <= series.n_steps):
            raise ConfigurationError(
                f"range [{start}, {stop}) is empty or outside 0..{series.n_steps}")
    for a in range(len(ranges)):
        for b in range(a + 1, len(ranges)):
            lo = max(ranges[a][0], ranges[b][0])
            hi = min(ranges[a][1], ranges[b][1])
            if lo < hi:
                raise ConfigurationError(f"ranges {ranges[a]} and {ranges[b]} overlap")
    train = tuple(series.slice(start, stop) for start, stop in train_ranges)
    return SplitResult(train=train,
                       validation=series.slice(*val_range),
                       test=series.slice(*test_range))


# ---------------------------------------------------------------------------
# standardization


@dataclass
class Standardizer:
    """Per-location affine transform to zero mean / unit variance.

    Constant locations get scale 1 so the transform stays invertible;
    transform followed by inverse_transform is the identity within 1e-12.
    """

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, signals) -> "Standardizer":
        x = np.asarray(getattr(signals, "signals", signals), dtype=np.float64)
        if x.shape[0] < 1:
            raise InsufficientDataError("cannot fit a standardizer on an empty matrix")
        std = x.std(axis=0)
        return cls(mean=x.mean(axis=0), scale=np.where(std < 1e-12, 1.0, std))

    @classmethod
    def fit_pieces(cls, pieces) -> "Standardizer":
        stacked = np.vstack([np.asarray(getattr(p, "signals", p)) for p in pieces])
        return cls.fit(stacked)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def inverse_transform(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "Standardizer":
        return cls(mean=np.asarray(doc["mean"], dtype=np.float64),
                   scale=np.asarray(doc["scale"], dtype=np.float64))
