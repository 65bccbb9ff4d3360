"""Vector autoregression baseline fitted by ordinary least squares.

The one-step model is

    x_{t+1} = A_1 x_t + ... + A_p x_{t-p+1} + B a_{t+1} (+ intercept)

estimated jointly for all locations from the stacked regression via normal
equations with a tiny ridge jitter. Multi-step forecasts apply the model
recursively, feeding predictions back in as lagged values.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import (
    ConfigurationError,
    InsufficientDataError,
    InsufficientHistoryError,
    ParseError,
    SingularDesignError,
)

__all__ = ["VarModel", "fit_var", "forecast_var", "save_var_model", "load_var_model"]

_JITTER = 1e-10


class VarModel:
    """Fitted VAR coefficients: lag matrices A_1..A_p, aux response B, intercept."""

    def __init__(self, lag_matrices, aux_matrix, intercept=None):
        self.lag_matrices = [np.asarray(a, dtype=np.float64) for a in lag_matrices]
        if not self.lag_matrices:
            raise ConfigurationError("a VAR model needs at least one lag matrix")
        n = self.lag_matrices[0].shape[0]
        for a in self.lag_matrices:
            if a.shape != (n, n):
                raise ConfigurationError(f"lag matrix shape {a.shape} != ({n}, {n})")
        self.aux_matrix = np.asarray(aux_matrix, dtype=np.float64)
        if self.aux_matrix.shape[0] != n:
            raise ConfigurationError(
                f"aux matrix has {self.aux_matrix.shape[0]} rows, expected {n}")
        self.intercept = None if intercept is None else np.asarray(intercept, dtype=np.float64)
        if self.intercept is not None and self.intercept.shape != (n,):
            raise ConfigurationError(f"intercept shape {self.intercept.shape} != ({n},)")

    @property
    def order(self) -> int:
        return len(self.lag_matrices)

    @property
    def n_locations(self) -> int:
        return self.lag_matrices[0].shape[0]

    @property
    def n_aux(self) -> int:
        return self.aux_matrix.shape[1]

    def step(self, recent_signals, aux_next) -> np.ndarray:
        """One application of the recursion; recent_signals rows are
        x_t, x_{t-1}, ..., x_{t-p+1} (newest first)."""
        out = np.zeros(self.n_locations)
        for lag, a in enumerate(self.lag_matrices):
            out += a @ recent_signals[lag]
        out += self.aux_matrix @ aux_next
        if self.intercept is not None:
            out += self.intercept
        return out


def _design_rows(signals, aux, p, intercept):
    """Stacked regression rows for one gap-free series piece."""
    t_total = signals.shape[0]
    rows, targets = [], []
    for t in range(p - 1, t_total - 1):
        lags = [signals[t - lag] for lag in range(p)]
        feats = np.concatenate(lags + [aux[t + 1]])
        if intercept:
            feats = np.concatenate([feats, [1.0]])
        rows.append(feats)
        targets.append(signals[t + 1])
    return rows, targets


def fit_var(series, p: int = 6, intercept: bool = True) -> VarModel:
    """OLS fit of a VAR(p) with exogenous aux regressors.

    ``series`` is a SpatialSeries or a sequence of them (disjoint gap-free
    pieces contribute rows to one shared regression). Exactly collinear
    designs (e.g. a constant aux column together with the intercept) raise
    SingularDesignError; the 1e-10 ridge jitter only absorbs rounding-level
    conditioning, not true rank deficiency.
    """
    if p < 1:
        raise ConfigurationError(f"VAR order must be >= 1, got {p}")
    pieces = [series] if hasattr(series, "signals") else list(series)
    rows, targets = [], []
    for piece in pieces:
        got_rows, got_targets = _design_rows(piece.signals, piece.aux, p, intercept)
        rows.extend(got_rows)
        targets.extend(got_targets)
    if not rows:
        raise InsufficientDataError(f"no regression rows: every piece is shorter than p+1={p + 1}")
    f = np.asarray(rows)
    y = np.asarray(targets)
    n = y.shape[1]
    n_aux = pieces[0].aux.shape[1]
    n_cols = f.shape[1]
    if f.shape[0] < n_cols:
        raise InsufficientDataError(
            f"{f.shape[0]} regression rows cannot identify {n_cols} coefficients")
    if np.linalg.matrix_rank(f) < n_cols:
        raise SingularDesignError(
            f"design matrix is rank deficient ({np.linalg.matrix_rank(f)} < {n_cols}); "
            "check for collinear aux columns or a constant aux plus intercept")
    gram = f.T @ f + _JITTER * np.eye(n_cols)
    coef = np.linalg.solve(gram, f.T @ y)   # (n_cols, N)

    lag_matrices = [coef[lag * n:(lag + 1) * n].T for lag in range(p)]
    aux_matrix = coef[p * n: p * n + n_aux].T
    inter = coef[-1] if intercept else None
    return VarModel(lag_matrices, aux_matrix, inter)


def forecast_var(model: VarModel, history, future_aux, horizon: int) -> np.ndarray:
    """Recursive (horizon, N) forecast; later steps consume earlier predictions.

    ``history`` rows are past signals oldest to newest (at least p of them);
    ``future_aux`` rows are the known aux vectors for steps 1..horizon.
    """
    history = np.asarray(history, dtype=np.float64)
    future_aux = np.asarray(future_aux, dtype=np.float64)
    if history.shape[0] < model.order:
        raise InsufficientHistoryError(
            f"need at least {model.order} past signals, got {history.shape[0]}")
    if future_aux.shape[0] < horizon:
        raise InsufficientHistoryError(
            f"need {horizon} future aux rows, got {future_aux.shape[0]}")
    recent = [history[-1 - lag] for lag in range(model.order)]  # newest first
    out = np.zeros((horizon, model.n_locations))
    for k in range(horizon):
        out[k] = model.step(recent, future_aux[k])
        recent = [out[k]] + recent[:-1]
    return out


# ---------------------------------------------------------------------------
# serialization: JSON header line, then one CSV block per coefficient matrix


def save_var_model(model: VarModel, path, config_hash: str | None = None):
    header = {
        "format": "var-model-v1",
        "order": model.order,
        "n_locations": model.n_locations,
        "n_aux": model.n_aux,
        "intercept": model.intercept is not None,
        "config_hash": config_hash,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for lag, a in enumerate(model.lag_matrices, start=1):
            fh.write(f"# A_{lag}\n")
            for row in a:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        fh.write("# B\n")
        for row in model.aux_matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
        if model.intercept is not None:
            fh.write("# intercept\n")
            fh.write(",".join(repr(float(v)) for v in model.intercept) + "\n")


def load_var_model(path):
    """Returns (VarModel, header dict)."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines:
        raise ParseError(f"{path} is empty")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad VAR model header: {exc}")
    if header.get("format") != "var-model-v1":
        raise ParseError(f"unrecognized VAR model format {header.get('format')!r}")

    blocks: dict[str, list] = {}
    current = None
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("#"):
            current = line[1:].strip()
            blocks[current] = []
            continue
        if current is None:
            raise ParseError("coefficient rows before any block label")
        blocks[current].append([float(v) for v in line.split(",")])

    try:
        lags = [np.asarray(blocks[f"A_{k}"]) for k in range(1, header["order"] + 1)]
        aux = np.asarray(blocks["B"])
        inter = np.asarray(blocks["intercept"][0]) if header["intercept"] else None
    except KeyError as exc:
        raise ParseError(f"VAR model file missing block {exc}")
    return VarModel(lags, aux, inter), header
