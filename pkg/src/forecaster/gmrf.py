"""Sparse precision estimation and the location dependency graph.

The spatial signal at the N locations is modeled as a multivariate Gaussian.
The precision matrix (inverse covariance) is estimated by an L1-penalized
maximum likelihood estimator solved with ADMM:

    minimize  tr(S Q) - log det Q + penalty * ||Q||_1   over symmetric Q > 0

Off-diagonal precision entries are converted to conditional correlation
coefficients, -Q_ij / sqrt(Q_ii * Q_jj), and thresholding their absolute
value yields the undirected dependency graph used to sparsify the
forecasting network.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceError,
    InsufficientDataError,
    InvalidPrecisionError,
)

__all__ = [
    "CovarianceEstimate",
    "SolverOptions",
    "SolverStats",
    "PrecisionEstimate",
    "DependencyGraph",
    "GraphStats",
    "empirical_covariance",
    "graphical_lasso",
    "penalized_objective",
    "conditional_correlation",
    "threshold_graph",
    "graph_stats",
    "gaussian_log_likelihood",
    "select_penalty",
    "save_graph",
    "load_graph",
    "save_matrix_csv",
    "load_matrix_csv",
]


def _signal_matrix(data) -> np.ndarray:
    """Accept a SpatialSeries-like object (with .signals) or a plain matrix."""
    values = getattr(data, "signals", data)
    return np.asarray(values, dtype=np.float64)


@dataclass
class CovarianceEstimate:
    """Per-location sample mean and sample covariance (1/(M-1) normalization)."""

    mean: np.ndarray
    matrix: np.ndarray
    sample_count: int


def empirical_covariance(data) -> CovarianceEstimate:
    """Sample mean and covariance of the rows of an (M, N) signal matrix.

    Raises
    ------
    InsufficientDataError
        If fewer than two time samples are available.
    """
    x = _signal_matrix(data)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D sample matrix, got shape {x.shape}")
    m = x.shape[0]
    if m < 2:
        raise InsufficientDataError(f"covariance needs at least 2 samples, got {m}")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample matrix contains non-finite values")
    mean = x.mean(axis=0)
    centered = x - mean
    s = centered.T @ centered / (m - 1)
    s = (s + s.T) / 2.0
    return CovarianceEstimate(mean=mean, matrix=s, sample_count=m)


@dataclass
class SolverOptions:
    """ADMM controls for :func:`graphical_lasso`.

    Stopping uses the usual scaled residuals: the solve ends when
    ``||X - Z||_F <= n*abs_tol + rel_tol*max(||X||_F, ||Z||_F)`` and
    ``rho*||Z - Z_prev||_F <= n*abs_tol + rel_tol*rho*||U||_F``.
    ``penalize_diagonal=False`` restricts the L1 term to off-diagonal entries.
    """

    rho: float = 1.0
    abs_tol: float = 1e-7
    rel_tol: float = 1e-6
    max_iterations: int = 2000
    penalize_diagonal: bool = True
    variance_floor: float = 1e-10


@dataclass
class SolverStats:
    iterations: int
    primal_residual: float
    dual_residual: float
    diagonal_floored: bool = False


@dataclass
class PrecisionEstimate:
    """Estimated precision matrix Q with its L1 weight and solver diagnostics."""

    matrix: np.ndarray
    penalty: float
    stats: SolverStats


def _soft_threshold(a: np.ndarray, k: float) -> np.ndarray:
    return np.sign(a) * np.maximum(np.abs(a) - k, 0.0)


def penalized_objective(s: np.ndarray, q: np.ndarray, penalty: float,
                        penalize_diagonal: bool = True) -> float:
    """tr(SQ) - log det Q + penalty * ||Q||_1 (optionally excluding the diagonal)."""
    sign, logdet = np.linalg.slogdet(q)
    if sign <= 0:
        return math.inf
    l1 = np.abs(q).sum()
    if not penalize_diagonal:
        l1 -= np.abs(np.diag(q)).sum()
    return float(np.sum(s * q) - logdet + penalty * l1)


def graphical_lasso(cov: CovarianceEstimate, penalty: float,
                    options: SolverOptions | None = None) -> PrecisionEstimate:
    """L1-penalized maximum-likelihood precision estimate via ADMM.

    The log-det proximal step is closed form through an eigendecomposition
    (eigenvalues mapped to ``(e + sqrt(e^2 + 4*rho)) / (2*rho)``, always
    positive), and the L1 proximal step is elementwise soft thresholding.

    Raises
    ------
    ConvergenceError
        If residuals do not reach tolerance within ``max_iterations``, or the
        returned consensus matrix is not positive definite.
    """
    opts = options or SolverOptions()
    if penalty < 0:
        raise ValueError(f"penalty must be nonnegative, got {penalty}")
    s = np.asarray(cov.matrix, dtype=np.float64)
    n = s.shape[0]
    if s.shape != (n, n) or not np.allclose(s, s.T, rtol=1e-10, atol=1e-12):
        raise ValueError("covariance matrix must be square and symmetric")

    s = (s + s.T) / 2.0
    floored = bool(np.any(np.diag(s) < opts.variance_floor))
    if floored:
        s = s.copy()
        idx = np.arange(n)
        s[idx, idx] = np.maximum(np.diag(s), opts.variance_floor)

    if penalty == 0.0:
        eigs = np.linalg.eigvalsh(s)
        if eigs[0] <= max(1e-12 * max(eigs[-1], 1.0), 0.0):
            raise ValueError("unpenalized estimation requires a nonsingular covariance")

    rho = opts.rho
    # exact solution for diagonal S, so floored variances start near optimum
    diag_shift = penalty if opts.penalize_diagonal else 0.0
    z = np.diag(1.0 / (np.diag(s) + diag_shift))
    u = np.zeros((n, n))
    primal = dual = math.inf
    iterations = 0

    for iterations in range(1, opts.max_iterations + 1):
        es, vecs = np.linalg.eigh(rho * (z - u) - s)
        xi = (es + np.sqrt(es * es + 4.0 * rho)) / (2.0 * rho)
        x = (vecs * xi) @ vecs.T
        x = (x + x.T) / 2.0

        z_prev = z
        w = x + u
        z = _soft_threshold(w, penalty / rho)
        if not opts.penalize_diagonal:
            idx = np.arange(n)
            z[idx, idx] = w[idx, idx]
        z = (z + z.T) / 2.0

        u = u + x - z

        primal = float(np.linalg.norm(x - z, "fro"))
        dual = float(rho * np.linalg.norm(z - z_prev, "fro"))
        eps_pri = n * opts.abs_tol + opts.rel_tol * max(np.linalg.norm(x, "fro"), np.linalg.norm(z, "fro"))
        eps_dual = n * opts.abs_tol + opts.rel_tol * rho * np.linalg.norm(u, "fro")
        if primal <= eps_pri and dual <= eps_dual:
            break
    else:
        raise ConvergenceError(
            f"graphical lasso did not converge in {opts.max_iterations} iterations "
            f"(primal {primal:.3e}, dual {dual:.3e})",
            iterations=opts.max_iterations, primal_residual=primal, dual_residual=dual,
        )

    min_eig = float(np.linalg.eigvalsh(z)[0])
    if min_eig <= 0.0:
        raise ConvergenceError(
            f"consensus matrix is not positive definite (min eigenvalue {min_eig:.3e})",
            iterations=iterations, primal_residual=primal, dual_residual=dual,
        )
    stats = SolverStats(iterations=iterations, primal_residual=primal,
                        dual_residual=dual, diagonal_floored=floored)
    return PrecisionEstimate(matrix=z, penalty=penalty, stats=stats)


def _precision_matrix(precision) -> np.ndarray:
    q = getattr(precision, "matrix", precision)
    return np.asarray(q, dtype=np.float64)


def conditional_correlation(precision) -> np.ndarray:
    """Conditional correlation matrix: -Q_ij / sqrt(Q_ii * Q_jj), diagonal 1.

    Entry (i, j) measures the dependence of locations i and j given all other
    locations; for positive-definite Q every entry lies in [-1, 1].
    """
    q = _precision_matrix(precision)
    d = np.diag(q)
    if np.any(d <= 0):
        raise InvalidPrecisionError("precision matrix has a nonpositive diagonal entry")
    corr = -q / np.sqrt(np.outer(d, d))
    np.fill_diagonal(corr, 1.0)
    return corr


# ---------------------------------------------------------------------------
# dependency graph


class DependencyGraph:
    """Undirected graph of conditionally dependent location pairs.

    Edges are stored once with i < j; each carries the signed conditional
    correlation that survived the threshold.
    """

    def __init__(self, n_locations: int, edges, threshold: float):
        self.n_locations = int(n_locations)
        self.threshold = float(threshold)
        normalized = {}
        for i, j, w in edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop on node {i}")
            if not (0 <= i < n_locations and 0 <= j < n_locations):
                raise ValueError(f"edge ({i}, {j}) out of range for {n_locations} locations")
            if abs(w) < self.threshold:
                raise ValueError(f"edge ({i}, {j}) weight {w} below threshold {threshold}")
            if abs(w) > 1.0 + 1e-12:
                raise ValueError(f"edge ({i}, {j}) weight {w} outside [-1, 1]")
            key = (min(i, j), max(i, j))
            normalized[key] = float(w)
        self._weights = dict(sorted(normalized.items()))

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(self._weights.keys())

    @property
    def n_edges(self) -> int:
        return len(self._weights)

    def weight(self, i: int, j: int) -> float:
        return self._weights[(min(i, j), max(i, j))]

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self._weights

    def neighbors(self, i: int) -> list[int]:
        out = [b for (a, b) in self._weights if a == i]
        out += [a for (a, b) in self._weights if b == i]
        return sorted(out)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_locations, dtype=np.int64)
        for i, j in self._weights:
            deg[i] += 1
            deg[j] += 1
        return deg

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_locations, self.n_locations), dtype=np.float64)
        for (i, j), w in self._weights.items():
            a[i, j] = w
            a[j, i] = w
        return a

    def to_dict(self) -> dict:
        return {
            "n_locations": self.n_locations,
            "threshold": self.threshold,
            "edges": [{"i": i, "j": j, "weight": w} for (i, j), w in self._weights.items()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DependencyGraph":
        edges = [(e["i"], e["j"], e["weight"]) for e in doc["edges"]]
        return cls(doc["n_locations"], edges, doc["threshold"])

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]

    def __eq__(self, other):
        return (isinstance(other, DependencyGraph)
                and self.n_locations == other.n_locations
                and self.threshold == other.threshold
                and self._weights == other._weights)

    def __repr__(self):
        return f"DependencyGraph(n_locations={self.n_locations}, edges={self.n_edges}, threshold={self.threshold})"


def threshold_graph(corr: np.ndarray, threshold: float) -> DependencyGraph:
    """Keep location pairs whose |conditional correlation| is at least the threshold."""
    corr = np.asarray(corr, dtype=np.float64)
    n = corr.shape[0]
    if corr.shape != (n, n) or not np.allclose(corr, corr.T, rtol=1e-10, atol=1e-12):
        raise ValueError("correlation matrix must be square and symmetric")
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if abs(corr[i, j]) >= threshold:
                edges.append((i, j, corr[i, j]))
    return DependencyGraph(n, edges, threshold)


@dataclass
class GraphStats:
    mean_degree: float
    max_degree_node: int
    top_edges: list = field(default_factory=list)


def graph_stats(graph: DependencyGraph, top_k: int = 10) -> GraphStats:
    """Mean degree, the busiest node, and the strongest edges.

    Edges are ranked by |weight| descending with ties broken by (i, j)
    lexicographic order; the busiest-node tie goes to the smallest index.
    """
    deg = graph.degrees()
    mean_degree = 2.0 * graph.n_edges / graph.n_locations if graph.n_locations else 0.0
    max_degree_node = int(np.argmax(deg)) if graph.n_locations else -1
    ranked = sorted(((i, j, graph.weight(i, j)) for i, j in graph.edges),
                    key=lambda e: (-abs(e[2]), e[0], e[1]))
    return GraphStats(mean_degree=mean_degree, max_degree_node=max_degree_node,
                      top_edges=ranked[:top_k])


# ---------------------------------------------------------------------------
# penalty selection


def gaussian_log_likelihood(mean: np.ndarray, precision, samples) -> float:
    """Total log density of the sample rows under N(mean, Q^-1)."""
    q = _precision_matrix(precision)
    x = _signal_matrix(samples)
    n = q.shape[0]
    sign, logdet = np.linalg.slogdet(q)
    if sign <= 0:
        raise InvalidPrecisionError("precision matrix must be positive definite")
    centered = x - np.asarray(mean, dtype=np.float64)
    quad = np.einsum("ti,ij,tj->t", centered, q, centered)
    m = x.shape[0]
    return float(0.5 * m * logdet - 0.5 * m * n * math.log(2.0 * math.pi) - 0.5 * quad.sum())


def select_penalty(train, candidates, validation,
                   options: SolverOptions | None = None) -> float:
    """Pick the L1 weight maximizing held-out Gaussian log-likelihood.

    Ties break toward the larger penalty (the sparser graph). Candidates whose
    solve fails to converge are skipped; if every candidate fails, the last
    convergence error is re-raised with an aggregate message.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate penalty list is empty")
    cov = empirical_covariance(train)
    best = None
    failures = []
    for lam in candidates:
        try:
            est = graphical_lasso(cov, lam, options)
        except ConvergenceError as exc:
            failures.append((lam, exc))
            continue
        ll = gaussian_log_likelihood(cov.mean, est.matrix, validation)
        if best is None or ll > best[0] or (ll == best[0] and lam > best[1]):
            best = (ll, lam)
    if best is None:
        detail = "; ".join(f"penalty {lam}: {exc}" for lam, exc in failures)
        raise ConvergenceError(f"all candidate penalties failed to converge: {detail}")
    return best[1]


# ---------------------------------------------------------------------------
# file formats


def save_graph(graph: DependencyGraph, path, metadata: dict | None = None):
    """Write the graph as a JSON document (indices 0-based, edges with i < j)."""
    doc = graph.to_dict()
    if metadata:
        doc.update(metadata)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_graph(path) -> tuple[DependencyGraph, dict]:
    """Read a graph document; returns the graph and any extra metadata fields."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    graph = DependencyGraph.from_dict(doc)
    meta = {k: v for k, v in doc.items() if k not in ("n_locations", "threshold", "edges")}
    return graph, meta


def save_matrix_csv(path, matrix: np.ndarray, comments: list[str] | None = None):
    """Dense row-major CSV with a `# n=N` header line (full float64 precision)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# n={matrix.shape[0]}\n")
        for line in comments or []:
            fh.write(f"# {line}\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    n = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# n="):
                    n = int(line[4:])
                continue
            rows.append([float(v) for v in line.split(",")])
    matrix = np.asarray(rows, dtype=np.float64)
    if n is not None and matrix.shape[0] != n:
        raise ValueError(f"matrix header declares n={n} but file has {matrix.shape[0]} rows")
    return matrix
