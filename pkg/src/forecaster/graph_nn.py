"""Dependency-graph-driven sparsification of linear layers.

Model representations are laid out in location blocks: the first
``per_location`` coordinates belong to location 0, the next ``per_location``
to location 1, ..., and the final ``aux`` coordinates are shared auxiliary
neurons with no location identity. A linear layer between two such layouts is
masked so that

* neurons of the same location stay connected,
* neurons of locations joined by a dependency-graph edge stay connected,
* auxiliary neurons connect to each other,
* everything else (distinct non-adjacent locations, and any
  location <-> auxiliary pair) is pruned to an exact structural zero.

Masked weights start at zero and receive exactly-zero gradients (see
``autodiff.masked_matmul``), so they remain zero for the lifetime of a model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, IntegrityError
from .gmrf import DependencyGraph

__all__ = [
    "NeuronAllocation",
    "SparseLinearSpec",
    "block_labels",
    "mask_from_labels",
    "build_mask",
    "make_spec",
    "init_weights",
    "sparse_linear_forward",
    "sparse_embedding",
    "validate_mask",
    "validate_sparse_weights",
]


@dataclass(frozen=True)
class NeuronAllocation:
    """Neuron counts on each side of a sparse linear layer.

    Location blocks come first (location 0..N-1 contiguous), the auxiliary
    block last; the layout is shared by masks, query scaling, and the output
    projection.
    """

    n_locations: int
    per_location_in: int
    per_location_out: int
    aux_in: int
    aux_out: int

    def __post_init__(self):
        for name in ("n_locations", "per_location_in", "per_location_out", "aux_in", "aux_out"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"allocation field {name} must be nonnegative")

    @property
    def total_in(self) -> int:
        return self.n_locations * self.per_location_in + self.aux_in

    @property
    def total_out(self) -> int:
        return self.n_locations * self.per_location_out + self.aux_out


def block_labels(n_locations: int, per_location: int, aux: int) -> np.ndarray:
    """Location index of each neuron in a block layout; auxiliary neurons get -1.

    >>> block_labels(3, 2, 2)
    array([ 0,  0,  1,  1,  2,  2, -1, -1])
    """
    loc = np.repeat(np.arange(n_locations, dtype=np.int64), per_location)
    return np.concatenate([loc, np.full(aux, -1, dtype=np.int64)])


def mask_from_labels(out_labels, in_labels, graph: DependencyGraph) -> np.ndarray:
    """0/1 connectivity mask between two labeled neuron layouts.

    Entry (o, i) is 1 when both neurons are auxiliary, when they share a
    location, or when their locations are joined by an edge of ``graph``.
    This generalizes :func:`build_mask` to layouts that are not plain block
    layouts, e.g. the head-concatenated input of the attention output
    projection.
    """
    out_labels = np.asarray(out_labels, dtype=np.int64)
    in_labels = np.asarray(in_labels, dtype=np.int64)
    adj = np.zeros((graph.n_locations, graph.n_locations), dtype=bool)
    for i, j in graph.edges:
        adj[i, j] = adj[j, i] = True
    np.fill_diagonal(adj, True)

    out_aux = out_labels < 0
    in_aux = in_labels < 0
    mask = np.zeros((out_labels.size, in_labels.size), dtype=np.float64)
    mask[np.ix_(out_aux, in_aux)] = 1.0
    if np.any(~out_aux) and np.any(~in_aux):
        mask[np.ix_(~out_aux, ~in_aux)] = adj[np.ix_(out_labels[~out_aux], in_labels[~in_aux])]
    return mask


def build_mask(allocation: NeuronAllocation, graph: DependencyGraph) -> np.ndarray:
    """Binary mask of shape (total_out, total_in) for ``allocation`` over ``graph``."""
    if allocation.n_locations != graph.n_locations:
        raise ConfigurationError(
            f"allocation has {allocation.n_locations} locations but graph has {graph.n_locations}"
        )
    n = allocation.n_locations
    return mask_from_labels(
        block_labels(n, allocation.per_location_out, allocation.aux_out),
        block_labels(n, allocation.per_location_in, allocation.aux_in),
        graph,
    )


@dataclass
class SparseLinearSpec:
    """A sparse linear layer's allocation, graph, compiled mask, and bias flag."""

    allocation: NeuronAllocation
    graph: DependencyGraph
    mask: np.ndarray = field(default=None)
    bias_enabled: bool = True

    def __post_init__(self):
        if self.mask is None:
            self.mask = build_mask(self.allocation, self.graph)
        validate_mask(self.mask)
        expected = (self.allocation.total_out, self.allocation.total_in)
        if self.mask.shape != expected:
            raise ConfigurationError(f"mask shape {self.mask.shape} != allocation shape {expected}")


def make_spec(graph: DependencyGraph, per_location_in: int, per_location_out: int,
              aux_in: int, aux_out: int, bias_enabled: bool = True) -> SparseLinearSpec:
    alloc = NeuronAllocation(graph.n_locations, per_location_in, per_location_out, aux_in, aux_out)
    return SparseLinearSpec(allocation=alloc, graph=graph, bias_enabled=bias_enabled)


def init_weights(spec_or_mask, seed):
    """Glorot-uniform weights with per-entry effective fan sizes.

    The bound for entry (o, i) is ``sqrt(6 / (fan_in_eff[o] + fan_out_eff[i]))``
    where the effective fans count only unmasked entries in row o / column i,
    so sparse rows do not start with vanishing output variance (all-masked
    rows fall back to fan 1 and stay zero anyway). Masked entries are exactly
    0 and the bias starts at zero. ``seed`` may be an integer or a Generator.

    Returns (weight, bias); bias is None when the spec disables it.
    """
    if isinstance(spec_or_mask, SparseLinearSpec):
        mask = spec_or_mask.mask
        with_bias = spec_or_mask.bias_enabled
    else:
        mask = np.asarray(spec_or_mask, dtype=np.float64)
        with_bias = True
    rng = np.random.default_rng(seed)
    fan_in = mask.sum(axis=1)          # unmasked inputs feeding each output
    fan_out = mask.sum(axis=0)         # unmasked outputs fed by each input
    denom = fan_in[:, None] + fan_out[None, :]
    denom = np.where(denom > 0, denom, 1.0)
    bound = np.sqrt(6.0 / denom)
    weight = rng.uniform(-1.0, 1.0, size=mask.shape) * bound * mask
    bias = np.zeros(mask.shape[0]) if with_bias else None
    return weight, bias


def sparse_linear_forward(spec: SparseLinearSpec, weight, bias, x):
    """Masked affine map ``(weight * mask) @ x + bias`` on autodiff tensors.

    ``x`` may be a single vector of total_in or a (total_in, T) matrix of
    column vectors; the bias broadcasts across columns.
    """
    out = ad.masked_matmul(weight, spec.mask, x)
    if spec.bias_enabled and bias is not None:
        b = ad.as_tensor(bias)
        if out.values.ndim == 2:
            b = ad.reshape(b, (b.shape[0], 1))
        out = ad.add(out, b)
    return out


def sparse_embedding(spec: SparseLinearSpec, weight, bias, x):
    """Sparse linear layer followed by elementwise ReLU."""
    return ad.relu(sparse_linear_forward(spec, weight, bias, x))


def validate_mask(mask: np.ndarray):
    """Reject masks with entries outside {0, 1}."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise IntegrityError(f"mask must be 2-D, got shape {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise IntegrityError("mask entries must be exactly 0 or 1")


def validate_sparse_weights(weight, mask: np.ndarray, name: str = "weight"):
    """Raise IntegrityError if any masked entry of ``weight`` is nonzero."""
    validate_mask(mask)
    weight = np.asarray(getattr(weight, "values", weight))
    if weight.shape != mask.shape:
        raise IntegrityError(f"{name}: weight shape {weight.shape} != mask shape {mask.shape}")
    bad = (mask == 0.0) & (weight != 0.0)
    if np.any(bad):
        o, i = np.argwhere(bad)[0]
        raise IntegrityError(f"{name}: masked entry ({o}, {i}) is nonzero ({weight[o, i]!r})")
