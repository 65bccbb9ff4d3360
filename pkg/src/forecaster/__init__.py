"""Spatiotemporal forecasting with a dependency-graph-sparsified transformer.

The pipeline: estimate a sparse precision matrix over locations with a
graphical lasso (``gmrf``), threshold its conditional correlations into a
dependency graph, compile the graph into binary masks for every linear layer
(``graph_nn``), train an encoder-decoder transformer whose weights honor
those masks (``transformer``, ``training``), and compare against a vector
autoregression baseline (``baselines``). ``dataio`` covers ingestion,
history filtering, synthetic data, and splits; ``cli`` wires the stages into
subcommands.
"""

from . import autodiff, baselines, cli, dataio, errors, gmrf, graph_nn, training, transformer
from .errors import ForecasterError

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "baselines",
    "cli",
    "dataio",
    "errors",
    "gmrf",
    "graph_nn",
    "training",
    "transformer",
    "ForecasterError",
    "__version__",
]
