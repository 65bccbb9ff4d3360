"""Graph-sparsified encoder-decoder transformer for spatial time series.

Sequences at the model boundary are (d, T) matrices whose columns are time
elements, ordered oldest to newest. An encoder input column is the
concatenation [signal ; aux] of one historical time step; a decoder input
column pairs the previous step's signal with the current step's auxiliary
features. The encoder and decoder embed their inputs with a sparse linear
layer + ReLU, add sinusoidal positional encoding, and run stacked layers of
sparse multi-head attention and sparse feedforward blocks, each wrapped in a
residual connection with post-layer-norm. A final sparse projection maps the
decoder state back to one output per location.

All linear maps except the attention projections carry biases; attention
projections (query/key/value/output) have none. Every weight matrix is masked
by the dependency graph so that location blocks only talk to themselves,
their graph neighbors, and never to the auxiliary block.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError, ParseError
from .gmrf import DependencyGraph
from .graph_nn import (
    block_labels,
    init_weights,
    make_spec,
    mask_from_labels,
    sparse_embedding,
    sparse_linear_forward,
    validate_sparse_weights,
)

__all__ = [
    "ModelConfig",
    "AttentionConfig",
    "AttentionParams",
    "SequenceBatch",
    "Forecaster",
    "query_scaling_vector",
    "positional_encoding",
    "causal_bias",
    "scaled_similarities",
    "multi_head_attention",
    "encoder_forward",
    "decoder_forward",
    "autoregressive_forecast",
    "validate_model",
    "save_model",
    "load_model",
]

CHECKPOINT_FORMAT = "forecaster-checkpoint-v1"


def query_scaling_vector(d_signal: int, d_aux: int) -> np.ndarray:
    """Per-coordinate query scaling balancing signal and auxiliary neurons.

    Signal coordinates are scaled by sqrt(1/2 + d_aux / (2 d_signal)) and
    auxiliary coordinates by sqrt(1/2 + d_signal / (2 d_aux)), which equalizes
    the expected contribution of the two blocks to the attention similarity.
    With d_signal == d_aux both factors are exactly 1.0. A model with no
    auxiliary block (or no signal block) is returned an all-ones vector.
    """
    if d_signal <= 0 or d_aux <= 0:
        return np.ones(d_signal + d_aux)
    r_signal = math.sqrt(0.5 + d_aux / (2.0 * d_signal))
    r_aux = math.sqrt(0.5 + d_signal / (2.0 * d_aux))
    return np.concatenate([np.full(d_signal, r_signal), np.full(d_aux, r_aux)])


def positional_encoding(seq_len: int, d_model: int) -> np.ndarray:
    """Sinusoidal positional encoding, shape (seq_len, d_model).

    PE[pos, 2i] = sin(pos / 10000^(2i/d_model)), PE[pos, 2i+1] = cos(same).
    Row 0 is the alternating [0, 1, 0, 1, ...] pattern.
    """
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    div = 10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((seq_len, d_model))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div[: d_model // 2])
    return pe


def causal_bias(t_query: int, t_key: int) -> np.ndarray:
    """Additive attention bias: 0 where key <= query position, -inf after."""
    return np.triu(np.full((t_query, t_key), -np.inf), k=1)


@dataclass
class AttentionConfig:
    """Head count and signal/aux widths of one attention block.

    ``scaling`` is the query scaling vector (length d_model); it is computed
    from the widths when ``apply_scaling`` is set, else attention runs on the
    raw queries.
    """

    n_heads: int
    d_signal: int
    d_aux: int
    apply_scaling: bool = True
    scaling: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_heads < 1:
            raise ConfigurationError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if self.scaling is None and self.apply_scaling:
            self.scaling = query_scaling_vector(self.d_signal, self.d_aux)

    @property
    def d_model(self) -> int:
        return self.d_signal + self.d_aux

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionParams:
    """Stacked per-head projections of one attention block (no biases).

    ``query``/``key``/``value`` are (d_model, d_model) with the H per-head
    projections stacked along the rows; ``output`` maps the concatenated head
    outputs back to d_model. ``mask_heads`` masks the stacked projections,
    ``mask_output`` masks the output projection's head-concatenated input.
    """

    query: object
    key: object
    value: object
    output: object
    mask_heads: np.ndarray
    mask_output: np.ndarray


def _attention_weights(queries, keys, params: AttentionParams,
                       config: AttentionConfig, causal: bool):
    """Per-head attention weight matrices alpha of shape (T_q, T_k)."""
    q = ad.as_tensor(queries)
    k = ad.as_tensor(keys)
    if q.shape[0] != config.d_model or k.shape[0] != config.d_model:
        raise DimensionError(
            f"attention inputs must have width {config.d_model}, got {q.shape} / {k.shape}")
    if config.apply_scaling:
        q = ad.scale_by_vector(q, config.scaling, axis=0)
    q_all = ad.masked_matmul(params.query, params.mask_heads, q)
    k_all = ad.masked_matmul(params.key, params.mask_heads, k)
    sizes = [config.d_head] * config.n_heads
    q_heads = ad.split(q_all, sizes, axis=0)
    k_heads = ad.split(k_all, sizes, axis=0)
    bias = causal_bias(q.shape[1], k.shape[1]) if causal else None
    inv_scale = 1.0 / math.sqrt(config.d_head)
    alphas = []
    for h in range(config.n_heads):
        scores = ad.mul(ad.matmul(ad.transpose(q_heads[h]), k_heads[h]), inv_scale)
        if bias is not None:
            scores = ad.add(scores, bias)
        alphas.append(ad.softmax(scores, axis=1))
    return alphas


def scaled_similarities(queries, keys, params: AttentionParams,
                        config: AttentionConfig, head: int, causal: bool = False):
    """Attention weight matrix of one head; row t softmaxes the scaled dot
    products of scaled query t against every key (later keys forced to exact
    zero when ``causal``)."""
    return _attention_weights(queries, keys, params, config, causal)[head]


def multi_head_attention(queries, keys, values, params: AttentionParams,
                         config: AttentionConfig, causal: bool = False):
    """Attention output sequence (d_model, T_q): per head, values weighted by
    the attention rows, then heads concatenated and passed through the masked
    output projection."""
    alphas = _attention_weights(queries, keys, params, config, causal)
    v_all = ad.masked_matmul(params.value, params.mask_heads, ad.as_tensor(values))
    v_heads = ad.split(v_all, [config.d_head] * config.n_heads, axis=0)
    outs = [ad.matmul(v_heads[h], ad.transpose(alphas[h])) for h in range(config.n_heads)]
    cat = outs[0] if config.n_heads == 1 else ad.concat(outs, axis=0)
    return ad.masked_matmul(params.output, params.mask_output, cat)


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    """Architecture hyperparameters (defaults follow the reference setup:
    4 neurons per location, 64 auxiliary neurons, 1 head, 1 layer)."""

    n_locations: int
    n_aux_features: int
    per_location: int = 4
    aux_neurons: int = 64
    n_heads: int = 1
    n_layers: int = 1
    apply_query_scaling: bool = True
    dropout: float = 0.0  # config hook; no dropout is ever applied

    def __post_init__(self):
        if self.n_locations < 1:
            raise ConfigurationError(f"n_locations must be >= 1, got {self.n_locations}")
        if self.n_aux_features < 0:
            raise ConfigurationError("n_aux_features must be >= 0")
        if self.per_location < 1:
            raise ConfigurationError("per_location must be >= 1")
        if self.aux_neurons < 0:
            raise ConfigurationError("aux_neurons must be >= 0")
        if self.n_layers < 0:
            raise ConfigurationError("n_layers must be >= 0")
        if self.n_heads < 1:
            raise ConfigurationError("n_heads must be >= 1")
        if self.per_location % self.n_heads != 0 or self.aux_neurons % self.n_heads != 0:
            raise ConfigurationError(
                f"n_heads={self.n_heads} must divide per_location={self.per_location} "
                f"and aux_neurons={self.aux_neurons} so per-head masks exist")
        if self.dropout != 0.0:
            raise ConfigurationError("dropout is a placeholder and must stay 0.0")

    @property
    def d_signal(self) -> int:
        return self.n_locations * self.per_location

    @property
    def d_aux(self) -> int:
        return self.aux_neurons

    @property
    def d_model(self) -> int:
        return self.d_signal + self.d_aux

    @property
    def input_width(self) -> int:
        return self.n_locations + self.n_aux_features

    def to_dict(self) -> dict:
        return {
            "n_locations": self.n_locations,
            "n_aux_features": self.n_aux_features,
            "per_location": self.per_location,
            "aux_neurons": self.aux_neurons,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "apply_query_scaling": self.apply_query_scaling,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


@dataclass
class SequenceBatch:
    """One model-ready job: encoder/decoder input matrices plus targets.

    ``encoder_inputs`` is (N+P, T_hist); ``decoder_inputs`` is (N+P, T'),
    column k pairing the signal of step t+k with the aux of step t+k+1;
    ``truths`` is (N, T') in original units. Timestamps are bookkeeping only.
    """

    encoder_inputs: np.ndarray
    decoder_inputs: np.ndarray
    truths: np.ndarray = None
    timestamps: np.ndarray = None


class Forecaster:
    """The sparse encoder-decoder model: parameters, masks, and forward passes.

    Parameters live in ``self.params``, an ordered name -> Tensor map; the
    insertion order is the checkpoint serialization order. Masked weight
    matrices are associated with their masks via :meth:`mask_for`.
    """

    def __init__(self, config: ModelConfig, graph: DependencyGraph, seed: int):
        if graph.n_locations != config.n_locations:
            raise ConfigurationError(
                f"graph has {graph.n_locations} locations, config expects {config.n_locations}")
        self.config = config
        self.graph = graph
        self.seed = int(seed)
        self.standardizer = None  # set by training; rides along in checkpoints

        n, c = config.n_locations, config
        self.embed_spec = make_spec(graph, per_location_in=1, per_location_out=c.per_location,
                                    aux_in=c.n_aux_features, aux_out=c.aux_neurons)
        self.ffn_spec = make_spec(graph, per_location_in=c.per_location,
                                  per_location_out=c.per_location,
                                  aux_in=c.aux_neurons, aux_out=c.aux_neurons)
        self.project_spec = make_spec(graph, per_location_in=c.per_location,
                                      per_location_out=1, aux_in=c.aux_neurons, aux_out=0)

        model_labels = block_labels(n, c.per_location, c.aux_neurons)
        head_labels = np.tile(block_labels(n, c.per_location // c.n_heads,
                                           c.aux_neurons // c.n_heads), c.n_heads)
        self.mask_heads = mask_from_labels(head_labels, model_labels, graph)
        self.mask_attn_out = mask_from_labels(model_labels, head_labels, graph)

        self.attention_config = AttentionConfig(
            n_heads=c.n_heads, d_signal=c.d_signal, d_aux=c.d_aux,
            apply_scaling=c.apply_query_scaling)

        rng = np.random.default_rng(self.seed)
        self.params: dict[str, ad.Tensor] = {}
        self._masks: dict[str, np.ndarray] = {}

        self._add_sparse("encoder_embedding", self.embed_spec, rng)
        self._add_sparse("decoder_embedding", self.embed_spec, rng)
        for layer in range(c.n_layers):
            self._add_attention(f"encoder.{layer}.self_attention", rng)
            self._add_norm(f"encoder.{layer}.attention_norm")
            self._add_ffn(f"encoder.{layer}.feedforward", rng)
            self._add_norm(f"encoder.{layer}.feedforward_norm")
        for layer in range(c.n_layers):
            self._add_attention(f"decoder.{layer}.self_attention", rng)
            self._add_norm(f"decoder.{layer}.self_norm")
            self._add_attention(f"decoder.{layer}.cross_attention", rng)
            self._add_norm(f"decoder.{layer}.cross_norm")
            self._add_ffn(f"decoder.{layer}.feedforward", rng)
            self._add_norm(f"decoder.{layer}.feedforward_norm")
        self._add_sparse("output_projection", self.project_spec, rng)

    # -- parameter construction (order here defines the checkpoint order) --

    def _param(self, name: str, values, mask=None):
        t = ad.Tensor(values, requires_grad=True)
        self.params[name] = t
        if mask is not None:
            self._masks[name] = mask
        return t

    def _add_sparse(self, name: str, spec, rng):
        weight, bias = init_weights(spec, rng)
        self._param(f"{name}.weight", weight, spec.mask)
        self._param(f"{name}.bias", bias)

    def _add_attention(self, prefix: str, rng):
        for role in ("query", "key", "value"):
            weight, _ = init_weights(self.mask_heads, rng)
            self._param(f"{prefix}.{role}", weight, self.mask_heads)
        weight, _ = init_weights(self.mask_attn_out, rng)
        self._param(f"{prefix}.output", weight, self.mask_attn_out)

    def _add_ffn(self, prefix: str, rng):
        self._add_sparse(f"{prefix}.0", self.ffn_spec, rng)
        self._add_sparse(f"{prefix}.1", self.ffn_spec, rng)

    def _add_norm(self, prefix: str):
        self._param(f"{prefix}.gain", np.ones(self.config.d_model))
        self._param(f"{prefix}.bias", np.zeros(self.config.d_model))

    def mask_for(self, name: str):
        """Mask of a masked weight parameter, or None for biases/norm params."""
        return self._masks.get(name)

    # -- forward passes --

    def _attn_params(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(query=p[f"{prefix}.query"], key=p[f"{prefix}.key"],
                               value=p[f"{prefix}.value"], output=p[f"{prefix}.output"],
                               mask_heads=self.mask_heads, mask_output=self.mask_attn_out)

    def _embed(self, which: str, x):
        x = ad.as_tensor(x)
        if x.shape[0] != self.config.input_width:
            raise DimensionError(
                f"{which} inputs must have width {self.config.input_width} "
                f"(signal + aux), got {x.shape}")
        p = self.params
        e = sparse_embedding(self.embed_spec, p[f"{which}_embedding.weight"],
                             p[f"{which}_embedding.bias"], x)
        pe = positional_encoding(x.shape[1], self.config.d_model).T
        return ad.add(e, pe)

    def _sublayer(self, x, out, norm_prefix: str):
        p = self.params
        return ad.layer_norm(ad.add(x, out), p[f"{norm_prefix}.gain"],
                             p[f"{norm_prefix}.bias"], axis=0)

    def _ffn(self, prefix: str, x):
        p = self.params
        h = sparse_linear_forward(self.ffn_spec, p[f"{prefix}.0.weight"], p[f"{prefix}.0.bias"], x)
        h = ad.relu(h)
        return sparse_linear_forward(self.ffn_spec, p[f"{prefix}.1.weight"], p[f"{prefix}.1.bias"], h)

    def encode(self, history):
        """Encoder inputs (N+P, T_hist) -> encoded sequence (d_model, T_hist)."""
        x = self._embed("encoder", history)
        for layer in range(self.config.n_layers):
            attn = multi_head_attention(x, x, x, self._attn_params(f"encoder.{layer}.self_attention"),
                                        self.attention_config, causal=False)
            x = self._sublayer(x, attn, f"encoder.{layer}.attention_norm")
            ff = self._ffn(f"encoder.{layer}.feedforward", x)
            x = self._sublayer(x, ff, f"encoder.{layer}.feedforward_norm")
        return x

    def decode(self, decoder_inputs, memory):
        """Decoder inputs (N+P, T') + encoder memory -> predicted signals (N, T')."""
        x = self._embed("decoder", decoder_inputs)
        for layer in range(self.config.n_layers):
            attn = multi_head_attention(x, x, x, self._attn_params(f"decoder.{layer}.self_attention"),
                                        self.attention_config, causal=True)
            x = self._sublayer(x, attn, f"decoder.{layer}.self_norm")
            cross = multi_head_attention(x, memory, memory,
                                         self._attn_params(f"decoder.{layer}.cross_attention"),
                                         self.attention_config, causal=False)
            x = self._sublayer(x, cross, f"decoder.{layer}.cross_norm")
            ff = self._ffn(f"decoder.{layer}.feedforward", x)
            x = self._sublayer(x, ff, f"decoder.{layer}.feedforward_norm")
        p = self.params
        return sparse_linear_forward(self.project_spec, p["output_projection.weight"],
                                     p["output_projection.bias"], x)

    def forward(self, batch: SequenceBatch):
        """Teacher-forced forward pass: encode history, decode all steps at once."""
        return self.decode(batch.decoder_inputs, self.encode(batch.encoder_inputs))


def encoder_forward(model: Forecaster, history):
    return model.encode(history)


def decoder_forward(model: Forecaster, decoder_inputs, memory):
    return model.decode(decoder_inputs, memory)


def autoregressive_forecast(model: Forecaster, history, future_aux,
                            last_signal, teacher_signals=None) -> np.ndarray:
    """Forecast T' steps; returns an (N, T') array in the model's input units.

    Step 1 pairs the last historical signal with the first future aux vector;
    step k >= 2 pairs the model's own step-(k-1) prediction with aux k. When
    ``teacher_signals`` (N, T', the true previous-step signals) is given, the
    known inputs are decoded in a single pass -- the exact training-mode
    forward.
    """
    history = np.asarray(history, dtype=np.float64)
    future_aux = np.asarray(future_aux, dtype=np.float64)
    last_signal = np.asarray(last_signal, dtype=np.float64)
    horizon = future_aux.shape[1]
    if horizon < 1:
        raise DimensionError("future_aux must supply at least one step")
    with ad.no_grad():
        memory = model.encode(history)
        if teacher_signals is not None:
            dec = np.concatenate([np.asarray(teacher_signals, dtype=np.float64), future_aux], axis=0)
            return model.decode(dec, memory).values
        signals = [last_signal]
        outputs = None
        for k in range(horizon):
            dec = np.concatenate([np.column_stack(signals), future_aux[:, : k + 1]], axis=0)
            outputs = model.decode(dec, memory).values
            signals.append(outputs[:, k])
        return outputs


def validate_model(model: Forecaster):
    """Check every masked weight against its mask; IntegrityError on violation."""
    for name, tensor in model.params.items():
        mask = model.mask_for(name)
        if mask is not None:
            validate_sparse_weights(tensor.values, mask, name)


# ---------------------------------------------------------------------------
# checkpoint format
#
# [8-byte LE header length][header JSON, canonical sort_keys]
# then, for each name in header["param_order"]:
# [8-byte LE buffer length][C-order little-endian float64 bytes]


def save_model(model: Forecaster, path, config_hash: str | None = None):
    header = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "graph": model.graph.to_dict(),
        "graph_digest": model.graph.digest(),
        "seed": model.seed,
        "config_hash": config_hash,
        "standardizer": model.standardizer.to_dict() if model.standardizer is not None else None,
        "param_order": list(model.params.keys()),
        "param_shapes": {k: list(t.shape) for k, t in model.params.items()},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in header["param_order"]:
            buf = np.ascontiguousarray(model.params[name].values, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(buf)))
            fh.write(buf)


def load_model(path, expected_graph: DependencyGraph | None = None,
               expected_config_hash: str | None = None):
    """Load a checkpoint; returns (model, header metadata dict).

    Raises ParseError on malformed files, IntegrityError when stored weights
    violate their masks, and ConfigurationError when the checkpoint was built
    against a different graph or config hash than expected.
    """
    from .dataio import Standardizer  # deferred: dataio imports gmrf, no cycle with transformer

    with open(path, "rb") as fh:
        raw = fh.read()

    def take(n, offset, what):
        if offset + n > len(raw):
            raise ParseError(f"checkpoint truncated while reading {what}")
        return raw[offset:offset + n], offset + n

    chunk, off = take(8, 0, "header length")
    (header_len,) = struct.unpack("<Q", chunk)
    chunk, off = take(header_len, off, "header")
    try:
        header = json.loads(chunk.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"checkpoint header is not valid JSON: {exc}")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ParseError(f"unrecognized checkpoint format {header.get('format')!r}")

    if expected_config_hash is not None and header.get("config_hash") != expected_config_hash:
        raise ConfigurationError(
            f"checkpoint was produced under config hash {header.get('config_hash')}, "
            f"expected {expected_config_hash}")

    graph = DependencyGraph.from_dict(header["graph"])
    if expected_graph is not None and graph.digest() != expected_graph.digest():
        raise ConfigurationError("checkpoint graph does not match the provided dependency graph")

    config = ModelConfig.from_dict(header["config"])
    model = Forecaster(config, graph, seed=header["seed"])
    if list(model.params.keys()) != header["param_order"]:
        raise ParseError("checkpoint parameter order does not match the architecture")

    for name in header["param_order"]:
        chunk, off = take(8, off, f"length of {name}")
        (buf_len,) = struct.unpack("<Q", chunk)
        chunk, off = take(buf_len, off, name)
        shape = tuple(header["param_shapes"][name])
        values = np.frombuffer(chunk, dtype="<f8")
        if values.size != int(np.prod(shape)):
            raise ParseError(f"parameter {name}: buffer holds {values.size} values, "
                             f"shape {shape} needs {int(np.prod(shape))}")
        model.params[name].values = values.reshape(shape).astype(np.float64)
    if off != len(raw):
        raise ParseError(f"checkpoint has {len(raw) - off} trailing bytes")

    if header.get("standardizer") is not None:
        model.standardizer = Standardizer.from_dict(header["standardizer"])
    validate_model(model)
    return model, header
