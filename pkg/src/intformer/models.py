"""The inTformer network and the four recurrent/convolutional baselines.

All forward functions accept a single window (T, F) or a batch (B, T, F)
and return crash probabilities (a scalar tensor or shape (B,)).  Matrices use
the row-vector convention ``x @ W``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import numcore as nc
from .errors import ConfigurationError, DimensionError, NumericError
from .numcore import Tensor

FAMILIES = ("intformer", "lstm", "cnn", "lstm_cnn_sequential", "lstm_cnn_parallel")


# ---------------------------------------------------------------- parameters


@dataclass
class Time2VecParams:
    omega: Tensor  # (k+1,), index 0 is the linear slope
    phi: Tensor  # (k+1,)

    @property
    def k(self) -> int:
        return self.omega.shape[0] - 1


@dataclass
class AttentionParams:
    w_q: Tensor  # (h, d_model, d_k)
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # (h * d_k, d_model)

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[2]


@dataclass
class FFNParams:
    w1: Tensor  # (d_model, d_ff)
    b1: Tensor
    w2: Tensor  # (d_ff, d_model)
    b2: Tensor


@dataclass
class EncoderParams:
    attention: AttentionParams
    ffn: FFNParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    dropout: float = 0.0


@dataclass
class LinearParams:
    w: Tensor
    b: Tensor


@dataclass
class InTformerParams:
    time: Time2VecParams
    proj: LinearParams  # (F_in + k + 1) -> d_model
    encoders: list
    head: LinearParams  # d_model -> 1


@dataclass
class LSTMParams:
    w_ix: Tensor
    w_ih: Tensor
    w_ic: Tensor
    b_i: Tensor
    w_fx: Tensor
    w_fh: Tensor
    w_fc: Tensor
    b_f: Tensor
    w_ox: Tensor
    w_oh: Tensor
    w_oc: Tensor
    b_o: Tensor
    w_cx: Tensor
    w_ch: Tensor
    b_c: Tensor
    w_yh: Optional[Tensor] = None  # (H, 1); absent when the LSTM feeds a shared head
    b_y: Optional[Tensor] = None

    @property
    def hidden(self) -> int:
        return self.w_ih.shape[0]


@dataclass
class ConvParams:
    w: Tensor  # (kernel, F_in, channels)
    b: Tensor  # (channels,)

    @property
    def kernel(self) -> int:
        return self.w.shape[0]


@dataclass
class CNNParams:
    conv: ConvParams
    head: LinearParams


@dataclass
class HybridParams:
    conv: ConvParams
    lstm: LSTMParams
    head: LinearParams


def named_tensors(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a (nested) parameter container to dotted names."""
    out: dict[str, Tensor] = {}
    if isinstance(obj, Tensor):
        out[prefix.rstrip(".")] = obj
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(named_tensors(item, f"{prefix}{i}."))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if value is not None and not isinstance(value, (int, float)):
                out.update(named_tensors(value, f"{prefix}{f.name}."))
    return out


# ---------------------------------------------------------------- layers


def _batched(window) -> tuple[Tensor, bool]:
    x = nc.as_tensor(window)
    if x.ndim == 2:
        return nc.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected a (T, F) window or (B, T, F) batch, got {x.shape}")
    return x, False


def _unbatch(p: Tensor, single: bool) -> Tensor:
    return nc.reshape(p, ()) if single else p


def _linear(x, p: LinearParams) -> Tensor:
    return nc.matmul(x, p.w) + p.b


def time2vec(tau, p: Time2VecParams) -> Tensor:
    """Time embedding of shape (..., k+1): a linear term then k sine terms."""
    tau = np.asarray(tau, dtype=np.float64)
    t = Tensor(tau[..., None])
    lin = t * p.omega + p.phi
    if p.k == 0:
        return lin
    k1 = p.omega.shape[0]
    return nc.concat([nc.take(lin, (..., slice(0, 1))), nc.sin(nc.take(lin, (..., slice(1, k1))))], axis=-1)


def embed_sequence(x, p: Time2VecParams, proj: LinearParams) -> Tensor:
    """Append the time embedding of each step index to its features, then project."""
    xb, single = _batched(x)
    B, T, F = xb.shape
    if proj.w.shape[0] != F + p.k + 1:
        raise DimensionError(f"projection expects {proj.w.shape[0]} inputs, got {F} features + {p.k + 1} time dims")
    tv = time2vec(np.arange(T, dtype=np.float64), p)
    tv = nc.add(Tensor(np.zeros((B, T, p.k + 1))), tv)
    out = _linear(nc.concat([xb, tv], axis=-1), proj)
    return nc.reshape(out, out.shape[1:]) if single else out


def multi_head_attention(X, p: AttentionParams, return_weights: bool = False):
    """Unmasked scaled dot-product attention over all heads, concatenated and projected.

    Returns the (.., T, d_model) output, and the (.., h, T, T) attention
    weights when ``return_weights`` is set.
    """
    xb, single = _batched(X)
    B, T, d = xb.shape
    h, dk = p.heads, p.d_k
    xh = nc.reshape(xb, (B, 1, T, d))
    q = nc.matmul(xh, p.w_q)  # (B, h, T, dk)
    k = nc.matmul(xh, p.w_k)
    v = nc.matmul(xh, p.w_v)
    scores = nc.matmul(q, nc.transpose(k)) * (1.0 / np.sqrt(dk))
    weights = nc.softmax(scores, axis=-1)
    heads = nc.matmul(weights, v)
    merged = nc.reshape(nc.transpose(heads, (0, 2, 1, 3)), (B, T, h * dk))
    out = nc.matmul(merged, p.w_o)
    if single:
        out = nc.reshape(out, (T, d))
        weights = nc.reshape(weights, (h, T, T))
    return (out, weights) if return_weights else out


def position_wise_ffn(X, p: FFNParams) -> Tensor:
    """Same two-layer ReLU network applied independently at every step."""
    return nc.matmul(nc.relu(nc.matmul(X, p.w1) + p.b1), p.w2) + p.b2


def encoder_block(X, p: EncoderParams, mode: str = "eval", rng=None) -> Tensor:
    """Post-norm encoder: sublayer, dropout, residual add, layer norm (twice)."""
    a = nc.dropout(multi_head_attention(X, p.attention), p.dropout, mode, rng)
    y = nc.layer_norm(X + a, p.ln1_gain, p.ln1_bias)
    f = nc.dropout(position_wise_ffn(y, p.ffn), p.dropout, mode, rng)
    return nc.layer_norm(y + f, p.ln2_gain, p.ln2_bias)


def _finite(t: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite activations in {layer}")
    return t


def intformer_forward(window, params: InTformerParams, mode: str = "eval", rng=None) -> Tensor:
    """Time embedding, encoder stack, mean-pool over time, logistic head."""
    xb, single = _batched(window)
    z = _finite(embed_sequence(xb, params.time, params.proj), "time embedding")
    for i, enc in enumerate(params.encoders):
        z = _finite(encoder_block(z, enc, mode, rng), f"encoder {i}")
    pooled = nc.mean(z, axis=1)
    logit = _finite(_linear(pooled, params.head), "output head")
    return _unbatch(nc.sigmoid(nc.reshape(logit, (-1,))), single)


def lstm_states(xb: Tensor, p: LSTMParams) -> Tensor:
    """Run the peephole recurrence over (B, T, F) and return the final hidden state (B, H)."""
    B, T, _ = xb.shape
    h = Tensor(np.zeros((B, p.hidden)))
    c = Tensor(np.zeros((B, p.hidden)))
    for t in range(T):
        x = nc.take(xb, (slice(None), t))
        i = nc.sigmoid(nc.matmul(x, p.w_ix) + nc.matmul(h, p.w_ih) + nc.matmul(c, p.w_ic) + p.b_i)
        f = nc.sigmoid(nc.matmul(x, p.w_fx) + nc.matmul(h, p.w_fh) + nc.matmul(c, p.w_fc) + p.b_f)
        o = nc.sigmoid(nc.matmul(x, p.w_ox) + nc.matmul(h, p.w_oh) + nc.matmul(c, p.w_oc) + p.b_o)
        c = f * c + i * nc.tanh(nc.matmul(x, p.w_cx) + nc.matmul(h, p.w_ch) + p.b_c)
        h = o * nc.tanh(c)
    return h


def lstm_forward(window, p: LSTMParams) -> Tensor:
    """Peephole LSTM; the head reads the hidden state left after the last input."""
    xb, single = _batched(window)
    h = lstm_states(xb, p)
    logit = nc.matmul(h, p.w_yh) + p.b_y
    return _unbatch(nc.sigmoid(nc.reshape(logit, (-1,))), single)


def conv1d(xb: Tensor, p: ConvParams) -> Tensor:
    """Valid 1-D convolution over time: (B, T, F) -> (B, T - K + 1, C)."""
    T = xb.shape[1]
    K = p.kernel
    if K > T:
        raise ConfigurationError(f"kernel size {K} exceeds window length {T}")
    if p.w.shape[1] != xb.shape[2]:
        raise DimensionError(f"convolution expects {p.w.shape[1]} features, got {xb.shape[2]}")
    out = None
    for j in range(K):
        part = nc.matmul(nc.take(xb, (slice(None), slice(j, j + T - K + 1))), nc.take(p.w, j))
        out = part if out is None else out + part
    return out + p.b


def cnn1d_forward(window, p: CNNParams) -> Tensor:
    """Convolution over time, ReLU, global max-pool, logistic head."""
    xb, single = _batched(window)
    pooled = nc.max(nc.relu(conv1d(xb, p.conv)), axis=1)
    logit = _linear(pooled, p.head)
    return _unbatch(nc.sigmoid(nc.reshape(logit, (-1,))), single)


def hybrid_forward(window, p: HybridParams, topology: str) -> Tensor:
    """LSTM-CNN hybrids.

    ``sequential``: the ReLU feature maps of the convolution are the LSTM's
    input sequence.  ``parallel``: the LSTM's final state and the pooled
    convolution features are concatenated before the head.
    """
    xb, single = _batched(window)
    maps = nc.relu(conv1d(xb, p.conv))
    if topology == "sequential":
        features = lstm_states(maps, p.lstm)
    elif topology == "parallel":
        features = nc.concat([lstm_states(xb, p.lstm), nc.max(maps, axis=1)], axis=-1)
    else:
        raise ConfigurationError(f"unknown hybrid topology {topology!r}")
    logit = _linear(features, p.head)
    return _unbatch(nc.sigmoid(nc.reshape(logit, (-1,))), single)


# ---------------------------------------------------------------- configs and init


@dataclass(frozen=True)
class InTformerConfig:
    steps: int
    n_features: int
    k: int = 8
    d_model: int = 64
    heads: int = 4
    encoders: int = 1
    d_ff: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide d_model={self.d_model}")
        if self.encoders < 1:
            raise ConfigurationError("need at least one encoder")
        if self.k < 0 or self.d_ff < 1 or not 0 <= self.dropout < 1:
            raise ConfigurationError(f"invalid inTformer config {self}")


@dataclass(frozen=True)
class RecurrentConfig:
    """Shared by the LSTM, CNN and hybrid families."""

    steps: int
    n_features: int
    hidden: int = 32
    channels: int = 32
    kernel: int = 2

    def __post_init__(self):
        if min(self.hidden, self.channels, self.kernel) < 1:
            raise ConfigurationError(f"invalid baseline config {self}")


def _glorot(rng, shape, fan_in, fan_out) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape))


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def _linear_init(rng, n_in, n_out) -> LinearParams:
    return LinearParams(_glorot(rng, (n_in, n_out), n_in, n_out), _zeros(n_out))


def init_intformer(cfg: InTformerConfig, rng) -> InTformerParams:
    d, h = cfg.d_model, cfg.heads
    dk = d // h
    time = Time2VecParams(_glorot(rng, (cfg.k + 1,), 1, cfg.k + 1), _zeros(cfg.k + 1))
    encoders = []
    for _ in range(cfg.encoders):
        att = AttentionParams(
            _glorot(rng, (h, d, dk), d, dk),
            _glorot(rng, (h, d, dk), d, dk),
            _glorot(rng, (h, d, dk), d, dk),
            _glorot(rng, (h * dk, d), h * dk, d),
        )
        ffn = FFNParams(
            _glorot(rng, (d, cfg.d_ff), d, cfg.d_ff), _zeros(cfg.d_ff), _glorot(rng, (cfg.d_ff, d), cfg.d_ff, d), _zeros(d)
        )
        encoders.append(
            EncoderParams(att, ffn, Tensor(np.ones(d)), _zeros(d), Tensor(np.ones(d)), _zeros(d), cfg.dropout)
        )
    return InTformerParams(time, _linear_init(rng, cfg.n_features + cfg.k + 1, d), encoders, _linear_init(rng, d, 1))


def init_lstm(rng, n_in: int, hidden: int, with_head: bool = True) -> LSTMParams:
    def wx():
        return _glorot(rng, (n_in, hidden), n_in, hidden)

    def wh():
        return _glorot(rng, (hidden, hidden), hidden, hidden)

    p = LSTMParams(
        wx(), wh(), wh(), _zeros(hidden),
        wx(), wh(), wh(), _zeros(hidden),
        wx(), wh(), wh(), _zeros(hidden),
        wx(), wh(), _zeros(hidden),
    )
    if with_head:
        p.w_yh = _glorot(rng, (hidden, 1), hidden, 1)
        p.b_y = _zeros(1)
    return p


def init_conv(rng, kernel: int, n_in: int, channels: int) -> ConvParams:
    return ConvParams(_glorot(rng, (kernel, n_in, channels), kernel * n_in, kernel * channels), _zeros(channels))


# ---------------------------------------------------------------- model objects


@dataclass
class Model:
    """A model family bound to its config and parameters."""

    family: str
    config: object
    params: object
    loss_history: list = field(default_factory=list)

    def parameters(self) -> dict[str, Tensor]:
        return named_tensors(self.params)

    def forward(self, X, mode: str = "eval", rng=None) -> Tensor:
        if self.family == "intformer":
            return intformer_forward(X, self.params, mode, rng)
        if self.family == "lstm":
            return lstm_forward(X, self.params)
        if self.family == "cnn":
            return cnn1d_forward(X, self.params)
        return hybrid_forward(X, self.params, self.family.rsplit("_", 1)[1])

    def predict_proba(self, X: np.ndarray, batch_size: int = 2048) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = [self.forward(Tensor(X[i : i + batch_size])).data for i in range(0, len(X), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def to_json(self, extra: Optional[dict] = None) -> str:
        doc = {
            "family": self.family,
            "config": dataclasses.asdict(self.config),
            "params": {n: {"shape": list(t.shape), "values": t.data.ravel().tolist()} for n, t in self.parameters().items()},
            "loss_history": [float(v) for v in self.loss_history],
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Model":
        doc = json.loads(text)
        model = build_model(doc["family"], doc["config"], seed=0)
        params = model.parameters()
        if set(params) != set(doc["params"]):
            raise ConfigurationError("checkpoint parameters do not match the model layout")
        for name, entry in doc["params"].items():
            values = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            if values.shape != params[name].shape:
                raise DimensionError(f"checkpoint tensor {name} has shape {values.shape}, expected {params[name].shape}")
            params[name].data = values
        model.loss_history = list(doc.get("loss_history", []))
        return model


def build_model(family: str, config, seed: int = 0) -> Model:
    """Construct a freshly initialized model; ``config`` may be a dict or config object."""
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown model family {family!r}; expected one of {FAMILIES}")
    rng = np.random.default_rng(seed)
    if family == "intformer":
        cfg = config if isinstance(config, InTformerConfig) else InTformerConfig(**config)
        return Model(family, cfg, init_intformer(cfg, rng))
    cfg = config if isinstance(config, RecurrentConfig) else RecurrentConfig(**config)
    if family == "lstm":
        return Model(family, cfg, init_lstm(rng, cfg.n_features, cfg.hidden))
    if cfg.kernel > cfg.steps:
        raise ConfigurationError(f"kernel size {cfg.kernel} exceeds window length {cfg.steps}")
    conv = init_conv(rng, cfg.kernel, cfg.n_features, cfg.channels)
    if family == "cnn":
        return Model(family, cfg, CNNParams(conv, _linear_init(rng, cfg.channels, 1)))
    if family == "lstm_cnn_sequential":
        lstm = init_lstm(rng, cfg.channels, cfg.hidden, with_head=False)
        return Model(family, cfg, HybridParams(conv, lstm, _linear_init(rng, cfg.hidden, 1)))
    lstm = init_lstm(rng, cfg.n_features, cfg.hidden, with_head=False)
    return Model(family, cfg, HybridParams(conv, lstm, _linear_init(rng, cfg.hidden + cfg.channels, 1)))
