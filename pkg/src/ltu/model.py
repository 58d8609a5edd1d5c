"""Small decoder-only causal transformer.

Pre-norm blocks, GELU MLP (expansion 4), learned positional embeddings and an
output projection tied to the token embedding. With ``V`` = vocab size, ``d`` =
d_model, ``L`` = n_layers and ``T`` = max_seq_len the parameter count is::

    V*d + T*d + L*(12*d**2 + 13*d) + 2*d

(token table, position table, per layer: two layer norms 4d, q/k/v/out
projections 4d^2 + 4d, MLP 8d^2 + 5d; final layer norm 2d).
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx

MAGIC = b"LTU1"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    max_seq_len: int = 256
    init_seed: int = 0
    init_scale: float = 0.02

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if int(self.init_seed) < 0:
            raise ConfigError("init_seed must be non-negative")
        if not self.init_scale > 0:
            raise ConfigError("init_scale must be positive")

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg):
    v, d, L, t = cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.max_seq_len
    return v * d + t * d + L * (12 * d * d + 13 * d) + 2 * d


def param_shapes(cfg):
    """Parameter names and shapes in declaration (serialization) order."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes = OrderedDict()
    shapes["tok_emb"] = (v, d)
    shapes["pos_emb"] = (cfg.max_seq_len, d)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for proj in ("q", "k", "v", "o"):
            shapes[p + f"w{proj}"] = (d, d)
            shapes[p + f"b{proj}"] = (d,)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "w1"] = (d, 4 * d)
        shapes[p + "b1"] = (4 * d,)
        shapes[p + "w2"] = (4 * d, d)
        shapes[p + "b2"] = (d,)
    shapes["lnf.g"] = (d,)
    shapes["lnf.b"] = (d,)
    return shapes


class ModelParams:
    """Ordered mapping of parameter name to trainable :class:`Tensor`."""

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    @property
    def count(self):
        return int(sum(t.data.size for t in self.tensors.values()))

    def flat(self):
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def copy(self):
        return ModelParams(self.cfg, ((k, nx.tensor(t.data.copy(), requires_grad=True))
                                      for k, t in self.tensors.items()))

    def zero_grad(self):
        nx.zero_grad(self)

    def grads(self):
        return [t.grad for t in self.tensors.values()]


def _is_gain(name):
    return name.endswith(".g")


def _is_bias(name):
    return name.endswith(".b") or name.split(".")[-1] in ("bq", "bk", "bv", "bo", "b1", "b2")


def init_model(cfg):
    """Normal(0, init_scale^2) weights, zero biases, unit layer-norm gains."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(int(cfg.init_seed))
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if _is_gain(name):
            data = np.ones(shape)
        elif _is_bias(name):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_scale, size=shape)
        tensors[name] = nx.tensor(data, requires_grad=True)
    return ModelParams(cfg, tensors)


def _check_tokens(cfg, tokens):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
        raise ValueError(f"tokens must be a non-empty 1-D or 2-D id array, got shape {tokens.shape}")
    if tokens.shape[-1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len={cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise IndexError(f"token id out of range [0, {cfg.vocab_size})")
    return tokens


def hidden_states(params, tokens):
    """Final-layer-normed hidden states, shape ``(B, T, d)``."""
    cfg = params.cfg
    tokens = _check_tokens(cfg, tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, T = tokens.shape
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    x = nx.embedding(params["tok_emb"], tokens) + nx.index(params["pos_emb"], slice(0, T))
    scale = 1.0 / np.sqrt(dh)
    for i in range(cfg.n_layers):
        p = f"h{i}."
        h = nx.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        heads = []
        for proj in ("q", "k", "v"):
            y = h @ params[p + f"w{proj}"] + params[p + f"b{proj}"]
            heads.append(nx.transpose(nx.reshape(y, (B, T, H, dh)), (0, 2, 1, 3)))
        q, k, v = heads
        att = nx.causal_softmax(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))) * scale)
        y = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
        x = x + (y @ params[p + "wo"] + params[p + "bo"])
        h = nx.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        h = nx.gelu(h @ params[p + "w1"] + params[p + "b1"])
        x = x + (h @ params[p + "w2"] + params[p + "b2"])
    return nx.layer_norm(x, params["lnf.g"], params["lnf.b"])


def project(params, h):
    """Tied output projection: hidden ``(..., d)`` to logits ``(..., V)``."""
    return nx.matmul(h, nx.transpose(params["tok_emb"]))


def forward(params, tokens):
    """Next-token logits. ``(T,)`` ids give ``(T, V)``; ``(B, T)`` give ``(B, T, V)``."""
    squeeze = np.ndim(tokens) == 1
    logits = project(params, hidden_states(params, tokens))
    if squeeze:
        logits = nx.reshape(logits, logits.shape[1:])
    return logits


def logits_at(params, tokens, positions):
    """Logits only at ``positions[b]`` of each row: shape ``(B, V)``.

    Cheaper than :func:`forward` when a single position per sequence is scored.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    h = hidden_states(params, tokens)
    rows = np.arange(tokens.shape[0])
    picked = nx.index(h, (rows, np.asarray(positions, dtype=np.int64)))
    return project(params, picked)


# ---------------------------------------------------------------------------
# binary checkpoint: "LTU1" | u32 len | config JSON | float64 LE tensors
# ---------------------------------------------------------------------------

def write_params(params, path):
    header = json.dumps(params.cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for t in params:
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_params(path, vocab_size=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", blob[4:8])
    try:
        cfg = ModelConfig.from_dict(json.loads(blob[8:8 + n].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config header: {exc}") from exc
    body = blob[8 + n:]
    expected = param_count(cfg)
    if len(body) != 8 * expected:
        raise CheckpointError(
            f"{path}: payload holds {len(body) // 8} values, config implies {expected}")
    if vocab_size is not None and cfg.vocab_size != vocab_size:
        raise CheckpointError(
            f"{path}: checkpoint vocab_size={cfg.vocab_size} but {vocab_size} was expected")
    values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    tensors = OrderedDict()
    offset = 0
    for name, shape in param_shapes(cfg).items():
        size = int(np.prod(shape))
        tensors[name] = nx.tensor(values[offset:offset + size].reshape(shape).copy(), requires_grad=True)
        offset += size
    if not np.all(np.isfinite(values)):
        raise CheckpointError(f"{path}: non-finite parameter values")
    return ModelParams(cfg, tensors)
