"""The two training phases: continued pre-training (CT) and fine-tuning (SFT).

CT minimises the token-mean next-token negative log-likelihood over packed
windows of whole documents. SFT minimises the same loss restricted to the
positions whose mask is 1, which for samples from :func:`encode_sft` is the
final reward token only.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import numerics as nx
from .corpus import data_fingerprint
from .model import ConfigError, forward, hidden_states, init_model, project, read_params, write_params

log = logging.getLogger(__name__)

CT, SFT = "CT", "SFT"


class TrainingError(RuntimeError):
    pass


class VocabMismatchError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = CT
    steps: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    warmup_frac: float = 0.05
    seed: int = 0
    eval_every: int = 0
    init_checkpoint: str | None = None
    fresh_init: bool = False
    pack_len: int | None = None

    def __post_init__(self):
        if self.phase not in (CT, SFT):
            raise ConfigError(f"phase must be CT or SFT, got {self.phase!r}")
        for name in ("steps", "batch_size"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.phase == SFT and not self.init_checkpoint and not self.fresh_init:
            raise ConfigError("SFT needs init_checkpoint or fresh_init=True")
        if self.init_checkpoint and self.fresh_init:
            raise ConfigError("init_checkpoint and fresh_init are mutually exclusive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PhaseResult:
    params: object
    losses: list
    provenance: dict = field(default_factory=dict)

    @property
    def final_loss(self):
        return self.losses[-1]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def pack_documents(docs, window, pad_id):
    """Greedily pack whole documents into rows of length ``window``.

    Documents are never split; a document longer than ``window`` is an error.
    Returns an int array (n_windows, window) padded with ``pad_id``.
    """
    rows, cur = [], []
    for doc in docs:
        n = len(doc)
        if n > window:
            raise ValueError(f"document of length {n} does not fit a window of {window}")
        if len(cur) + n > window:
            rows.append(cur)
            cur = []
        cur.extend(int(t) for t in doc)
    if cur:
        rows.append(cur)
    out = np.full((len(rows), window), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def ct_batch(windows, pad_id):
    """Inputs, targets and loss mask for next-token prediction on packed rows."""
    inputs = windows[:, :-1]
    targets = windows[:, 1:]
    mask = (targets != pad_id).astype(np.float64)
    return inputs, targets, mask


def sft_batch(samples, pad_id):
    """Right-pad a list of (inputs, targets, mask) triples into arrays."""
    T = max(len(s[0]) for s in samples)
    B = len(samples)
    inputs = np.full((B, T), pad_id, dtype=np.int64)
    targets = np.full((B, T), pad_id, dtype=np.int64)
    mask = np.zeros((B, T))
    for i, (x, y, m) in enumerate(samples):
        inputs[i, :len(x)] = x
        targets[i, :len(y)] = y
        mask[i, :len(m)] = m
    return inputs, targets, mask


def ct_loss(params, inputs, targets, mask):
    return nx.cross_entropy_masked(forward(params, inputs), targets, mask)


def sft_loss(params, inputs, targets, mask):
    """Masked loss evaluated only at active positions.

    Equal to ``cross_entropy_masked(forward(...), targets, mask)`` but projects
    to the vocabulary only where the mask is non-zero.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise nx.EmptyLossError("SFT batch has no active target")
    picked = nx.index(hidden_states(params, inputs), (rows, cols))
    logits = project(params, picked)
    return nx.cross_entropy_masked(logits, targets[rows, cols], mask[rows, cols])


def reference_clm_loss(params, docs_inputs, docs_targets, docs_masks):
    """Scalar per-position reference: mean of -log p over every active position.

    Runs each sequence separately and accumulates position by position in
    plain Python, independent of the batched loss path.
    """
    total, count = 0.0, 0
    with nx.no_grad():
        for x, y, m in zip(docs_inputs, docs_targets, docs_masks):
            logits = forward(params, np.asarray(x)).data
            for i in range(len(x)):
                if m[i]:
                    row = logits[i]
                    mx = max(row)
                    lse = mx + math.log(sum(math.exp(v - mx) for v in row))
                    total += lse - row[int(y[i])]
                    count += 1
    return total / count


# ---------------------------------------------------------------------------
# main loop
# ---------------------------------------------------------------------------

def _check_vocab(params, data, phase, vocab_size):
    V = params.cfg.vocab_size
    if vocab_size is not None and vocab_size != V:
        raise VocabMismatchError(f"vocabulary has {vocab_size} tokens but model expects {V}")
    hi = max(int(np.max(d[0] if phase == SFT else d)) for d in data)
    if hi >= V:
        raise VocabMismatchError(f"data contains token id {hi} >= model vocab_size {V}")


def lr_at(step, cfg):
    warm = max(1, int(math.ceil(cfg.warmup_frac * cfg.steps))) if cfg.warmup_frac > 0 else 0
    if warm and step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr


def run_phase(params, data, cfg, pad_id=0, vocab_size=None, on_step=None):
    """Train ``params`` in place for ``cfg.steps`` optimizer steps.

    ``data`` is a list of encoded CT documents (id arrays) or, for SFT, of
    ``(inputs, targets, mask)`` triples. Returns a :class:`PhaseResult` whose
    ``losses`` holds the per-step training loss.
    """
    data = list(data)
    if not data:
        raise TrainingError("empty data stream")
    _check_vocab(params, data, cfg.phase, vocab_size)
    rng = np.random.default_rng(cfg.seed)
    if cfg.phase == CT:
        window = min(cfg.pack_len or params.cfg.max_seq_len, params.cfg.max_seq_len) + 1
        rows = pack_documents(data, window, pad_id)
        pool, loss_fn = rows, ct_loss
    else:
        pool, loss_fn = data, sft_loss

    plist = list(params)
    opt = nx.adam_init(plist, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    order = rng.permutation(len(pool))
    cursor = 0
    losses = []
    t0 = time.perf_counter()
    tokens = 0
    for step in range(cfg.steps):
        idx = []
        while len(idx) < cfg.batch_size:
            if cursor == len(order):
                order = rng.permutation(len(pool))
                cursor = 0
            take = min(cfg.batch_size - len(idx), len(order) - cursor)
            idx.extend(order[cursor:cursor + take].tolist())
            cursor += take
        if cfg.phase == CT:
            batch = ct_batch(pool[idx], pad_id)
        else:
            batch = sft_batch([pool[i] for i in idx], pad_id)
        tokens += int(batch[2].size)
        params.zero_grad()
        loss = loss_fn(params, *batch)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        nx.backward(loss)
        grads, _ = nx.clip_grad_norm(params.grads(), cfg.grad_clip)
        nx.adam_step(plist, grads, opt, lr=lr_at(step, cfg))
        losses.append(value)
        if on_step is not None:
            on_step(step, value)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            rate = tokens / max(time.perf_counter() - t0, 1e-9)
            log.info("phase=%s step=%d loss=%.4f tokens/sec=%.0f", cfg.phase, step + 1, value, rate)
    params.zero_grad()
    return PhaseResult(params=params, losses=losses,
                       provenance={"phase": cfg.phase, "seed": cfg.seed, "steps": cfg.steps,
                                   "data_fingerprint": data_fingerprint(data),
                                   "final_loss": losses[-1]})


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def lineage_stage(phase, data_name, seed):
    return f"{phase}:{data_name}-seed{seed}"


def extend_lineage(parent, stage):
    return stage if not parent else f"{parent} → {stage}"


def sidecar_path(path):
    return str(path) + ".json"


def save_checkpoint(params, path, provenance=None):
    """Binary parameters at ``path`` plus a JSON provenance sidecar."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    write_params(params, path)
    record = {"phase": None, "lineage": "", "seed": None, "steps": None,
              "data_fingerprint": None, "final_loss": None}
    record.update(provenance or {})
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def load_checkpoint(path, vocab_size=None):
    """Returns ``(params, provenance)``; provenance is ``{}`` without a sidecar."""
    params = read_params(path, vocab_size=vocab_size)
    prov = {}
    if os.path.exists(sidecar_path(path)):
        with open(sidecar_path(path), encoding="utf-8") as fh:
            prov = json.load(fh)
    return params, prov


def initial_params(cfg, model_cfg, vocab_size=None):
    """Model to start a phase from, and the lineage it carries."""
    if cfg.init_checkpoint:
        params, prov = load_checkpoint(cfg.init_checkpoint, vocab_size=vocab_size)
        return params, prov.get("lineage", "")
    if model_cfg is None:
        raise ConfigError("fresh initialisation needs a ModelConfig")
    return init_model(model_cfg), ""
