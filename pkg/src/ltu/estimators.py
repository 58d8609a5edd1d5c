"""scikit-learn style wrappers around the two training phases.

``QuantileBinner`` turns continuous metrics into reward labels,
``DecisionPretrainer`` runs continued pre-training on trajectories (and plain
text), and ``RewardClassifier`` fine-tunes on the final reward, either from a
fresh model or from a pretrainer. They follow the estimator protocol
(``get_params``/``set_params``, ``fit`` returning ``self``, fitted attributes
with a trailing underscore), so ``clone`` and ``cross_val_score`` work.

>>> ct = DecisionPretrainer(vocab=vocab, steps=300).fit(ct_trajectories)
>>> clf = RewardClassifier(task="ppc_ctr", vocab=vocab, init=ct).fit(train)
>>> clf.score(test)
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .corpus import Trajectory, Vocab, discretize_many, encode_ct, encode_sft, encode_text, fit_bins
from .evaluate import check_disjoint, predict_rewards, reward_proba
from .model import ModelConfig, ModelParams, init_model
from .trainer import CT, SFT, TrainConfig, ct_batch, ct_loss, load_checkpoint, pack_documents, run_phase


# ---------------------------------------------------------------------------
# input validation
# ---------------------------------------------------------------------------

def check_values(X):
    """1-D float array from a vector or single-column matrix."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 1:
        raise ValueError(f"expected a 1-D array or a single column, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError("input contains NaN or infinity")
    return arr


def check_trajectories(X, y=None, allow_text=False):
    """Validate a sequence of trajectories (objects or their JSON dicts).

    With ``y`` given, its entries replace the final reward labels. Returns the
    list (and the label array when ``y`` is given).
    """
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise TypeError("X must be a sequence of trajectories")
    out = []
    for item in X:
        if isinstance(item, Trajectory):
            out.append(item)
        elif isinstance(item, dict):
            out.append(Trajectory.from_json(item))
        elif allow_text and isinstance(item, str):
            out.append(item)
        else:
            raise TypeError(f"unsupported sample type {type(item).__name__}")
    if not out:
        raise ValueError("X is empty")
    if y is None:
        return out
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size != len(out):
        raise ValueError(f"X has {len(out)} samples but y has {y.size}")
    relabelled = []
    for t, label in zip(out, y):
        steps = list(t.steps)
        last = steps[-1]
        steps[-1] = type(last)(last.state, last.action, int(label))
        relabelled.append(Trajectory(t.domain_id, t.category_id, steps, t.task))
    return relabelled, y


def _check_vocab(vocab):
    if not isinstance(vocab, Vocab):
        raise TypeError("vocab must be a ltu.corpus.Vocab")
    return vocab


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def _init_label(init):
    # only recorded, the starting weights come from _start_params
    return init if isinstance(init, str) else f"<{type(init).__name__}>"


class QuantileBinner(BaseEstimator, TransformerMixin):
    """Quantile discretiser for one continuous reward metric."""

    def __init__(self, n_bins=3, task=""):
        self.n_bins = n_bins
        self.task = task

    def fit(self, X, y=None):
        values = check_values(X)
        self.spec_ = fit_bins(values, self.n_bins, task=self.task)
        self.edges_ = np.asarray(self.spec_.edges)
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        labels = discretize_many(check_values(X), self.spec_)
        return labels.reshape(-1, 1) if np.ndim(X) == 2 else labels


class _LMEstimator(BaseEstimator):
    def __init__(self, vocab=None, d_model=64, n_heads=4, n_layers=2, max_seq_len=128,
                 init_scale=0.02, steps=200, batch_size=16, lr=1e-3, grad_clip=1.0,
                 warmup_frac=0.05, seed=0, init=None):
        self.vocab = vocab
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.max_seq_len = max_seq_len
        self.init_scale = init_scale
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.grad_clip = grad_clip
        self.warmup_frac = warmup_frac
        self.seed = seed
        self.init = init

    def _model_config(self):
        return ModelConfig(vocab_size=len(self.vocab), d_model=self.d_model, n_heads=self.n_heads,
                           n_layers=self.n_layers, max_seq_len=self.max_seq_len,
                           init_seed=self.seed, init_scale=self.init_scale)

    def _start_params(self):
        init = self.init
        if init is None:
            return init_model(self._model_config())
        if isinstance(init, _LMEstimator):
            check_is_fitted(init, "params_")
            init = init.params_
        if isinstance(init, ModelParams):
            if init.cfg.vocab_size != len(self.vocab):
                raise ValueError("init model and vocab disagree on vocabulary size")
            return init.copy()
        params, _ = load_checkpoint(str(init), vocab_size=len(self.vocab))
        return params

    def _train_config(self, phase):
        return TrainConfig(phase=phase, steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                           grad_clip=self.grad_clip, warmup_frac=self.warmup_frac, seed=self.seed,
                           fresh_init=phase == SFT and self.init is None,
                           init_checkpoint=None if self.init is None else _init_label(self.init))


class DecisionPretrainer(_LMEstimator):
    """Continued pre-training with next-token loss over whole documents.

    ``fit`` accepts trajectories and/or plain strings (common-knowledge
    documents) in one list.
    """

    def _encode(self, X):
        docs = check_trajectories(X, allow_text=True)
        L = self.max_seq_len if self.init is None else None
        return [encode_text(d, self.vocab, L) if isinstance(d, str) else encode_ct(d, self.vocab, L)
                for d in docs]

    def fit(self, X, y=None):
        _check_vocab(self.vocab)
        params = self._start_params()
        res = run_phase(params, self._encode(X), self._train_config(CT), pad_id=self.vocab.pad_id,
                        vocab_size=len(self.vocab))
        self.params_ = params
        self.loss_curve_ = list(res.losses)
        return self

    def score(self, X, y=None):
        """Negative mean next-token loss (higher is better)."""
        check_is_fitted(self, "params_")
        rows = pack_documents(self._encode(X), self.params_.cfg.max_seq_len + 1, self.vocab.pad_id)
        with nx.no_grad():
            return -ct_loss(self.params_, *ct_batch(rows, self.vocab.pad_id)).item()


class RewardClassifier(ClassifierMixin, _LMEstimator):
    """Predict the final reward label of a trajectory for one task.

    ``init`` may be ``None`` (fresh model), a fitted :class:`DecisionPretrainer`,
    a ``ModelParams`` or a checkpoint path.
    """

    def __init__(self, task="", vocab=None, d_model=64, n_heads=4, n_layers=2, max_seq_len=128,
                 init_scale=0.02, steps=200, batch_size=16, lr=1e-3, grad_clip=1.0,
                 warmup_frac=0.05, seed=0, init=None):
        super().__init__(vocab=vocab, d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                         max_seq_len=max_seq_len, init_scale=init_scale, steps=steps,
                         batch_size=batch_size, lr=lr, grad_clip=grad_clip,
                         warmup_frac=warmup_frac, seed=seed, init=init)
        self.task = task

    def _inputs(self, X):
        trajs = [t if t.task else Trajectory(t.domain_id, t.category_id, t.steps, self.task)
                 for t in check_trajectories(X)]
        return [encode_sft(t, self.vocab, self.params_.cfg.max_seq_len)[0] for t in trajs]

    def fit(self, X, y=None):
        _check_vocab(self.vocab)
        if y is None:
            trajs = check_trajectories(X)
        else:
            trajs, _ = check_trajectories(X, y)
        trajs = [t if t.task else Trajectory(t.domain_id, t.category_id, t.steps, self.task) for t in trajs]
        k = self.vocab.n_bins(self.task)
        params = self._start_params()
        samples = [encode_sft(t, self.vocab, params.cfg.max_seq_len) for t in trajs]
        res = run_phase(params, samples, self._train_config(SFT), pad_id=self.vocab.pad_id,
                        vocab_size=len(self.vocab))
        self.params_ = params
        self.classes_ = np.arange(k)
        self.loss_curve_ = list(res.losses)
        self.train_hashes_ = {t.content_hash() for t in trajs}
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return predict_rewards(self.params_, self._inputs(X), self.task, self.vocab)

    def predict_proba(self, X):
        """Softmax over the task's reward tokens only."""
        check_is_fitted(self, "params_")
        return reward_proba(self.params_, self._inputs(X), self.task, self.vocab)

    def score(self, X, y=None, sample_weight=None):
        """Accuracy on held-out trajectories; refuses data seen during ``fit``."""
        check_is_fitted(self, "params_")
        trajs = check_trajectories(X)
        check_disjoint(trajs, self.train_hashes_)
        if y is None:
            y = np.array([t.final_reward for t in trajs])
        return super().score(trajs, y, sample_weight=sample_weight)
