"""Decision records to token sequences.

A document for continued pre-training (CT) is laid out as::

    <BOS> { <S> state words <A> action words <R> reward-token } x n <EOS>

and a fine-tuning (SFT) sample keeps everything up to and including the final
``<R>`` marker as input, with the final reward token as the only target.
Rewards are single dedicated tokens ``<task:label>``.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

PAD, UNK, BOS, EOS, S, A, R = "<PAD>", "<UNK>", "<BOS>", "<EOS>", "<S>", "<A>", "<R>"
RESERVED = (PAD, UNK, BOS, EOS, S, A, R)
_REWARD_RE = re.compile(r"^<([A-Za-z0-9_\-]+):(\d+)>$")


class OverlongError(ValueError):
    def __init__(self, length, limit):
        super().__init__(f"encoded length {length} exceeds max_seq_len={limit}")
        self.length = length
        self.limit = limit


class DegenerateBinsError(ValueError):
    pass


class VocabError(ValueError):
    pass


@dataclass(frozen=True)
class Step:
    state: str
    action: str
    reward: int


@dataclass
class Trajectory:
    domain_id: str
    category_id: str
    steps: list
    task: str = ""

    def __post_init__(self):
        if not self.steps:
            raise ValueError("a trajectory needs at least one step")
        self.steps = [s if isinstance(s, Step) else Step(str(s[0]), str(s[1]), int(s[2]))
                      for s in self.steps]
        for s in self.steps:
            if not s.state.split() or not s.action.split():
                raise ValueError("state and action text must be non-empty")
            if s.reward < 0:
                raise ValueError(f"negative reward label {s.reward}")

    @property
    def final_reward(self):
        return self.steps[-1].reward

    def content_hash(self):
        """Hash of the (state, action) content; rewards and task excluded."""
        key = json.dumps([self.domain_id, self.category_id,
                          [[s.state, s.action] for s in self.steps]], separators=(",", ":"))
        return hashlib.sha256(key.encode("utf-8")).hexdigest()

    def to_json(self):
        return {"domain": self.domain_id, "category": self.category_id, "task": self.task,
                "steps": [[s.state, s.action, s.reward] for s in self.steps]}

    @classmethod
    def from_json(cls, d):
        return cls(domain_id=d["domain"], category_id=d["category"], task=d.get("task", ""),
                   steps=d["steps"])


def write_trajectories(path, trajectories):
    with open(path, "w", encoding="utf-8") as fh:
        for t in trajectories:
            fh.write(json.dumps(t.to_json(), separators=(",", ":")) + "\n")


def read_trajectories(path):
    with open(path, encoding="utf-8") as fh:
        return [Trajectory.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

def reward_token(task, label):
    return f"<{task}:{label}>"


class Vocab:
    """Closed word-level vocabulary with reserved markers and reward tokens.

    Ids 0..6 are the reserved markers, then each task's reward tokens in label
    order (contiguous), then ordinary words.
    """

    def __init__(self, tokens):
        self.itos = list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise VocabError("duplicate tokens in vocabulary")
        if tuple(self.itos[:len(RESERVED)]) != RESERVED:
            raise VocabError(f"vocabulary must start with {RESERVED}")
        self.reward_sets = {}
        for i, tok in enumerate(self.itos):
            m = _REWARD_RE.match(tok)
            if m:
                self.reward_sets.setdefault(m.group(1), {})[int(m.group(2))] = i
        for task, ids in self.reward_sets.items():
            labels = sorted(ids)
            if labels != list(range(len(labels))):
                raise VocabError(f"reward labels for {task!r} are not 0..K-1")
            span = [ids[k] for k in labels]
            if span != list(range(span[0], span[0] + len(span))):
                raise VocabError(f"reward tokens for {task!r} are not contiguous")
        self.pad_id, self.unk_id, self.bos_id, self.eos_id = (self.stoi[t] for t in (PAD, UNK, BOS, EOS))
        self.s_id, self.a_id, self.r_id = self.stoi[S], self.stoi[A], self.stoi[R]
        self._reward_lookup = {i: (task, k) for task, ids in self.reward_sets.items() for k, i in ids.items()}

    @classmethod
    def build(cls, words, tasks):
        """``tasks`` maps task name to bin count K."""
        tokens = list(RESERVED)
        for task, k in tasks.items():
            tokens.extend(reward_token(task, j) for j in range(int(k)))
        seen = set(tokens)
        for w in words:
            if w in RESERVED or _REWARD_RE.match(w) or not w or any(c.isspace() for c in w):
                raise VocabError(f"invalid word {w!r}")
            if w in seen:
                continue
            seen.add(w)
            tokens.append(w)
        return cls(tokens)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    @property
    def tasks(self):
        return {t: len(ids) for t, ids in self.reward_sets.items()}

    def n_bins(self, task):
        if task not in self.reward_sets:
            raise KeyError(f"unknown task {task!r}")
        return len(self.reward_sets[task])

    def reward_ids(self, task):
        """Reward-token ids of ``task`` ordered by label."""
        if task not in self.reward_sets:
            raise KeyError(f"unknown task {task!r}")
        ids = self.reward_sets[task]
        return np.array([ids[k] for k in range(len(ids))], dtype=np.int64)

    def reward_id(self, task, label):
        ids = self.reward_ids(task)
        if not 0 <= label < len(ids):
            raise ValueError(f"label {label} outside [0, {len(ids) - 1}] for task {task!r}")
        return int(ids[label])

    def reward_of(self, token_id):
        """``(task, label)`` for a reward-token id, else None."""
        return self._reward_lookup.get(int(token_id))

    def encode_words(self, text):
        ids = [self.stoi.get(w, self.unk_id) for w in text.split()]
        for i in ids:
            if i < len(RESERVED) and i != self.unk_id or i in self._reward_lookup:
                raise VocabError(f"text {text!r} contains a reserved or reward token")
        return ids

    def decode(self, ids):
        return [self.itos[int(i)] for i in ids]

    def fingerprint(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


# ---------------------------------------------------------------------------
# reward discretisation
# ---------------------------------------------------------------------------

@dataclass
class BinningSpec:
    task: str
    n_bins: int
    edges: list
    provenance: str = ""

    def __post_init__(self):
        self.edges = [float(e) for e in self.edges]
        if len(self.edges) != self.n_bins - 1:
            raise DegenerateBinsError(f"{self.n_bins} bins need {self.n_bins - 1} edges, got {len(self.edges)}")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise DegenerateBinsError(f"bin edges not strictly increasing: {self.edges}")

    def to_json(self):
        return {"task": self.task, "n_bins": self.n_bins, "edges": self.edges, "provenance": self.provenance}

    @classmethod
    def from_json(cls, d):
        return cls(task=d["task"], n_bins=int(d["n_bins"]), edges=d["edges"], provenance=d.get("provenance", ""))

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def fit_bins(values, n_bins, task="", provenance=""):
    """Edges at the empirical j/K quantiles (linear interpolation)."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if n_bins < 2:
        raise ValueError("need at least 2 bins")
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    if np.unique(values).size < n_bins:
        raise DegenerateBinsError(
            f"{np.unique(values).size} distinct values cannot support {n_bins} bins")
    edges = np.quantile(values, np.arange(1, n_bins) / n_bins)
    if np.any(np.diff(edges) <= 0):
        raise DegenerateBinsError(f"ties collapse quantile edges: {edges.tolist()}")
    return BinningSpec(task=task, n_bins=int(n_bins), edges=edges.tolist(),
                       provenance=provenance or f"quantiles of {values.size} values")


def discretize(value, spec):
    """Bin index; a value exactly on an edge falls in the upper bin."""
    return int(np.searchsorted(spec.edges, value, side="right"))


def discretize_many(values, spec):
    return np.searchsorted(spec.edges, np.asarray(values, dtype=np.float64), side="right")


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def encode_ct(traj, vocab, max_seq_len=None):
    ids = [vocab.bos_id]
    for step in traj.steps:
        ids.append(vocab.s_id)
        ids.extend(vocab.encode_words(step.state))
        ids.append(vocab.a_id)
        ids.extend(vocab.encode_words(step.action))
        ids.append(vocab.r_id)
        ids.append(vocab.reward_id(traj.task, step.reward))
    ids.append(vocab.eos_id)
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise OverlongError(len(ids), max_seq_len)
    return np.array(ids, dtype=np.int64)


def encode_sft(traj, vocab, max_seq_len=None):
    """(inputs, targets, mask): inputs end at the final ``<R>``; one active target."""
    ct = encode_ct(traj, vocab)
    last_r = int(np.flatnonzero(ct == vocab.r_id)[-1])
    inputs = ct[:last_r + 1]
    if max_seq_len is not None and len(inputs) > max_seq_len:
        raise OverlongError(len(inputs), max_seq_len)
    targets = ct[1:last_r + 2]
    mask = np.zeros(len(inputs), dtype=np.float64)
    mask[-1] = 1.0
    return inputs, targets, mask


def encode_text(text, vocab, max_seq_len=None):
    """Plain document without decision markers: ``<BOS> words <EOS>``."""
    ids = [vocab.bos_id, *vocab.encode_words(text), vocab.eos_id]
    if max_seq_len is not None and len(ids) > max_seq_len:
        raise OverlongError(len(ids), max_seq_len)
    return np.array(ids, dtype=np.int64)


_GRAMMAR = re.compile(r"B(?:S[w]+A[w]+Rr)+E")


def marker_pattern(ids, vocab):
    """Collapse ids to a string over {B,E,S,A,R,r,w} for grammar checks."""
    names = {vocab.bos_id: "B", vocab.eos_id: "E", vocab.s_id: "S", vocab.a_id: "A", vocab.r_id: "R"}
    out = []
    for i in ids:
        i = int(i)
        out.append(names.get(i) or ("r" if vocab.reward_of(i) else "w"))
    return "".join(out)


def is_well_formed(ids, vocab):
    return _GRAMMAR.fullmatch(marker_pattern(ids, vocab)) is not None


def decode_ct(ids, vocab, domain_id="", category_id=""):
    """Inverse of :func:`encode_ct` (unknown words come back as ``<UNK>``)."""
    if not is_well_formed(ids, vocab):
        raise ValueError("id sequence does not match <BOS> (<S> .. <A> .. <R> r)+ <EOS>")
    toks = vocab.decode(ids)
    steps, task = [], ""
    i = 1
    while toks[i] == S:
        j = toks.index(A, i)
        k = toks.index(R, j)
        task, label = vocab.reward_of(ids[k + 1])
        steps.append(Step(" ".join(toks[i + 1:j]), " ".join(toks[j + 1:k]), label))
        i = k + 2
    return Trajectory(domain_id=domain_id, category_id=category_id, steps=steps, task=task)


def replace_unknown(traj, vocab):
    """The trajectory as it survives encoding: out-of-vocabulary words become ``<UNK>``."""
    def norm(text):
        return " ".join(w if w in vocab.stoi else UNK for w in text.split())
    return Trajectory(traj.domain_id, traj.category_id,
                      [Step(norm(s.state), norm(s.action), s.reward) for s in traj.steps], traj.task)


# ---------------------------------------------------------------------------
# corpus mixing
# ---------------------------------------------------------------------------

def mix_corpora(decision_docs, common_docs, decision_fraction, seed, n_docs=None):
    """Interleave two corpora; each slot is a decision doc with prob ``decision_fraction``.

    Each source is consumed as a seeded permutation, reshuffled when exhausted.
    The default stream length is the largest whose expected draw from each
    source fits in one pass over it.
    """
    f = float(decision_fraction)
    if not 0.0 < f <= 1.0:
        raise ValueError(f"decision_fraction must be in (0, 1], got {f}")
    decision_docs, common_docs = list(decision_docs), list(common_docs or [])
    if not decision_docs:
        raise ValueError("decision corpus is empty")
    if f < 1.0 and not common_docs:
        raise ValueError("common corpus is empty but decision_fraction < 1")
    if n_docs is None:
        n_docs = len(decision_docs) if f == 1.0 else int(min(len(decision_docs) / f,
                                                              len(common_docs) / (1.0 - f)))
    rng = np.random.default_rng(seed)
    pools = [decision_docs, common_docs]
    orders = [rng.permutation(len(p)) for p in pools]
    cursors = [0, 0]
    picks = rng.random(n_docs) < f
    out = []
    for use_decision in picks:
        src = 0 if use_decision else 1
        if cursors[src] == len(pools[src]):
            orders[src] = rng.permutation(len(pools[src]))
            cursors[src] = 0
        out.append(pools[src][orders[src][cursors[src]]])
        cursors[src] += 1
    return out


def data_fingerprint(docs):
    """Content hash of a sequence of id arrays (or SFT triples)."""
    h = hashlib.sha256()
    for doc in docs:
        parts = doc if isinstance(doc, tuple) else (doc,)
        for part in parts:
            h.update(np.ascontiguousarray(part, dtype=np.float64).tobytes())
            h.update(b"|")
        h.update(b"\n")
    return h.hexdigest()[:16]
