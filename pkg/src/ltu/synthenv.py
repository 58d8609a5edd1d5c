"""Synthetic decision domains with a known conditional reward distribution.

States carry ``n_features`` attributes (``price_high``, ``brand_low`` ...) with
values in {-1, 0, 1}; actions carry ``n_action_features`` likewise. A task
scores a pair as

    score = offset[category] + w_s . x + w_a . y + sum_p w_c[p] * x[i_p] * y[j_p]

with small integer weights, so scores are integers, and draws the reward label
from an ordinal softmax::

    logit_k = (k * score - sum_{j<k} edge_j) / tau

whose argmax is exactly the number of edges below the score. Edges are
half-integers placed at score quantiles, so tau = 0 gives a deterministic,
margin-separated label and tau > 0 gives calibrated noise with an exactly known
posterior.

Two kinds exist: ``seo`` (tasks ``ctr`` and ``imp``, K=10) and ``ppc`` (tasks
``ctr`` and ``cpc``, K=3). Task names are namespaced by domain in the
vocabulary (``seo_ctr`` ...). Both kinds read the same attribute tokens; which
attributes drive the score is set per kind, and a fraction ``rho`` of them
(with identical weights, drawn from ``world_seed``) is shared between kinds.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import Step, Trajectory

STATE_ATTRS = ["price", "brand", "rating", "material", "shipping", "color", "size",
               "style", "season", "origin", "warranty", "stock"]
STATE_LEVELS = ["low", "mid", "high"]
ACTION_ATTRS = ["layout", "tone", "angle", "badge"]
ACTION_LEVELS = ["plain", "soft", "bold"]

CATEGORY_NAMES = {
    "seo": ["phone", "shoe", "lamp", "watch", "bag", "chair", "kettle", "jacket", "camera", "toy",
            "desk", "scarf", "drill", "mug", "tent", "sofa"],
    "ppc": ["fitness", "travel", "beauty", "garden", "pets", "gaming", "kitchen", "outdoor", "baby",
            "office", "music", "auto", "books", "crafts", "health", "tools"],
}
ACTION_WORDS = {"seo": ["photo", "thumbnail", "mainpic"], "ppc": ["banner", "creative", "adimage"]}
TASKS = {"seo": [("ctr", 10), ("imp", 10)], "ppc": [("ctr", 3), ("cpc", 3)]}
TARGET_BAYES = {3: 0.7, 10: 0.35}

_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"

COMMON_NOUNS = ["river", "market", "city", "garden", "teacher", "story", "mountain", "window", "letter",
                "morning", "village", "friend", "music", "season", "road", "harbor", "library",
                "painter", "forest", "kitchen"]
COMMON_VERBS = ["visits", "remembers", "builds", "follows", "describes", "crosses", "finds", "opens",
                "watches", "carries", "paints", "explains"]
COMMON_ADJS = ["quiet", "old", "bright", "small", "distant", "famous", "early", "green", "busy", "gentle",
               "narrow", "warm"]
COMMON_FUNCTION = ["the", "a", "and", "near", "after", "with", "every", "because", "then", "of"]


class UnknownCategoryError(KeyError):
    pass


def _pseudo_words(prefix, n, rng):
    """``n`` distinct pronounceable words such as ``shoe-kamo``."""
    words = []
    seen = set()
    while len(words) < n:
        syl = "".join(_CONS[rng.integers(len(_CONS))] + _VOWELS[rng.integers(len(_VOWELS))]
                      for _ in range(int(rng.integers(2, 4))))
        w = f"{prefix}-{syl}"
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def feature_token(attr, level):
    return f"{attr}_{level}"


@dataclass
class Category:
    name: str
    lexicon: list
    level_probs: list      # n_features x 3
    action_probs: list     # n_action_features x 3
    offset: int = 0


@dataclass
class RewardTask:
    name: str
    n_bins: int
    state_weights: list
    action_weights: list
    cross_weights: list
    edges: list
    tau: float

    def weight_matrix(self, cross_pairs):
        """(K, 1 + d_s + d_a + n_cross) matrix W with logits = W @ phi / tau.

        ``phi = [1, x, y, cross]``; the constant column carries the edge terms.
        Category offsets enter through ``x``-independent score and are applied
        separately.
        """
        u = np.concatenate([self.state_weights, self.action_weights, self.cross_weights]).astype(float)
        k = np.arange(self.n_bins, dtype=float)
        bias = -np.concatenate([[0.0], np.cumsum(self.edges)])
        return np.column_stack([bias, np.outer(k, u)])


@dataclass
class DomainSpec:
    domain_id: str
    kind: str
    n_features: int
    n_action_features: int
    categories: list
    cross_pairs: list
    tasks: list
    seed: int
    rho: float
    world_seed: int
    title_len: tuple = (3, 9)
    action_filler: tuple = (0, 2)

    # -- lookups --------------------------------------------------------------
    @property
    def category_names(self):
        return [c.name for c in self.categories]

    def category(self, name):
        for c in self.categories:
            if c.name == name:
                return c
        raise UnknownCategoryError(f"category {name!r} not in domain {self.domain_id!r}")

    def task(self, name):
        for t in self.tasks:
            if t.name == name or self.task_key(t.name) == name:
                return t
        raise KeyError(f"task {name!r} not in domain {self.domain_id!r}")

    def task_key(self, name):
        """Vocabulary-level task name, e.g. ``seo_ctr``."""
        return f"{self.domain_id}_{name}"

    @property
    def state_attrs(self):
        return STATE_ATTRS[:self.n_features]

    @property
    def action_attrs(self):
        return ACTION_ATTRS[:self.n_action_features]

    def words(self):
        """Every word a generator of this domain can emit."""
        out = []
        for c in self.categories:
            out.append(c.name)
            out.extend(c.lexicon)
        out.extend(feature_token(a, lv) for a in self.state_attrs for lv in STATE_LEVELS)
        out.extend(ACTION_WORDS[self.kind])
        out.extend(feature_token(a, lv) for a in self.action_attrs for lv in ACTION_LEVELS)
        return out

    def vocab_tasks(self):
        return {self.task_key(t.name): t.n_bins for t in self.tasks}

    # -- scoring --------------------------------------------------------------
    def scores(self, task, x, y, offsets):
        """Integer scores for arrays x (n, d_s), y (n, d_a) and per-row offsets."""
        t = self.task(task) if isinstance(task, str) else task
        s = offsets + x @ np.asarray(t.state_weights, float) + y @ np.asarray(t.action_weights, float)
        for w, (i, j) in zip(t.cross_weights, self.cross_pairs):
            s = s + w * x[:, i] * y[:, j]
        return s

    def label_probs(self, task, x, y, offsets):
        """Exact p(label | s, a), shape (n, K)."""
        t = self.task(task) if isinstance(task, str) else task
        score = np.atleast_1d(self.scores(t, np.atleast_2d(x), np.atleast_2d(y), offsets))
        n_edges_below = np.searchsorted(t.edges, score, side="right")
        if t.tau == 0:
            p = np.zeros((score.size, t.n_bins))
            p[np.arange(score.size), n_edges_below] = 1.0
            return p
        k = np.arange(t.n_bins, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(t.edges)])
        z = (np.outer(score, k) - cum) / t.tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    # -- serialisation --------------------------------------------------------
    def to_json(self):
        d = asdict(self)
        d["title_len"] = list(self.title_len)
        d["action_filler"] = list(self.action_filler)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["categories"] = [Category(**c) for c in d["categories"]]
        d["tasks"] = [RewardTask(**t) for t in d["tasks"]]
        d["cross_pairs"] = [tuple(p) for p in d["cross_pairs"]]
        d["title_len"] = tuple(d["title_len"])
        d["action_filler"] = tuple(d["action_filler"])
        return cls(**d)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass
class CategorySplit:
    train: list
    heldout: list

    def __post_init__(self):
        if not self.train or not self.heldout:
            raise ValueError("both sides of a category split must be non-empty")
        if set(self.train) & set(self.heldout):
            raise ValueError("category split is not disjoint")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def support_dims(kind, n_active, rho):
    """State-feature indices that drive scores for ``kind``.

    ``seo`` uses 0..n_active-1. ``ppc`` reuses the first round(rho*n_active)
    of those and takes the rest from indices after the ``seo`` block.
    """
    n_shared = int(math.floor(rho * n_active + 0.5))
    if kind == "seo":
        return list(range(n_active))
    return list(range(n_shared)) + list(range(n_active, 2 * n_active - n_shared))


def _nonzero_ints(rng, n, high=2):
    vals = rng.integers(1, high + 1, size=n) * rng.choice([-1, 1], size=n)
    return vals.astype(int)


def make_domain(kind, seed=0, rho=0.5, world_seed=0, n_categories=10, lexicon_size=60,
                n_active=5, n_action_features=3, n_cross=2, tau="auto", n_calibration=20000):
    """Build an ``seo``- or ``ppc``-like domain.

    ``tau="auto"`` calibrates each task's noise temperature so its Bayes
    accuracy is about 0.7 (K=3) or 0.35 (K=10); a number fixes it (0 means
    deterministic rewards).
    """
    if kind not in TASKS:
        raise ValueError(f"kind must be 'seo' or 'ppc', got {kind!r}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if n_categories > len(CATEGORY_NAMES[kind]):
        raise ValueError(f"at most {len(CATEGORY_NAMES[kind])} categories available")
    n_features = 2 * n_active
    if n_features > len(STATE_ATTRS) or n_action_features > len(ACTION_ATTRS):
        raise ValueError("too many features for the attribute tables")
    world = np.random.default_rng(world_seed)
    world_state_weights = _nonzero_ints(world, n_features)
    rng = np.random.default_rng([seed, 0 if kind == "seo" else 1])

    categories = []
    for name in CATEGORY_NAMES[kind][:n_categories]:
        lexicon = _pseudo_words(name, lexicon_size, np.random.default_rng(
            [world_seed, sum(ord(ch) for ch in name), len(name)]))
        level_probs = rng.dirichlet([2.0, 2.0, 2.0], size=n_features)
        action_probs = rng.dirichlet([2.0, 2.0, 2.0], size=n_action_features)
        categories.append(Category(name=name, lexicon=lexicon, level_probs=level_probs.tolist(),
                                   action_probs=action_probs.tolist(), offset=int(rng.integers(-1, 2))))

    dims = support_dims(kind, n_active, rho)
    pairs = []
    while len(pairs) < n_cross:
        p = (int(rng.choice(dims)), int(rng.integers(n_action_features)))
        if p not in pairs:
            pairs.append(p)

    spec = DomainSpec(domain_id=kind, kind=kind, n_features=n_features,
                      n_action_features=n_action_features, categories=categories,
                      cross_pairs=pairs, tasks=[], seed=int(seed), rho=float(rho),
                      world_seed=int(world_seed))

    calib = np.random.default_rng([seed, 99])
    xs, ys, offs = _draw_features(spec, spec.category_names, n_calibration, calib)
    for tname, k in TASKS[kind]:
        sw = np.zeros(n_features, dtype=int)
        sw[dims] = world_state_weights[dims]
        if tname != TASKS[kind][0][0]:
            # second task: same support, perturbed weights
            delta = rng.integers(-1, 2, size=len(dims))
            sw[dims] = np.where(sw[dims] + delta == 0, sw[dims], sw[dims] + delta)
        task = RewardTask(name=tname, n_bins=k, state_weights=sw.tolist(),
                          action_weights=_nonzero_ints(rng, n_action_features).tolist(),
                          cross_weights=_nonzero_ints(rng, n_cross, high=1).tolist(),
                          edges=[], tau=0.0)
        scores = spec.scores(task, xs, ys, offs)
        task.edges = _half_integer_edges(scores, k)
        if tau == "auto":
            task.tau = _calibrate_tau(spec, task, xs, ys, offs, TARGET_BAYES[k])
        else:
            task.tau = float(tau)
        spec.tasks.append(task)
    return spec


def _half_integer_edges(scores, k):
    """Quantile edges of integer scores snapped to strictly increasing half-integers."""
    raw = np.quantile(scores, np.arange(1, k) / k)
    edges = []
    for e in raw:
        h = math.floor(e) + 0.5
        if edges and h <= edges[-1]:
            h = edges[-1] + 1.0
        edges.append(h)
    return edges


def _calibrate_tau(spec, task, xs, ys, offs, target):
    def bayes(tau):
        task.tau = tau
        return float(spec.label_probs(task, xs, ys, offs).max(axis=1).mean())

    lo, hi = 1e-3, 1e3
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if bayes(mid) > target:
            lo = mid
        else:
            hi = mid
    return float(round(math.sqrt(lo * hi), 6))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _draw_levels(probs, rng):
    """One level index per row of ``probs`` (rows sum to 1)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(cdf.shape[:-1])[..., None]
    return np.minimum((u > cdf).sum(axis=-1), probs.shape[-1] - 1)


def _draw_features(spec, categories, n, rng):
    cats = [spec.category(c) for c in categories]
    which = rng.integers(len(cats), size=n)
    lp = np.array([c.level_probs for c in cats])[which]
    ap = np.array([c.action_probs for c in cats])[which]
    xs = _draw_levels(lp, rng) - 1.0
    ys = _draw_levels(ap, rng) - 1.0
    offs = np.array([c.offset for c in cats], dtype=float)[which]
    return xs, ys, offs


def render_state(spec, category, x, rng):
    c = spec.category(category)
    lo, hi = spec.title_len
    title = [c.lexicon[i] for i in rng.integers(len(c.lexicon), size=int(rng.integers(lo, hi + 1)))]
    feats = [feature_token(a, STATE_LEVELS[int(v) + 1]) for a, v in zip(spec.state_attrs, x)]
    return " ".join([c.name, *title, *feats])


def render_action(spec, category, y, rng):
    c = spec.category(category)
    words = ACTION_WORDS[spec.kind]
    lo, hi = spec.action_filler
    head = words[int(rng.integers(len(words)))]
    feats = [feature_token(a, ACTION_LEVELS[int(v) + 1]) for a, v in zip(spec.action_attrs, y)]
    filler = [c.lexicon[i] for i in rng.integers(len(c.lexicon), size=int(rng.integers(lo, hi + 1)))]
    return " ".join([head, *feats, *filler])


def _parse(tokens, attrs, levels):
    lookup = {feature_token(a, lv): (i, j - 1.0) for i, a in enumerate(attrs) for j, lv in enumerate(levels)}
    vec = np.full(len(attrs), np.nan)
    for tok in tokens:
        hit = lookup.get(tok)
        if hit is not None:
            vec[hit[0]] = hit[1]
    if np.isnan(vec).any():
        raise ValueError("text does not encode every feature")
    return vec


def parse_state(spec, text):
    """Recover the state feature vector from its rendered text."""
    return _parse(text.split(), spec.state_attrs, STATE_LEVELS)


def parse_action(spec, text):
    return _parse(text.split(), spec.action_attrs, ACTION_LEVELS)


def step_posterior(spec, task, category, step):
    """Exact label distribution for a rendered (state, action) step."""
    x = parse_state(spec, step.state)
    y = parse_action(spec, step.action)
    return spec.label_probs(task, x[None], y[None], np.array([spec.category(category).offset], float))[0]


def sample_trajectory(spec, category, rng, task=None, n_steps=1):
    """Draw an ``n_steps`` trajectory in ``category`` for ``task`` (default: first task)."""
    c = spec.category(category)
    t = spec.task(task) if task is not None else spec.tasks[0]
    steps = []
    for _ in range(n_steps):
        x = _draw_levels(np.asarray(c.level_probs), rng) - 1.0
        y = _draw_levels(np.asarray(c.action_probs), rng) - 1.0
        p = spec.label_probs(t, x[None], y[None], np.array([c.offset], float))[0]
        label = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        label = min(label, t.n_bins - 1)
        steps.append(Step(render_state(spec, category, x, rng), render_action(spec, category, y, rng), label))
    return Trajectory(domain_id=spec.domain_id, category_id=category, steps=steps, task=spec.task_key(t.name))


def sample_dataset(spec, categories, n, rng, tasks=None, n_steps=1, exclude=None):
    """``n`` trajectories over uniformly chosen categories and tasks.

    Trajectories whose content hash is in ``exclude`` (or already drawn) are
    redrawn, so the result is duplicate-free and disjoint from ``exclude``.
    """
    tasks = [t.name for t in spec.tasks] if tasks is None else list(tasks)
    seen = set(exclude or ())
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 20 * n + 1000:
            raise RuntimeError("could not draw enough distinct trajectories")
        cat = categories[int(rng.integers(len(categories)))]
        task = tasks[int(rng.integers(len(tasks)))]
        traj = sample_trajectory(spec, cat, rng, task=task, n_steps=n_steps)
        h = traj.content_hash()
        if h in seen:
            continue
        seen.add(h)
        out.append(traj)
    return out


def bayes_accuracy(spec, task, categories, n_eval, rng):
    """Monte Carlo E[max_k p(k | s, a)] and its standard error."""
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    xs, ys, offs = _draw_features(spec, list(categories), n_eval, rng)
    best = spec.label_probs(task, xs, ys, offs).max(axis=1)
    se = float(best.std(ddof=1) / math.sqrt(n_eval)) if n_eval > 1 else 0.0
    return float(best.mean()), se


def bayes_accuracy_on(spec, task, trajectories):
    """Mean max-posterior over the final steps of concrete trajectories."""
    best = np.array([step_posterior(spec, task, t.category_id, t.steps[-1]).max() for t in trajectories])
    se = float(best.std(ddof=1) / math.sqrt(best.size)) if best.size > 1 else 0.0
    return float(best.mean()), se


def split_categories(spec, n_holdout, seed):
    names = spec.category_names
    if not 1 <= n_holdout < len(names):
        raise ValueError(f"n_holdout={n_holdout} must be in [1, {len(names) - 1}]")
    order = np.random.default_rng(seed).permutation(len(names))
    held = sorted(names[i] for i in order[:n_holdout])
    return CategorySplit(train=[n for n in names if n not in held], heldout=held)


# ---------------------------------------------------------------------------
# common-knowledge filler
# ---------------------------------------------------------------------------

def common_words():
    return COMMON_FUNCTION + COMMON_NOUNS + COMMON_VERBS + COMMON_ADJS


def sample_common_doc(rng, n_sentences=(2, 4)):
    """Templated sentences with no decision markers."""
    def pick(words):
        return words[int(rng.integers(len(words)))]

    sentences = []
    for _ in range(int(rng.integers(n_sentences[0], n_sentences[1] + 1))):
        sentences.append(" ".join([pick(["the", "a", "every"]), pick(COMMON_ADJS), pick(COMMON_NOUNS),
                                   pick(COMMON_VERBS), pick(["the", "a"]), pick(COMMON_NOUNS),
                                   pick(["near", "after", "with", "of"]), pick(["the", "a"]),
                                   pick(COMMON_ADJS), pick(COMMON_NOUNS)]))
    return " and ".join(sentences)


def sample_common_docs(n, rng):
    return [sample_common_doc(rng) for _ in range(n)]
