"""Reward prediction, accuracy and the ablation-matrix harness.

Arms (one cell each of the ablation grid)::

    sft_only          fresh init -> SFT
    ltu_in_domain     CT on the target domain's decision docs -> SFT
    ltu_cross_domain  CT on the other domain's decision docs -> SFT
    ltu_mix           CT on a decision/common mix (default 1:3) -> SFT
    ltu_common        CT on common-knowledge docs only -> SFT
    sft_full          fresh init -> SFT on the CT docs converted to SFT form plus
                      the SFT samples (same sample count as ltu_in_domain)

Every task is fine-tuned and evaluated either on held-out categories never seen
in CT (``split="heldout"``) or on CT categories with samples disjoint from CT
documents (``split="seen"``).
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import traceback
from collections import Counter, OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone

import numpy as np

from . import numerics as nx
from . import synthenv as se
from .corpus import (Vocab, encode_ct, encode_sft, encode_text, mix_corpora,
                     write_trajectories)
from .model import ConfigError, ModelConfig, init_model, logits_at
from .trainer import (CT, SFT, TrainConfig, extend_lineage, lineage_stage, load_checkpoint,
                      run_phase, save_checkpoint, sft_batch)

log = logging.getLogger(__name__)

ARMS = ("sft_only", "ltu_in_domain", "ltu_cross_domain", "ltu_mix", "ltu_common", "sft_full")
SPLITS = ("heldout", "seen")


class ContaminationError(ValueError):
    pass


class PlanError(ValueError):
    pass


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------

def _check_inputs(inputs, vocab):
    for x in inputs:
        if len(x) == 0 or int(x[-1]) != vocab.r_id:
            raise ValueError("SFT input must end at the <R> reward slot")


def reward_logits(params, inputs, task, vocab, batch_size=256):
    """Logits restricted to ``task``'s reward tokens at each input's final slot."""
    ids = vocab.reward_ids(task)
    inputs = [np.asarray(x, dtype=np.int64) for x in inputs]
    _check_inputs(inputs, vocab)
    out = []
    with nx.no_grad():
        for i in range(0, len(inputs), batch_size):
            chunk = inputs[i:i + batch_size]
            batch, _, _ = sft_batch([(x, x, x) for x in chunk], vocab.pad_id)
            lg = logits_at(params, batch, [len(x) - 1 for x in chunk]).data
            out.append(lg[:, ids])
    return np.concatenate(out, axis=0)


def predict_rewards(params, inputs, task, vocab, batch_size=256):
    """Argmax label per input; ``np.argmax`` breaks ties toward the lower label."""
    return np.argmax(reward_logits(params, inputs, task, vocab, batch_size), axis=1)


def predict_reward(params, input_ids, task, vocab):
    return int(predict_rewards(params, [input_ids], task, vocab)[0])


def reward_proba(params, inputs, task, vocab, batch_size=256):
    z = reward_logits(params, inputs, task, vocab, batch_size)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class AccuracyResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    labels: np.ndarray

    @property
    def n(self):
        return int(self.labels.size)

    @property
    def stderr(self):
        a = self.accuracy
        return float(np.sqrt(max(a * (1 - a), 0.0) / max(self.n, 1)))


def check_disjoint(eval_set, train_hashes):
    train_hashes = set(train_hashes or ())
    clash = sum(1 for t in eval_set if t.content_hash() in train_hashes)
    if clash:
        raise ContaminationError(f"{clash} evaluation trajectories also occur in training data")


def confusion_matrix(labels, preds, k):
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def accuracy(params, eval_set, task, vocab, train_hashes=None):
    """Exact-match accuracy of restricted argmax predictions on ``eval_set``."""
    eval_set = list(eval_set)
    if not eval_set:
        raise ValueError("empty evaluation set")
    check_disjoint(eval_set, train_hashes)
    inputs = [encode_sft(t, vocab, params.cfg.max_seq_len)[0] for t in eval_set]
    preds = predict_rewards(params, inputs, task, vocab)
    labels = np.array([t.final_reward for t in eval_set], dtype=np.int64)
    k = vocab.n_bins(task)
    return AccuracyResult(float(np.mean(preds == labels)), confusion_matrix(labels, preds, k), preds, labels)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["arm", "task", "dataset", "seed", "n_train", "n_eval", "accuracy",
                  "majority_baseline", "bayes_ceiling", "bayes_se", "lineage", "status", "error"]

ARM_LABELS = {"sft_only": "SFT", "ltu_in_domain": "LTU", "ltu_cross_domain": "LTU-cross",
              "ltu_mix": "LTU-MIX", "ltu_common": "LTU-Common", "sft_full": "SFT-full"}


def _fmt(v):
    if isinstance(v, float):
        return "" if np.isnan(v) else f"{v:.6f}"
    return "" if v is None else str(v)


@dataclass
class Report:
    rows: list = field(default_factory=list)
    created: str = ""
    fingerprints: dict = field(default_factory=dict)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c)) for c in REPORT_COLUMNS])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = []
        for r in csv.DictReader(io.StringIO(text)):
            for c in ("seed", "n_train", "n_eval"):
                r[c] = int(r[c]) if r[c] else None
            for c in ("accuracy", "majority_baseline", "bayes_ceiling", "bayes_se"):
                r[c] = float(r[c]) if r[c] else float("nan")
            rows.append(r)
        return cls(rows=rows)

    def ok_rows(self):
        return [r for r in self.rows if r.get("status") == "ok"]

    def summary(self):
        """Mean/std accuracy per (arm, task, dataset) over seeds."""
        groups = OrderedDict()
        for r in self.ok_rows():
            groups.setdefault((r["arm"], r["task"], r["dataset"]), []).append(r["accuracy"])
        return OrderedDict((k, (float(np.mean(v)), float(np.std(v)), len(v))) for k, v in groups.items())

    def mean_accuracy(self, arm, task=None, dataset=None):
        vals = [r["accuracy"] for r in self.ok_rows() if r["arm"] == arm
                and (task is None or r["task"] == task) and (dataset is None or r["dataset"] == dataset)]
        return float(np.mean(vals)) if vals else float("nan")

    def _cell(self, arm, task, dataset):
        s = self.summary().get((arm, task, dataset))
        return "-" if s is None else f"{s[0]:.3f} ± {s[1]:.3f}"

    def _pairs(self, pred):
        seen = OrderedDict()
        for r in self.ok_rows():
            if pred(r):
                seen[(r["task"], r["dataset"])] = None
        return list(seen)

    def table(self, title, arms, pred):
        """Markdown table: one row per (task, dataset), one column per arm."""
        pairs = self._pairs(lambda r: pred(r) and r["arm"] == arms[0])
        if not pairs:
            return ""
        head = ["Task", "Data"] + [f"{ARM_LABELS[a]} Accuracy" for a in arms]
        lines = [f"### {title}", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for task, ds in pairs:
            lines.append("| " + " | ".join([task, ds] + [self._cell(a, task, ds) for a in arms]) + " |")
        return "\n".join(lines) + "\n"

    def equalized_table(self):
        """Same-amount-of-data control: LTU arm vs SFT on the converted CT docs."""
        pairs = self._pairs(lambda r: r["arm"] == "sft_full")
        if not pairs:
            return ""
        lines = ["### Same amount of training data", "", "| Task | Data | Method | Accuracy |",
                 "|---|---|---|---|"]
        for task, ds in pairs:
            for arm in ("ltu_in_domain", "ltu_cross_domain"):
                for t2, ds2 in self._pairs(lambda r, a=arm: r["arm"] == a and r["task"] == task):
                    lines.append(f"| {task} | {ds2} | {ARM_LABELS[arm]} | {self._cell(arm, task, ds2)} |")
            lines.append(f"| {task} | SFT-full | SFT | {self._cell('sft_full', task, ds)} |")
        return "\n".join(lines) + "\n"

    def summary_table(self):
        lines = ["### Summary over seeds", "",
                 "| Arm | Task | Data | Accuracy | Majority | Bayes ceiling | Seeds |", "|---|---|---|---|---|---|---|"]
        for (arm, task, ds), (mean, std, n) in self.summary().items():
            rows = [r for r in self.ok_rows() if (r["arm"], r["task"], r["dataset"]) == (arm, task, ds)]
            maj = np.mean([r["majority_baseline"] for r in rows])
            bayes = np.mean([r["bayes_ceiling"] for r in rows])
            lines.append(f"| {ARM_LABELS[arm]} | {task} | {ds} | {mean:.3f} ± {std:.3f} | {maj:.3f} | {bayes:.3f} | {n} |")
        return "\n".join(lines) + "\n"

    def to_markdown(self):
        parts = [f"# Ablation report{(', ' + self.created) if self.created else ''}", ""]
        parts.append(self.table("Results on seen-category tasks",
                                ["ltu_in_domain", "sft_only", "ltu_common"],
                                lambda r: r["dataset"].endswith("-SFT")))
        parts.append(self.table("Results on held-out categories", ["ltu_in_domain", "sft_only"],
                                lambda r: r["dataset"].endswith("-SFT-heldout")))
        parts.append(self.table("Out-of-domain foundation model", ["ltu_cross_domain", "sft_only"],
                                lambda r: True))
        parts.append(self.equalized_table())
        parts.append(self.table("Common knowledge in CT", ["ltu_mix", "ltu_in_domain"], lambda r: True))
        parts.append(self.summary_table())
        lines = ["### All rows", "", "| " + " | ".join(REPORT_COLUMNS[:10] + ["status"]) + " |",
                 "|" + "---|" * 11]
        for r in self.rows:
            lines.append("| " + " | ".join(_fmt(r.get(c)) for c in REPORT_COLUMNS[:10] + ["status"]) + " |")
        parts.append("\n".join(lines) + "\n")
        return "\n".join(p for p in parts if p)

    def write(self, out_dir, predictions=()):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
        with open(os.path.join(out_dir, "report.md"), "w", encoding="utf-8") as fh:
            fh.write(self.to_markdown())
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
            json.dump({"created": self.created, "fingerprints": self.fingerprints,
                       "n_rows": len(self.rows)}, fh, indent=2, sort_keys=True)
        with open(os.path.join(out_dir, "predictions.jsonl"), "w", encoding="utf-8") as fh:
            for p in predictions:
                fh.write(json.dumps(p, sort_keys=True, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise PlanError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise PlanError(f"unknown keys in {where}: {sorted(unknown)}")


DOMAIN_KEYS = {"kind", "seed", "tau", "n_categories", "lexicon_size", "n_active", "n_cross"}
CORPUS_KEYS = {"ct_docs", "common_docs", "mix_fraction", "sft_train", "sft_eval", "n_steps"}
MODEL_KEYS = {"d_model", "n_heads", "n_layers", "max_seq_len", "init_scale"}
TASK_KEYS = {"domain", "task", "split"}


@dataclass
class Plan:
    seeds: list
    domains: list
    tasks: list
    arms: list
    model: dict = field(default_factory=dict)
    corpus: dict = field(default_factory=dict)
    ct: dict = field(default_factory=dict)
    sft: dict = field(default_factory=dict)
    sft_full_steps: int | None = None
    rho: float = 0.5
    world_seed: int = 0
    n_holdout: int = 2
    bayes_eval: int = 20000
    name: str = "ltu"
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, {f.name for f in fields(cls)}, "plan")
        missing = {"seeds", "domains", "tasks", "arms"} - set(d)
        if missing:
            raise PlanError(f"plan is missing {sorted(missing)}")
        plan = cls(**d)
        plan.validate()
        return plan

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise PlanError(f"cannot read plan {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        if not self.seeds or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise PlanError("seeds must be a non-empty list of non-negative ints")
        if len(set(self.seeds)) != len(self.seeds):
            raise PlanError("seeds must be distinct")
        kinds = []
        for i, dom in enumerate(self.domains):
            _reject_unknown(dom, DOMAIN_KEYS, f"domains[{i}]")
            if dom.get("kind") not in se.TASKS:
                raise PlanError(f"domains[{i}].kind must be one of {sorted(se.TASKS)}")
            kinds.append(dom["kind"])
        if not kinds or len(set(kinds)) != len(kinds):
            raise PlanError("domains must be non-empty with distinct kinds")
        _reject_unknown(self.model, MODEL_KEYS, "model")
        _reject_unknown(self.corpus, CORPUS_KEYS, "corpus")
        for key in ("ct", "sft"):
            _reject_unknown(getattr(self, key), {f.name for f in fields(TrainConfig)} - {"phase"}, key)
        for arm in self.arms:
            if arm not in ARMS:
                raise PlanError(f"unknown arm {arm!r}; choose from {ARMS}")
        if "ltu_cross_domain" in self.arms and len(kinds) < 2:
            raise PlanError("ltu_cross_domain needs two domains")
        if not self.tasks:
            raise PlanError("tasks must be non-empty")
        for i, t in enumerate(self.tasks):
            _reject_unknown(t, TASK_KEYS, f"tasks[{i}]")
            if t.get("domain") not in kinds:
                raise PlanError(f"tasks[{i}].domain {t.get('domain')!r} is not a declared domain")
            if t.get("task") not in dict(se.TASKS[t["domain"]]):
                raise PlanError(f"tasks[{i}].task {t.get('task')!r} not in {t['domain']} tasks")
            if t.get("split", "heldout") not in SPLITS:
                raise PlanError(f"tasks[{i}].split must be one of {SPLITS}")
        if not 0.0 <= float(self.rho) <= 1.0:
            raise PlanError("rho must be in [0, 1]")
        frac = float(self.corpus.get("mix_fraction", 0.25))
        if not 0 < frac <= 1:
            raise PlanError("corpus.mix_fraction must be in (0, 1]")
        try:
            self.train_config(CT, 0)
            self.train_config(SFT, 0, fresh=True)
            self.model_config(vocab_size=10, seed=0)
        except (ConfigError, TypeError, ValueError) as exc:
            raise PlanError(str(exc)) from exc

    def train_config(self, phase, seed, fresh=False, init=None, steps=None):
        d = dict(self.ct if phase == CT else self.sft)
        d.update(phase=phase, seed=seed)
        if phase == SFT:
            d.update(fresh_init=fresh and not init, init_checkpoint=init)
        if steps is not None:
            d["steps"] = steps
        return TrainConfig(**d)

    def model_config(self, vocab_size, seed):
        return ModelConfig(vocab_size=vocab_size, init_seed=seed, **self.model)

    def corpus_value(self, key):
        defaults = {"ct_docs": 2000, "common_docs": 2000, "mix_fraction": 0.25, "sft_train": 500,
                    "sft_eval": 500, "n_steps": 1}
        return self.corpus.get(key, defaults[key])

    def fingerprint(self):
        blob = json.dumps(self.to_dict() | {"output_dir": None}, sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# matrix execution
# ---------------------------------------------------------------------------

def build_world(plan):
    """Domain specs (keyed by kind) and the shared vocabulary."""
    specs = OrderedDict()
    for dom in plan.domains:
        kw = {k: v for k, v in dom.items() if k not in ("kind", "seed")}
        specs[dom["kind"]] = se.make_domain(dom["kind"], seed=dom.get("seed", 0), rho=plan.rho,
                                            world_seed=plan.world_seed, **kw)
    words, tasks = [], {}
    for spec in specs.values():
        words.extend(spec.words())
        tasks.update(spec.vocab_tasks())
    words.extend(se.common_words())
    return specs, Vocab.build(words, tasks)


def _dataset_name(domain, split):
    return f"{domain.upper()}-SFT" + ("-heldout" if split == "heldout" else "")


class _SeedRun:
    """All arms for one seed; CT checkpoints are cached per recipe."""

    def __init__(self, plan, specs, vocab, seed, out_dir):
        self.plan, self.specs, self.vocab, self.seed = plan, specs, vocab, seed
        self.dir = os.path.join(out_dir, f"seed{seed}")
        self.ckpt_dir = os.path.join(self.dir, "checkpoints")
        self.corpus_dir = os.path.join(self.dir, "corpora")
        os.makedirs(self.ckpt_dir, exist_ok=True)
        os.makedirs(self.corpus_dir, exist_ok=True)
        self.max_len = plan.model_config(len(vocab), seed).max_seq_len
        self.splits = {k: se.split_categories(s, plan.n_holdout, s.seed) for k, s in specs.items()}
        self.ct_docs, self.common = {}, None
        self.ct_ckpts = {}
        self.sft_sets = {}

    def rng(self, *tag):
        return np.random.default_rng([self.seed, *tag])

    # data ----------------------------------------------------------------
    def decision_docs(self, kind):
        if kind not in self.ct_docs:
            spec = self.specs[kind]
            idx = list(self.specs).index(kind)
            docs = se.sample_dataset(spec, self.splits[kind].train, self.plan.corpus_value("ct_docs"),
                                     self.rng(1, idx), n_steps=self.plan.corpus_value("n_steps"))
            write_trajectories(os.path.join(self.corpus_dir, f"{kind}-ct.jsonl"), docs)
            self.ct_docs[kind] = docs
        return self.ct_docs[kind]

    def common_docs(self):
        if self.common is None:
            self.common = se.sample_common_docs(self.plan.corpus_value("common_docs"), self.rng(2))
            with open(os.path.join(self.corpus_dir, "common.txt"), "w", encoding="utf-8") as fh:
                fh.write("\n".join(self.common) + "\n")
        return self.common

    def sft_data(self, kind, task, split):
        key = (kind, task, split)
        if key not in self.sft_sets:
            spec = self.specs[kind]
            cats = self.splits[kind].heldout if split == "heldout" else self.splits[kind].train
            exclude = {t.content_hash() for t in self.decision_docs(kind)}
            idx = list(self.specs).index(kind)
            tidx = [t.name for t in spec.tasks].index(task)
            rng = self.rng(3, idx, tidx, SPLITS.index(split))
            n_steps = self.plan.corpus_value("n_steps")
            train = se.sample_dataset(spec, cats, self.plan.corpus_value("sft_train"), rng,
                                      tasks=[task], n_steps=n_steps, exclude=exclude)
            exclude |= {t.content_hash() for t in train}
            test = se.sample_dataset(spec, cats, self.plan.corpus_value("sft_eval"), rng,
                                     tasks=[task], n_steps=n_steps, exclude=exclude)
            stem = f"{kind}-{task}-{split}"
            write_trajectories(os.path.join(self.corpus_dir, f"{stem}-train.jsonl"), train)
            write_trajectories(os.path.join(self.corpus_dir, f"{stem}-eval.jsonl"), test)
            self.sft_sets[key] = (train, test)
        return self.sft_sets[key]

    # CT --------------------------------------------------------------------
    def ct_stream(self, recipe, kind):
        """Encoded CT documents and the trajectories among them."""
        V = self.vocab
        if recipe == "common":
            docs = [encode_text(t, V, self.max_len) for t in self.common_docs()]
            return docs, [], "common"
        decision = self.decision_docs(kind)
        enc = [encode_ct(t, V, self.max_len) for t in decision]
        if recipe == "decision":
            return enc, decision, kind
        common = [encode_text(t, V, self.max_len) for t in self.common_docs()]
        frac = float(self.plan.corpus_value("mix_fraction"))
        tagged = mix_corpora(list(zip(enc, decision)), [(c, None) for c in common], frac,
                             seed=[self.seed, 4], n_docs=len(enc))
        return [d for d, _ in tagged], [t for _, t in tagged if t is not None], f"{kind}-mix"

    def ct_checkpoint(self, recipe, kind):
        key = (recipe, kind if recipe != "common" else None)
        if key not in self.ct_ckpts:
            docs, trajs, name = self.ct_stream(recipe, kind)
            params = init_model(self.plan.model_config(len(self.vocab), self.seed))
            cfg = self.plan.train_config(CT, self.seed)
            res = run_phase(params, docs, cfg, pad_id=self.vocab.pad_id, vocab_size=len(self.vocab))
            path = os.path.join(self.ckpt_dir, f"ct-{name}.ltu")
            prov = dict(res.provenance, lineage=lineage_stage(CT, name, self.seed))
            save_checkpoint(params, path, prov)
            self.ct_ckpts[key] = (path, len(docs), {t.content_hash() for t in trajs})
        return self.ct_ckpts[key]

    # arms ------------------------------------------------------------------
    def run_arm(self, arm, kind, task, split):
        spec = self.specs[kind]
        task_key = spec.task_key(task)
        train, test = self.sft_data(kind, task, split)
        V = self.vocab
        sft_samples = [encode_sft(t, V, self.max_len) for t in train]
        train_hashes = {t.content_hash() for t in train}
        n_ct, init, steps = 0, None, None
        ct_name = {"ltu_in_domain": ("decision", kind), "ltu_mix": ("mix", kind),
                   "ltu_common": ("common", None)}.get(arm)
        if arm == "ltu_cross_domain":
            other = [k for k in self.specs if k != kind][0]
            ct_name = ("decision", other)
        if ct_name:
            init, n_ct, ct_hashes = self.ct_checkpoint(*ct_name)
            train_hashes |= ct_hashes
        if arm == "sft_full":
            converted = self.decision_docs(kind)
            sft_samples = [encode_sft(t, V, self.max_len) for t in converted] + sft_samples
            train_hashes |= {t.content_hash() for t in converted}
            steps = self.plan.sft_full_steps or (self.plan.train_config(CT, 0).steps
                                                 + self.plan.train_config(SFT, 0, fresh=True).steps)
        cfg = self.plan.train_config(SFT, self.seed, fresh=init is None, init=init, steps=steps)
        if init:
            params, prov = load_checkpoint(init, vocab_size=len(V))
            parent = prov.get("lineage", "")
        else:
            params, parent = init_model(self.plan.model_config(len(V), self.seed)), ""
        res = run_phase(params, sft_samples, cfg, pad_id=V.pad_id, vocab_size=len(V))
        dataset = "SFT-full" if arm == "sft_full" else _dataset_name(kind, split)
        lineage = extend_lineage(parent, lineage_stage(SFT, f"{kind}-{task}-{split}", self.seed))
        path = os.path.join(self.ckpt_dir, f"{arm}-{kind}-{task}-{split}.ltu")
        save_checkpoint(params, path, dict(res.provenance, lineage=lineage))

        result = accuracy(params, test, task_key, V, train_hashes=train_hashes)
        train_labels = [t.final_reward for t in train]
        majority = Counter(train_labels).most_common(1)[0][0]
        ceiling, ceiling_se = se.bayes_accuracy(spec, task, self.splits[kind].heldout if split == "heldout"
                                                else self.splits[kind].train, self.plan.bayes_eval,
                                                self.rng(5, list(self.specs).index(kind)))
        row = {"arm": arm, "task": task_key, "dataset": dataset, "seed": self.seed,
               "n_train": n_ct + len(sft_samples), "n_eval": result.n, "accuracy": result.accuracy,
               "majority_baseline": float(np.mean(result.labels == majority)),
               "bayes_ceiling": ceiling, "bayes_se": ceiling_se, "lineage": lineage,
               "status": "ok", "error": ""}
        preds = [{"arm": arm, "task": task_key, "dataset": dataset, "seed": self.seed, "index": i,
                  "hash": t.content_hash()[:16], "label": int(l), "prediction": int(p)}
                 for i, (t, l, p) in enumerate(zip(test, result.labels, result.predictions))]
        return row, preds


def _run_seed(plan, seed, out_dir):
    specs, vocab = build_world(plan)
    run = _SeedRun(plan, specs, vocab, seed, out_dir)
    rows, preds = [], []
    for t in plan.tasks:
        split = t.get("split", "heldout")
        for arm in plan.arms:
            try:
                row, p = run.run_arm(arm, t["domain"], t["task"], split)
            except Exception as exc:  # one failing arm must not abort the matrix
                log.error("arm %s failed: %s", arm, traceback.format_exc())
                row = {"arm": arm, "task": f"{t['domain']}_{t['task']}",
                       "dataset": _dataset_name(t["domain"], split), "seed": seed,
                       "n_train": None, "n_eval": None, "accuracy": float("nan"),
                       "majority_baseline": float("nan"), "bayes_ceiling": float("nan"),
                       "bayes_se": float("nan"), "lineage": "", "status": "error",
                       "error": f"{type(exc).__name__}: {exc}".replace("\n", " ")}
                p = []
            rows.append(row)
            preds.extend(p)
            log.info("seed=%d arm=%s task=%s acc=%s", seed, arm, row["task"], _fmt(row["accuracy"]))
    return rows, preds


def run_matrix(plan, out_dir, jobs=1):
    """Run every (arm, task, seed) cell and write the report files to ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    specs, vocab = build_world(plan)
    dom_dir = os.path.join(out_dir, "domains")
    os.makedirs(dom_dir, exist_ok=True)
    for kind, spec in specs.items():
        spec.save(os.path.join(dom_dir, f"{kind}.json"))
    vocab.save(os.path.join(out_dir, "vocab.txt"))
    with open(os.path.join(out_dir, "plan.json"), "w", encoding="utf-8") as fh:
        json.dump(plan.to_dict() | {"output_dir": None}, fh, indent=2, sort_keys=True)

    if jobs > 1 and len(plan.seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, [plan] * len(plan.seeds), plan.seeds,
                                    [out_dir] * len(plan.seeds)))
    else:
        results = [_run_seed(plan, s, out_dir) for s in plan.seeds]
    rows = [r for rs, _ in results for r in rs]
    preds = [p for _, ps in results for p in ps]
    report = Report(rows=rows, created=datetime.now(timezone.utc).isoformat(timespec="seconds"),
                    fingerprints={"plan": plan.fingerprint(), "vocab": vocab.fingerprint()})
    report.write(out_dir, preds)
    return report
