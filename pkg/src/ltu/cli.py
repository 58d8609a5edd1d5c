"""Command-line entry point: ``ltu <subcommand> ...``.

Exit status is 0 on success, 2 for invalid input (arguments, plan, config) and
1 for failures while running. Errors are reported as one line on stderr,
``error[<category>]: <message>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import synthenv as se
from .corpus import (BinningSpec, Vocab, encode_ct, encode_sft, encode_text, fit_bins, mix_corpora,
                     read_trajectories, write_trajectories)
from .evaluate import PlanError, accuracy, run_matrix, Plan
from .model import ConfigError, ModelConfig, CheckpointError
from .trainer import (CT, SFT, TrainConfig, extend_lineage, initial_params, lineage_stage,
                      load_checkpoint, run_phase, save_checkpoint)

log = logging.getLogger("ltu")


class UsageError(ValueError):
    pass


def _add_train_args(p):
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--name", help="data name recorded in the lineage (default: file stem)")
    p.add_argument("--model", help="ModelConfig JSON (without vocab_size) for fresh init")


def build_parser():
    parser = argparse.ArgumentParser(prog="ltu", description="pretrain and fine-tune small decision models")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic domain and its trajectories")
    g.add_argument("--kind", choices=sorted(se.TASKS), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n", type=int, default=1000, help="number of trajectories")
    g.add_argument("--rho", type=float, default=0.5)
    g.add_argument("--world-seed", type=int, default=0)
    g.add_argument("--tau", default="auto")
    g.add_argument("--lexicon-size", type=int, default=60)
    g.add_argument("--n-categories", type=int, default=10)
    g.add_argument("--holdout", type=int, default=2, help="held-out categories")
    g.add_argument("--split", choices=["train", "heldout", "all"], default="train")
    g.add_argument("--task", help="restrict to one task (default: all)")
    g.add_argument("--n-steps", type=int, default=1)
    g.add_argument("--common", type=int, default=0, help="also write this many common docs")

    b = sub.add_parser("bins", help="fit quantile reward bins")
    b.add_argument("--values", required=True, help="file with one number per line")
    b.add_argument("--k", type=int, required=True)
    b.add_argument("--task", default="")
    b.add_argument("--out", required=True)

    pt = sub.add_parser("pretrain", help="continued pre-training on trajectories")
    pt.add_argument("--corpus", required=True, help="trajectory JSONL")
    pt.add_argument("--common", help="common-knowledge text, one document per line")
    pt.add_argument("--mix-fraction", type=float, default=1.0)
    _add_train_args(pt)

    ft = sub.add_parser("finetune", help="fine-tune to predict the final reward")
    ft.add_argument("--data", required=True, help="trajectory JSONL")
    ft.add_argument("--fresh-init", action="store_true")
    _add_train_args(ft)

    ev = sub.add_parser("eval", help="reward-prediction accuracy")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--vocab", required=True)
    ev.add_argument("--task", required=True, help="vocabulary task name, e.g. ppc_ctr")
    ev.add_argument("--train", action="append", default=[], help="training JSONL for the overlap check")
    ev.add_argument("--predictions", help="write per-example predictions JSONL here")

    m = sub.add_parser("matrix", help="run the ablation matrix from a plan file")
    m.add_argument("--plan", required=True)
    m.add_argument("--out", help="output directory (default: plan output_dir)")
    m.add_argument("--jobs", type=int, default=1)

    ins = sub.add_parser("inspect", help="print checkpoint lineage")
    ins.add_argument("--checkpoint", required=True)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    tau = args.tau if args.tau == "auto" else float(args.tau)
    spec = se.make_domain(args.kind, seed=args.seed, rho=args.rho, world_seed=args.world_seed,
                          n_categories=args.n_categories, lexicon_size=args.lexicon_size, tau=tau)
    split = se.split_categories(spec, args.holdout, spec.seed)
    cats = {"train": split.train, "heldout": split.heldout, "all": spec.category_names}[args.split]
    rng = np.random.default_rng([args.seed, 11])
    trajs = se.sample_dataset(spec, cats, args.n, rng, tasks=[args.task] if args.task else None,
                              n_steps=args.n_steps)
    os.makedirs(args.out, exist_ok=True)
    spec.save(os.path.join(args.out, "domain.json"))
    with open(os.path.join(args.out, "split.json"), "w", encoding="utf-8") as fh:
        json.dump({"train": split.train, "heldout": split.heldout}, fh, indent=2)
    vocab = Vocab.build(spec.words() + se.common_words(), spec.vocab_tasks())
    vocab.save(os.path.join(args.out, "vocab.txt"))
    write_trajectories(os.path.join(args.out, "trajectories.jsonl"), trajs)
    if args.common:
        with open(os.path.join(args.out, "common.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(se.sample_common_docs(args.common, np.random.default_rng([args.seed, 12]))) + "\n")
    print(f"wrote {len(trajs)} trajectories ({args.split} categories) to {args.out}")


def cmd_bins(args):
    with open(args.values, encoding="utf-8") as fh:
        values = [float(line) for line in fh if line.strip()]
    spec = fit_bins(values, args.k, task=args.task, provenance=f"quantiles of {args.values}")
    spec.save(args.out)
    print(json.dumps(spec.to_json()))


def _model_config(args, vocab):
    extra = json.loads(args.model) if args.model else {}
    return ModelConfig.from_dict({"vocab_size": len(vocab), "init_seed": args.seed, **extra})


def _train(args, phase, data, name):
    vocab = Vocab.load(args.vocab)
    cfg = TrainConfig(phase=phase, steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                      seed=args.seed, eval_every=args.log_every, init_checkpoint=args.init,
                      fresh_init=getattr(args, "fresh_init", False))
    params, parent = initial_params(cfg, _model_config(args, vocab), vocab_size=len(vocab))
    docs = data(vocab, params.cfg.max_seq_len)
    res = run_phase(params, docs, cfg, pad_id=vocab.pad_id, vocab_size=len(vocab))
    lineage = extend_lineage(parent, lineage_stage(phase, name, args.seed))
    save_checkpoint(params, args.out, dict(res.provenance, lineage=lineage))
    print(f"{phase} done: {len(res.losses)} steps, loss {res.losses[0]:.4f} -> {res.final_loss:.4f}; "
          f"lineage {lineage}")


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def cmd_pretrain(args):
    trajs = read_trajectories(args.corpus)

    def data(vocab, max_len):
        enc = [encode_ct(t, vocab, max_len) for t in trajs]
        if args.mix_fraction >= 1.0 and not args.common:
            return enc
        with open(args.common, encoding="utf-8") as fh:
            common = [encode_text(line, vocab, max_len) for line in fh if line.strip()]
        return mix_corpora(enc, common, args.mix_fraction, seed=args.seed)

    _train(args, CT, data, args.name or _stem(args.corpus))


def cmd_finetune(args):
    if not args.init and not args.fresh_init:
        raise UsageError("finetune needs --init CHECKPOINT or --fresh-init")
    trajs = read_trajectories(args.data)
    _train(args, SFT, lambda vocab, max_len: [encode_sft(t, vocab, max_len) for t in trajs],
           args.name or _stem(args.data))


def cmd_eval(args):
    vocab = Vocab.load(args.vocab)
    params, prov = load_checkpoint(args.checkpoint, vocab_size=len(vocab))
    data = read_trajectories(args.data)
    hashes = {t.content_hash() for path in args.train for t in read_trajectories(path)}
    res = accuracy(params, data, args.task, vocab, train_hashes=hashes)
    print(f"accuracy {res.accuracy:.4f} (n={res.n}, task={args.task}, lineage={prov.get('lineage', '')})")
    print("confusion (rows=label, cols=prediction):")
    for row in res.confusion:
        print(" ".join(f"{v:5d}" for v in row))
    if args.predictions:
        with open(args.predictions, "w", encoding="utf-8") as fh:
            for i, (t, l, p) in enumerate(zip(data, res.labels, res.predictions)):
                fh.write(json.dumps({"index": i, "hash": t.content_hash()[:16], "label": int(l),
                                     "prediction": int(p)}) + "\n")


def cmd_matrix(args):
    plan = Plan.load(args.plan)
    out = args.out or plan.output_dir
    if not out:
        raise UsageError("matrix needs --out or an output_dir in the plan")
    report = run_matrix(plan, out, jobs=args.jobs)
    failed = [r for r in report.rows if r["status"] != "ok"]
    print(f"{len(report.rows)} rows written to {out} ({len(failed)} failed)")
    return 1 if failed else 0


def cmd_inspect(args):
    _, prov = load_checkpoint(args.checkpoint)
    print(prov.get("lineage", "") or "(no lineage recorded)")
    for key in ("phase", "seed", "steps", "data_fingerprint", "final_loss"):
        if key in prov:
            print(f"{key}: {prov[key]}")


COMMANDS = {"gen": cmd_gen, "bins": cmd_bins, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "matrix": cmd_matrix, "inspect": cmd_inspect}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        return COMMANDS[args.command](args) or 0
    except (UsageError, PlanError, ConfigError) as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (OSError, CheckpointError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error[runtime]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
