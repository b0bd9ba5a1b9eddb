"""Command-line entry points: train, evaluate, rank, gen-synthetic."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .data import DataError, load_dialogs, load_features
from .encoding import Vocabulary
from .evaluation import evaluate_split, rank
from .model import ModelConfig
from .synthetic import generate_synthetic
from .train import RunConfig, Trainer, eval_examples, load_corpus, load_run_config, score_candidates

log = logging.getLogger("vdrank")


class CliError(Exception):
    pass


def _config_fields():
    model = [f for f in dataclasses.fields(ModelConfig)]
    run = [f for f in dataclasses.fields(RunConfig) if f.name != "model"]
    return model + run


def _flag_type(f):
    default = f.default
    if isinstance(default, bool):
        return lambda s: s.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    for f in _config_fields():
        if f.name == "seed":
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_flag_type(f), default=None)


def _run_config(args) -> RunConfig:
    flat = load_run_config(args.config).to_flat() if args.config else RunConfig().to_flat()
    for f in _config_fields():
        value = getattr(args, f.name, None)
        if value is not None:
            flat[f.name] = value
    return RunConfig.from_flat(flat)


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(cfg.out_dir or "run")
    out.mkdir(parents=True, exist_ok=True)
    corpus = load_corpus(cfg)  # every input is validated before the first step
    cfg.model.vocab_size = len(corpus.vocab)
    corpus.vocab.save(out / "vocab.txt")
    (out / "config.jsonl").write_text(json.dumps(cfg.to_flat(), sort_keys=True) + "\n")
    print(f"train units {len(corpus.train)}  vqa units {len(corpus.vqa)} (skipped {corpus.vqa_skipped})  "
          f"val rounds {len(corpus.val)}  vocab {len(corpus.vocab)}")
    trainer = Trainer(cfg, corpus.vocab, corpus.train, corpus.vqa, corpus.val if args.eval_each_epoch else ())
    while trainer.epoch < cfg.total_epochs:
        snap = trainer.train_epoch()
        trainer.save(out / f"epoch{trainer.epoch:03d}.ckpt")
        print("epoch", snap["epoch"], snap["phase"], " ".join(f"{k}={v:.4f}" for k, v in snap.items()
                                                           if isinstance(v, float)))
        trainer.log.write(out / "trainlog.tsv")
    trainer.save(out / "final.ckpt")
    trainer.log.write(out / "trainlog.tsv")
    if corpus.val:
        report = evaluate_split(lambda ctx, cs: score_candidates(trainer.params, corpus.vocab, ctx, cs, cfg.max_len),
                                corpus.val)
        print("val", report.format())
    print(f"wrote {out / 'final.ckpt'} and {out / 'trainlog.tsv'}")
    return 0


def _load_model(path):
    ckpt = load_checkpoint(path)
    vocab = Vocabulary.from_tokens(ckpt.vocab_tokens)
    run = ckpt.extra.get("run", {})
    return ckpt, vocab, int(run.get("history_turns", 1)), int(run.get("max_len", 256))


def _examples(args, ckpt, history_turns):
    feats = load_features(args.features, ckpt.config.regions_per_image, ckpt.config.visual_dim)
    dialogs = load_dialogs(args.dialogs)
    for d in dialogs:
        if d.image_id not in feats:
            raise DataError(f"{args.dialogs}: image {d.image_id} has no region features")
    return dialogs, eval_examples(dialogs, feats, history_turns)


def cmd_evaluate(args) -> int:
    ckpt, vocab, turns, max_len = _load_model(args.checkpoint)
    dialogs, examples = _examples(args, ckpt, turns)
    if not examples:
        raise CliError("dataset has no rounds to evaluate")
    scores = [score_candidates(ckpt.params, vocab, ctx, cs, max_len) for ctx, cs in examples]
    it = iter(scores)
    report = evaluate_split(lambda ctx, cs: next(it), examples)
    print(report.format())
    if args.dump:
        keys = [(d.image_id, i + 1) for d in dialogs for i in range(len(d.rounds))]
        with open(args.dump, "w", encoding="utf-8") as fh:
            fh.write("image_id\tround\tscores\n")
            for (image_id, rnd), s in zip(keys, scores):
                fh.write(f"{image_id}\t{rnd}\t" + "\t".join(f"{x:.6f}" for x in s) + "\n")
    if args.report:
        Path(args.report).write_text(json.dumps(report.as_dict(), sort_keys=True) + "\n")
    return 0


def cmd_rank(args) -> int:
    ckpt, vocab, turns, max_len = _load_model(args.checkpoint)
    dialogs, examples = _examples(args, ckpt, turns)
    if not 0 <= args.dialog_index < len(dialogs):
        raise CliError(f"dialog index {args.dialog_index} outside [0, {len(dialogs)})")
    d = dialogs[args.dialog_index]
    if not 1 <= args.round <= len(d.rounds):
        raise CliError(f"round {args.round} outside [1, {len(d.rounds)}]")
    offset = sum(len(x.rounds) for x in dialogs[: args.dialog_index]) + args.round - 1
    ctx, cs = examples[offset]
    result = rank(score_candidates(ckpt.params, vocab, ctx, cs, max_len))
    print(f"image {d.image_id}  round {args.round}")
    print(f"caption: {d.caption}")
    for q, a in ctx.history:
        print(f"history: {q} / {a}")
    print(f"question: {ctx.question}")
    for pos, idx in enumerate(result.order[: args.top], 1):
        mark = "*" if idx == cs.gt_index else " "
        print(f"{pos:3d} {mark} {result.scores[idx]:.6f}  {cs.candidates[idx]}")
    print(f"ground truth at rank {result.rank_of(cs.gt_index)} of {len(cs.candidates)}")
    return 0


def cmd_gen_synthetic(args) -> int:
    paths = generate_synthetic(args.seed, args.num_images, args.vocab_size, args.n_c, args.k, args.d_v, args.out_dir,
                               val_fraction=args.val_fraction, rounds_per_dialog=args.rounds_per_dialog,
                               vqa_per_image=args.vqa_per_image)
    for p in vars(paths).values():
        print(p)
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vdrank", description="Visual-dialog answer ranker")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="two-phase training")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--config", help="JSON-lines config file; flags override it")
    t.add_argument("--eval-each-epoch", action="store_true", help="score the validation split after every epoch")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "metrics on a dialog file"),
                                 ("rank", cmd_rank, "top-N candidates for one round")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dialogs", required=True)
        p.add_argument("--features", required=True)
        p.set_defaults(func=func)
    sub.choices["evaluate"].add_argument("--dump", help="write per-round scores as TSV")
    sub.choices["evaluate"].add_argument("--report", help="write the metric report as JSON")
    sub.choices["rank"].add_argument("--dialog-index", type=int, default=0)
    sub.choices["rank"].add_argument("--round", type=int, default=1, help="1-based round number")
    sub.choices["rank"].add_argument("--top", type=int, default=8)

    g = sub.add_parser("gen-synthetic", help="write a planted-signal dataset")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-images", type=int, default=200)
    g.add_argument("--vocab-size", type=int, default=200)
    g.add_argument("--n-c", type=int, default=20)
    g.add_argument("--k", type=int, default=8)
    g.add_argument("--d-v", type=int, default=32)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--rounds-per-dialog", type=int, default=10)
    g.add_argument("--vqa-per-image", type=int, default=5)
    g.set_defaults(func=cmd_gen_synthetic)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CliError, DataError, CheckpointError, ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
