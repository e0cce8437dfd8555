"""``lifi`` command-line interface.

Every subcommand reads and writes the JSONL corpus format and the binary
checkpoint format, so the stages can be run one by one::

    lifi synth --preset sentiment --out data/
    lifi train-base --corpus data/labeled.jsonl data/unlabeled.jsonl --heldout data/heldout.jsonl --out base.ckpt
    lifi train-classifier --corpus data/labeled.jsonl --attributes pos,neg --out clf.ckpt
    lifi label --classifier clf.ckpt --corpus data/labeled.jsonl data/unlabeled.jsonl --out coded.jsonl
    lifi train-adapters --checkpoint base.ckpt --coded coded.jsonl --out adapters.ckpt
    lifi generate --checkpoint base.ckpt --adapters adapters.ckpt --attribute pos --prompt "the " > gen.jsonl
    lifi evaluate --generations gen.jsonl --judge judge.ckpt --scoring-lm base.ckpt --out report.txt

or all at once with ``lifi pipeline --config run.toml``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .artifacts import load_classifier, load_fusion, load_lm, save_classifier, save_fusion, save_lm
from .checkpoint import CheckpointError
from .classifier import StageConfig, default_encoder_config, pseudo_label, train_classifier
from .config import SEED_ENV, ConfigError, TrainConfig, load_config
from .data import (CorpusError, SyntheticWorld, load_coded, load_corpus, make_synthetic, preset, save_coded,
                   save_corpus)
from .evaluation import evaluate_attribute, render_report
from .generation import ALPHA_GRID, DEFAULT_ALPHA, alpha_sweep, sample_continuations
from .pipeline import PipelineError, new_fusion, pretrain_base, run_full_pipeline, train_adapters
from .transformer import ModelConfig
from .vocab import TokenizeError, Vocab


class CLIError(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    return int(env) if env else args.seed


def _stage(args, default: StageConfig) -> StageConfig:
    """Stage defaults from the run config, overridden by whichever train flags were given."""
    given = {k: v for k, v in (("lr", args.lr), ("batch_size", args.batch_size), ("epochs", args.epochs))
             if v is not None}
    return replace(default, **given)


def _records(paths: list[str], attributes=None):
    out = []
    for p in paths:
        out.extend(load_corpus(p, attributes))
    return out


def _prompts(args) -> list[str]:
    prompts = list(args.prompt or [])
    if args.prompts:
        prompts += [line.rstrip("\n") for line in Path(args.prompts).read_text().splitlines() if line.strip()]
    if not prompts:
        raise CLIError("give at least one --prompt or a --prompts file")
    return prompts


def _write_jsonl(rows, out: str | None) -> None:
    fh = open(out, "w") if out else sys.stdout
    try:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")
    finally:
        if out:
            fh.close()


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    spec = preset(args.preset, **({"seed": args.data_seed} if args.data_seed is not None else {}))
    labeled, unlabeled, heldout = make_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(out / "labeled.jsonl", labeled)
    save_corpus(out / "unlabeled.jsonl", unlabeled)
    save_corpus(out / "heldout.jsonl", heldout)
    (out / "prompts.txt").write_text("\n".join(SyntheticWorld.build(spec).prompts(args.n_prompts)) + "\n")
    (out / "attributes.txt").write_text(",".join(spec.attributes) + "\n")
    print(f"wrote {len(labeled)} labeled, {len(unlabeled)} unlabeled, {len(heldout)} held-out records to {out}")


def cmd_train_base(args) -> None:
    records = _records(args.corpus)
    held = _records(args.heldout) if args.heldout else []
    vocab = Vocab.from_texts([r.text for r in records + held])
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads, vocab_size=len(vocab),
                      n_ctx=args.n_ctx)
    model, rep = pretrain_base([r.text for r in records], vocab, cfg, _stage(args, TrainConfig().base), seed=_seed(args),
                               heldout_texts=[r.text for r in held] or None)
    save_lm(args.out, model, vocab)
    for c in rep.checkpoints:
        print(f"checkpoint {c['checkpoint']} step {c['step']} held-out NLL {c['heldout_nll']:.4f}")
    print(f"saved base LM ({model.num_params()} parameters) to {args.out}")


def cmd_train_classifier(args) -> None:
    attributes = args.attributes.split(",")
    records = _records(args.corpus, attributes)
    if any(r.label is None for r in records):
        raise CLIError("classifier training needs a label on every record")
    vocab = Vocab.from_texts([r.text for r in records])
    held = None
    if args.heldout:
        h = _records(args.heldout, attributes)
        held = ([r.text for r in h], [attributes.index(r.label) for r in h])
    clf, rep = train_classifier([r.text for r in records], [attributes.index(r.label) for r in records], vocab,
                                attributes, _stage(args, TrainConfig().classifier), default_encoder_config(len(vocab)),
                                seed=_seed(args), heldout=held)
    save_classifier(args.out, clf)
    if rep.heldout_accuracy is not None:
        print(f"held-out accuracy {rep.heldout_accuracy:.4f}")
    print(f"saved classifier to {args.out}")


def cmd_label(args) -> None:
    clf, _ = load_classifier(args.classifier)
    texts = [r.text for r in _records(args.corpus)]
    coded = pseudo_label(clf, texts)
    save_coded(args.out, [(t, c.values) for t, c in coded])
    print(f"coded {len(coded)} texts into {args.out}")


def cmd_train_adapters(args) -> None:
    base, vocab, _ = load_lm(args.checkpoint)
    coded = load_coded(args.coded)
    if not coded:
        raise CLIError(f"{args.coded} is empty")
    attributes = args.attributes.split(",") if args.attributes else [f"a{i}" for i in range(len(coded[0][1]))]
    fusion = new_fusion(attributes, base.cfg, args.r_ffn, _seed(args))
    fusion, rep = train_adapters(base, fusion, coded, vocab, _stage(args, TrainConfig().adapters), seed=_seed(args))
    save_fusion(args.out, fusion, base.cfg)
    print(f"coded NLL {rep.coded_nll[0]:.4f} -> {rep.coded_nll[-1]:.4f}; base checksum unchanged")
    print(f"saved adapters to {args.out}")


def _controlled(args):
    base, vocab, _ = load_lm(args.checkpoint)
    fusion, _ = load_fusion(args.adapters)
    return base, vocab, fusion


def cmd_generate(args) -> None:
    base, vocab, fusion = _controlled(args)
    attrs = fusion.bank.attributes
    if args.attribute not in attrs:
        raise CLIError(f"unknown attribute {args.attribute!r}; the adapters know {attrs}")
    target = attrs.index(args.attribute)
    prompts = _prompts(args)
    rows = sample_continuations(base, vocab, prompts, target=target, alpha=args.alpha, fusion=fusion, k=args.k,
                                max_new_tokens=args.len, num=args.num, seed=_seed(args))
    _write_jsonl(({"prompt": c.prompt, "attribute": args.attribute, "alpha": args.alpha, "text": c.text,
                   "logprobs": c.logprobs} for row in rows for c in row), args.out)


def cmd_evaluate(args) -> None:
    judge, _ = load_classifier(args.judge)
    scoring, vocab, _ = load_lm(args.scoring_lm)
    groups: dict[str, list[str]] = {}
    with open(args.generations) as f:
        for i, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                groups.setdefault(row["attribute"], []).append(row["text"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise CLIError(f"{args.generations}:{i}: bad generation record ({e})") from None
    reports = []
    for name, texts in groups.items():
        if name not in judge.attributes:
            raise CLIError(f"attribute {name!r} unknown to the judge ({judge.attributes})")
        reports.append(evaluate_attribute(name, judge.attributes.index(name), texts, judge, scoring, vocab))
    table = render_report(reports)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")


def cmd_sweep_alpha(args) -> None:
    base, vocab, fusion = _controlled(args)
    judge, _ = load_classifier(args.judge)
    scoring, _, _ = load_lm(args.scoring_lm) if args.scoring_lm else (None, None, None)
    grid = [float(x) for x in args.grid.split(",")]
    table = alpha_sweep(base, fusion, vocab, fusion.bank.attributes, _prompts(args), judge, scoring, grid=grid,
                        k=args.k, num=args.num, max_new_tokens=args.len, seed=_seed(args))
    print(f"{'alpha':>6}  {'correctness':>11}  {'relevance':>9}  {'ppl':>8}")
    for row in table:
        print(f"{row['alpha']:>6g}  {row['correctness']:>11.2f}  {row['relevance']:>9.2f}  {row['ppl']:>8.2f}")
    if args.out:
        Path(args.out).write_text(json.dumps(table, indent=2) + "\n")


def cmd_pipeline(args) -> None:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    stages = args.stages.split(",") if args.stages else None
    manifest = run_full_pipeline(cfg, evaluate=False if args.no_eval else None, stages=stages)
    print(f"stages completed: {', '.join(manifest.stages)}")
    report = Path(cfg.out_dir) / "report.txt"
    if report.exists():
        print(report.read_text(), end="")
    print(f"manifest: {Path(cfg.out_dir) / 'manifest.json'}")


# ---------------------------------------------------------------- parser

def _train_flags(p, default: StageConfig) -> None:
    p.add_argument("--epochs", type=int, help=f"training epochs (default {default.epochs})")
    p.add_argument("--lr", type=float, help=f"peak learning rate (default {default.lr:g}, {default.schedule} schedule)")
    p.add_argument("--batch-size", type=int, help=f"batch size (default {default.batch_size})")
    p.add_argument("--seed", type=int, default=0, help=f"random seed ({SEED_ENV} overrides)")


def _gen_flags(p) -> None:
    p.add_argument("--checkpoint", required=True, help="base LM checkpoint")
    p.add_argument("--adapters", required=True, help="adapter + fusion checkpoint")
    p.add_argument("--prompt", action="append", help="prompt text (repeatable)")
    p.add_argument("--prompts", help="file with one prompt per line")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--num", type=int, default=5)
    p.add_argument("--len", type=int, default=30)
    p.add_argument("--seed", type=int, default=0, help=f"random seed ({SEED_ENV} overrides)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lifi", description="Attribute-controlled generation with fused adapters.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = ap.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic benchmark (labeled, unlabeled, held-out, prompts)")
    p.add_argument("--preset", default="sentiment", choices=["sentiment", "topic"])
    p.add_argument("--data-seed", type=int, default=None)
    p.add_argument("--n-prompts", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-base", help="pretrain the base LM on JSONL corpora")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--heldout", nargs="*")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--n-ctx", type=int, default=128)
    p.add_argument("--out", required=True)
    _train_flags(p, TrainConfig().base)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("train-classifier", help="train an attribute classifier (code source or judge)")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--attributes", required=True, help="comma-separated attribute names")
    p.add_argument("--heldout", nargs="*")
    p.add_argument("--out", required=True)
    _train_flags(p, TrainConfig().classifier)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("label", help="attach classifier control codes to texts")
    p.add_argument("--classifier", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train-adapters", help="train adapters and fusion temperatures on a frozen base LM")
    p.add_argument("--checkpoint", required=True, help="base LM checkpoint")
    p.add_argument("--coded", required=True, help="JSONL of {text, code}")
    p.add_argument("--attributes", help="comma-separated attribute names, in code order")
    p.add_argument("--r-ffn", type=int, default=16)
    p.add_argument("--out", required=True)
    _train_flags(p, TrainConfig().adapters)
    p.set_defaults(func=cmd_train_adapters)

    p = sub.add_parser("generate", help="sample controlled continuations as JSONL")
    _gen_flags(p)
    p.add_argument("--attribute", required=True)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--out", help="output file (stdout if omitted)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations: relevance, correctness, PPL, Dist-n")
    p.add_argument("--generations", required=True)
    p.add_argument("--judge", required=True)
    p.add_argument("--scoring-lm", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep-alpha", help="correctness and PPL across control strengths")
    _gen_flags(p)
    p.add_argument("--judge", required=True)
    p.add_argument("--scoring-lm")
    p.add_argument("--grid", default=",".join(f"{a:g}" for a in ALPHA_GRID))
    p.add_argument("--out", help="write the table as JSON")
    p.set_defaults(func=cmd_sweep_alpha)

    p = sub.add_parser("pipeline", help="run every stage from a TOML run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="override out_dir from the config")
    p.add_argument("--stages", help="comma-separated subset of base,classifier,adapters to (re)run; "
                                    "skipped stages reuse checkpoints in out_dir")
    p.add_argument("--no-eval", action="store_true", help="skip the evaluation stage")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (CLIError, ConfigError, CorpusError, CheckpointError, TokenizeError, PipelineError,
            FileNotFoundError, ValueError) as e:
        print(f"lifi {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
