"""
Command-line interface for registering experiments on the synthetic corpus.

Subcommands: gen-data, train, evaluate, analyze, translate, show-mask, ablate.
"""

import os

from utils import THREADS_ENV, thread_count

# Kernel threads must be capped before numpy loads its BLAS.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, str(thread_count()))

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402

from analysis import export_hidden, layer_similarity, register_attention_stats, sample_instances, similarity_csv  # noqa: E402
from config import load_config  # noqa: E402
from corpus import TranslationInstance, encode, load_corpus, save_corpus  # noqa: E402
from errors import ConfigError, RegformerError  # noqa: E402
from experiments import (ABLATION_RECIPES, ablate, evaluate_model, generate_corpus, load_trained,  # noqa: E402
                         train_model)
from layout import build_layout, build_mask, format_mask  # noqa: E402
from search import translate, translate_file  # noqa: E402
from utils import atomic_write_text, format_ids, parse_ids  # noqa: E402

logger = logging.getLogger("regformer")

EXIT_DECODE_FAILURE = 1
EXIT_ERROR = 2


def banner(title: str):
    print("=" * 60)
    print(title)
    print("=" * 60)


def cmd_gen_data(args):
    config = load_config(args.config, args.set)
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise ConfigError(f"{args.out} exists and is not empty (use --force to overwrite)")
    banner("Generating synthetic corpus")
    corpus = generate_corpus(config)
    save_corpus(corpus, args.out, config.length_range)
    atomic_write_text(os.path.join(args.out, "config.json"), config.to_json())
    print(f"Languages: {config.num_languages}, concepts: {config.concepts}, vocabulary: {corpus.vocab.size}")
    print(f"Supervised directions: {len(corpus.graph.supervised_directions())}, "
          f"zero-shot: {len(corpus.graph.zero_shot_directions())}")
    print(f"Train: {len(corpus.train):,}  valid: {len(corpus.valid):,}  test: {len(corpus.test):,}"
          + (f"  finetune: {len(corpus.finetune):,}" if corpus.finetune else ""))
    print(f"Written to {args.out}")
    return 0


def cmd_train(args):
    config = load_config(args.config, args.set)
    corpus = load_corpus(args.corpus)
    banner(f"Training {config.variant} ({config.mode} mode)")
    start = time.time()
    _, log = train_model(config, corpus, args.out, base_path=args.base, resume=args.resume)
    elapsed = time.time() - start
    print()
    if log.steps:
        print(f"Final step {log.steps[-1][0]}: train loss {log.steps[-1][2]:.4f}")
    if log.valid:
        print(f"Last validation loss: {log.valid[-1][1]:.4f}")
    print(f"Time: {elapsed:.1f} seconds")
    print(f"Checkpoints and logs in {args.out}")
    return 0


def cmd_evaluate(args):
    corpus = load_corpus(args.corpus)
    params = load_trained(args.checkpoint, corpus, args.base)
    banner(f"Evaluating {os.path.basename(args.checkpoint)} (beam {args.beam})")
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    report = evaluate_model(params, corpus, args.beam, out_dir, args.threads)
    print(report.summary())
    print(f"Report written to {os.path.join(out_dir, 'report.json')}")
    if report.failed_directions:
        print(f"ERROR: {len(report.failed_directions)} direction(s) failed to decode: "
              f"{', '.join(sorted(report.failed_directions))}")
        return EXIT_DECODE_FAILURE
    return 0


def cmd_analyze(args):
    corpus = load_corpus(args.corpus)
    params = load_trained(args.checkpoint, corpus, args.base)
    sample = sample_instances(corpus.test, args.samples, args.seed)
    out_dir = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    banner(f"Analysis: {args.which} ({len(sample)} instances)")

    if args.which == "attention":
        stats = register_attention_stats(params, sample, corpus.languages, layer=args.layer)
        path = os.path.join(out_dir, "attention_stats.json")
        atomic_write_text(path, json.dumps(stats.to_dict(), indent=2, sort_keys=True) + "\n")
        print(f"top-1 {stats.top1:.4f}  top-2 {stats.top2:.4f}  dist {stats.dist:.3f}  entropy {stats.entropy:.4f}")
    elif args.which == "layersim":
        rows = layer_similarity(params, sample, corpus.languages)
        path = os.path.join(out_dir, "layer_similarity.csv")
        atomic_write_text(path, similarity_csv(rows))
        for row in rows:
            print(f"layer {row['layer']:2d}: src-reg {row['src_reg']:.3f}  reg-tgt {row['reg_tgt']:.3f}  "
                  f"src-tgt {row['src_tgt']:.3f}")
    else:
        layer = params.config.n_layers if args.layer is None else args.layer
        path = os.path.join(out_dir, f"hidden_layer{layer}.csv")
        rows = export_hidden(params, sample, corpus.languages, layer, path)
        print(f"{rows:,} token vectors")
    print(f"Written to {path}")
    return 0


def cmd_translate(args):
    corpus = load_corpus(args.corpus)
    params = load_trained(args.checkpoint, corpus, args.base)
    if args.input:
        count = translate_file(params, corpus.languages, args.input, args.output, beam=args.beam)
        print(f"Translated {count} sentences into {args.output}")
        return 0
    if args.src_lang is None or args.tgt_lang is None or args.ids is None:
        raise ConfigError("translate needs --input/--output or --src-lang, --tgt-lang and --ids")
    x = tuple(parse_ids(args.ids))
    inst = TranslationInstance(args.src_lang, args.tgt_lang, (), x, ())
    source_ids, _ = encode(inst, corpus.languages)
    hyp = translate(params, source_ids, beam=args.beam)
    print(format_ids(hyp))
    print(" ".join(corpus.vocab.id_to_token(t) for t in hyp))
    return 0


def cmd_show_mask(args):
    layout = build_layout(args.src_len, args.tgt_len, args.variant)
    print(format_mask(layout, build_mask(layout)))
    return 0


def cmd_ablate(args):
    banner(f"Ablation: {', '.join(args.recipes)} over seeds {args.seeds}")
    summary = ablate(args.recipes, args.seeds, args.out, args.set, args.beam)
    print()
    print(f"{'recipe':20s} {'zero off%':>10s} {'zero BLEU':>10s} {'entropy':>8s} {'reg-tgt':>8s} {'src-tgt':>8s}")
    for row in summary:
        print(f"{row['recipe']:20s} {row['zero_off_target']:10.2f} {row['zero_bleu']:10.2f} "
              f"{row['entropy']:8.3f} {row['final_reg_tgt']:8.3f} {row['final_src_tgt']:8.3f}")
    print(f"Tables written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='Registering for decoder-only multilingual translation on a synthetic corpus'
    )
    parser.add_argument('--log-level', default='INFO',
                        help='Logging level (default: INFO)')
    sub = parser.add_subparsers(dest='command', required=True)

    def add_config(p):
        p.add_argument('--config', type=str, default=None,
                       help='Experiment config JSON (default: built-in defaults)')
        p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE',
                       help='Override a config key (repeatable)')

    def add_model(p):
        p.add_argument('--checkpoint', required=True, help='Model or adapter checkpoint')
        p.add_argument('--base', default=None, help='Base checkpoint for an adapter (default: recorded path)')
        p.add_argument('--corpus', required=True, help='Corpus directory written by gen-data')

    p = sub.add_parser('gen-data', help='Generate the synthetic corpus')
    add_config(p)
    p.add_argument('--out', required=True, help='Output directory')
    p.add_argument('--force', action='store_true', help='Overwrite a non-empty output directory')
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser('train', help='Train a model (or LoRA adapters with --base)')
    add_config(p)
    p.add_argument('--corpus', required=True, help='Corpus directory')
    p.add_argument('--out', required=True, help='Checkpoint/log directory')
    p.add_argument('--base', default=None, help='Base model checkpoint (lora mode)')
    p.add_argument('--resume', action='store_true', help='Continue from the saved state in --out')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('evaluate', help='Decode the test split and score every direction')
    add_model(p)
    p.add_argument('--beam', type=int, default=5, help='Beam size (default: 5)')
    p.add_argument('--threads', type=int, default=None,
                   help=f'Decoding workers (default: {THREADS_ENV} or 1)')
    p.add_argument('--out', default=None, help='Report directory (default: next to the checkpoint)')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('analyze', help='Register attention, layer similarity or hidden-state export')
    add_model(p)
    p.add_argument('--which', choices=['attention', 'layersim', 'hidden'], required=True)
    p.add_argument('--samples', type=int, default=100, help='Test instances to sample (default: 100)')
    p.add_argument('--seed', type=int, default=0, help='Sampling seed (default: 0)')
    p.add_argument('--layer', type=int, default=None,
                   help='Layer (attention: default mean over layers; hidden: default last)')
    p.add_argument('--out', default=None, help='Output directory (default: next to the checkpoint)')
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser('translate', help='Translate a corpus-format file or one sentence')
    add_model(p)
    p.add_argument('--beam', type=int, default=5, help='Beam size (default: 5)')
    p.add_argument('--input', default=None, help='Corpus-format input file')
    p.add_argument('--output', default=None, help='Hypothesis output file')
    p.add_argument('--src-lang', type=int, default=None)
    p.add_argument('--tgt-lang', type=int, default=None)
    p.add_argument('--ids', default=None, help='Space-separated source token ids')
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser('show-mask', help='Print the attention mask of a layout')
    p.add_argument('--src-len', type=int, required=True, help="Length of x' (tag + tokens + eos)")
    p.add_argument('--tgt-len', type=int, required=True)
    p.add_argument('--variant', default='registering')
    p.set_defaults(func=cmd_show_mask)

    p = sub.add_parser('ablate', help='Train and evaluate recipes over several seeds')
    p.add_argument('--recipes', nargs='+', default=list(ABLATION_RECIPES))
    p.add_argument('--seeds', nargs='+', type=int, default=[0, 1, 2])
    p.add_argument('--out', required=True)
    p.add_argument('--beam', type=int, default=None, help='Beam size (default: from the recipe)')
    p.add_argument('--set', action='append', default=[], metavar='KEY=VALUE')
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format='[%(asctime)s] %(levelname)s %(name)s: %(message)s')
    if getattr(args, 'command', None) == 'translate' and args.input and not args.output:
        print("ERROR: --input needs --output", file=sys.stderr)
        return EXIT_ERROR
    try:
        return args.func(args)
    except RegformerError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"ERROR: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
