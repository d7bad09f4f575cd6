"""
End-to-end pipeline steps shared by the CLI, plus the ablation runner that
trains and evaluates a set of recipes over several seeds.
"""

import csv
import io
import json
import logging
import os
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

import checkpoint
from analysis import layer_similarity, register_attention_stats, sample_instances
from config import ExperimentConfig
from corpus import (SyntheticCorpus, add_finetune_split, build_corpus, build_graph, build_languages,
                    select_finetune_directions)
from errors import ConfigError
from metrics import MetricReport, evaluate
from model import ModelParams, attach_lora, init_params
from training import LORA, TrainLog, Trainer
from utils import atomic_write_text

logger = logging.getLogger(__name__)

RECIPE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "recipes")
ABLATION_RECIPES = ("vanilla", "registering", "registers_no_mask", "ratio_0.75", "ratio_1.25", "ratio_1.5")


def recipe_path(name: str) -> str:
    """A recipe name ('registering') or a path to a JSON config."""
    if os.path.exists(name):
        return name
    path = os.path.join(RECIPE_DIR, f"{name}.json")
    if not os.path.exists(path):
        raise ConfigError(f"unknown recipe: {name}")
    return path


def generate_corpus(config: ExperimentConfig) -> SyntheticCorpus:
    """Languages, supervision graph and all splits described by the config."""
    languages, vocab = build_languages(config.num_languages, config.concepts, config.data_seed)
    graph = build_graph(config.num_languages, config.pivot, config.groups, config.bridges)
    corpus = build_corpus(languages, vocab, graph, config.train_per_edge, config.length_range,
                          config.data_seed, config.valid_per_edge, config.test_per_direction,
                          config.language_sizes)
    if config.finetune_directions > 0:
        directions = select_finetune_directions(graph, config.finetune_directions, config.finetune_seed)
        add_finetune_split(corpus, directions, config.finetune_per_direction, config.length_range)
    return corpus


def check_vocab(params: ModelParams, corpus: SyntheticCorpus):
    if params.config.vocab_size != corpus.vocab.size:
        raise ConfigError(f"model vocabulary ({params.config.vocab_size}) does not match "
                          f"corpus vocabulary ({corpus.vocab.size})")


def load_trained(path: str, corpus: SyntheticCorpus, base_path: Optional[str] = None) -> ModelParams:
    """Load a checkpoint for use with `corpus`, refusing one trained on another corpus."""
    checkpoint.check_corpus(path, corpus.identity())
    params = checkpoint.load_model(path, base_path)
    check_vocab(params, corpus)
    return params


def train_model(config: ExperimentConfig, corpus: SyntheticCorpus, out_dir: Optional[str] = None,
                base_path: Optional[str] = None, resume: bool = False):
    """
    Train a model (or LoRA adapters on top of `base_path` in lora mode).

    Returns:
        (params, TrainLog)
    """
    if config.vocab_size != corpus.vocab.size:
        raise ConfigError(f"config describes a vocabulary of {config.vocab_size} tokens, "
                          f"corpus has {corpus.vocab.size}")
    train_config = config.train_config()
    if train_config.mode == LORA:
        if not base_path:
            raise ConfigError("lora mode needs a base checkpoint")
        if not corpus.finetune:
            raise ConfigError("corpus has no finetune split (finetune_directions = 0)")
        params = load_trained(base_path, corpus)
        attach_lora(params, config.lora_rank, config.init_seed, config.lora_alpha)
        chosen = set(corpus.finetune_directions)
        train, valid = corpus.finetune, [i for i in corpus.valid if i.direction in chosen]
        graph = None
    else:
        params = init_params(config.model_config(corpus.vocab.size), config.init_seed)
        train, valid, graph = corpus.train, corpus.valid, corpus.graph

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "config.json"), config.to_json())
    trainer = Trainer(params, corpus.languages, train, valid, config.variant, train_config,
                      out_dir, graph, base_path, corpus.identity())
    if resume:
        trainer.resume()
    log = trainer.run()
    return params, log


def evaluate_model(params: ModelParams, corpus: SyntheticCorpus, beam: int = 5,
                   out_dir: Optional[str] = None, threads: Optional[int] = None,
                   directions=None) -> MetricReport:
    check_vocab(params, corpus)
    report = evaluate(params, corpus.test, corpus.languages, corpus.vocab, corpus.graph, beam,
                      threads=threads, directions=directions)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.write(os.path.join(out_dir, "report.json"), os.path.join(out_dir, "report.csv"))
    return report


# ------------------------------
# Ablations
# ------------------------------

SUMMARY_COLUMNS = ("zero_off_target", "zero_bleu", "sup_bleu", "entropy",
                   "final_src_tgt", "final_reg_tgt")


def run_once(config: ExperimentConfig, out_dir: str, beam: int) -> Dict[str, float]:
    """Train, evaluate and analyze one (recipe, seed) pair."""
    corpus = generate_corpus(config)
    params, _ = train_model(config, corpus, out_dir)
    report = evaluate_model(params, corpus, beam, out_dir)
    row = {
        "zero_off_target": report.zero_shot["off_target"],
        "zero_bleu": report.zero_shot["bleu"],
        "sup_bleu": report.supervised["bleu"],
        "entropy": float("nan"),
        "final_src_tgt": float("nan"),
        "final_reg_tgt": float("nan"),
    }
    if config.variant_spec().has_registers:
        sample = sample_instances(corpus.test, config.analysis_samples, config.analysis_seed)
        row["entropy"] = register_attention_stats(params, sample, corpus.languages).entropy
        final = layer_similarity(params, sample, corpus.languages)[-1]
        row["final_src_tgt"], row["final_reg_tgt"] = final["src_tgt"], final["reg_tgt"]
    return row


def ablate(recipes: Sequence[str], seeds: Sequence[int], out_dir: str, overrides: Sequence[str] = (),
           beam: Optional[int] = None) -> List[dict]:
    """
    Run every recipe under every seed and write `ablation_runs.csv` (one row
    per run) and `ablation.csv` (per-recipe means).
    """
    runs = []
    for name in recipes:
        base = ExperimentConfig.from_json(recipe_path(name)).with_overrides(overrides)
        if base.mode == LORA:
            raise ConfigError(f"recipe {name} fine-tunes a base model; run it with `train --base`")
        for seed in seeds:
            config = replace(base, seed=seed, init_seed=seed)
            run_dir = os.path.join(out_dir, os.path.splitext(os.path.basename(name))[0], f"seed_{seed}")
            logger.info("Ablation run %s seed %d -> %s", name, seed, run_dir)
            row = run_once(config, run_dir, beam or config.beam)
            runs.append({"recipe": name, "variant": config.variant, "seed": seed, **row})

    summary = []
    for name in recipes:
        mine = [r for r in runs if r["recipe"] == name]
        summary.append({"recipe": name, "variant": mine[0]["variant"], "seeds": len(mine),
                        **{c: float(np.mean([r[c] for r in mine])) for c in SUMMARY_COLUMNS}})
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_text(os.path.join(out_dir, "ablation_runs.csv"),
                      _table(runs, ["recipe", "variant", "seed", *SUMMARY_COLUMNS]))
    atomic_write_text(os.path.join(out_dir, "ablation.csv"),
                      _table(summary, ["recipe", "variant", "seeds", *SUMMARY_COLUMNS]))
    atomic_write_text(os.path.join(out_dir, "ablation.json"), json.dumps(summary, indent=2) + "\n")
    return summary


def _table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([f"{row[c]:.4f}" if isinstance(row[c], float) else row[c] for c in columns])
    return buf.getvalue()
