"""
Long ablation runs (six languages, pivot-only supervision, 5,000 steps, three
seeds) checking the qualitative trends: zero-shot off-target ordering, the
register-ratio sweep, register attention entropy, layer-wise similarity and
LoRA fine-tuning. Enabled with REGFORMER_SLOW=1.
"""

import hashlib
import os

import numpy as np
import pytest

from analysis import layer_similarity, sample_instances
from config import ExperimentConfig
from experiments import (ABLATION_RECIPES, ablate, evaluate_model, generate_corpus, load_trained, recipe_path,
                         train_model)

SEEDS = (0, 1, 2)
# smaller network and corpus than the recipes; languages, supervision and schedule unchanged
TREND = ["d_model=64", "n_heads=4", "n_layers=3", "d_ff=256", "train_per_edge=2000",
         "test_per_direction=20", "log_interval=500"]

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ablation"))
    summary = ablate(ABLATION_RECIPES, SEEDS, out, TREND)
    return out, {row["recipe"]: row for row in summary}


def _run_checkpoint(out, recipe, seed):
    return os.path.join(out, recipe, f"seed_{seed}", "checkpoint_last.ckpt")


def _corpus():
    return generate_corpus(ExperimentConfig.from_json(recipe_path("registering")).with_overrides(TREND))


def test_zero_shot_off_target_ordering(ablation):
    _, rows = ablation
    vanilla = rows["vanilla"]["zero_off_target"]
    assert rows["registering"]["zero_off_target"] < vanilla
    assert rows["registers_no_mask"]["zero_off_target"] >= vanilla


def test_ratio_one_has_best_zero_shot_bleu(ablation):
    _, rows = ablation
    # registering places one register per source slot
    best = rows["registering"]["zero_bleu"]
    for name in ("ratio_0.75", "ratio_1.25", "ratio_1.5"):
        assert best >= rows[name]["zero_bleu"], name


def test_compressing_registers_select_fewer_sources(ablation):
    _, rows = ablation
    for name in ("ratio_1.25", "ratio_1.5"):
        assert rows["registering"]["entropy"] > rows[name]["entropy"], name


def test_layer_similarity_shape(ablation):
    out, _ = ablation
    corpus = _corpus()
    sample = sample_instances(corpus.test, 100, seed=0)
    curves = []
    for seed in SEEDS:
        params = load_trained(_run_checkpoint(out, "registering", seed), corpus)
        rows = layer_similarity(params, sample, corpus.languages)
        curves.append([[row["src_reg"], row["reg_tgt"], row["src_tgt"]] for row in rows])
    src_reg, reg_tgt, src_tgt = np.mean(curves, axis=0).T
    assert reg_tgt[-1] > src_tgt[-1]
    assert src_tgt[0] >= max(src_reg[0], reg_tgt[0])


def test_lora_improves_chosen_directions_and_keeps_base(ablation, tmp_path):
    out, _ = ablation
    base = _run_checkpoint(out, "registering", 0)
    with open(base, "rb") as f:
        base_digest = hashlib.sha256(f.read()).hexdigest()

    config = ExperimentConfig.from_json(recipe_path("lora_finetune_5dir")).with_overrides(TREND)
    corpus = generate_corpus(config)
    chosen = corpus.finetune_directions
    assert len(chosen) == 5
    before = evaluate_model(load_trained(base, corpus), corpus, config.beam, directions=chosen)

    tuned, _ = train_model(config, corpus, str(tmp_path / "lora"), base_path=base)
    after = evaluate_model(tuned, corpus, config.beam, directions=chosen)

    with open(base, "rb") as f:
        assert hashlib.sha256(f.read()).hexdigest() == base_digest
    assert after.failed_directions == {}
    assert after.overall["bleu"] > before.overall["bleu"]
