"""
Shared fixtures: tiny languages, corpora and models small enough for exact
numerical checks.
"""

import os

import numpy as np
import pytest

from corpus import BOS_ID, build_corpus, build_graph, build_languages, encode
from layout import pack_sequence
from model import ModelConfig, init_params


def pytest_collection_modifyitems(config, items):
    if os.environ.get("REGFORMER_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set REGFORMER_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_languages():
    return build_languages(3, 5, seed=0)


@pytest.fixture
def tiny_corpus(tiny_languages):
    languages, vocab = tiny_languages
    graph = build_graph(3)
    return build_corpus(languages, vocab, graph, sizes=6, length_range=(2, 4), seed=0,
                        n_valid=2, n_test=2)


def make_model(vocab_size, variant="registering", seed=0, d_model=16, n_layers=2, n_heads=2,
               dropout=0.0, max_positions=64):
    config = ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=n_heads, n_layers=n_layers,
                         d_ff=2 * d_model, dropout=dropout, attention_dropout=dropout,
                         max_positions=max_positions, variant=variant)
    return init_params(config, seed)


def random_source(rng, vocab, tgt_lang, src_lang, length):
    """x' for random surface tokens of src_lang, tagged for tgt_lang."""
    first = vocab.first_surface_id + src_lang * vocab.concepts
    x = [int(t) for t in rng.integers(first, first + vocab.concepts, size=length)]
    return [vocab.tag_id(tgt_lang)] + x + [2]


def packed(instance, languages, variant):
    return pack_sequence(*encode(instance, languages), variant, BOS_ID)


def perturb_params(params, seed, scale=0.3):
    """Larger random weights so attention patterns are far from uniform."""
    rng = np.random.default_rng(seed)
    for name, t in params.tensors.items():
        if not name.endswith(".gain") and not name.endswith(".bias"):
            t.data += rng.normal(0.0, scale, size=t.shape)
    return params
