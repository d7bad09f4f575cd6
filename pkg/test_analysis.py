"""
Tests for register attention statistics, layer similarity and hidden-state export.
"""

import csv
import math

import numpy as np
import pytest

from analysis import (attention_stats_from_matrices, cosine, export_hidden, layer_similarity,
                      register_attention_stats, sample_instances, sentence_attention_stats, similarity_csv)
from errors import UnsupportedVariantError
from layout import build_layout

from conftest import make_model, perturb_params


def _neighbour_attention(layout):
    """Register i puts 0.6 on source i and 0.4 on its right neighbour (left for the last)."""
    attn = np.zeros((layout.length, layout.length))
    for i in range(layout.reg_len):
        row = layout.src_len + i
        attn[row, i] = 0.6
        attn[row, i + 1 if i + 1 < layout.src_len else i - 1] = 0.4
    return attn


def test_one_to_one_registers():
    layout = build_layout(5, 3, "registering")
    assert layout.reg_len == 5
    top1, top2, dist, entropy = sentence_attention_stats(_neighbour_attention(layout), layout)
    assert top1 == pytest.approx(0.6)
    assert top2 == pytest.approx(0.4)
    assert dist == 1.0
    assert entropy == pytest.approx(math.log(5))


def test_registers_collapse_on_first_token():
    layout = build_layout(4, 2, "registering")
    attn = np.zeros((layout.length, layout.length))
    attn[layout.reg_slice, 0] = 0.7
    attn[layout.reg_slice, 3] = 0.2
    top1, top2, dist, entropy = sentence_attention_stats(attn, layout)
    assert (top1, top2, dist, entropy) == pytest.approx((0.7, 0.2, 3.0, 0.0))


def test_stats_average_over_sentences():
    a = build_layout(5, 3, "registering")
    b = build_layout(4, 2, "registering")
    collapsed = np.zeros((b.length, b.length))
    collapsed[b.reg_slice, 0] = 1.0
    stats = attention_stats_from_matrices([(_neighbour_attention(a), a), (collapsed, b)])
    assert stats.sentences == 2
    assert stats.entropy == pytest.approx(math.log(5) / 2)
    assert stats.top1 == pytest.approx(0.8)
    assert stats.top1 >= stats.top2
    assert attention_stats_from_matrices([]).sentences == 0


def test_vanilla_layout_rejected():
    layout = build_layout(4, 2, "vanilla")
    with pytest.raises(UnsupportedVariantError):
        attention_stats_from_matrices([(np.zeros((layout.length, layout.length)), layout)])


def test_register_attention_stats_on_model(tiny_corpus):
    params = perturb_params(make_model(tiny_corpus.vocab.size, "registering", seed=2), seed=3)
    instances = sample_instances(tiny_corpus.test, count=5, seed=0)
    stats = register_attention_stats(params, instances, tiny_corpus.languages)
    assert stats.sentences == 5
    assert 0.0 <= stats.top2 <= stats.top1 <= 1.0
    assert stats.entropy >= 0.0
    per_layer = register_attention_stats(params, instances, tiny_corpus.languages, layer=1)
    assert per_layer.sentences == 5
    with pytest.raises(IndexError):
        register_attention_stats(params, instances, tiny_corpus.languages, layer=2)
    vanilla = make_model(tiny_corpus.vocab.size, "vanilla")
    with pytest.raises(UnsupportedVariantError):
        register_attention_stats(vanilla, instances, tiny_corpus.languages)


def test_sample_instances(tiny_corpus):
    picked = sample_instances(tiny_corpus.test, count=4, seed=1)
    assert len(set(picked)) == 4
    assert picked == sample_instances(tiny_corpus.test, count=4, seed=1)
    assert len(sample_instances(tiny_corpus.test, count=500)) == len(tiny_corpus.test)


def test_cosine():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=8), rng.normal(size=8)
    assert cosine(a, b) == pytest.approx(cosine(b, a))
    assert cosine(a, a) == pytest.approx(1.0)
    assert cosine(a, -a) == pytest.approx(-1.0)
    assert cosine(a, np.zeros(8)) == 0.0


def test_layer_similarity(tiny_corpus):
    params = perturb_params(make_model(tiny_corpus.vocab.size, "registering", seed=1, n_layers=2), seed=2)
    instances = tiny_corpus.test[:3]
    rows = layer_similarity(params, instances, tiny_corpus.languages)
    assert [r["layer"] for r in rows] == [0, 1, 2]
    for row in rows:
        for key in ("src_reg", "reg_tgt", "src_tgt"):
            assert -1.0 - 1e-9 <= row[key] <= 1.0 + 1e-9
    # duplicating every instance leaves the means unchanged
    doubled = layer_similarity(params, instances + instances, tiny_corpus.languages)
    for a, b in zip(rows, doubled):
        assert a == pytest.approx(b)
    text = similarity_csv(rows)
    assert text.splitlines()[0] == "layer,src_reg,reg_tgt,src_tgt"
    assert len(text.splitlines()) == 4


def test_export_hidden(tmp_path, tiny_corpus):
    params = make_model(tiny_corpus.vocab.size, "registering", seed=0)
    instances = tiny_corpus.test[:4]
    path = tmp_path / "hidden.csv"
    rows = export_hidden(params, instances, tiny_corpus.languages, layer=1, path=str(path))

    with open(path, newline="") as f:
        table = list(csv.reader(f))
    header, body = table[0], table[1:]
    assert header == [f"f{i}" for i in range(16)] + ["block", "lang", "direction"]
    assert len(body) == rows
    expected = 0
    for inst in instances:
        # tag + source + eos, as many registers, bos + target
        src_len = len(inst.x) + 2
        expected += 2 * src_len + len(inst.y) + 1
    assert rows == expected

    first = instances[0]
    assert body[0][-3:] == ["src", str(first.src_lang), f"L{first.src_lang}-L{first.tgt_lang}"]
    assert {r[-3] for r in body} == {"src", "reg", "tgt"}
    assert all(r[-2] == str(first.tgt_lang) for r in body[:2 * (len(first.x) + 2) + len(first.y) + 1]
               if r[-3] != "src")

    again = tmp_path / "again.csv"
    export_hidden(params, instances, tiny_corpus.languages, layer=1, path=str(again))
    assert again.read_text() == path.read_text()
    with pytest.raises(IndexError):
        export_hidden(params, instances, tiny_corpus.languages, layer=3, path=str(again))
