"""
Tests for languages, the supervision graph and corpus generation.
"""

import filecmp
import os

import numpy as np
import pytest

from corpus import (BOS_ID, EOS_ID, LanguageSpec, TranslationInstance, apply_reorder, build_corpus, build_graph,
                    build_languages, decode_source, encode, format_instance, generate_instance, invert_reorder,
                    load_corpus, parse_instance, resolve_edge_sizes, save_corpus, select_finetune_directions,
                    add_finetune_split, strip_hypothesis)
from errors import ConfigError, UnknownLanguageError


def test_vocabulary_size():
    _, vocab = build_languages(2, 3, seed=0)
    assert vocab.size == 11
    assert vocab.id_to_token(BOS_ID) == "<s>"
    assert vocab.token_to_id("<2L1>") == vocab.tag_id(1) == 4
    assert vocab.is_tag(3) and not vocab.is_tag(5)


def test_language_of():
    _, vocab = build_languages(3, 4, seed=0)
    assert vocab.language_of(EOS_ID) is None
    assert vocab.language_of(vocab.tag_id(2)) is None
    assert vocab.language_of(vocab.first_surface_id) == 0
    assert vocab.language_of(vocab.first_surface_id + 4) == 1
    assert vocab.language_of(vocab.size - 1) == 2
    with pytest.raises(UnknownLanguageError):
        vocab.tag_id(3)


def test_languages_deterministic():
    assert build_languages(4, 10, seed=7)[0] == build_languages(4, 10, seed=7)[0]
    assert build_languages(4, 10, seed=7)[0] != build_languages(4, 10, seed=8)[0]


def test_surface_vocabularies_disjoint():
    languages, vocab = build_languages(6, 50, seed=0)
    surface = [tok for lang in languages for tok in lang.surface_tokens]
    assert len(set(surface)) == 300
    for lang in languages:
        assert {vocab.language_of(t) for t in lang.surface_tokens} == {lang.lang_id}


def test_minimum_sizes():
    with pytest.raises(ConfigError):
        build_languages(1, 10, seed=0)
    with pytest.raises(ConfigError):
        build_languages(3, 1, seed=0)


def test_reorder_rules():
    assert apply_reorder("reverse", [0, 1, 2]) == [2, 1, 0]
    assert apply_reorder("rotate_1", ["a", "b", "c"]) == ["b", "c", "a"]
    assert apply_reorder("identity", [3, 1]) == [3, 1]
    for rule in ("identity", "reverse", "rotate_1", "rotate_2"):
        assert invert_reorder(rule, apply_reorder(rule, [5, 6, 7, 8])) == [5, 6, 7, 8]
    with pytest.raises(ConfigError):
        apply_reorder("shuffle", [1, 2])


def test_render_reverse_target():
    lang = LanguageSpec(1, 4, (10, 11, 12), "reverse")
    assert lang.render([0, 1, 2]) == [12, 11, 10]
    assert lang.concepts_of([12, 11, 10]) == [0, 1, 2]
    with pytest.raises(ConfigError):
        lang.concepts_of([99])


def test_generate_instance_renders_both_sides():
    languages, _ = build_languages(3, 8, seed=1)
    inst = generate_instance(languages, 0, 1, (3, 6), seed=5)
    assert 3 <= len(inst.concepts) <= 6
    assert list(inst.x) == languages[0].render(inst.concepts)
    assert list(inst.y) == languages[1].render(inst.concepts)
    assert inst == generate_instance(languages, 0, 1, (3, 6), seed=5)


def test_same_language_identity_rule():
    languages, _ = build_languages(3, 8, seed=1)
    assert languages[0].reorder_rule == "identity"
    inst = generate_instance(languages, 0, 0, (4, 4), seed=2)
    assert inst.x == inst.y


def test_generate_instance_bad_range():
    languages, _ = build_languages(2, 4, seed=0)
    with pytest.raises(ConfigError):
        generate_instance(languages, 0, 1, (0, 3), seed=0)


def test_star_graph_counts():
    graph = build_graph(6)
    assert len(graph.supervised_directions()) == 10
    assert len(graph.zero_shot_directions()) == 20
    assert graph.is_supervised(0, 3) and graph.is_supervised(3, 0)
    assert not graph.is_supervised(2, 3)


def test_bridge_graph():
    graph = build_graph(6, pivot=0, groups=[[1, 2], [3, 4, 5]], bridges=[1, 3])
    assert graph.is_supervised(1, 3) and graph.is_supervised(3, 1)
    assert graph.is_supervised(1, 2) and graph.is_supervised(5, 3)
    assert not graph.is_supervised(2, 4)
    assert len(graph.supervised_directions()) + len(graph.zero_shot_directions()) == 30
    with pytest.raises(ConfigError):
        build_graph(4, bridges=[7])
    with pytest.raises(ConfigError):
        build_graph(4, pivot=4)


def test_edge_sizes():
    graph = build_graph(3)
    with pytest.raises(ConfigError):
        resolve_edge_sizes(graph, 0)
    with pytest.raises(ConfigError):
        resolve_edge_sizes(graph, {(1, 2): 5})
    with pytest.raises(ConfigError):
        resolve_edge_sizes(graph, {(0, 1): 5})
    sizes = resolve_edge_sizes(graph, 1, language_sizes=[0, 30, 7])
    assert sizes == {(0, 1): 30, (0, 2): 7, (1, 0): 30, (2, 0): 7}


def test_build_corpus_splits(tiny_corpus):
    graph = tiny_corpus.graph
    assert len(tiny_corpus.train) == 6 * len(graph.supervised_directions())
    assert len(tiny_corpus.valid) == 2 * len(graph.supervised_directions())
    assert len(tiny_corpus.test) == 2 * 6
    assert {i.direction for i in tiny_corpus.train} == set(graph.supervised_directions())
    assert {i.direction for i in tiny_corpus.test} == set(graph.directions())


def test_build_corpus_deterministic(tiny_languages, tiny_corpus):
    languages, vocab = tiny_languages
    again = build_corpus(languages, vocab, build_graph(3), sizes=6, length_range=(2, 4), seed=0,
                         n_valid=2, n_test=2)
    assert again.train == tiny_corpus.train
    assert again.test == tiny_corpus.test
    other = build_corpus(languages, vocab, build_graph(3), sizes=6, length_range=(2, 4), seed=1,
                         n_valid=2, n_test=2)
    assert other.train != tiny_corpus.train


def test_encode_and_decode(tiny_languages):
    languages, vocab = tiny_languages
    inst = TranslationInstance(1, 2, (0, 1, 2, 3, 4), tuple(languages[1].render([0, 1, 2, 3, 4])),
                               tuple(languages[2].render([0, 1, 2, 3, 4])))
    source, target = encode(inst, languages)
    assert len(source) == 7
    assert source[0] == vocab.tag_id(2) and source[-1] == EOS_ID
    assert target == list(inst.y) + [EOS_ID]
    assert decode_source(source) == list(inst.x)
    with pytest.raises(UnknownLanguageError):
        encode(TranslationInstance(0, 9, (), (), ()), languages)


def test_strip_hypothesis():
    assert strip_hypothesis([5, 6, EOS_ID, 7]) == [5, 6]
    assert strip_hypothesis([5, 6]) == [5, 6]
    assert strip_hypothesis([EOS_ID]) == []


def test_instance_line_format(tiny_corpus):
    inst = tiny_corpus.test[0]
    line = format_instance(inst)
    assert line.count("\t") == 3
    assert parse_instance(line, tiny_corpus.languages) == inst
    src, tgt, x, y = line.split("\t")
    with pytest.raises(ConfigError):
        parse_instance("\t".join([src, tgt, x, x + " " + y]), tiny_corpus.languages)
    with pytest.raises(ConfigError):
        parse_instance("0\t1", tiny_corpus.languages)


def test_save_and_load(tmp_path, tiny_corpus):
    save_corpus(tiny_corpus, str(tmp_path), (2, 4))
    loaded = load_corpus(str(tmp_path))
    assert loaded.train == tiny_corpus.train
    assert loaded.valid == tiny_corpus.valid
    assert loaded.test == tiny_corpus.test
    assert loaded.edge_sizes == tiny_corpus.edge_sizes
    assert loaded.graph == tiny_corpus.graph
    assert loaded.vocab.size == tiny_corpus.vocab.size

    # saving twice writes byte-identical files
    again = tmp_path / "again"
    save_corpus(loaded, str(again), (2, 4))
    for name in ("train.tsv", "valid.tsv", "test.tsv", "manifest.json"):
        assert filecmp.cmp(os.path.join(tmp_path, name), os.path.join(again, name), shallow=False)


def test_load_missing_manifest(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(str(tmp_path))


def test_finetune_directions():
    graph = build_graph(6)
    chosen = select_finetune_directions(graph, 5, seed=0)
    assert len(set(chosen)) == 5
    assert chosen == select_finetune_directions(graph, 5, seed=0)
    assert all(d in graph.directions() for d in chosen)
    with pytest.raises(ConfigError):
        select_finetune_directions(graph, 31)


def test_finetune_split(tiny_corpus):
    add_finetune_split(tiny_corpus, [(1, 2)], per_direction=4, length_range=(2, 4))
    assert len(tiny_corpus.finetune) == 4
    assert all(i.direction == (1, 2) for i in tiny_corpus.finetune)
    assert tiny_corpus.finetune_directions == [(1, 2)]


def test_language_sizes_corpus(tiny_languages):
    languages, vocab = tiny_languages
    corpus = build_corpus(languages, vocab, build_graph(3), sizes=1, length_range=(2, 3), seed=0,
                          n_valid=1, n_test=1, language_sizes=[0, 5, 2])
    counts = {}
    for inst in corpus.train:
        counts[inst.direction] = counts.get(inst.direction, 0) + 1
    assert counts == {(0, 1): 5, (1, 0): 5, (0, 2): 2, (2, 0): 2}


def test_test_lengths_in_range(tiny_corpus):
    lengths = np.array([len(i.concepts) for i in tiny_corpus.test + tiny_corpus.train])
    assert lengths.min() >= 2 and lengths.max() <= 4
