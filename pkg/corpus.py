"""
Synthetic multilingual translation corpus.

Each artificial language renders a sequence of shared concepts with its own
surface vocabulary (disjoint across languages) and its own word-order rule.
Because no surface token is shared, the language of any generated token is
known exactly, which makes the off-target ratio an exact count.

Vocabulary layout:
    0 <pad>, 1 <s>, 2 </s>
    3 .. 3+K-1            language tags <2L0> .. <2L{K-1}>
    3+K + l*C .. +C-1     surface tokens of language l
"""

import json
import logging
import os
import random
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, UnknownLanguageError
from utils import atomic_write_text, direction_name, format_ids, parse_direction, parse_ids

logger = logging.getLogger(__name__)

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPECIAL_TOKENS = ["<pad>", "<s>", "</s>"]

IDENTITY, REVERSE, ROTATE_1 = "identity", "reverse", "rotate_1"
REORDER_RULES = (IDENTITY, REVERSE, ROTATE_1)

SPLIT_SEEDS = {"train": 0, "valid": 1, "test": 2, "finetune": 3}

Direction = Tuple[int, int]


# ------------------------------
# Word-order rules
# ------------------------------

def _rotation(rule: str) -> int:
    if not rule.startswith("rotate_"):
        raise ConfigError(f"Unknown reorder rule: {rule}")
    return int(rule[len("rotate_"):])


def apply_reorder(rule: str, seq: Sequence[int]) -> List[int]:
    """Apply identity / reverse / rotate_k to a concept sequence."""
    seq = list(seq)
    if rule == IDENTITY:
        return seq
    if rule == REVERSE:
        return seq[::-1]
    k = _rotation(rule) % len(seq) if seq else 0
    return seq[k:] + seq[:k]


def invert_reorder(rule: str, seq: Sequence[int]) -> List[int]:
    seq = list(seq)
    if rule in (IDENTITY, REVERSE):
        return apply_reorder(rule, seq)
    k = _rotation(rule) % len(seq) if seq else 0
    return seq[len(seq) - k:] + seq[:len(seq) - k]


# ------------------------------
# Languages and vocabulary
# ------------------------------

class Vocabulary:
    """Bijection between token strings and ids."""

    def __init__(self, num_languages: int, concepts: int):
        self.num_languages = num_languages
        self.concepts = concepts
        self.tokens = list(SPECIAL_TOKENS)
        self.tokens += [f"<2L{l}>" for l in range(num_languages)]
        self.tokens += [f"L{l}_w{k}" for l in range(num_languages) for k in range(concepts)]
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def first_surface_id(self) -> int:
        return len(SPECIAL_TOKENS) + self.num_languages

    def tag_id(self, lang: int) -> int:
        if not 0 <= lang < self.num_languages:
            raise UnknownLanguageError(f"Unknown language: {lang}")
        return len(SPECIAL_TOKENS) + lang

    def is_tag(self, token_id: int) -> bool:
        return len(SPECIAL_TOKENS) <= token_id < self.first_surface_id

    def language_of(self, token_id: int) -> Optional[int]:
        """Language owning a surface token; None for specials and tags."""
        offset = int(token_id) - self.first_surface_id
        if offset < 0 or token_id >= self.size:
            return None
        return offset // self.concepts

    def token_to_id(self, token: str) -> int:
        return self.index[token]

    def id_to_token(self, token_id: int) -> str:
        return self.tokens[token_id]


@dataclass(frozen=True)
class LanguageSpec:
    """One artificial language: its tag, surface words and word order."""
    lang_id: int
    tag_token: int
    surface_tokens: Tuple[int, ...]
    reorder_rule: str

    def render(self, concepts: Sequence[int]) -> List[int]:
        """Surface ids of the concepts in this language's word order."""
        return [self.surface_tokens[c] for c in apply_reorder(self.reorder_rule, concepts)]

    def concepts_of(self, tokens: Sequence[int]) -> List[int]:
        """Inverse of render."""
        lookup = {tok: c for c, tok in enumerate(self.surface_tokens)}
        try:
            ordered = [lookup[int(t)] for t in tokens]
        except KeyError as e:
            raise ConfigError(f"token {e.args[0]} is not a word of language {self.lang_id}") from None
        return invert_reorder(self.reorder_rule, ordered)


def build_languages(num_languages: int, concepts: int, seed: int) -> Tuple[List[LanguageSpec], Vocabulary]:
    """
    Create K languages over C shared concepts.

    Each language owns a contiguous block of C surface ids; the seed shuffles
    which id of the block expresses which concept. Reorder rules are assigned
    round-robin identity, reverse, rotate_1.

    Raises:
        ConfigError: K < 2 or C < 2
    """
    if num_languages < 2:
        raise ConfigError(f"need at least 2 languages, got {num_languages}")
    if concepts < 2:
        raise ConfigError(f"need at least 2 concepts per language, got {concepts}")
    vocab = Vocabulary(num_languages, concepts)
    rng = np.random.default_rng(seed)
    languages = []
    for lang in range(num_languages):
        base = vocab.first_surface_id + lang * concepts
        perm = rng.permutation(concepts)
        languages.append(LanguageSpec(
            lang_id=lang,
            tag_token=vocab.tag_id(lang),
            surface_tokens=tuple(int(base + p) for p in perm),
            reorder_rule=REORDER_RULES[lang % len(REORDER_RULES)],
        ))
    return languages, vocab


# ------------------------------
# Connectivity
# ------------------------------

@dataclass(frozen=True)
class ConnectivityGraph:
    """Which directions are supervised; every other direction is zero-shot."""
    num_languages: int
    pivot: int
    groups: Tuple[Tuple[int, ...], ...]
    bridges: Tuple[int, ...]
    edges: frozenset

    def is_supervised(self, src: int, tgt: int) -> bool:
        return (src, tgt) in self.edges

    def directions(self) -> List[Direction]:
        K = self.num_languages
        return [(s, t) for s in range(K) for t in range(K) if s != t]

    def supervised_directions(self) -> List[Direction]:
        return sorted(self.edges)

    def zero_shot_directions(self) -> List[Direction]:
        return [d for d in self.directions() if d not in self.edges]


def build_graph(num_languages: int, pivot: int = 0,
                groups: Optional[Sequence[Sequence[int]]] = None,
                bridges: Sequence[int] = ()) -> ConnectivityGraph:
    """
    Supervision graph: the pivot connects to everyone, bridges connect to
    each other and to every member of their own group.

    With no bridges this is the star graph with 2(K-1) supervised directions.
    """
    K = num_languages
    if not 0 <= pivot < K:
        raise ConfigError(f"pivot {pivot} outside 0..{K - 1}")
    groups = tuple(tuple(int(m) for m in g) for g in (groups or ()))
    bridges = tuple(int(b) for b in bridges)
    for b in bridges:
        if not 0 <= b < K:
            raise ConfigError(f"bridge {b} outside 0..{K - 1}")

    edges = set()

    def connect(a, b):
        if a != b:
            edges.add((a, b))
            edges.add((b, a))

    for lang in range(K):
        connect(pivot, lang)
    for a in bridges:
        for b in bridges:
            connect(a, b)
    for b in bridges:
        for group in groups:
            if b in group:
                for member in group:
                    connect(b, member)
    return ConnectivityGraph(K, pivot, groups, bridges, frozenset(edges))


# ------------------------------
# Instances
# ------------------------------

@dataclass(frozen=True)
class TranslationInstance:
    src_lang: int
    tgt_lang: int
    concepts: Tuple[int, ...]
    x: Tuple[int, ...]
    y: Tuple[int, ...]

    @property
    def direction(self) -> Direction:
        return (self.src_lang, self.tgt_lang)


def generate_instance(languages: Sequence[LanguageSpec], src_lang: int, tgt_lang: int,
                      length_range: Tuple[int, int],
                      seed: Union[int, np.random.Generator]) -> TranslationInstance:
    """
    Sample concepts uniformly with replacement and render both sides.

    Args:
        languages: language specs
        src_lang, tgt_lang: language ids
        length_range: inclusive (Lmin, Lmax), Lmin >= 1
        seed: int seed or a numpy Generator to draw from
    """
    lmin, lmax = length_range
    if lmin < 1 or lmax < lmin:
        raise ConfigError(f"invalid length range {length_range}")
    rng = np.random.default_rng(seed)
    concepts_per_language = len(languages[0].surface_tokens)
    length = int(rng.integers(lmin, lmax + 1))
    concepts = tuple(int(c) for c in rng.integers(0, concepts_per_language, size=length))
    src, tgt = _language(languages, src_lang), _language(languages, tgt_lang)
    return TranslationInstance(src_lang, tgt_lang, concepts,
                               tuple(src.render(concepts)), tuple(tgt.render(concepts)))


def _language(languages: Sequence[LanguageSpec], lang: int) -> LanguageSpec:
    if not 0 <= lang < len(languages):
        raise UnknownLanguageError(f"Unknown language: {lang}")
    return languages[lang]


def encode(instance: TranslationInstance, languages: Sequence[LanguageSpec]) -> Tuple[List[int], List[int]]:
    """
    Model streams for one instance.

    Returns:
        (x', target stream) where x' = [tag(tgt)] ++ x ++ [eos] and the target
        stream is y ++ [eos]; the decoder input is bos ++ y (see layout.pack_sequence)
    """
    tag = _language(languages, instance.tgt_lang).tag_token
    _language(languages, instance.src_lang)
    return [tag, *instance.x, EOS_ID], [*instance.y, EOS_ID]


def decode_source(source_ids: Sequence[int]) -> List[int]:
    """Recover x from x' by stripping the tag and trailing eos."""
    ids = list(source_ids)[1:]
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return ids


def strip_hypothesis(ids: Sequence[int]) -> List[int]:
    """Cut a generated sequence at its first eos."""
    out = []
    for tok in ids:
        if tok == EOS_ID:
            break
        out.append(int(tok))
    return out


# ------------------------------
# Corpus
# ------------------------------

@dataclass
class SyntheticCorpus:
    languages: List[LanguageSpec]
    vocab: Vocabulary
    graph: ConnectivityGraph
    train: List[TranslationInstance]
    valid: List[TranslationInstance]
    test: List[TranslationInstance]
    finetune: List[TranslationInstance] = field(default_factory=list)
    finetune_directions: List[Direction] = field(default_factory=list)
    seed: int = 0
    edge_sizes: Dict[Direction, int] = field(default_factory=dict)

    def split(self, name: str) -> List[TranslationInstance]:
        return getattr(self, name)

    def identity(self) -> Dict[str, int]:
        """The settings that fix the token-id mapping."""
        return {"num_languages": self.vocab.num_languages, "concepts": self.vocab.concepts, "seed": self.seed}


def resolve_edge_sizes(graph: ConnectivityGraph,
                       sizes: Union[int, Mapping[Direction, int]],
                       language_sizes: Optional[Sequence[int]] = None) -> Dict[Direction, int]:
    """
    Per-edge training sizes.

    Args:
        graph: supervision graph
        sizes: one size for every supervised edge, or an explicit mapping
        language_sizes: optional per-language sizes (resource tiers); an edge
                        takes the size of its non-pivot endpoint

    Raises:
        ConfigError: a zero-shot edge is requested, or an edge gets size < 1
    """
    if language_sizes is not None:
        if len(language_sizes) != graph.num_languages:
            raise ConfigError("language_sizes needs one entry per language")
        resolved = {}
        for s, t in graph.supervised_directions():
            other = t if s == graph.pivot else s
            resolved[(s, t)] = int(language_sizes[other])
    elif isinstance(sizes, Mapping):
        resolved = {tuple(k): int(v) for k, v in sizes.items()}
        for edge in resolved:
            if edge not in graph.edges:
                raise ConfigError(f"zero-shot direction {direction_name(*edge)} requested in train")
        for edge in graph.supervised_directions():
            resolved.setdefault(edge, 0)
    else:
        resolved = {edge: int(sizes) for edge in graph.supervised_directions()}

    for edge, n in resolved.items():
        if n < 1:
            raise ConfigError(f"supervised direction {direction_name(*edge)} needs >= 1 training instance")
    return dict(sorted(resolved.items()))


def _split_instances(languages, directions_with_counts, length_range, seed, split):
    instances = []
    for (s, t), n in directions_with_counts:
        rng = np.random.default_rng([seed, SPLIT_SEEDS[split], s, t])
        instances.extend(generate_instance(languages, s, t, length_range, rng) for _ in range(n))
    return instances


def build_corpus(languages: Sequence[LanguageSpec], vocab: Vocabulary, graph: ConnectivityGraph,
                 sizes: Union[int, Mapping[Direction, int]], length_range: Tuple[int, int],
                 seed: int, n_valid: int = 50, n_test: int = 50,
                 language_sizes: Optional[Sequence[int]] = None) -> SyntheticCorpus:
    """
    Draw train/valid/test splits.

    Train and valid come only from supervised edges; test covers all K(K-1)
    directions with n_test instances each. Every (split, direction) pair has
    its own seed stream.
    """
    edge_sizes = resolve_edge_sizes(graph, sizes, language_sizes)
    train = _split_instances(languages, edge_sizes.items(), length_range, seed, "train")
    valid = _split_instances(languages, [(e, n_valid) for e in edge_sizes], length_range, seed, "valid")
    test = _split_instances(languages, [(d, n_test) for d in graph.directions()], length_range, seed, "test")
    logger.info("Corpus built: %d train, %d valid, %d test instances over %d supervised directions",
                len(train), len(valid), len(test), len(edge_sizes))
    return SyntheticCorpus(list(languages), vocab, graph, train, valid, test,
                           seed=seed, edge_sizes=edge_sizes)


def select_finetune_directions(graph: ConnectivityGraph, count: int, seed: int = 0) -> List[Direction]:
    """Pick `count` directions with random.sample over the sorted direction list."""
    directions = graph.directions()
    if not 0 < count <= len(directions):
        raise ConfigError(f"cannot select {count} of {len(directions)} directions")
    return random.Random(seed).sample(directions, count)


def add_finetune_split(corpus: SyntheticCorpus, directions: Sequence[Direction], per_direction: int,
                       length_range: Tuple[int, int]):
    """Generate a fine-tuning split for chosen (possibly zero-shot) directions."""
    corpus.finetune_directions = [tuple(d) for d in directions]
    corpus.finetune = _split_instances(corpus.languages, [(d, per_direction) for d in directions],
                                       length_range, corpus.seed, "finetune")


# ------------------------------
# Line-oriented text format
# ------------------------------

def format_instance(instance: TranslationInstance) -> str:
    return "\t".join([str(instance.src_lang), str(instance.tgt_lang),
                      format_ids(instance.x), format_ids(instance.y)])


def parse_instance(line: str, languages: Sequence[LanguageSpec]) -> TranslationInstance:
    fields = line.rstrip("\n").split("\t")
    if len(fields) != 4:
        raise ConfigError(f"expected 4 tab-separated fields, got {len(fields)}: {line!r}")
    src, tgt = int(fields[0]), int(fields[1])
    x, y = tuple(parse_ids(fields[2])), tuple(parse_ids(fields[3]))
    concepts = tuple(_language(languages, src).concepts_of(x))
    if _language(languages, tgt).render(concepts) != list(y):
        raise ConfigError(f"target side does not translate the source: {line!r}")
    return TranslationInstance(src, tgt, concepts, x, y)


def write_instances(path: str, instances: Sequence[TranslationInstance]):
    atomic_write_text(path, "".join(format_instance(inst) + "\n" for inst in instances))


def read_instances(path: str, languages: Sequence[LanguageSpec]) -> List[TranslationInstance]:
    with open(path, "r", encoding="utf-8", newline="\n") as f:
        return [parse_instance(line, languages) for line in f if line.strip()]


def _edge_key(edge: Direction) -> str:
    return direction_name(*edge)


def save_corpus(corpus: SyntheticCorpus, out_dir: str, length_range: Tuple[int, int]):
    """Write every split plus manifest.json describing languages and edges."""
    os.makedirs(out_dir, exist_ok=True)
    splits = ["train", "valid", "test"] + (["finetune"] if corpus.finetune else [])
    for name in splits:
        write_instances(os.path.join(out_dir, f"{name}.tsv"), corpus.split(name))
    manifest = {
        "num_languages": corpus.vocab.num_languages,
        "concepts": corpus.vocab.concepts,
        "seed": corpus.seed,
        "vocab_size": corpus.vocab.size,
        "length_range": list(length_range),
        "pivot": corpus.graph.pivot,
        "groups": [list(g) for g in corpus.graph.groups],
        "bridges": list(corpus.graph.bridges),
        "supervised_edges": [list(e) for e in corpus.graph.supervised_directions()],
        "zero_shot_edges": [list(e) for e in corpus.graph.zero_shot_directions()],
        "edge_sizes": {_edge_key(e): n for e, n in corpus.edge_sizes.items()},
        "finetune_directions": [list(d) for d in corpus.finetune_directions],
        "splits": {name: len(corpus.split(name)) for name in splits},
    }
    atomic_write_text(os.path.join(out_dir, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_corpus(corpus_dir: str) -> SyntheticCorpus:
    """Rebuild languages from the manifest and read the split files."""
    manifest_path = os.path.join(corpus_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ConfigError(f"corpus manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    languages, vocab = build_languages(manifest["num_languages"], manifest["concepts"], manifest["seed"])
    graph = build_graph(manifest["num_languages"], manifest["pivot"], manifest["groups"], manifest["bridges"])

    def read(name):
        path = os.path.join(corpus_dir, f"{name}.tsv")
        return read_instances(path, languages) if os.path.exists(path) else []

    edge_sizes = {parse_direction(key): n for key, n in manifest["edge_sizes"].items()}
    return SyntheticCorpus(
        languages, vocab, graph, read("train"), read("valid"), read("test"),
        finetune=read("finetune"),
        finetune_directions=[tuple(d) for d in manifest.get("finetune_directions", [])],
        seed=manifest["seed"],
        edge_sizes=dict(sorted(edge_sizes.items())),
    )
