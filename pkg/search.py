"""
Decoding: greedy and beam search over a register-aware KV cache.

Decoding runs in two phases. `precompute_prefix` pushes x' ++ r through the
model once; for variants whose targets never read the source (registering,
ratio) the source keys/values are then dropped, leaving only register entries.
Each generated token is fed through `model.decode_step`, which attends only to
retained entries visible under the variant's mask.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from corpus import BOS_ID, EOS_ID, LanguageSpec, encode, read_instances, strip_hypothesis
from errors import ConfigError, UnsupportedVariantError
from layout import SequenceLayout, Variant, build_layout, incremental_mask_row
from model import KVCache, ModelParams, decode_step, encode_prefix
from utils import atomic_write_text, format_ids

logger = logging.getLogger(__name__)


@dataclass
class DecodeState:
    """Cache and progress of one hypothesis; treat as immutable, `feed` returns a new one."""
    params: ModelParams
    layout: SequenceLayout
    cache: KVCache
    generated: Tuple[int, ...] = ()
    score: float = 0.0
    attended_keys: Tuple[int, ...] = ()

    @property
    def cache_length(self) -> int:
        return self.cache.length

    def feed(self, token: int) -> Tuple[np.ndarray, "DecodeState"]:
        """Feed the next decoder input; returns next-token log-probs and the new state."""
        j = len(self.generated) + 1
        position = self.layout.prefix_len + j - 1
        log_probs, cache, attended = decode_step(self.params, self.cache, token, position,
                                                 incremental_mask_row(self.layout, j))
        return log_probs, replace(self, cache=cache, attended_keys=self.attended_keys + (attended,))

    def extend(self, token: int, log_prob: float) -> "DecodeState":
        return replace(self, generated=self.generated + (int(token),), score=self.score + float(log_prob))


def prefix_tokens(source_ids: Sequence[int], layout: SequenceLayout) -> np.ndarray:
    """x' followed by reg_len copies of its tag."""
    source_ids = list(source_ids)
    return np.asarray(source_ids + [source_ids[0]] * layout.reg_len, dtype=np.int64)


def precompute_prefix(params: ModelParams, source_ids: Sequence[int], variant=None,
                      drop_source: Optional[bool] = None) -> DecodeState:
    """
    Prefix phase: cache keys/values of x' ++ r.

    Args:
        params: model
        source_ids: x' (tag first)
        variant: layout variant (default: the model's)
        drop_source: discard source entries after the pass; defaults to True
                     exactly when targets cannot read the source

    Raises:
        LengthError: the prefix does not fit max_positions
        UnsupportedVariantError: drop_source requested for a variant whose
                                 targets read the source
    """
    variant = Variant.parse(variant if variant is not None else params.config.variant)
    layout = build_layout(len(source_ids), 1, variant)
    if drop_source is None:
        drop_source = variant.hides_source
    if drop_source and not variant.hides_source:
        raise UnsupportedVariantError(f"variant {variant} reads the source while decoding; cannot drop it")
    cache = encode_prefix(params, prefix_tokens(source_ids, layout), layout)
    if drop_source:
        cache = cache.select(cache.columns >= layout.src_len)
    return DecodeState(params, layout, cache)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 8


def _effective_max_len(state: DecodeState, max_len: Optional[int]) -> int:
    if max_len is None:
        max_len = default_max_len(state.layout.src_len)
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    room = state.params.config.max_positions - state.layout.prefix_len
    return min(max_len, room)


def decode_greedy(state: DecodeState, max_len: Optional[int] = None,
                  history: Optional[List[np.ndarray]] = None) -> List[int]:
    """
    Argmax decoding (ties go to the lowest token id); stops after eos or
    max_len tokens. The returned ids include the eos when one was produced.

    `history`, when given, receives the log-prob vector of every step.
    """
    max_len = _effective_max_len(state, max_len)
    token = BOS_ID
    while len(state.generated) < max_len:
        log_probs, state = state.feed(token)
        if history is not None:
            history.append(log_probs)
        token = int(np.argmax(log_probs))
        state = state.extend(token, log_probs[token])
        if token == EOS_ID:
            break
    return list(state.generated)


# ------------------------------
# Beam search
# ------------------------------

class Scorer(Protocol):
    """Next-token distribution source for beam search."""

    def step(self, state: Any, token: int) -> Tuple[np.ndarray, Any]:
        """Feed `token`, return (log-probs over the vocabulary, next state)."""


class ModelScorer:
    def step(self, state: DecodeState, token: int):
        return state.feed(token)


@dataclass
class BeamHypothesis:
    tokens: Tuple[int, ...]
    score: float
    finished: bool = False
    state: Any = field(default=None, repr=False, compare=False)

    def ranking_score(self, length_norm: bool) -> float:
        if length_norm and self.tokens:
            return self.score / len(self.tokens)
        return self.score


class BeamSearch:
    """Standard beam search with deterministic tie-breaking."""

    def __init__(self, scorer: Scorer, beam: int = 5, eos_id: int = EOS_ID, bos_id: int = BOS_ID,
                 length_norm: bool = True):
        """
        Args:
            scorer: provides next-token log-probs
            beam: beam width (>= 1)
            eos_id, bos_id: end token, and the first decoder input
            length_norm: rank finished hypotheses by log-prob / length
        """
        if beam < 1:
            raise ConfigError(f"beam must be >= 1, got {beam}")
        self.scorer = scorer
        self.beam = beam
        self.eos_id = eos_id
        self.bos_id = bos_id
        self.length_norm = length_norm
        self.expansions = 0

    def search(self, initial_state: Any, max_len: int) -> BeamHypothesis:
        """Best hypothesis within max_len tokens."""
        if max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {max_len}")
        self.expansions = 0
        alive = [BeamHypothesis((), 0.0, False, initial_state)]
        finished: List[BeamHypothesis] = []

        for _ in range(max_len):
            candidates = []
            for hyp in alive:
                token = hyp.tokens[-1] if hyp.tokens else self.bos_id
                log_probs, next_state = self.scorer.step(hyp.state, token)
                self.expansions += 1
                # 2*beam candidates per hypothesis leave room for eos completions
                k = min(len(log_probs), 2 * self.beam)
                top = np.lexsort((np.arange(len(log_probs)), -log_probs))[:k]
                for tok in top:
                    candidates.append((hyp.score + float(log_probs[tok]), hyp.tokens + (int(tok),), next_state))
            candidates.sort(key=lambda c: (-c[0], c[1]))

            alive = []
            for score, tokens, state in candidates:
                if tokens[-1] == self.eos_id:
                    finished.append(BeamHypothesis(tokens, score, True, state))
                else:
                    alive.append(BeamHypothesis(tokens, score, False, state))
                if len(alive) == self.beam:
                    break
            if len(finished) >= self.beam or not alive:
                break

        pool = finished or alive
        pool = sorted(pool, key=lambda h: (-h.ranking_score(self.length_norm), h.tokens))
        logger.debug("Beam search: %d expansions, %d finished", self.expansions, len(finished))
        return pool[0]


def decode_beam(state: DecodeState, beam: int = 5, max_len: Optional[int] = None,
                length_norm: bool = True) -> List[int]:
    """Beam search over the model; returned ids include the final eos when produced."""
    max_len = _effective_max_len(state, max_len)
    return list(BeamSearch(ModelScorer(), beam, length_norm=length_norm).search(state, max_len).tokens)


def translate(params: ModelParams, source_ids: Sequence[int], variant=None, beam: int = 5,
              max_len: Optional[int] = None, length_norm: bool = True) -> List[int]:
    """Decode x' and return the hypothesis with everything from eos on removed."""
    state = precompute_prefix(params, source_ids, variant)
    if beam == 1:
        ids = decode_greedy(state, max_len)
    else:
        ids = decode_beam(state, beam, max_len, length_norm)
    return strip_hypothesis(ids)


def translate_file(params: ModelParams, languages: Sequence[LanguageSpec], in_path: str, out_path: str,
                   variant=None, beam: int = 5) -> int:
    """
    Batch-translate a corpus-format file; writes
    `src_lang<TAB>tgt_lang<TAB>hypothesis ids` per line. Returns the line count.
    """
    instances = read_instances(in_path, languages)
    lines = []
    for inst in instances:
        source_ids, _ = encode(inst, languages)
        hyp = translate(params, source_ids, variant, beam)
        lines.append(f"{inst.src_lang}\t{inst.tgt_lang}\t{format_ids(hyp)}\n")
    atomic_write_text(out_path, "".join(lines))
    logger.info("Translated %d sentences into %s", len(lines), out_path)
    return len(lines)
