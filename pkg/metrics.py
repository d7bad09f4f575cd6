"""
Translation quality metrics and the grouped evaluation report.

BLEU works on token ids (synthetic tokens need no tokenizer). Because every
surface token belongs to exactly one language, the off-target ratio is an
exact count rather than a language-ID estimate.
"""

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from sacrebleu.metrics import BLEU

from corpus import ConnectivityGraph, LanguageSpec, TranslationInstance, Vocabulary, encode
from errors import ConfigError
from model import ModelParams
from search import translate
from utils import atomic_write_text, direction_name, thread_count

logger = logging.getLogger(__name__)


# ------------------------------
# BLEU
# ------------------------------

def _joined(tokens: Sequence[int]) -> str:
    return " ".join(str(int(t)) for t in tokens)


def bleu(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]],
         max_ngram: int = 4, smoothing: bool = True) -> float:
    """
    Corpus BLEU on token ids, 0..100.

    Ids are scored as whitespace-separated words with sacrebleu, tokenizer off.
    Unigram precision is unsmoothed; with `smoothing`, orders n > 1 use
    (matches + 1) / (total + 1). Brevity penalty exp(1 - r/c) when c <= r.

    Raises:
        ConfigError: empty corpus or hypothesis/reference count mismatch
    """
    if len(hypotheses) != len(references):
        raise ConfigError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not references:
        raise ConfigError("BLEU of an empty corpus")
    if smoothing:
        metric = BLEU(tokenize="none", smooth_method="add-k", smooth_value=1, max_ngram_order=max_ngram,
                      force=True)
    else:
        metric = BLEU(tokenize="none", smooth_method="none", max_ngram_order=max_ngram, force=True)
    score = metric.corpus_score([_joined(h) for h in hypotheses], [[_joined(r) for r in references]])
    return float(score.score)


# ------------------------------
# Off-target and accuracy
# ------------------------------

def sentence_language(tokens: Sequence[int], vocab: Vocabulary) -> Dict[int, int]:
    """Surface-token count per language; specials and tags are skipped."""
    counts: Dict[int, int] = {}
    for tok in tokens:
        lang = vocab.language_of(int(tok))
        if lang is not None:
            counts[lang] = counts.get(lang, 0) + 1
    return counts


def is_off_target(tokens: Sequence[int], intended: int, vocab: Vocabulary) -> bool:
    """Off-target unless the intended language holds a (possibly shared) majority."""
    counts = sentence_language(tokens, vocab)
    mine = counts.get(intended, 0)
    return mine == 0 or any(n > mine for n in counts.values())


def off_target_ratio(hypotheses: Sequence[Sequence[int]], intended: Sequence[int], vocab: Vocabulary) -> float:
    """Percentage of off-target sentences; empty hypotheses count as off-target."""
    if len(hypotheses) != len(intended):
        raise ConfigError(f"{len(hypotheses)} hypotheses but {len(intended)} intended languages")
    if not hypotheses:
        return 0.0
    off = sum(is_off_target(h, lang, vocab) for h, lang in zip(hypotheses, intended))
    return 100.0 * off / len(hypotheses)


def exact_match_accuracy(hypotheses: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    if not references:
        return 0.0
    return 100.0 * sum(list(h) == list(r) for h, r in zip(hypotheses, references)) / len(references)


# ------------------------------
# Report
# ------------------------------

METRICS = ("bleu", "accuracy", "off_target")


@dataclass
class DirectionScore:
    src_lang: int
    tgt_lang: int
    supervised: bool
    count: int
    bleu: float
    accuracy: float
    off_target: float

    @property
    def name(self) -> str:
        return direction_name(self.src_lang, self.tgt_lang)


def _weighted_mean(scores: Sequence[DirectionScore]) -> Dict[str, float]:
    total = sum(s.count for s in scores)
    if total == 0:
        return {m: float("nan") for m in METRICS}
    return {m: sum(getattr(s, m) * s.count for s in scores) / total for m in METRICS}


@dataclass
class MetricReport:
    """Per-direction scores plus supervised / zero-shot / overall aggregates."""
    directions: List[DirectionScore]
    beam: int = 5
    failed_directions: Dict[str, str] = field(default_factory=dict)

    @property
    def supervised(self) -> Dict[str, float]:
        return _weighted_mean([s for s in self.directions if s.supervised])

    @property
    def zero_shot(self) -> Dict[str, float]:
        return _weighted_mean([s for s in self.directions if not s.supervised])

    @property
    def overall(self) -> Dict[str, float]:
        return _weighted_mean(self.directions)

    def by_language(self) -> Dict[int, Dict[str, Dict[str, float]]]:
        """For each language: means over directions leaving it ('from') and entering it ('to')."""
        langs = sorted({s.src_lang for s in self.directions} | {s.tgt_lang for s in self.directions})
        return {lang: {"from": _weighted_mean([s for s in self.directions if s.src_lang == lang]),
                       "to": _weighted_mean([s for s in self.directions if s.tgt_lang == lang])}
                for lang in langs}

    def to_dict(self) -> dict:
        return {
            "beam": self.beam,
            "aggregates": {"supervised": self.supervised, "zero_shot": self.zero_shot, "overall": self.overall},
            "by_language": {f"L{lang}": groups for lang, groups in self.by_language().items()},
            "directions": [dict(asdict(s), direction=s.name) for s in self.directions],
            "failed_directions": self.failed_directions,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["direction", "src_lang", "tgt_lang", "supervised", "count", "bleu", "accuracy", "off_target"])
        for s in self.directions:
            writer.writerow([s.name, s.src_lang, s.tgt_lang, int(s.supervised), s.count,
                             f"{s.bleu:.4f}", f"{s.accuracy:.4f}", f"{s.off_target:.4f}"])
        return buf.getvalue()

    def write(self, json_path: str, csv_path: str):
        atomic_write_text(json_path, self.to_json())
        atomic_write_text(csv_path, self.to_csv())

    def summary(self) -> str:
        lines = []
        for label, agg in (("sup.", self.supervised), ("zero", self.zero_shot), ("avg.", self.overall)):
            lines.append(f"{label:5s} BLEU {agg['bleu']:6.2f}  acc {agg['accuracy']:6.2f}%  "
                         f"off-target {agg['off_target']:6.2f}%")
        return "\n".join(lines)


def score_direction(src: int, tgt: int, supervised: bool, hypotheses, references, vocab: Vocabulary) -> DirectionScore:
    return DirectionScore(
        src_lang=src, tgt_lang=tgt, supervised=supervised, count=len(references),
        bleu=bleu(hypotheses, references),
        accuracy=exact_match_accuracy(hypotheses, references),
        off_target=off_target_ratio(hypotheses, [tgt] * len(hypotheses), vocab),
    )


def evaluate(params: ModelParams, test: Sequence[TranslationInstance], languages: Sequence[LanguageSpec],
             vocab: Vocabulary, graph: ConnectivityGraph, beam: int = 5, variant=None,
             threads: Optional[int] = None, directions: Optional[Sequence[Tuple[int, int]]] = None) -> MetricReport:
    """
    Decode every test direction and score it.

    Directions are decoded on a thread pool (REGFORMER_THREADS workers by
    default); a direction whose decoding raises is recorded in
    `failed_directions` instead of aborting the run.
    """
    grouped: Dict[Tuple[int, int], List[TranslationInstance]] = {}
    for inst in test:
        grouped.setdefault(inst.direction, []).append(inst)
    wanted = sorted(grouped) if directions is None else [tuple(d) for d in directions]

    def run(direction):
        src, tgt = direction
        insts = grouped.get(direction, [])
        hyps = [translate(params, encode(inst, languages)[0], variant, beam) for inst in insts]
        refs = [list(inst.y) for inst in insts]
        score = score_direction(src, tgt, graph.is_supervised(src, tgt), hyps, refs, vocab)
        logger.info("%s: BLEU %.2f, off-target %.1f%%", score.name, score.bleu, score.off_target)
        return score

    workers = threads or thread_count()
    scores, failed = [], {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {d: pool.submit(run, d) for d in wanted}
        for d in wanted:
            try:
                scores.append(futures[d].result())
            except Exception as e:  # recorded per direction, reported by the CLI
                logger.error("Decoding %s failed: %s", direction_name(*d), e)
                failed[direction_name(*d)] = f"{type(e).__name__}: {e}"
    return MetricReport(scores, beam, failed)
