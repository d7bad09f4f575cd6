"""
Mechanism analyses for register models: which source tokens the registers
attend to, how close block-level representations are layer by layer, and a
raw hidden-state export for external 2-D projection.
"""

import csv
import io
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from corpus import BOS_ID, PAD_ID, LanguageSpec, TranslationInstance, encode
from errors import UnsupportedVariantError
from layout import PackedSequence, SequenceLayout, Variant, pack_batch, pack_sequence
from model import Capture, ModelParams, forward
from tensor import no_grad
from utils import atomic_write_text, direction_name

logger = logging.getLogger(__name__)

PAIRS = (("src", "reg"), ("reg", "tgt"), ("src", "tgt"))


def _require_registers(variant: Variant):
    if not variant.has_registers:
        raise UnsupportedVariantError(f"analysis needs a register variant, got {variant}")


def sample_instances(instances: Sequence[TranslationInstance], count: int = 100,
                     seed: int = 0) -> List[TranslationInstance]:
    """`count` instances drawn without replacement (all of them if fewer)."""
    count = min(count, len(instances))
    picks = np.random.default_rng(seed).choice(len(instances), size=count, replace=False)
    return [instances[int(i)] for i in picks]


def _packed(inst: TranslationInstance, languages, variant) -> PackedSequence:
    return pack_sequence(*encode(inst, languages), variant, BOS_ID)


def _capture(params: ModelParams, seq: PackedSequence) -> Capture:
    capture = Capture()
    with no_grad():
        forward(params, pack_batch([seq], PAD_ID), train=False, capture=capture)
    return capture


# ------------------------------
# Register attention statistics
# ------------------------------

@dataclass
class AttentionStats:
    top1: float       # mean attention mass on the most attended source token
    top2: float       # ... on the second most attended one
    dist: float       # mean |position(top1) - position(top2)|
    entropy: float    # mean entropy (nats) of the top-1 source index over registers
    sentences: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def sentence_attention_stats(attention: np.ndarray, layout: SequenceLayout) -> Tuple[float, float, float, float]:
    """
    Statistics for one sentence from its head-mean attention matrix.

    Raw post-softmax mass is used (no renormalization over the source).
    Ties go to the lower source position.
    """
    src = attention[layout.reg_slice, layout.src_slice]
    order = np.argsort(-src, axis=1, kind="stable")
    rows = np.arange(src.shape[0])
    first, second = order[:, 0], order[:, 1]
    top1 = src[rows, first]
    top2 = src[rows, second]
    dist = np.abs(first - second).astype(np.float64)
    counts = np.bincount(first, minlength=layout.src_len).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    entropy = float(-(p * np.log(p)).sum())
    return float(top1.mean()), float(top2.mean()), float(dist.mean()), entropy


def attention_stats_from_matrices(items: Sequence[Tuple[np.ndarray, SequenceLayout]]) -> AttentionStats:
    """Average the per-sentence statistics of (attention matrix, layout) pairs."""
    if not items:
        return AttentionStats(0.0, 0.0, 0.0, 0.0, 0)
    for _, layout in items:
        _require_registers(layout.variant)
    per_sentence = np.array([sentence_attention_stats(a, layout) for a, layout in items])
    top1, top2, dist, entropy = per_sentence.mean(axis=0)
    return AttentionStats(float(top1), float(top2), float(dist), float(entropy), len(items))


def register_attention_stats(params: ModelParams, instances: Sequence[TranslationInstance],
                             languages: Sequence[LanguageSpec], variant=None,
                             layer: Optional[int] = None) -> AttentionStats:
    """
    Register-to-source attention statistics.

    Args:
        layer: a fixed layer, or None to average attention over all layers first

    Raises:
        UnsupportedVariantError: variant without registers
    """
    variant = Variant.parse(variant if variant is not None else params.config.variant)
    _require_registers(variant)
    if layer is not None and not 0 <= layer < params.config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{params.config.n_layers - 1}")
    items = []
    for inst in instances:
        seq = _packed(inst, languages, variant)
        n = seq.layout.length
        head_mean = [a[0].mean(axis=0)[:n, :n] for a in _capture(params, seq).attention]
        matrix = np.mean(head_mean, axis=0) if layer is None else head_mean[layer]
        items.append((matrix, seq.layout))
    stats = attention_stats_from_matrices(items)
    logger.info("Register attention over %d sentences: top1 %.3f top2 %.3f dist %.2f entropy %.3f",
                stats.sentences, stats.top1, stats.top2, stats.dist, stats.entropy)
    return stats


# ------------------------------
# Layer-wise similarity
# ------------------------------

def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.dot(a, b) / denom) if denom > 0 else 0.0


def pooled_blocks(hidden: np.ndarray, layout: SequenceLayout) -> Dict[str, np.ndarray]:
    """Mean-pool [L, d] states within each block."""
    return {"src": hidden[layout.src_slice].mean(axis=0),
            "reg": hidden[layout.reg_slice].mean(axis=0),
            "tgt": hidden[layout.tgt_slice].mean(axis=0)}


def layer_similarity(params: ModelParams, instances: Sequence[TranslationInstance],
                     languages: Sequence[LanguageSpec], variant=None) -> List[Dict[str, float]]:
    """
    Per layer (0 = embeddings .. n_layers): cosine similarity of mean-pooled
    block representations, averaged over instances. Targets are teacher-forced.
    """
    variant = Variant.parse(variant if variant is not None else params.config.variant)
    _require_registers(variant)
    n_layers = params.config.n_layers
    sums = np.zeros((n_layers + 1, len(PAIRS)))
    for inst in instances:
        seq = _packed(inst, languages, variant)
        n = seq.layout.length
        for i, hidden in enumerate(_capture(params, seq).hidden):
            pooled = pooled_blocks(hidden[0, :n], seq.layout)
            sums[i] += [cosine(pooled[a], pooled[b]) for a, b in PAIRS]
    means = sums / max(len(instances), 1)
    return [{"layer": i, **{f"{a}_{b}": float(means[i, k]) for k, (a, b) in enumerate(PAIRS)}}
            for i in range(n_layers + 1)]


def similarity_csv(rows: Sequence[Dict[str, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["layer"] + [f"{a}_{b}" for a, b in PAIRS]
    writer.writerow(header)
    for row in rows:
        writer.writerow([row["layer"]] + [f"{row[k]:.6f}" for k in header[1:]])
    return buf.getvalue()


# ------------------------------
# Hidden-state export
# ------------------------------

def export_hidden(params: ModelParams, instances: Sequence[TranslationInstance],
                  languages: Sequence[LanguageSpec], layer: int, path: str, variant=None) -> int:
    """
    Write one CSV row per token: f0..f{d-1}, block, lang, direction.

    Source rows are labeled with the source language; register and target
    rows with the target language. Returns the row count.
    """
    variant = Variant.parse(variant if variant is not None else params.config.variant)
    if not 0 <= layer <= params.config.n_layers:
        raise IndexError(f"layer {layer} outside 0..{params.config.n_layers}")
    d = params.config.d_model
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"f{i}" for i in range(d)] + ["block", "lang", "direction"])
    rows = 0
    for inst in instances:
        seq = _packed(inst, languages, variant)
        layout = seq.layout
        hidden = _capture(params, seq).hidden[layer][0, :layout.length]
        for pos in range(layout.length):
            block = layout.block_of(pos)
            lang = inst.src_lang if block == "src" else inst.tgt_lang
            writer.writerow([repr(float(v)) for v in hidden[pos]]
                            + [block, lang, direction_name(inst.src_lang, inst.tgt_lang)])
            rows += 1
    atomic_write_text(path, buf.getvalue())
    logger.info("Exported %d hidden states (layer %d) to %s", rows, layer, path)
    return rows
