"""
Packed-sequence layout and attention visibility.

A translation instance is fed to the decoder as one packed sequence

    x' (tag, source tokens, eos) | r (registers) | target block (bos, y...)

and the attention mask decides which slot may read which. Four variants exist:

- vanilla: prefix LM; no registers, targets read the whole source.
- registering: registers read the source and each other; targets read only
  registers and earlier targets, never the source.
- registers_no_mask: registers are extra prefix tokens but the mask stays a
  causally extended prefix LM, so targets still read the source.
- ratio(rho): registering rules with len(r) = max(1, round(len(x') / rho)).
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from errors import ConfigError

VANILLA = "vanilla"
REGISTERING = "registering"
REGISTERS_NO_MASK = "registers_no_mask"
RATIO = "ratio"
VARIANT_KINDS = (VANILLA, REGISTERING, REGISTERS_NO_MASK, RATIO)

# Label value for positions that carry no training target.
IGNORE_LABEL = -1


@dataclass(frozen=True)
class Variant:
    """Model variant; `ratio` is only set for the ratio kind."""
    kind: str
    ratio: Optional[float] = None

    @classmethod
    def parse(cls, text) -> "Variant":
        """
        Parse 'vanilla', 'registering', 'registers_no_mask', 'ratio_1.25'
        or 'ratio(1.25)'.
        """
        if isinstance(text, Variant):
            return text
        text = str(text).strip()
        if text in (VANILLA, REGISTERING, REGISTERS_NO_MASK):
            return cls(text)
        if text.startswith(RATIO):
            number = text[len(RATIO):].strip("_()")
            try:
                return cls(RATIO, float(number))
            except ValueError:
                pass
        raise ConfigError(f"Unknown variant: {text}")

    @property
    def has_registers(self) -> bool:
        return self.kind != VANILLA

    @property
    def hides_source(self) -> bool:
        """True when target rows cannot read source columns."""
        return self.kind in (REGISTERING, RATIO)

    def __str__(self) -> str:
        if self.kind == RATIO:
            return f"ratio_{self.ratio:g}"
        return self.kind


@dataclass(frozen=True)
class SequenceLayout:
    """Block boundaries of one packed sequence."""
    src_len: int
    reg_len: int
    tgt_len: int
    variant: Variant

    @property
    def prefix_len(self) -> int:
        return self.src_len + self.reg_len

    @property
    def length(self) -> int:
        return self.src_len + self.reg_len + self.tgt_len

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.length)

    @property
    def src_slice(self) -> slice:
        return slice(0, self.src_len)

    @property
    def reg_slice(self) -> slice:
        return slice(self.src_len, self.prefix_len)

    @property
    def tgt_slice(self) -> slice:
        return slice(self.prefix_len, self.length)

    def block_of(self, index: int) -> str:
        if index < self.src_len:
            return "src"
        if index < self.prefix_len:
            return "reg"
        return "tgt"


def register_length(src_len: int, variant: Variant) -> int:
    """Number of register slots a source of length src_len gets."""
    if variant.kind == VANILLA:
        return 0
    if variant.kind in (REGISTERING, REGISTERS_NO_MASK):
        return src_len
    if variant.ratio is None or variant.ratio <= 0:
        raise ConfigError(f"ratio must be positive, got {variant.ratio}")
    # round half up
    return max(1, int(math.floor(src_len / variant.ratio + 0.5)))


def build_layout(src_len: int, tgt_len: int, variant) -> SequenceLayout:
    """
    Fix block sizes for a packed sequence.

    Args:
        src_len: length of x' (tag + source tokens + eos), at least 2
        tgt_len: length of the target block, at least 1
        variant: Variant or its string form

    Raises:
        ConfigError: lengths below minimum or a non-positive ratio
    """
    variant = Variant.parse(variant)
    if src_len < 2:
        raise ConfigError(f"src_len must be >= 2, got {src_len}")
    if tgt_len < 1:
        raise ConfigError(f"tgt_len must be >= 1, got {tgt_len}")
    return SequenceLayout(src_len, register_length(src_len, variant), tgt_len, variant)


def build_mask(layout: SequenceLayout) -> np.ndarray:
    """
    Boolean L x L visibility matrix (row attends to column when True).
    """
    L = layout.length
    s, r, t = layout.src_slice, layout.reg_slice, layout.tgt_slice
    mask = np.zeros((L, L), dtype=bool)
    causal_targets = np.tril(np.ones((layout.tgt_len, layout.tgt_len), dtype=bool))

    mask[s, s] = True
    mask[t, t] = causal_targets
    kind = layout.variant.kind
    if kind == VANILLA:
        mask[t, s] = True
    elif kind == REGISTERS_NO_MASK:
        mask[r, s] = True
        mask[r, r] = np.tril(np.ones((layout.reg_len, layout.reg_len), dtype=bool))
        mask[t, s] = True
        mask[t, r] = True
    else:
        mask[r, s] = True
        mask[r, r] = True
        mask[t, r] = True
    return mask


def _oracle_cell(layout: SequenceLayout, row: int, col: int) -> bool:
    row_block, col_block = layout.block_of(row), layout.block_of(col)
    kind = layout.variant.kind

    # source tokens read each other bidirectionally and nothing else
    if row_block == "src":
        return col_block == "src"
    # rule 1: registers read x'; rule 2: registers read each other
    if row_block == "reg":
        if col_block == "src":
            return True
        if col_block == "reg":
            return col <= row if kind == REGISTERS_NO_MASK else True
        return False
    # rule 3: y_j reads registers and y_<j (plus itself)
    if col_block == "tgt":
        return col <= row
    if col_block == "reg":
        return True
    return kind in (VANILLA, REGISTERS_NO_MASK)


def mask_oracle(layout: SequenceLayout) -> np.ndarray:
    """Cell-by-cell re-derivation of the visibility rules, for checking build_mask."""
    L = layout.length
    mask = np.zeros((L, L), dtype=bool)
    for row in range(L):
        for col in range(L):
            mask[row, col] = _oracle_cell(layout, row, col)
    return mask


def incremental_mask_row(layout: SequenceLayout, j: int) -> np.ndarray:
    """
    Visibility row of the j-th generated token (1-based) over the
    src_len + reg_len + j columns that exist at that step.
    """
    if j < 1:
        raise ConfigError(f"decode step must be >= 1, got {j}")
    P = layout.prefix_len
    row = np.zeros(P + j, dtype=bool)
    if not layout.variant.hides_source:
        row[:layout.src_len] = True
    row[layout.src_len:P] = True
    row[P:] = True
    return row


def format_mask(layout: SequenceLayout, mask: np.ndarray) -> str:
    """Debug dump: a header line then one row of '1'/'.' per slot."""
    lines = [f"src={layout.src_len} reg={layout.reg_len} tgt={layout.tgt_len} variant={layout.variant}"]
    for row in mask:
        lines.append("".join("1" if v else "." for v in row))
    return "\n".join(lines)


# ------------------------------
# Packing instances into sequences
# ------------------------------

@dataclass
class PackedSequence:
    """One packed sequence: token ids, per-slot labels and its layout."""
    tokens: np.ndarray
    labels: np.ndarray
    layout: SequenceLayout


@dataclass
class PackedBatch:
    """Right-padded batch of packed sequences."""
    tokens: np.ndarray      # [B, L] int
    labels: np.ndarray      # [B, L] int, IGNORE_LABEL outside target rows
    masks: np.ndarray       # [B, L, L] bool
    positions: np.ndarray   # [B, L] int
    layouts: List[SequenceLayout]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def target_count(self) -> int:
        return int((self.labels != IGNORE_LABEL).sum())


def pack_sequence(source_ids: Sequence[int], target_ids: Sequence[int], variant,
                  bos_id: int) -> PackedSequence:
    """
    Lay out x' ++ r ++ (bos ++ y) for teacher forcing.

    Args:
        source_ids: x' = [tag] ++ x ++ [eos]
        target_ids: target stream y ++ [eos]
        variant: model variant
        bos_id: id of the beginning-of-sentence token

    Register slots repeat the tag x'[0]; labels are the target stream at
    target rows and IGNORE_LABEL everywhere else.
    """
    source_ids = list(source_ids)
    target_ids = list(target_ids)
    layout = build_layout(len(source_ids), len(target_ids), variant)
    tokens = (source_ids
              + [source_ids[0]] * layout.reg_len
              + [bos_id] + target_ids[:-1])
    labels = np.full(layout.length, IGNORE_LABEL, dtype=np.int64)
    labels[layout.tgt_slice] = target_ids
    return PackedSequence(np.asarray(tokens, dtype=np.int64), labels, layout)


def pack_batch(sequences: Sequence[PackedSequence], pad_id: int) -> PackedBatch:
    """
    Right-pad sequences to a common length.

    Padding slots are hidden from every real row; each pad row sees only
    itself so its softmax stays well defined.
    """
    if not sequences:
        raise ConfigError("cannot pack an empty batch")
    B = len(sequences)
    L = max(seq.layout.length for seq in sequences)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    labels = np.full((B, L), IGNORE_LABEL, dtype=np.int64)
    masks = np.zeros((B, L, L), dtype=bool)
    for b, seq in enumerate(sequences):
        n = seq.layout.length
        tokens[b, :n] = seq.tokens
        labels[b, :n] = seq.labels
        masks[b, :n, :n] = build_mask(seq.layout)
        pad = np.arange(n, L)
        masks[b, pad, pad] = True
    positions = np.broadcast_to(np.arange(L), (B, L)).copy()
    return PackedBatch(tokens, labels, masks, positions, [seq.layout for seq in sequences])
