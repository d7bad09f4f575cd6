"""
Tests for packed-sequence layouts and attention masks.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import ConfigError
from layout import (IGNORE_LABEL, Variant, build_layout, build_mask, format_mask, incremental_mask_row,
                    mask_oracle, pack_batch, pack_sequence, register_length)

VARIANTS = ["vanilla", "registering", "registers_no_mask", "ratio_0.75", "ratio_1.25", "ratio_1.5"]


def test_variant_parse():
    assert Variant.parse("registering").kind == "registering"
    assert Variant.parse("ratio_1.25") == Variant("ratio", 1.25)
    assert Variant.parse("ratio(1.5)") == Variant("ratio", 1.5)
    assert str(Variant.parse("ratio_0.75")) == "ratio_0.75"
    with pytest.raises(ConfigError):
        Variant.parse("ratio_x")
    with pytest.raises(ConfigError):
        Variant.parse("encoder_decoder")


def test_register_lengths():
    assert register_length(4, Variant.parse("vanilla")) == 0
    assert register_length(4, Variant.parse("registering")) == 4
    assert register_length(4, Variant.parse("registers_no_mask")) == 4
    assert register_length(5, Variant.parse("ratio_1.25")) == 4
    assert register_length(2, Variant.parse("ratio_1.5")) == 1
    # 3 / 2 = 1.5 rounds half up
    assert register_length(3, Variant.parse("ratio_2")) == 2
    assert register_length(2, Variant.parse("ratio_100")) == 1


def test_non_positive_ratio():
    with pytest.raises(ConfigError):
        build_layout(4, 2, Variant("ratio", 0.0))
    with pytest.raises(ConfigError):
        build_layout(4, 2, Variant("ratio", -1.0))


def test_layout_minimum_lengths():
    with pytest.raises(ConfigError):
        build_layout(1, 2, "registering")
    with pytest.raises(ConfigError):
        build_layout(3, 0, "registering")


def test_registering_example():
    # x' = [tag, a, eos], targets [bos, b]
    layout = build_layout(3, 2, "registering")
    mask = build_mask(layout)
    assert layout.reg_len == 3 and layout.length == 8
    assert np.array_equal(mask[6], [0, 0, 0, 1, 1, 1, 1, 0])
    assert np.array_equal(mask[7], [0, 0, 0, 1, 1, 1, 1, 1])
    for r in range(3, 6):
        assert np.array_equal(mask[r], [1, 1, 1, 1, 1, 1, 0, 0])
    for s in range(3):
        assert np.array_equal(mask[s], [1, 1, 1, 0, 0, 0, 0, 0])


def test_vanilla_example():
    layout = build_layout(3, 2, "vanilla")
    mask = build_mask(layout)
    assert layout.length == 5
    assert np.array_equal(mask[3], [1, 1, 1, 1, 0])
    assert np.array_equal(mask[4], [1, 1, 1, 1, 1])


def test_ratio_example():
    layout = build_layout(5, 1, "ratio_1.25")
    mask = build_mask(layout)
    assert layout.reg_len == 4
    assert mask[9, :5].sum() == 0
    assert mask[9, 5:9].all()


def test_registers_no_mask_targets_read_source():
    layout = build_layout(3, 2, "registers_no_mask")
    mask = build_mask(layout)
    assert mask[6, :6].all()
    # registers read causally among themselves
    assert np.array_equal(mask[3, 3:6], [1, 0, 0])
    assert np.array_equal(mask[5, 3:6], [1, 1, 1])


@settings(max_examples=1000, deadline=None)
@given(src_len=st.integers(2, 30), tgt_len=st.integers(1, 30), variant=st.sampled_from(VARIANTS))
def test_mask_matches_oracle(src_len, tgt_len, variant):
    layout = build_layout(src_len, tgt_len, variant)
    mask = build_mask(layout)
    assert mask.shape == (layout.length, layout.length)
    assert np.array_equal(mask, mask_oracle(layout))
    # nothing reads a later target slot
    for row in range(layout.length):
        cols = np.flatnonzero(mask[row])
        assert cols.size > 0
        later_targets = cols[(cols >= layout.prefix_len) & (cols > row)]
        assert later_targets.size == 0


@settings(max_examples=200, deadline=None)
@given(src_len=st.integers(2, 20), tgt_len=st.integers(1, 20), variant=st.sampled_from(VARIANTS))
def test_source_hidden_from_targets(src_len, tgt_len, variant):
    layout = build_layout(src_len, tgt_len, variant)
    mask = build_mask(layout)
    target_reads_source = mask[layout.tgt_slice, layout.src_slice].any()
    assert target_reads_source == (not layout.variant.hides_source)


@settings(max_examples=200, deadline=None)
@given(src_len=st.integers(2, 20), tgt_len=st.integers(1, 20), variant=st.sampled_from(VARIANTS))
def test_incremental_row_matches_full_mask(src_len, tgt_len, variant):
    layout = build_layout(src_len, tgt_len, variant)
    mask = build_mask(layout)
    for j in range(1, tgt_len + 1):
        row = layout.prefix_len + j - 1
        assert np.array_equal(incremental_mask_row(layout, j), mask[row, :row + 1])


def test_incremental_row_needs_positive_step():
    with pytest.raises(ConfigError):
        incremental_mask_row(build_layout(3, 2, "registering"), 0)


def test_pack_sequence_registering():
    seq = pack_sequence([4, 20, 2], [30, 2], "registering", bos_id=1)
    assert seq.tokens.tolist() == [4, 20, 2, 4, 4, 4, 1, 30]
    assert seq.labels.tolist() == [IGNORE_LABEL] * 6 + [30, 2]


def test_pack_sequence_vanilla():
    seq = pack_sequence([4, 20, 21, 2], [30, 31, 2], "vanilla", bos_id=1)
    assert seq.tokens.tolist() == [4, 20, 21, 2, 1, 30, 31]
    assert seq.labels.tolist() == [IGNORE_LABEL] * 4 + [30, 31, 2]


def test_pack_batch_pads_and_hides_padding():
    a = pack_sequence([4, 20, 2], [30, 2], "registering", bos_id=1)
    b = pack_sequence([4, 20, 21, 22, 2], [30, 31, 2], "registering", bos_id=1)
    batch = pack_batch([a, b], pad_id=0)
    assert batch.tokens.shape == (2, 13)
    assert batch.size == 2
    assert batch.target_count == 5
    assert np.all(batch.tokens[0, 8:] == 0)
    assert np.all(batch.labels[0, 8:] == IGNORE_LABEL)
    # real rows never see padding; pad rows see only themselves
    assert not batch.masks[0, :8, 8:].any()
    for p in range(8, 13):
        assert batch.masks[0, p].sum() == 1 and batch.masks[0, p, p]
    assert np.array_equal(batch.masks[1], build_mask(b.layout))


def test_pack_batch_empty():
    with pytest.raises(ConfigError):
        pack_batch([], pad_id=0)


def test_format_mask():
    layout = build_layout(2, 1, "registering")
    text = format_mask(layout, build_mask(layout))
    lines = text.splitlines()
    assert lines[0] == "src=2 reg=2 tgt=1 variant=registering"
    assert lines[1:] == ["11...", "11...", "1111.", "1111.", "..111"]


def test_layout_lengths():
    assert build_layout(4, 3, "registering").length == 11
    assert build_layout(4, 3, "ratio_2").reg_len == 2
    assert build_layout(4, 3, "vanilla").reg_len == 0


def test_vanilla_short_source():
    mask = build_mask(build_layout(2, 2, "vanilla"))
    assert np.array_equal(np.flatnonzero(mask[3]), [0, 1, 2, 3])


def test_incremental_row_examples():
    reg = build_layout(3, 4, "registering")
    assert np.flatnonzero(incremental_mask_row(reg, 1)).tolist() == [3, 4, 5, 6]
    assert np.flatnonzero(incremental_mask_row(reg, 3)).tolist() == [3, 4, 5, 6, 7, 8]
    van = build_layout(3, 4, "vanilla")
    assert np.flatnonzero(incremental_mask_row(van, 1)).tolist() == [0, 1, 2, 3]
