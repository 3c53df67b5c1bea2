import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitkv.core import ShapeError
from bitkv.layout import (CodeOverflow, UnsupportedBits, interleave_order, iteration_count,
                          pack_block, pack_word, pack_words, residual_block_size, swizzle_col,
                          unpack_block, unpack_word, unpack_words)


@pytest.mark.parametrize("bits,order", [(2, (7, 5, 3, 1, 6, 4, 2, 0)), (4, (3, 1, 2, 0)),
                                        (8, (1, 0))])
def test_interleave_order(bits, order):
    assert interleave_order(bits).order == order


def test_identity_order():
    assert interleave_order(4, interleave=False).order == (0, 1, 2, 3)


def test_unsupported_bits():
    with pytest.raises(UnsupportedBits):
        interleave_order(3)
    with pytest.raises(UnsupportedBits):
        pack_words(np.zeros(16, np.uint8), 1)


def test_pack_word_example():
    assert pack_word([1, 2, 3, 4], 4) == 0x4231


def test_unpack_word_example():
    assert unpack_word(0x4231, 4) == [1, 2, 3, 4]


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_zero_word(bits):
    assert pack_word([0] * (16 // bits), bits) == 0
    assert unpack_word(0, bits) == [0] * (16 // bits)


def test_saturated_2bit():
    assert pack_word([3] * 8, 2) == 0xFFFF


def test_code_overflow():
    with pytest.raises(CodeOverflow):
        pack_word([16, 0, 0, 0], 4)


def test_wrong_pack_width():
    with pytest.raises(ShapeError):
        pack_words(np.zeros((3,), np.uint8), 4)


@pytest.mark.parametrize("bits", [2, 4, 8])
@pytest.mark.parametrize("interleave", [True, False])
def test_exhaustive_word_roundtrip(bits, interleave, backend):
    perm = interleave_order(bits, interleave)
    words = np.arange(1 << 16, dtype=np.uint16)
    codes = unpack_words(words, bits, perm)
    assert codes.max() < (1 << bits)
    np.testing.assert_array_equal(pack_words(codes, bits, perm), words)


def test_msb_field_holds_first_order_entry():
    # order[0] = 3 for 4-bit: code 3 sits in the top nibble
    assert pack_word([0, 0, 0, 0xF], 4) == 0xF000
    assert pack_word([0xF, 0, 0, 0], 4) == 0x000F


@given(st.sampled_from([2, 4, 8]), st.data())
def test_block_roundtrip(bits, data):
    pn = 16 // bits
    n_r = pn * data.draw(st.integers(1, 8))
    d = data.draw(st.integers(1, 6))
    seed = data.draw(st.integers(0, 2 ** 31))
    codes = np.random.default_rng(seed).integers(0, 1 << bits, (2, n_r, d)).astype(np.uint8)
    words = pack_block(codes, bits)
    assert words.shape == (2, n_r // pn, d)
    np.testing.assert_array_equal(unpack_block(words, bits), codes)


def test_block_row_packs_strided_tokens():
    # 8-bit, n_r=16: word row r packs tokens r and r + 8
    codes = np.arange(16, dtype=np.uint8).reshape(16, 1)
    words = pack_block(codes, 8)
    assert [unpack_word(int(w), 8) for w in words[:, 0]] == [[r, r + 8] for r in range(8)]


@pytest.mark.parametrize("bits,warp_n,expected", [(8, 1, 16), (4, 4, 128), (2, 4, 256), (16, 1, 8)])
def test_residual_block_size(bits, warp_n, expected):
    assert residual_block_size(bits, warp_n) == expected


@pytest.mark.parametrize("tile_n,warp_n,expected", [(128, 4, 4), (8, 1, 1), (64, 8, 1)])
def test_iteration_count(tile_n, warp_n, expected):
    assert iteration_count(tile_n, warp_n) == expected


def test_iteration_count_rejects():
    with pytest.raises(ShapeError):
        iteration_count(100, 4)


def test_swizzle_examples():
    assert swizzle_col(0, 5) == 5
    assert swizzle_col(1, 2) == 3


@given(st.integers(0, 63))
def test_swizzle_is_permutation(row):
    cols = np.arange(64)
    assert sorted(swizzle_col(row, cols).tolist()) == cols.tolist()


def test_exhaustive_roundtrip_is_fast():
    words = np.arange(1 << 16, dtype=np.uint16)
    unpack_words(words, 4)  # warm up compiled kernels
    t0 = time.perf_counter()
    for bits in (2, 4, 8):
        assert np.array_equal(pack_words(unpack_words(words, bits), bits), words)
    assert time.perf_counter() - t0 < 1.0
