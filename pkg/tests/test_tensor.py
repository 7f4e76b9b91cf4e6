import numpy as np
import pytest
from hypothesis import given, strategies as st

from railnet.fxp import QFormat
from railnet.tensor import FxTensor, Tensor, extract_tile, flat_index, im2col, new_filled

Q = QFormat(12, 8)


def ramp(h, w, c):
    return FxTensor(np.arange(h * w * c).reshape(1, h, w, c), QFormat(16, 0))


def test_flat_index_is_nhwc_row_major():
    shape = (2, 3, 4, 5)
    t = Tensor.from_flat(shape, np.arange(120))
    for idx in [(0, 0, 0, 0), (1, 2, 3, 4), (0, 1, 2, 3), (1, 0, 3, 1)]:
        assert t.data[idx] == flat_index(shape, *idx)
    assert flat_index(shape, 0, 0, 1, 0) == 5
    assert flat_index(shape, 0, 1, 0, 0) == 20


def test_tensor_is_immutable_and_checked():
    t = new_filled((1, 2, 2, 1), 3.0)
    with pytest.raises(ValueError):
        t.data[0, 0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        Tensor(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Tensor.from_flat((1, 2, 2, 1), [1, 2, 3])
    with pytest.raises(ValueError):
        FxTensor(np.full((1, 1, 1, 1), 2048), Q)


def test_fx_dequantize():
    t = FxTensor(np.array([128, -2048, 1]).reshape(1, 1, 3, 1), Q)
    assert t.dequantize().flat().tolist() == [0.5, -8.0, 1 / 256]


def test_extract_full_tile_is_identity():
    t = ramp(4, 4, 3)
    assert np.array_equal(extract_tile(t, (0, 0, 0), (4, 4, 3)).raw, t.raw)


def test_extract_interior_tile():
    t = ramp(2, 2, 1)  # [[0, 1], [2, 3]]
    assert extract_tile(t, (1, 0, 0), (1, 2, 1)).raw.reshape(-1).tolist() == [2, 3]
    assert extract_tile(t, (0, 1, 0), (2, 1, 1)).raw.reshape(-1).tolist() == [1, 3]


def test_extract_edge_tile_zero_pads():
    t = ramp(2, 2, 1)
    tile = extract_tile(t, (-1, -1, 0), (2, 2, 1), zero_pad=True)
    assert tile.raw.reshape(2, 2).tolist() == [[0, 0], [0, 0]]
    tile = extract_tile(t, (1, 1, 0), (2, 2, 1), zero_pad=True)
    assert tile.raw.reshape(2, 2).tolist() == [[3, 0], [0, 0]]
    tile = extract_tile(t, (-1, 0, 0), (3, 3, 1), zero_pad=True)
    assert tile.raw.reshape(3, 3).tolist() == [[0, 0, 0], [0, 1, 0], [2, 3, 0]]
    with pytest.raises(IndexError):
        extract_tile(t, (1, 1, 0), (2, 2, 1))


@given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 5),
       st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_tiles_partition_and_reassemble(h, w, c, th, tw, tc):
    t = ramp(h, w, c)
    out = np.full_like(t.raw, -1)
    for h0 in range(0, h, th):
        for w0 in range(0, w, tw):
            for c0 in range(0, c, tc):
                tile = extract_tile(t, (h0, w0, c0), (th, tw, tc), zero_pad=True).raw
                hh, ww, cc = min(th, h - h0), min(tw, w - w0), min(tc, c - c0)
                assert (out[:, h0:h0 + hh, w0:w0 + ww, c0:c0 + cc] == -1).all()
                out[:, h0:h0 + hh, w0:w0 + ww, c0:c0 + cc] = tile[:, :hh, :ww, :cc]
    assert np.array_equal(out, t.raw)


def test_im2col_patch_order():
    x = np.arange(2 * 3 * 3 * 2).reshape(2, 3, 3, 2)
    cols = im2col(x, 2, 2, 1)
    assert cols.shape == (2, 2, 2, 8)
    for n in range(2):
        for i in range(2):
            for j in range(2):
                assert cols[n, i, j].tolist() == x[n, i:i + 2, j:j + 2, :].reshape(-1).tolist()
    assert im2col(x, 3, 3, 2).shape == (2, 1, 1, 18)
