"""NHWC tensors: float activations and integer-raw fixed-point tensors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fxp import QFormat


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.flags.writeable:
        a = a.view()
        a.flags.writeable = False
    return a


def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) != 4:
        raise ValueError(f"expected an [n, h, w, c] shape, got {shape}")
    if any(d < 1 for d in shape):
        raise ValueError(f"all dims must be >= 1, got {shape}")
    return shape


@dataclass(frozen=True)
class Tensor:
    data: np.ndarray

    def __post_init__(self):
        _check_shape(self.data.shape)
        object.__setattr__(self, "data", _freeze(self.data.astype(np.float64, copy=False)))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @classmethod
    def from_flat(cls, shape: Sequence[int], values) -> "Tensor":
        shape = _check_shape(shape)
        flat = np.asarray(values, dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"{flat.size} values do not fill shape {shape}")
        return cls(flat.reshape(shape))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)


@dataclass(frozen=True)
class FxTensor:
    raw: np.ndarray
    q: QFormat

    def __post_init__(self):
        _check_shape(self.raw.shape)
        raw = self.raw.astype(np.int64, copy=False)
        if raw.min() < self.q.raw_min or raw.max() > self.q.raw_max:
            raise ValueError(f"raw values out of range for {self.q}")
        object.__setattr__(self, "raw", _freeze(raw))

    @property
    def shape(self) -> tuple:
        return self.raw.shape

    def dequantize(self) -> Tensor:
        return Tensor(np.ldexp(self.raw.astype(np.float64), -self.q.frac_bits))


def flat_index(shape: Sequence[int], n: int, h: int, w: int, c: int) -> int:
    _, H, W, C = shape
    return ((n * H + h) * W + w) * C + c


def new_filled(shape: Sequence[int], value: float) -> Tensor:
    return Tensor(np.full(_check_shape(shape), value, dtype=np.float64))


def extract_tile(t: FxTensor, origin: Sequence[int], size: Sequence[int],
                 zero_pad: bool = False) -> FxTensor:
    """Copy the ``size = (th, tw, tc)`` block at ``origin = (h0, w0, c0)``.

    Out-of-bounds positions read raw 0 when ``zero_pad`` is set and raise
    ``IndexError`` otherwise. All batch entries are kept.
    """
    h0, w0, c0 = (int(v) for v in origin)
    th, tw, tc = (int(v) for v in size)
    if min(th, tw, tc) < 1:
        raise ValueError(f"tile size dims must be >= 1, got {size}")
    n, H, W, C = t.shape
    hs, ws, cs = max(h0, 0), max(w0, 0), max(c0, 0)
    he, we, ce = min(h0 + th, H), min(w0 + tw, W), min(c0 + tc, C)
    inside = (h0 >= 0 and w0 >= 0 and c0 >= 0
              and h0 + th <= H and w0 + tw <= W and c0 + tc <= C)
    if inside:
        return FxTensor(t.raw[:, h0:h0 + th, w0:w0 + tw, c0:c0 + tc], t.q)
    if not zero_pad:
        raise IndexError(f"tile at {tuple(origin)} size {tuple(size)} exceeds {t.shape}")
    out = np.zeros((n, th, tw, tc), dtype=np.int64)
    if hs < he and ws < we and cs < ce:
        out[:, hs - h0:he - h0, ws - w0:we - w0, cs - c0:ce - c0] = t.raw[:, hs:he, ws:we, cs:ce]
    return FxTensor(out, t.q)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patch matrix of an already-padded NHWC array.

    Returns shape ``(n, oh, ow, kh * kw * c)`` with the patch flattened in
    (kh, kw, c) order, matching HWIO weights reshaped to ``(kh*kw*c, oc)``.
    """
    n, h, w, c = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n, oh, ow, kh * kw * c)
