"""Independent reference implementations used only by the tests.

Everything here works on Python ints, ``Fraction`` and nested lists so it
shares no arithmetic path with the numpy executors it checks.
"""

from fractions import Fraction
import math

import numpy as np

from railnet import graph as G


def round_half_away(f: Fraction) -> int:
    mag = math.floor(abs(f) + Fraction(1, 2))
    return -mag if f < 0 else mag


def clamp(v: int, bits: int) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    return min(max(v, lo), hi)


def quantize_exact(x: float, total: int, frac: int) -> int:
    return clamp(round_half_away(Fraction(x) * 2**frac), total)


def requant_exact(v: int, from_frac: int, total: int, frac: int) -> int:
    return clamp(round_half_away(Fraction(v, 2**from_frac) * 2**frac), total)


def crc16_ccitt_false(data: bytes) -> int:
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021) if crc & 0x8000 else (crc << 1)
            crc &= 0xFFFF
    return crc


def conv_loops(x, w, b, stride, pad):
    """Brute-force float cross-correlation over NHWC / HWIO nested indexing."""
    n, H, W, C = x.shape
    kh, kw, _, oc = w.shape
    g = G.conv_geometry(H, W, (kh, kw), stride, pad)
    out = np.zeros((n, g.out_h, g.out_w, oc))
    for bi in range(n):
        for i in range(g.out_h):
            for j in range(g.out_w):
                for o in range(oc):
                    s = float(b[o])
                    for dy in range(kh):
                        for dx in range(kw):
                            y, xx = i * stride + dy - g.pad_top, j * stride + dx - g.pad_left
                            if 0 <= y < H and 0 <= xx < W:
                                for c in range(C):
                                    s += float(x[bi, y, xx, c]) * float(w[dy, dx, c, o])
                    out[bi, i, j, o] = s
    return out


# ----------------------------------------------------------------------------
# Big-integer fixed-point network
# ----------------------------------------------------------------------------

class BigIntNet:
    """Fixed-point forward pass with Python integers and rational rounding."""

    def __init__(self, model: G.ModelGraph, plan):
        self.model = model
        self.plan = plan

    def _conv(self, act, layer, in_frac, fmt):
        H, W, C = len(act), len(act[0]), len(act[0][0])
        kh, kw = layer.kernel
        g = G.conv_geometry(H, W, (kh, kw), layer.stride, layer.pad)
        wq = [[[[quantize_exact(float(layer.weights[dy, dx, c, o]), fmt.weight_q.total_bits,
                                fmt.weight_q.frac_bits)
                 for o in range(layer.out_ch)] for c in range(C)] for dx in range(kw)]
              for dy in range(kh)]
        acc_frac = in_frac + fmt.weight_q.frac_bits
        bq = [quantize_exact(float(v), fmt.bias_q.total_bits, fmt.bias_q.frac_bits) for v in layer.bias]
        out = []
        for i in range(g.out_h):
            row = []
            for j in range(g.out_w):
                px = []
                for o in range(layer.out_ch):
                    s = 0
                    for dy in range(kh):
                        for dx in range(kw):
                            y = i * layer.stride + dy - g.pad_top
                            xx = j * layer.stride + dx - g.pad_left
                            if 0 <= y < H and 0 <= xx < W:
                                for c in range(C):
                                    s += act[y][xx][c] * wq[dy][dx][c][o]
                    s += round_half_away(Fraction(bq[o], 2**fmt.bias_q.frac_bits) * 2**acc_frac)
                    if layer.relu:
                        s = max(s, 0)
                    px.append(requant_exact(s, acc_frac, fmt.act_q.total_bits, fmt.act_q.frac_bits))
                row.append(px)
            out.append(row)
        return out

    def _dense(self, vec, layer, in_frac, fmt):
        acc_frac = in_frac + fmt.weight_q.frac_bits
        out = []
        for o in range(layer.out_features):
            s = sum(v * quantize_exact(float(layer.weights[i, o]), fmt.weight_q.total_bits,
                                       fmt.weight_q.frac_bits) for i, v in enumerate(vec))
            bq = quantize_exact(float(layer.bias[o]), fmt.bias_q.total_bits, fmt.bias_q.frac_bits)
            s += round_half_away(Fraction(bq, 2**fmt.bias_q.frac_bits) * 2**acc_frac)
            out.append(requant_exact(s, acc_frac, fmt.act_q.total_bits, fmt.act_q.frac_bits))
        return out

    def forward(self, image: np.ndarray) -> list:
        q = self.plan.input_q
        act = [[[quantize_exact(float(v), q.total_bits, q.frac_bits) for v in px] for px in row]
               for row in image[0]]
        frac = q.frac_bits
        saved = {}
        taps = self.model.taps()
        for layer in self.model.layers:
            fmt = self.plan.layers[layer.id]
            if isinstance(layer, G.Conv2D):
                act = self._conv(act, layer, frac, fmt)
            elif isinstance(layer, G.Dense):
                flat = [v for row in act for px in row for v in px]
                act = [[self._dense(flat, layer, frac, fmt)]]
            elif isinstance(layer, G.ReLU):
                act = [[[max(v, 0) for v in px] for px in row] for row in act]
            elif isinstance(layer, G.MaxPool):
                H, W = len(act), len(act[0])
                oh = (H - layer.size) // layer.stride + 1
                ow = (W - layer.size) // layer.stride + 1
                act = [[[max(act[i * layer.stride + dy][j * layer.stride + dx][c]
                             for dy in range(layer.size) for dx in range(layer.size))
                         for c in range(len(act[0][0]))] for j in range(ow)] for i in range(oh)]
            elif isinstance(layer, G.ResidualAdd):
                src, src_frac = saved[layer.source]
                t, f = fmt.act_q.total_bits, fmt.act_q.frac_bits
                act = [[[clamp(requant_exact(a, frac, t, f) + requant_exact(b, src_frac, t, f), t)
                         for a, b in zip(pa, pb)] for pa, pb in zip(ra, rb)]
                       for ra, rb in zip(act, src)]
            elif isinstance(layer, G.GlobalAvgPool):
                H, W, C = len(act), len(act[0]), len(act[0][0])
                act = [[[round_half_away(Fraction(sum(act[i][j][c] for i in range(H) for j in range(W)),
                                                  H * W)) for c in range(C)]]]
            frac = fmt.act_q.frac_bits
            if layer.id in taps:
                saved[layer.id] = (act, frac)
        return [v for row in act for px in row for v in px]
