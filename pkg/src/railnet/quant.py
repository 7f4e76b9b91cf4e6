"""Per-layer post-training quantization and the naive fixed-point executor.

Weights and activations use 12-bit formats, biases 22-bit, and every
multiply-accumulate runs in an exact 64-bit accumulator that is requantized
once per output element. :func:`fx_forward_naive` is the golden reference
the tiled executor must match bit for bit.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import fxp
from .fxp import QFormat
from .graph import (BatchNorm, Conv2D, Dense, ForwardResult, GlobalAvgPool, MaxPool,
                    ModelGraph, ReLU, ResidualAdd, ShapeError, Softmax, classify,
                    conv_geometry, forward_ref, pool_out, run_layers)
from .tensor import Tensor

WEIGHT_BITS = 12
ACT_BITS = 12
BIAS_BITS = 22
# Headroom applied to observed ranges before choosing integer bits, so that
# fixed-point drift above the float maximum does not saturate.
RANGE_MARGIN = 1.0 / 16

PLAN_FORMAT = "qplan"
PLAN_VERSION = 1


# ----------------------------------------------------------------------------
# Calibration
# ----------------------------------------------------------------------------

@dataclass
class CalibStats:
    """Running max|x| per tensor; ``layers`` preserves model order."""

    input: float = 0.0
    layers: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    images: int = 0

    def merge(self, other: "CalibStats") -> "CalibStats":
        layers = {lid: {k: max(v, other.layers[lid][k]) for k, v in entry.items()}
                  for lid, entry in self.layers.items()}
        return CalibStats(max(self.input, other.input), layers, dict(self.kinds),
                          self.images + other.images)

    def to_dict(self) -> dict:
        return {"input": self.input, "images": self.images,
                "layers": [{"id": k, "kind": self.kinds[k], **v} for k, v in self.layers.items()]}


def _absmax(a) -> float:
    a = np.asarray(a)
    return float(np.abs(a).max()) if a.size else 0.0


def _static_stats(model: ModelGraph) -> CalibStats:
    stats = CalibStats()
    for layer in model.layers:
        stats.kinds[layer.id] = layer.kind
        entry = {"input": 0.0, "output": 0.0}
        if isinstance(layer, (Conv2D, Dense)):
            entry["weights"] = _absmax(layer.weights)
            entry["bias"] = _absmax(layer.bias)
        stats.layers[layer.id] = entry
    return stats


def _calibrate_one(model: ModelGraph, image: Tensor) -> CalibStats:
    stats = _static_stats(model)
    stats.input = _absmax(image.data)
    stats.images = 1

    def hook(layer, x, y):
        entry = stats.layers[layer.id]
        entry["input"] = max(entry["input"], _absmax(x))
        entry["output"] = max(entry["output"], _absmax(y))

    run_layers(model, image, hook)
    return stats


def calibrate(model: ModelGraph, images: Sequence[Tensor], workers: int = 1) -> CalibStats:
    """Record per-tensor max|x| over a calibration set (order independent)."""
    images = list(images)
    if not images:
        raise ValueError("calibration needs at least one image")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda im: _calibrate_one(model, im), images))
    else:
        parts = [_calibrate_one(model, im) for im in images]
    stats = parts[0]
    for p in parts[1:]:
        stats = stats.merge(p)
    return stats


# ----------------------------------------------------------------------------
# Format planning
# ----------------------------------------------------------------------------

def choose_format(max_abs: float, total_bits: int, margin: float = RANGE_MARGIN) -> QFormat:
    """Most fractional bits whose range still holds ``max_abs * (1 + margin)``."""
    m = max_abs * (1.0 + margin)
    if m <= 0:
        int_bits = 0
    else:
        _, exp = math.frexp(m)  # m = mant * 2**exp, mant in [0.5, 1)
        int_bits = max(0, exp)  # == floor(log2 m) + 1
    int_bits = min(int_bits, total_bits - 1)
    q = QFormat(total_bits, total_bits - 1 - int_bits)
    # Rounding can still land one past raw_max just below a power of two.
    while q.frac_bits > 0 and fxp.saturation_mask(m, q):
        q = QFormat(total_bits, q.frac_bits - 1)
    return q


@dataclass(frozen=True)
class LayerFormats:
    act_q: QFormat
    weight_q: Optional[QFormat] = None
    bias_q: Optional[QFormat] = None
    acc_frac: Optional[int] = None

    def to_dict(self) -> dict:
        d = {"act_q": self.act_q.to_dict()}
        if self.weight_q is not None:
            d.update(weight_q=self.weight_q.to_dict(), bias_q=self.bias_q.to_dict(),
                     acc_frac=self.acc_frac)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerFormats":
        if "weight_q" in d:
            return cls(QFormat.from_dict(d["act_q"]), QFormat.from_dict(d["weight_q"]),
                       QFormat.from_dict(d["bias_q"]), int(d["acc_frac"]))
        return cls(QFormat.from_dict(d["act_q"]))


@dataclass
class QuantPlan:
    input_q: QFormat
    layers: dict  # layer id -> LayerFormats, in model order
    tiling: dict = field(default_factory=dict)  # layer id -> TileConfig (optional)

    def __getitem__(self, layer_id: str) -> LayerFormats:
        return self.layers[layer_id]

    def to_dict(self) -> dict:
        d = {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "input_q": self.input_q.to_dict(),
            "layers": [{"id": k, **v.to_dict()} for k, v in self.layers.items()],
        }
        if self.tiling:
            d["tiling"] = {k: cfg.to_dict() for k, cfg in self.tiling.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantPlan":
        from .tile import TileConfig

        if d.get("format") != PLAN_FORMAT:
            raise ValueError("not a qplan document")
        if d.get("version") != PLAN_VERSION:
            raise ValueError(f"unsupported qplan version {d.get('version')!r}")
        layers = {e["id"]: LayerFormats.from_dict(e) for e in d["layers"]}
        tiling = {k: TileConfig.from_dict(v) for k, v in d.get("tiling", {}).items()}
        return cls(QFormat.from_dict(d["input_q"]), layers, tiling)


def save_plan(plan: QuantPlan, path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")


def load_plan(path) -> QuantPlan:
    try:
        return QuantPlan.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"malformed qplan {path}: {e}") from None


def plan_formats(stats: CalibStats) -> QuantPlan:
    """Assign one Q-format per tensor from calibrated ranges.

    Integer bits are ``floor(log2(m)) + 1`` (0 for m <= 0) on the
    margin-inflated range, clamped to the width. Pass-through layers
    (ReLU, max pool, GAP, softmax) keep their input's format.
    """
    input_q = choose_format(stats.input, ACT_BITS)
    cur = input_q
    layers = {}
    for lid, entry in stats.layers.items():
        kind = stats.kinds[lid]
        if kind in ("conv2d", "dense"):
            wq = choose_format(entry["weights"], WEIGHT_BITS)
            fmt = LayerFormats(choose_format(entry["output"], ACT_BITS), wq,
                               choose_format(entry["bias"], BIAS_BITS), wq.frac_bits + cur.frac_bits)
        elif kind == "residual_add":
            fmt = LayerFormats(choose_format(entry["output"], ACT_BITS))
        elif kind == "batchnorm":
            raise ValueError(f"{lid}: unfused batch norm; run fuse_pass before quantizing")
        else:
            fmt = LayerFormats(cur)
        layers[lid] = fmt
        cur = fmt.act_q
    return QuantPlan(input_q, layers)


# ----------------------------------------------------------------------------
# Quantized model
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FxModel:
    graph: ModelGraph
    plan: QuantPlan
    weights: dict  # layer id -> int64 raw array (same shape as float weights)
    biases: dict   # layer id -> int64 raw vector at bias_q
    saturation_count: int = 0

    def fmt(self, layer_id: str) -> LayerFormats:
        return self.plan.layers[layer_id]


def quantize_model(model: ModelGraph, plan: QuantPlan) -> FxModel:
    weights, biases = {}, {}
    saturated = 0
    for layer in model.layers:
        if layer.id not in plan.layers:
            raise KeyError(f"plan has no entry for layer {layer.id!r}")
        if isinstance(layer, BatchNorm):
            raise ValueError(f"{layer.id}: unfused batch norm; run fuse_pass before quantizing")
        if isinstance(layer, (Conv2D, Dense)):
            fmt = plan.layers[layer.id]
            saturated += int(fxp.saturation_mask(layer.weights, fmt.weight_q).sum())
            saturated += int(fxp.saturation_mask(layer.bias, fmt.bias_q).sum())
            weights[layer.id] = fxp.quantize(np.asarray(layer.weights, np.float64), fmt.weight_q)
            biases[layer.id] = fxp.quantize(np.asarray(layer.bias, np.float64), fmt.bias_q)
    return FxModel(model, plan, weights, biases, saturated)


class FxResult(NamedTuple):
    raw_logits: np.ndarray
    logits_q: QFormat
    logits: np.ndarray
    probabilities: np.ndarray
    class_id: int
    confidence: float
    saturation_count: int


def requant_counted(acc: np.ndarray, from_frac: int, q: QFormat):
    """Requantize a wide array into ``q``; also return how many elements clipped."""
    shifted = fxp.shift_round(acc, from_frac - q.frac_bits)
    out = fxp.saturate(shifted, q)
    return out, int(np.count_nonzero(out != shifted))


def aligned_bias(fxm: FxModel, layer_id: str) -> np.ndarray:
    fmt = fxm.fmt(layer_id)
    return fxp.shift_round(fxm.biases[layer_id], fmt.bias_q.frac_bits - fmt.acc_frac)


def check_layer_formats(fxm: FxModel, layer, in_q: QFormat, n_terms: int):
    fmt = fxm.fmt(layer.id)
    if in_q.frac_bits + fmt.weight_q.frac_bits != fmt.acc_frac:
        raise ValueError(f"{layer.id}: acc_frac {fmt.acc_frac} != input frac "
                         f"{in_q.frac_bits} + weight frac {fmt.weight_q.frac_bits}")
    bias = aligned_bias(fxm, layer.id)
    fxp.check_acc_width(n_terms, in_q, fmt.weight_q, int(np.abs(bias).max(initial=0)))
    return fmt, bias


def gap_raw(x: np.ndarray) -> np.ndarray:
    """Integer global average pool: exact sum, divide rounding half away from zero."""
    n = x.shape[1] * x.shape[2]
    s = x.sum(axis=(1, 2), keepdims=True)
    mag = (2 * np.abs(s) + n) // (2 * n)
    return np.where(s < 0, -mag, mag)


def maxpool_raw(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    oh, ow = pool_out(size, stride, x.shape[1]), pool_out(size, stride, x.shape[2])
    out = None
    for dy in range(size):
        for dx in range(size):
            v = x[:, dy:dy + (oh - 1) * stride + 1:stride, dx:dx + (ow - 1) * stride + 1:stride]
            out = v if out is None else np.maximum(out, v)
    return out


def residual_add_raw(x, x_q, src, src_q, q: QFormat):
    a, na = requant_counted(x, x_q.frac_bits, q)
    b, nb = requant_counted(src, src_q.frac_bits, q)
    s, ns = requant_counted(a + b, q.frac_bits, q)
    return s, na + nb + ns


def conv_naive(fxm: FxModel, layer: Conv2D, x: np.ndarray, in_q: QFormat):
    n, h, w, c = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"{layer.id}: expects {layer.in_ch} channels, got {c}")
    kh, kw = layer.kernel
    fmt, bias = check_layer_formats(fxm, layer, in_q, kh * kw * c)
    g = conv_geometry(h, w, layer.kernel, layer.stride, layer.pad)
    xp = np.pad(x, ((0, 0), (g.pad_top, g.pad_bottom), (g.pad_left, g.pad_right), (0, 0)))
    wr = fxm.weights[layer.id]
    s = layer.stride
    acc = np.zeros((n, g.out_h, g.out_w, layer.out_ch), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy:dy + (g.out_h - 1) * s + 1:s, dx:dx + (g.out_w - 1) * s + 1:s, :]
            acc += patch @ wr[dy, dx]
    acc += bias
    if layer.relu:
        acc = np.maximum(acc, 0)
    return requant_counted(acc, fmt.acc_frac, fmt.act_q)


def dense_naive(fxm: FxModel, layer: Dense, x: np.ndarray, in_q: QFormat):
    v = x.reshape(-1)
    if v.size != layer.in_features:
        raise ShapeError(f"{layer.id}: expects {layer.in_features} inputs, got {v.size}")
    fmt, bias = check_layer_formats(fxm, layer, in_q, v.size)
    acc = v @ fxm.weights[layer.id] + bias
    out, nsat = requant_counted(acc, fmt.acc_frac, fmt.act_q)
    return out.reshape(1, 1, 1, -1), nsat


def quantize_input(fxm: FxModel, image: Tensor):
    if tuple(image.shape) != fxm.graph.input_shape:
        raise ShapeError(f"image shape {image.shape} != model input {fxm.graph.input_shape}")
    q = fxm.plan.input_q
    return fxp.quantize(image.data, q), int(fxp.saturation_mask(image.data, q).sum())


def finish(raw_logits: np.ndarray, q: QFormat, nsat: int) -> FxResult:
    raw_logits = raw_logits.reshape(-1)
    res = classify(fxp.dequantize(raw_logits, q))
    return FxResult(raw_logits, q, res.logits, res.probabilities, res.class_id,
                    res.confidence, nsat)


def run_fx_layers(fxm: FxModel, image: Tensor, compute) -> FxResult:
    """Shared integer layer walk; ``compute(layer, x, in_q)`` handles conv/dense."""
    x, nsat = quantize_input(fxm, image)
    q = fxm.plan.input_q
    taps = fxm.graph.taps()
    saved = {}
    for layer in fxm.graph.layers:
        if isinstance(layer, (Conv2D, Dense)):
            x, k = compute(layer, x, q)
            nsat += k
        elif isinstance(layer, ReLU):
            x = np.maximum(x, 0)
        elif isinstance(layer, MaxPool):
            x = maxpool_raw(x, layer.size, layer.stride)
        elif isinstance(layer, ResidualAdd):
            src, src_q = saved[layer.source]
            if src.shape != x.shape:
                raise ShapeError(f"{layer.id}: shortcut {src.shape} vs {x.shape}")
            x, k = residual_add_raw(x, q, src, src_q, fxm.fmt(layer.id).act_q)
            nsat += k
        elif isinstance(layer, GlobalAvgPool):
            x = gap_raw(x)
        elif isinstance(layer, Softmax):
            pass
        else:
            raise TypeError(f"{layer.id}: {type(layer).__name__} has no fixed-point kernel")
        q = fxm.fmt(layer.id).act_q
        if layer.id in taps:
            saved[layer.id] = (x, q)
    return finish(x, q, nsat)


def fx_forward_naive(fxm: FxModel, image: Tensor) -> FxResult:
    def compute(layer, x, q):
        if isinstance(layer, Conv2D):
            return conv_naive(fxm, layer, x, q)
        return dense_naive(fxm, layer, x, q)

    return run_fx_layers(fxm, image, compute)


def parity_report(model: ModelGraph, fxm: FxModel, images: Sequence[Tensor]) -> dict:
    """Float vs fixed-point agreement over ``images``."""
    images = list(images)
    if not images:
        raise ValueError("parity report needs at least one image")
    matches, errs, sat = 0, [], 0
    for im in images:
        ref: ForwardResult = forward_ref(model, im)
        fx = fx_forward_naive(fxm, im)
        matches += int(ref.class_id == fx.class_id)
        errs.append(np.abs(fx.logits - ref.logits).max())
        sat += fx.saturation_count
    return {
        "images": len(images),
        "top1_match_rate": matches / len(images),
        "mean_abs_logit_err": float(np.mean(errs)),
        "max_abs_logit_err": float(np.max(errs)),
        "saturation_count": sat,
    }
