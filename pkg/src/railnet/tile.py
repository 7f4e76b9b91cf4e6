"""Loop-tiled fixed-point executor with on-chip buffer accounting.

Each conv/dense layer is cut into output tiles (oc -> oh -> ow, outer to
inner) and every output tile reduces over input-channel tiles into an
exact 64-bit partial sum. Requantization waits for the full reduction, so
the result is bit-identical to :func:`railnet.quant.fx_forward_naive` for
any tiling.
"""

from __future__ import annotations

import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from . import fxp
from .fxp import QFormat
from .graph import Conv2D, Dense, ModelGraph, conv_geometry
from .quant import (FxModel, FxResult, LayerFormats, QuantPlan, check_layer_formats,
                    requant_counted, run_fx_layers)
from .tensor import FxTensor, extract_tile, im2col

BRAM_BLOCKS = 230.5
BRAM_BITS_PER_BLOCK = 36 * 1024
DEFAULT_BUDGET_BYTES = int(BRAM_BLOCKS * BRAM_BITS_PER_BLOCK) // 8  # 1,062,144

# Integer sums stay exact in float64 GEMMs up to this magnitude.
FLOAT_EXACT_LIMIT = 1 << 53


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    t_oc: int
    t_ic: int
    t_oh: int = 1
    t_ow: int = 1

    def __post_init__(self):
        if min(self.t_oc, self.t_ic, self.t_oh, self.t_ow) < 1:
            raise ValueError(f"tile sizes must be >= 1: {self}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TileConfig":
        return cls(int(d["t_oc"]), int(d["t_ic"]), int(d["t_oh"]), int(d["t_ow"]))


class LayerDims(NamedTuple):
    kh: int
    kw: int
    stride: int
    in_ch: int
    out_ch: int
    out_h: int
    out_w: int

    def full_config(self) -> TileConfig:
        return TileConfig(self.out_ch, self.in_ch, self.out_h, self.out_w)


class ElemBytes(NamedTuple):
    weight: int = 2
    act: int = 2
    psum: int = 4
    bias: int = 4


@dataclass
class PerfCounters:
    macs: int = 0
    bytes_loaded: int = 0
    bytes_stored: int = 0
    tiles_executed: int = 0

    def __add__(self, other: "PerfCounters") -> "PerfCounters":
        return PerfCounters(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def storage_bytes(bits: int) -> int:
    """Whole bytes an element of ``bits`` occupies in a buffer (12 -> 2, 22 -> 4)."""
    for b in (1, 2, 4, 8):
        if bits <= 8 * b:
            return b
    raise ValueError(f"no storage width for {bits}-bit elements")


def elem_bytes(fmt: Optional[LayerFormats]) -> ElemBytes:
    if fmt is None or fmt.weight_q is None:
        return ElemBytes()
    return ElemBytes(storage_bytes(fmt.weight_q.total_bits), storage_bytes(fmt.act_q.total_bits),
                     storage_bytes(fmt.bias_q.total_bits), storage_bytes(fmt.bias_q.total_bits))


def compute_layers(model: ModelGraph) -> dict:
    """Dims of every conv/dense layer, keyed by id, in model order."""
    dims = {}
    for i, layer in enumerate(model.layers):
        _, h, w, c = model.input_shape_of(i)
        if isinstance(layer, Conv2D):
            g = conv_geometry(h, w, layer.kernel, layer.stride, layer.pad)
            dims[layer.id] = LayerDims(*layer.kernel, layer.stride, layer.in_ch, layer.out_ch,
                                       g.out_h, g.out_w)
        elif isinstance(layer, Dense):
            dims[layer.id] = LayerDims(1, 1, 1, layer.in_features, layer.out_features, 1, 1)
    return dims


def mac_count(model: ModelGraph) -> int:
    """Conv and dense multiply-accumulates; pooling, BN and ReLU are free."""
    return sum(d.out_h * d.out_w * d.out_ch * d.in_ch * d.kh * d.kw
               for d in compute_layers(model).values())


def footprint(dims: LayerDims, cfg: TileConfig, eb: ElemBytes = ElemBytes()) -> int:
    """On-chip bytes for one tile: weights + input window + partial sums + bias."""
    weights = dims.kh * dims.kw * cfg.t_ic * cfg.t_oc * eb.weight
    inputs = ((cfg.t_oh * dims.stride + dims.kh - 1) * (cfg.t_ow * dims.stride + dims.kw - 1)
              * cfg.t_ic * eb.act)
    outputs = cfg.t_oh * cfg.t_ow * cfg.t_oc * eb.psum
    return weights + inputs + outputs + cfg.t_oc * eb.bias


def _check_cfg(layer_id: str, dims: LayerDims, cfg: TileConfig):
    if (cfg.t_oc > dims.out_ch or cfg.t_ic > dims.in_ch
            or cfg.t_oh > dims.out_h or cfg.t_ow > dims.out_w):
        raise ValueError(f"{layer_id}: {cfg} exceeds layer dims {dims}")


class Violation(NamedTuple):
    layer_id: str
    footprint: int
    budget: int

    @property
    def overage(self) -> int:
        return self.footprint - self.budget


def validate_tiling(model: ModelGraph, cfgs: dict, budget_bytes: int = DEFAULT_BUDGET_BYTES,
                    plan: Optional[QuantPlan] = None) -> list:
    """Return one :class:`Violation` per layer whose tile exceeds the budget (``[]`` is ok)."""
    violations = []
    for lid, dims in compute_layers(model).items():
        if lid not in cfgs:
            raise KeyError(f"no tile config for layer {lid!r}")
        _check_cfg(lid, dims, cfgs[lid])
        fp = footprint(dims, cfgs[lid], elem_bytes(plan.layers.get(lid) if plan else None))
        if fp > budget_bytes:
            violations.append(Violation(lid, fp, budget_bytes))
    return violations


def _search_layer(lid: str, dims: LayerDims, eb: ElemBytes, budget: int) -> TileConfig:
    oc = np.arange(1, dims.out_ch + 1)[:, None, None]
    oh = np.arange(1, dims.out_h + 1)[None, :, None]
    ow = np.arange(1, dims.out_w + 1)[None, None, :]
    s = dims.stride
    # footprint = t_ic * per_ic + fixed, linear in t_ic for fixed (t_oc, t_oh, t_ow)
    per_ic = (dims.kh * dims.kw * oc * eb.weight
              + (oh * s + dims.kh - 1) * (ow * s + dims.kw - 1) * eb.act)
    fixed = oh * ow * oc * eb.psum + oc * eb.bias
    t_ic = np.minimum((budget - fixed) // per_ic, dims.in_ch)
    feasible = t_ic >= 1
    if not feasible.any():
        raise BudgetError(f"{lid}: minimal footprint {footprint(dims, TileConfig(1, 1, 1, 1), eb)}"
                          f" exceeds budget {budget}")
    prod = np.where(feasible, oc * oh * ow, 0)
    grid = np.broadcast_arrays(prod, np.where(feasible, t_ic, 0), oc, oh, ow)
    # Largest product, then larger t_ic, then lexicographically largest (t_oc, t_oh, t_ow).
    order = np.lexsort(tuple(g.ravel() for g in reversed(grid)))
    best = order[-1]
    i, j, k = np.unravel_index(best, prod.shape)
    return TileConfig(int(i + 1), int(grid[1].ravel()[best]), int(j + 1), int(k + 1))


def search_tilings(model: ModelGraph, plan: Optional[QuantPlan] = None,
                   budget: int = DEFAULT_BUDGET_BYTES) -> dict:
    return {lid: _search_layer(lid, dims, elem_bytes(plan.layers.get(lid) if plan else None), budget)
            for lid, dims in compute_layers(model).items()}


# ----------------------------------------------------------------------------
# Tiled execution
# ----------------------------------------------------------------------------

class TiledResult(NamedTuple):
    result: FxResult
    counters: PerfCounters

    @property
    def raw_logits(self) -> np.ndarray:
        return self.result.raw_logits

    @property
    def class_id(self) -> int:
        return self.result.class_id

    @property
    def confidence(self) -> float:
        return self.result.confidence


def _partial(cols: np.ndarray, w: np.ndarray, exact_float: bool) -> np.ndarray:
    if exact_float:
        return (cols @ w).astype(np.int64)
    return cols.astype(np.int64) @ w.astype(np.int64)


def _spans(n: int, t: int):
    return [(a, min(t, n - a)) for a in range(0, n, t)]


class _LayerRun:
    """Tiled evaluation of one conv or dense layer."""

    def __init__(self, fxm: FxModel, layer, x: np.ndarray, in_q: QFormat, cfg: TileConfig):
        self.layer = layer
        self.cfg = cfg
        if isinstance(layer, Conv2D):
            kh, kw = layer.kernel
            _, h, w, c = x.shape
            if c != layer.in_ch:
                raise ValueError(f"{layer.id}: expects {layer.in_ch} channels, got {c}")
            self.geom = conv_geometry(h, w, layer.kernel, layer.stride, layer.pad)
            self.dims = LayerDims(kh, kw, layer.stride, c, layer.out_ch,
                                  self.geom.out_h, self.geom.out_w)
        else:
            self.dims = LayerDims(1, 1, 1, layer.in_features, layer.out_features, 1, 1)
            x = x.reshape(1, 1, 1, -1)
            if x.shape[3] != layer.in_features:
                raise ValueError(f"{layer.id}: expects {layer.in_features} inputs")
        d = self.dims
        _check_cfg(layer.id, d, cfg)
        self.fmt, self.bias = check_layer_formats(fxm, layer, in_q, d.kh * d.kw * d.in_ch)
        terms = d.kh * d.kw * min(cfg.t_ic, d.in_ch)
        self.exact_float = fxp.acc_bound(terms, in_q, self.fmt.weight_q) < FLOAT_EXACT_LIMIT
        wr = fxm.weights[layer.id].reshape(d.kh, d.kw, d.in_ch, d.out_ch)
        self.w = wr.astype(np.float64) if self.exact_float else wr
        self.x = FxTensor(x, in_q)
        self.eb = elem_bytes(self.fmt)

    def tiles(self):
        d, cfg = self.dims, self.cfg
        return [(oc, oh, ow)
                for oc in _spans(d.out_ch, cfg.t_oc)
                for oh in _spans(d.out_h, cfg.t_oh)
                for ow in _spans(d.out_w, cfg.t_ow)]

    def run_tile(self, tile):
        (oc0, toc), (oh0, th), (ow0, tw) = tile
        d, eb = self.dims, self.eb
        s = d.stride
        pt = self.geom.pad_top if isinstance(self.layer, Conv2D) else 0
        pl = self.geom.pad_left if isinstance(self.layer, Conv2D) else 0
        ctr = PerfCounters()
        acc = np.zeros((1, th, tw, toc), dtype=np.int64)
        for ic0, tic in _spans(d.in_ch, self.cfg.t_ic):
            win = extract_tile(self.x, (oh0 * s - pt, ow0 * s - pl, ic0),
                               ((th - 1) * s + d.kh, (tw - 1) * s + d.kw, tic), zero_pad=True).raw
            src = win.astype(np.float64) if self.exact_float else win
            cols = im2col(src, d.kh, d.kw, s)
            wt = self.w[:, :, ic0:ic0 + tic, oc0:oc0 + toc].reshape(-1, toc)
            acc += _partial(cols, wt, self.exact_float)
            ctr.macs += th * tw * toc * tic * d.kh * d.kw
            ctr.bytes_loaded += wt.size * eb.weight + win.size * eb.act
            ctr.tiles_executed += 1
        acc += self.bias[oc0:oc0 + toc]
        if getattr(self.layer, "relu", False):
            acc = np.maximum(acc, 0)
        out, nsat = requant_counted(acc, self.fmt.acc_frac, self.fmt.act_q)
        ctr.bytes_loaded += toc * eb.bias
        ctr.bytes_stored += out.size * eb.act
        return out, nsat, ctr

    def run(self, workers: int = 1):
        d = self.dims
        tiles = self.tiles()
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(self.run_tile, tiles))
        else:
            results = [self.run_tile(t) for t in tiles]
        y = np.zeros((1, d.out_h, d.out_w, d.out_ch), dtype=np.int64)
        total, nsat = PerfCounters(), 0
        for ((oc0, toc), (oh0, th), (ow0, tw)), (out, k, ctr) in zip(tiles, results):
            y[:, oh0:oh0 + th, ow0:ow0 + tw, oc0:oc0 + toc] = out
            nsat += k
            total = total + ctr
        return y, nsat, total


def run_layer_tiled(fxm: FxModel, layer, x: np.ndarray, in_q: QFormat, cfg: TileConfig,
                    workers: int = 1):
    """Tiled evaluation of one conv/dense layer: ``(raw_out, saturations, counters)``."""
    return _LayerRun(fxm, layer, x, in_q, cfg).run(workers)


def run_tiled(fxm: FxModel, image, cfgs: Optional[dict] = None,
              budget: Optional[int] = DEFAULT_BUDGET_BYTES, workers: int = 1) -> TiledResult:
    """Tiled fixed-point inference; ``budget=None`` skips the buffer check."""
    if cfgs is None:
        cfgs = fxm.plan.tiling or search_tilings(fxm.graph, fxm.plan, budget or DEFAULT_BUDGET_BYTES)
    if budget is not None:
        bad = validate_tiling(fxm.graph, cfgs, budget, fxm.plan)
        if bad:
            detail = ", ".join(f"{v.layer_id} over by {v.overage} B" for v in bad)
            raise BudgetError(f"tiling exceeds {budget}-byte budget: {detail}")
    counters = PerfCounters()

    def compute(layer, x, q):
        nonlocal counters
        y, nsat, ctr = run_layer_tiled(fxm, layer, x, q, cfgs[layer.id], workers)
        counters = counters + ctr
        return y, nsat

    return TiledResult(run_fx_layers(fxm, image, compute), counters)


# ----------------------------------------------------------------------------
# Benchmark
# ----------------------------------------------------------------------------

MIN_SECONDS = 1e-6


def median_latency(fn, runs: int = 10, warmup: int = 3) -> float:
    """Median wall seconds of ``fn()`` over ``runs`` after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return max(statistics.median(times), MIN_SECONDS)


def bench(fxm: FxModel, image, cfgs: Optional[dict] = None, budget: int = DEFAULT_BUDGET_BYTES,
          power_watts: Optional[float] = None, runs: int = 10, warmup: int = 3) -> dict:
    if cfgs is None:
        cfgs = fxm.plan.tiling or search_tilings(fxm.graph, fxm.plan, budget)
    res = run_tiled(fxm, image, cfgs, budget)
    seconds = median_latency(lambda: run_tiled(fxm, image, cfgs, budget), runs, warmup)
    gops = 2 * res.counters.macs / seconds / 1e9
    out = {
        **res.counters.to_dict(),
        "latency_ms": seconds * 1e3,
        "gops": gops,
        "class_id": res.class_id,
        "confidence": res.confidence,
    }
    if power_watts is not None:
        if power_watts <= 0:
            raise ValueError("power must be positive")
        out["power_watts"] = power_watts
        out["gops_per_watt"] = gops / power_watts
    return out
