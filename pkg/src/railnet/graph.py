"""Float reference model: layer definitions, executor, canonical network, file I/O.

Weights are stored as float32; activations are carried in float64 so the
reference is a tight yardstick for the fixed-point executors.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .tensor import Tensor, im2col

FORMAT_NAME = "rnet"
FORMAT_VERSION = 1
MODEL_INPUT_SHAPE = (1, 128, 128, 3)
CLASS_NAMES = ("defective", "healthy")


class ShapeError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


def _f32(a) -> np.ndarray:
    a = np.array(a, dtype=np.float32)
    a.flags.writeable = False
    return a


# ----------------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Layer:
    id: str
    kind = "layer"

    def tensors(self) -> dict:
        """Named float32 parameter arrays, in file declaration order."""
        return {}

    def params(self) -> dict:
        """JSON-serialisable scalar attributes (excluding ``id``)."""
        out = {}
        for f in fields(self):
            if f.name == "id":
                continue
            v = getattr(self, f.name)
            if not isinstance(v, np.ndarray):
                out[f.name] = v
        return out


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    weights: np.ndarray  # [kh, kw, in_ch, out_ch]
    bias: np.ndarray
    stride: int = 1
    pad: str = "same"
    relu: bool = False  # set by the fusion pass: ReLU applied after the bias add
    kind = "conv2d"

    def __post_init__(self):
        object.__setattr__(self, "weights", _f32(self.weights))
        object.__setattr__(self, "bias", _f32(self.bias))
        if self.weights.ndim != 4:
            raise ShapeError(f"{self.id}: conv weights must be [kh, kw, in, out]")
        if self.bias.shape != (self.out_ch,):
            raise ShapeError(f"{self.id}: bias shape {self.bias.shape} != ({self.out_ch},)")
        if self.pad not in ("same", "valid"):
            raise ValueError(f"{self.id}: pad must be 'same' or 'valid'")
        if self.stride < 1:
            raise ValueError(f"{self.id}: stride must be >= 1")

    @property
    def kernel(self) -> tuple:
        return self.weights.shape[:2]

    @property
    def in_ch(self) -> int:
        return self.weights.shape[2]

    @property
    def out_ch(self) -> int:
        return self.weights.shape[3]

    def tensors(self):
        return {"weights": self.weights, "bias": self.bias}


@dataclass(frozen=True, eq=False)
class BatchNorm(Layer):
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5
    kind = "batchnorm"

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        n = self.gamma.shape
        if len(n) != 1 or any(getattr(self, k).shape != n for k in ("beta", "mean", "var")):
            raise ShapeError(f"{self.id}: batchnorm vectors must share one length")
        if (self.var < 0).any():
            raise ValueError(f"{self.id}: negative variance")
        if self.eps < 0:
            raise ValueError(f"{self.id}: eps must be >= 0")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def tensors(self):
        return {"gamma": self.gamma, "beta": self.beta, "mean": self.mean, "var": self.var}


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind = "relu"


@dataclass(frozen=True, eq=False)
class MaxPool(Layer):
    size: int = 2
    stride: int = 2
    kind = "maxpool"


@dataclass(frozen=True, eq=False)
class ResidualAdd(Layer):
    source: str = ""
    kind = "residual_add"


@dataclass(frozen=True, eq=False)
class GlobalAvgPool(Layer):
    kind = "global_avg_pool"


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    weights: np.ndarray  # [in, out]
    bias: np.ndarray
    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "weights", _f32(self.weights))
        object.__setattr__(self, "bias", _f32(self.bias))
        if self.weights.ndim != 2:
            raise ShapeError(f"{self.id}: dense weights must be [in, out]")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"{self.id}: bias shape {self.bias.shape} mismatches weights")

    @property
    def in_features(self) -> int:
        return self.weights.shape[0]

    @property
    def out_features(self) -> int:
        return self.weights.shape[1]

    def tensors(self):
        return {"weights": self.weights, "bias": self.bias}


@dataclass(frozen=True, eq=False)
class Softmax(Layer):
    kind = "softmax"


LAYER_TYPES = {cls.kind: cls for cls in
               (Conv2D, BatchNorm, ReLU, MaxPool, ResidualAdd, GlobalAvgPool, Dense, Softmax)}


# ----------------------------------------------------------------------------
# Geometry
# ----------------------------------------------------------------------------

class ConvGeometry(NamedTuple):
    out_h: int
    out_w: int
    pad_top: int
    pad_left: int
    pad_bottom: int
    pad_right: int


def conv_geometry(in_h: int, in_w: int, kernel: Sequence[int], stride: int,
                  pad: str) -> ConvGeometry:
    kh, kw = kernel
    if pad == "valid":
        if kh > in_h or kw > in_w:
            raise ShapeError(f"kernel {kh}x{kw} larger than input {in_h}x{in_w}")
        return ConvGeometry((in_h - kh) // stride + 1, (in_w - kw) // stride + 1, 0, 0, 0, 0)
    oh, ow = -(-in_h // stride), -(-in_w // stride)
    ph = max((oh - 1) * stride + kh - in_h, 0)
    pw = max((ow - 1) * stride + kw - in_w, 0)
    return ConvGeometry(oh, ow, ph // 2, pw // 2, ph - ph // 2, pw - pw // 2)


def pool_out(size: int, stride: int, n: int) -> int:
    if size > n:
        raise ShapeError(f"pool window {size} larger than input extent {n}")
    return (n - size) // stride + 1


# ----------------------------------------------------------------------------
# Model graph
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelGraph:
    layers: tuple
    input_shape: tuple = MODEL_INPUT_SHAPE
    class_names: tuple = CLASS_NAMES
    shapes: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ValueError("layer ids must be unique")
        softmaxes = [i for i, layer in enumerate(self.layers) if isinstance(layer, Softmax)]
        if softmaxes != [len(self.layers) - 1]:
            raise ValueError("model needs exactly one Softmax, as its last layer")
        seen = set()
        for layer in self.layers:
            if isinstance(layer, ResidualAdd) and layer.source not in seen:
                raise ValueError(f"{layer.id}: shortcut source {layer.source!r} is not an earlier layer")
            seen.add(layer.id)
        object.__setattr__(self, "shapes", infer_shapes(self))
        out = self.shapes[self.layers[-1].id]
        if out[1:3] != (1, 1) or out[3] != len(self.class_names):
            raise ShapeError(f"model output {out} does not match {len(self.class_names)} classes")

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        if (self.input_shape, self.class_names) != (other.input_shape, other.class_names):
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if type(a) is not type(b) or a.id != b.id or a.params() != b.params():
                return False
            ta, tb = a.tensors(), b.tensors()
            if ta.keys() != tb.keys() or not all(np.array_equal(ta[k], tb[k]) for k in ta):
                return False
        return True

    __hash__ = None

    def index(self, layer_id: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.id == layer_id:
                return i
        raise KeyError(layer_id)

    def taps(self) -> set:
        """Ids whose outputs feed a shortcut."""
        return {layer.source for layer in self.layers if isinstance(layer, ResidualAdd)}

    def input_shape_of(self, i: int) -> tuple:
        return self.input_shape if i == 0 else self.shapes[self.layers[i - 1].id]


def infer_shapes(model: ModelGraph) -> dict:
    shapes = {}
    cur = model.input_shape
    for layer in model.layers:
        n, h, w, c = cur
        if isinstance(layer, Conv2D):
            if layer.in_ch != c:
                raise ShapeError(f"{layer.id}: expects {layer.in_ch} input channels, got {c}")
            g = conv_geometry(h, w, layer.kernel, layer.stride, layer.pad)
            cur = (n, g.out_h, g.out_w, layer.out_ch)
        elif isinstance(layer, BatchNorm):
            if layer.channels != c:
                raise ShapeError(f"{layer.id}: {layer.channels} channels, input has {c}")
        elif isinstance(layer, MaxPool):
            cur = (n, pool_out(layer.size, layer.stride, h), pool_out(layer.size, layer.stride, w), c)
        elif isinstance(layer, ResidualAdd):
            if shapes[layer.source] != cur:
                raise ShapeError(f"{layer.id}: shortcut {shapes[layer.source]} vs {cur}")
        elif isinstance(layer, GlobalAvgPool):
            cur = (n, 1, 1, c)
        elif isinstance(layer, Dense):
            if h * w * c != layer.in_features:
                raise ShapeError(f"{layer.id}: expects {layer.in_features} inputs, got {h * w * c}")
            cur = (n, 1, 1, layer.out_features)
        shapes[layer.id] = cur
    return shapes


# ----------------------------------------------------------------------------
# Reference operators (float64 on ndarray)
# ----------------------------------------------------------------------------

def _conv(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    n, h, w, c = x.shape
    if c != layer.in_ch:
        raise ShapeError(f"{layer.id}: expects {layer.in_ch} input channels, got {c}")
    kh, kw = layer.kernel
    g = conv_geometry(h, w, layer.kernel, layer.stride, layer.pad)
    xp = np.pad(x, ((0, 0), (g.pad_top, g.pad_bottom), (g.pad_left, g.pad_right), (0, 0)))
    cols = im2col(xp, kh, kw, layer.stride)
    wm = layer.weights.astype(np.float64).reshape(kh * kw * c, layer.out_ch)
    y = cols @ wm + layer.bias.astype(np.float64)
    return np.maximum(y, 0.0) if layer.relu else y


def _batchnorm(x: np.ndarray, layer: BatchNorm) -> np.ndarray:
    if x.shape[-1] != layer.channels:
        raise ShapeError(f"{layer.id}: {layer.channels} channels, input has {x.shape[-1]}")
    g, b, m, v = (a.astype(np.float64) for a in (layer.gamma, layer.beta, layer.mean, layer.var))
    return g * (x - m) / np.sqrt(v + layer.eps) + b


def _maxpool(x: np.ndarray, size: int, stride: int) -> np.ndarray:
    n, h, w, c = x.shape
    oh, ow = pool_out(size, stride, h), pool_out(size, stride, w)
    win = np.lib.stride_tricks.sliding_window_view(x, (size, size), axis=(1, 2))
    return win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride].max(axis=(4, 5))


def _softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("softmax of an empty vector")
    if np.isnan(v).any():
        raise ValueError("softmax input contains NaN")
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def conv2d_ref(input: Tensor, layer: Conv2D) -> Tensor:
    return Tensor(_conv(input.data, layer))


def batchnorm_ref(input: Tensor, layer: BatchNorm) -> Tensor:
    return Tensor(_batchnorm(input.data, layer))


def relu_ref(input: Tensor) -> Tensor:
    return Tensor(np.maximum(input.data, 0.0))


def pool_ref(input: Tensor, kind: str = "max", size: int = 2, stride: int = 2) -> Tensor:
    if kind == "max":
        return Tensor(_maxpool(input.data, size, stride))
    if kind == "global_avg":
        return Tensor(input.data.mean(axis=(1, 2), keepdims=True))
    raise ValueError(f"unknown pool kind {kind!r}")


def dense_ref(input, layer: Dense) -> np.ndarray:
    x = np.asarray(input, dtype=np.float64).reshape(-1)
    if x.size != layer.in_features:
        raise ShapeError(f"{layer.id}: expects {layer.in_features} inputs, got {x.size}")
    return x @ layer.weights.astype(np.float64) + layer.bias.astype(np.float64)


def softmax_ref(logits) -> np.ndarray:
    return _softmax(logits)


# ----------------------------------------------------------------------------
# Executor
# ----------------------------------------------------------------------------

class ForwardResult(NamedTuple):
    logits: np.ndarray
    probabilities: np.ndarray
    class_id: int
    confidence: float


def classify(logits: np.ndarray) -> ForwardResult:
    probs = _softmax(logits)
    # np.argmax returns the first maximum: ties go to the lowest class id.
    k = int(np.argmax(probs))
    return ForwardResult(logits, probs, k, float(probs[k]))


def _apply(layer: Layer, x: np.ndarray, outputs: dict) -> np.ndarray:
    if isinstance(layer, Conv2D):
        return _conv(x, layer)
    if isinstance(layer, BatchNorm):
        return _batchnorm(x, layer)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0.0)
    if isinstance(layer, MaxPool):
        return _maxpool(x, layer.size, layer.stride)
    if isinstance(layer, ResidualAdd):
        src = outputs[layer.source]
        if src.shape != x.shape:
            raise ShapeError(f"{layer.id}: shortcut {src.shape} vs {x.shape}")
        return x + src
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(1, 2), keepdims=True)
    if isinstance(layer, Dense):
        return dense_ref(x, layer).reshape(1, 1, 1, -1)
    if isinstance(layer, Softmax):
        return x
    raise TypeError(f"unsupported layer {type(layer).__name__}")


def run_layers(model: ModelGraph, image: Tensor,
               hook: Optional[Callable] = None) -> np.ndarray:
    """Execute every layer but the final Softmax; returns the logits vector.

    ``hook(layer, x_in, y_out)`` is called after each layer.
    """
    if tuple(image.shape) != model.input_shape:
        raise ShapeError(f"image shape {image.shape} != model input {model.input_shape}")
    taps = model.taps()
    outputs = {}
    x = image.data
    for layer in model.layers:
        y = _apply(layer, x, outputs)
        if hook is not None:
            hook(layer, x, y)
        if layer.id in taps:
            outputs[layer.id] = y
        x = y
    return x.reshape(-1)


def forward_ref(model: ModelGraph, image: Tensor) -> ForwardResult:
    return classify(run_layers(model, image))


# ----------------------------------------------------------------------------
# Canonical network
# ----------------------------------------------------------------------------

def _conv_bn_relu(prefix, rng, k, cin, cout, stride=1, pad="same", relu=True, zeros=False):
    fan_in = k * k * cin
    if zeros:
        w = np.zeros((k, k, cin, cout))
        b = np.zeros(cout)
        bn = BatchNorm(f"{prefix}.bn", np.ones(cout), np.zeros(cout), np.zeros(cout), np.ones(cout))
    else:
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (k, k, cin, cout))
        b = rng.normal(0.0, 0.05, cout)
        bn = BatchNorm(f"{prefix}.bn",
                       gamma=rng.uniform(0.7, 1.1, cout),
                       beta=rng.normal(0.0, 0.1, cout),
                       mean=rng.normal(0.0, 0.1, cout),
                       var=rng.uniform(0.6, 1.4, cout))
    layers = [Conv2D(f"{prefix}.conv", w, b, stride=stride, pad=pad), bn]
    if relu:
        layers.append(ReLU(f"{prefix}.relu"))
    return layers


def canonical_railnet(seed: int = 42, init: str = "he") -> ModelGraph:
    """The fixed lightweight residual classifier with seeded random weights.

    Layout (input 1x128x128x3, about 26.3M MACs)::

        stem  conv3x3/2 valid 3->16 + BN + ReLU   -> 63x63x16
        pool  2x2                                 -> 31x31x16
        stage1  2 x residual block @16            -> 31x31x16
        pool  2x2, conv1x1 16->32 + BN + ReLU     -> 15x15x32
        stage2  2 x residual block @32
        pool  2x2, conv1x1 32->64 + BN + ReLU     -> 7x7x64
        stage3  2 x residual block @64
        GAP, dense 64->2, softmax

    A residual block is conv3x3+BN+ReLU, conv3x3+BN, identity add, ReLU.
    ``init="zeros"`` zeroes every conv/dense weight and bias and makes each
    batch norm an identity.
    """
    if init not in ("he", "zeros"):
        raise ValueError(f"unknown init {init!r}")
    zeros = init == "zeros"
    rng = np.random.default_rng(seed)
    layers = _conv_bn_relu("stem", rng, 3, 3, 16, stride=2, pad="valid", zeros=zeros)
    layers.append(MaxPool("pool0", 2, 2))
    prev = "pool0"
    cin = 16
    for s, width in enumerate((16, 32, 64), start=1):
        if s > 1:
            layers.append(MaxPool(f"pool{s - 1}", 2, 2))
            layers += _conv_bn_relu(f"s{s}.proj", rng, 1, cin, width, zeros=zeros)
            prev = f"s{s}.proj.relu"
        for b in range(2):
            p = f"s{s}.b{b}"
            layers += _conv_bn_relu(f"{p}.c1", rng, 3, width, width, zeros=zeros)
            layers += _conv_bn_relu(f"{p}.c2", rng, 3, width, width, relu=False, zeros=zeros)
            layers += [ResidualAdd(f"{p}.add", source=prev), ReLU(f"{p}.relu")]
            prev = f"{p}.relu"
        cin = width
    layers.append(GlobalAvgPool("gap"))
    if zeros:
        layers.append(Dense("fc", np.zeros((64, 2)), np.zeros(2)))
    else:
        layers.append(Dense("fc", rng.normal(0.0, math.sqrt(1.0 / 64), (64, 2)), rng.normal(0.0, 0.05, 2)))
    layers.append(Softmax("softmax"))
    return ModelGraph(tuple(layers))


# ----------------------------------------------------------------------------
# .rnet file format
# ----------------------------------------------------------------------------

def model_to_bytes(model: ModelGraph) -> bytes:
    header_layers = []
    blobs = []
    for layer in model.layers:
        entry = {"id": layer.id, "kind": layer.kind, **layer.params()}
        entry["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in layer.tensors().items()]
        header_layers.append(entry)
        blobs += [np.ascontiguousarray(v, dtype="<f4").tobytes() for v in layer.tensors().values()]
    blob = b"".join(blobs)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "input_shape": list(model.input_shape),
        "class_names": list(model.class_names),
        "layers": header_layers,
        "blob_bytes": len(blob),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + b"\n" + blob + struct.pack("<I", zlib.crc32(blob))


def model_from_bytes(data: bytes) -> ModelGraph:
    nl = data.find(b"\n")
    if nl < 0:
        raise ModelFormatError("missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"malformed header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise ModelFormatError("not an rnet file")
    if header.get("version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported rnet version {header.get('version')!r}")
    nbytes = header["blob_bytes"]
    body = data[nl + 1:]
    if len(body) != nbytes + 4:
        raise ModelFormatError(f"expected {nbytes + 4} bytes after header, found {len(body)}")
    blob, (crc,) = body[:nbytes], struct.unpack("<I", body[nbytes:])
    if zlib.crc32(blob) != crc:
        raise ModelFormatError("weight blob checksum mismatch")
    offset = 0
    layers = []
    try:
        for entry in header["layers"]:
            entry = dict(entry)
            cls = LAYER_TYPES[entry.pop("kind")]
            tensors = {}
            for t in entry.pop("tensors"):
                count = int(np.prod(t["shape"], dtype=np.int64))
                arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
                tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
                offset += 4 * count
            layers.append(cls(**entry, **tensors))
        if offset != nbytes:
            raise ModelFormatError("blob size does not match declared tensors")
        return ModelGraph(tuple(layers), tuple(header["input_shape"]), tuple(header["class_names"]))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed layer table: {e}") from None


def save_model(model: ModelGraph, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> ModelGraph:
    return model_from_bytes(Path(path).read_bytes())


def with_layers(model: ModelGraph, layers) -> ModelGraph:
    return replace(model, layers=tuple(layers))
