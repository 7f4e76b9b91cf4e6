"""Conv + BatchNorm + ReLU fusion on the float graph.

Folding is done in float64 and stored back as float32, before any
quantization happens.
"""

from __future__ import annotations

import numpy as np

from .graph import BatchNorm, Conv2D, ModelGraph, ReLU, ResidualAdd, ShapeError, with_layers


def fold_bn_into_conv(conv: Conv2D, bn: BatchNorm) -> Conv2D:
    if bn.channels != conv.out_ch:
        raise ShapeError(f"{bn.id}: {bn.channels} channels cannot fold into {conv.out_ch}-channel {conv.id}")
    if conv.relu:
        raise ValueError(f"{conv.id}: cannot fold a batch norm past an absorbed ReLU")
    denom = bn.var.astype(np.float64) + bn.eps
    if (denom <= 0).any():
        raise ValueError(f"{bn.id}: var + eps must be positive to fold")
    scale = bn.gamma.astype(np.float64) / np.sqrt(denom)
    w = conv.weights.astype(np.float64) * scale
    b = (conv.bias.astype(np.float64) - bn.mean) * scale + bn.beta
    if not (np.isfinite(w).all() and np.isfinite(b).all()):
        raise ValueError(f"{bn.id}: folding produced non-finite weights")
    return Conv2D(conv.id, w, b, stride=conv.stride, pad=conv.pad)


def fuse_pass(model: ModelGraph) -> ModelGraph:
    """Fold every Conv->BN pair and absorb Conv->ReLU into the conv.

    A layer is only absorbed when the tensor it would consume is not tapped
    by a shortcut, so every shortcut operand survives unchanged. The fused
    conv keeps the conv's id; shortcut sources naming an absorbed layer are
    redirected to it.
    """
    taps = model.taps()
    out = []
    produced = []  # original id of the tensor each entry in ``out`` emits
    alias = {}
    for layer in model.layers:
        prev = out[-1] if out else None
        foldable = (isinstance(prev, Conv2D) and not prev.relu
                    and produced[-1] not in taps)
        if foldable and isinstance(layer, BatchNorm):
            out[-1] = fold_bn_into_conv(prev, layer)
        elif foldable and isinstance(layer, ReLU):
            out[-1] = Conv2D(prev.id, prev.weights, prev.bias, prev.stride, prev.pad, relu=True)
        else:
            out.append(layer)
            produced.append(layer.id)
            continue
        produced[-1] = layer.id
        alias[layer.id] = prev.id
    remapped = [
        ResidualAdd(layer.id, source=alias.get(layer.source, layer.source))
        if isinstance(layer, ResidualAdd) else layer
        for layer in out
    ]
    return with_layers(model, remapped)
