"""Inference-only execution of a trained MobilePosenet.

Each conv + BN pair is folded into a single biased convolution using the
running statistics, and the network is run in NumPy on channels-last
(B, H, W, C) float32 arrays: 1x1 convolutions become matrix products, 3x3
convolutions read a strided window view of the padded input. At batch size 1
the torch modules spend most of their time in per-op dispatch on these tiny
feature maps; this path avoids that and matches ``model.eval()`` to float32
rounding.
"""
from __future__ import annotations

import numpy as np
import torch
from numpy.lib.stride_tricks import as_strided

from .. import nn_engine as ne
from .model import IRAB, ConvBnRelu, MobilePosenet


def _fold(conv: ne.Conv2d, bn: ne.BatchNorm2d, act):
    with torch.no_grad():
        scale = bn.weight / torch.sqrt(bn.running_var + ne.BN_EPS)
        w = (conv.weight * scale.view(-1, 1, 1, 1)).numpy()
        b = (bn.bias - bn.running_mean * scale).numpy()
    k = w.shape[-1]
    if k == 1 and conv.stride == 1 and conv.groups == 1:
        return ("pointwise", np.ascontiguousarray(w[:, :, 0, 0].T), b, act)
    if conv.groups == 1:
        # rows ordered (ky, kx, c_in) to match a flattened window
        w = np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))
        return ("dense", w, b, k, conv.stride, act)
    if conv.groups == w.shape[0] and w.shape[1] == 1:
        return ("depthwise", np.ascontiguousarray(w[:, 0].transpose(1, 2, 0)), b, conv.stride, act)
    raise TypeError("only dense, pointwise and depthwise convolutions can be folded")


def _block_steps(block: IRAB):
    layers = list(block.body)
    steps = []
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, ne.Conv2d):
            act = "relu6" if i + 2 < len(layers) and isinstance(layers[i + 2], ne.ReLU6) else None
            steps.append(_fold(layer, layers[i + 1], act))
            i += 3 if act else 2
        elif isinstance(layer, ne.SEBlock):
            r, e = layer.reduce, layer.expand
            steps.append((
                "se",
                r.weight.detach().numpy().T.copy(),
                None if r.bias is None else r.bias.detach().numpy(),
                e.weight.detach().numpy().T.copy(),
                None if e.bias is None else e.bias.detach().numpy(),
            ))
            i += 1
        else:
            raise TypeError(f"cannot fold layer {type(layer).__name__}")
    return steps


def _pad(x, p):
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    out[:, p : p + h, p : p + w] = x
    return out


def _windows(x, k, stride):
    """(B, Ho, Wo, k, k, C) read-only view of 'same'-padded k x k windows."""
    xp = _pad(x, k // 2)
    b, h, w, c = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    sb, sh, sw, sc = xp.strides
    return as_strided(xp, (b, ho, wo, k, k, c), (sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def _bias_act(x, b, act):
    x += b
    if act is not None:
        np.maximum(x, 0.0, out=x)
    if act == "relu6":
        np.minimum(x, 6.0, out=x)
    return x


def _run(x, steps):
    for step in steps:
        kind = step[0]
        if kind == "pointwise":
            _, w, b, act = step
            x = _bias_act(x @ w, b, act)
        elif kind == "dense":
            _, w, b, k, stride, act = step
            win = _windows(x, k, stride)
            x = _bias_act(win.reshape(*win.shape[:3], -1) @ w, b, act)
        elif kind == "depthwise":
            _, w, b, stride, act = step
            x = _bias_act(np.einsum("bhwijc,ijc->bhwc", _windows(x, w.shape[0], stride), w), b, act)
        else:
            _, wr, br, we, be = step
            g = x.mean(axis=(1, 2)) @ wr
            if br is not None:
                g += br
            g = np.maximum(g, 0.0) @ we
            if be is not None:
                g += be
            x = x * (1.0 / (1.0 + np.exp(-g)))[:, None, None, :]
    return x


class FoldedPosenet:
    """Frozen, BN-folded copy of a MobilePosenet; later changes to the source model are not seen."""

    def __init__(self, model: MobilePosenet):
        self.config = model.config
        plan = []
        for mod in model.features:
            if isinstance(mod, ne.ZeroPad2d):
                plan.append(("pad", mod.pad))
            elif isinstance(mod, ConvBnRelu):
                plan.append(("seq", [_fold(mod.conv, mod.bn, "relu")], False))
            elif isinstance(mod, IRAB):
                plan.append(("seq", _block_steps(mod), mod.use_residual))
            elif isinstance(mod, ne.AdaptiveAvgPool1x1):
                plan.append(("pool",))
            else:
                raise TypeError(f"cannot fold module {type(mod).__name__}")
        self.plan = plan
        self.position_head = (model.position_head.weight.detach().numpy().T.copy(), model.position_head.bias.detach().numpy())
        self.heading_head = (model.heading_head.weight.detach().numpy().T.copy(), model.heading_head.bias.detach().numpy())

    def __call__(self, x):
        """(B, C, H, W) input, array or tensor -> float32 arrays (B, 3) position and (B, 3) raw heading."""
        if isinstance(x, torch.Tensor):
            x = x.detach().numpy()
        x = np.ascontiguousarray(np.asarray(x, dtype=np.float32).transpose(0, 2, 3, 1))
        for step in self.plan:
            if step[0] == "pad":
                x = _pad(x, step[1])
            elif step[0] == "seq":
                y = _run(x, step[1])
                x = x + y if step[2] else y
            else:
                x = x.mean(axis=(1, 2))
        if x.ndim == 4:
            x = x.mean(axis=(1, 2))
        return x @ self.position_head[0] + self.position_head[1], x @ self.heading_head[0] + self.heading_head[1]
