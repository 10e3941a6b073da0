"""The handful of differentiable layers MobilePosenet needs, plus Adam and the LR schedule.

Tensors are ``torch.Tensor`` in (batch, channels, height, width) layout and the
reverse-mode tape is torch autograd. Everything here is deliberately narrow:
1x1 or 3x3 kernels with same-padding, stride 1 or 2, optional grouping.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContractError, NumericError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


# --------------------------------------------------------------------------- functional ops


def conv2d(x: torch.Tensor, weight: torch.Tensor, stride: int = 1, groups: int = 1, bias=None) -> torch.Tensor:
    """Cross-correlation with zero padding k // 2 (same size at stride 1)."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ContractError("conv2d expects 4-d input and kernel")
    c_out, c_in_g, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ContractError(f"only 1x1 and 3x3 kernels are supported, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ContractError("stride must be 1 or 2")
    if x.shape[1] % groups or c_out % groups or x.shape[1] // groups != c_in_g:
        raise ContractError(f"channel mismatch: input {x.shape[1]}, kernel {tuple(weight.shape)}, groups {groups}")
    return F.conv2d(x, weight, bias, stride=stride, padding=kh // 2, groups=groups)


def batch_norm(
    x: torch.Tensor,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    running_mean: torch.Tensor,
    running_var: torch.Tensor,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> torch.Tensor:
    """Per-channel batch normalisation.

    Training mode normalises with biased batch statistics and folds the
    unbiased variance into the running estimate with ``momentum``.
    """
    if training and x.shape[0] < 2:
        raise ContractError("batch_norm in train mode needs a batch of at least 2")
    if x.shape[1] != gamma.shape[0]:
        raise ContractError("batch_norm channel mismatch")
    return F.batch_norm(x, running_mean, running_var, gamma, beta, training, momentum, eps)


def relu6(x: torch.Tensor) -> torch.Tensor:
    # hardtanh's backward is zero at exactly 0 and 6
    return F.hardtanh(x, 0.0, 6.0)


def adaptive_avg_pool_1x1(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3), keepdim=True)


def linear(x: torch.Tensor, weight: torch.Tensor, bias=None) -> torch.Tensor:
    if x.shape[-1] != weight.shape[1]:
        raise ContractError(f"linear: input width {x.shape[-1]} vs weight {tuple(weight.shape)}")
    return F.linear(x, weight, bias)


def zero_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    if pad < 0:
        raise ContractError("pad must be >= 0")
    if pad == 0:
        return x
    return F.pad(x, (pad, pad, pad, pad))


def se_block(x, w_reduce, w_expand, b_reduce=None, b_expand=None) -> torch.Tensor:
    """Squeeze-and-excitation: pool -> linear -> ReLU -> linear -> sigmoid -> rescale."""
    c = x.shape[1]
    if w_reduce.shape[1] != c or w_expand.shape[0] != c or w_expand.shape[1] != w_reduce.shape[0]:
        raise ContractError("se_block weight shapes do not match input channels")
    s = adaptive_avg_pool_1x1(x).flatten(1)
    s = F.relu(linear(s, w_reduce, b_reduce))
    s = torch.sigmoid(linear(s, w_expand, b_expand))
    return x * s[:, :, None, None]


# --------------------------------------------------------------------------- layers


def _uniform_(t: torch.Tensor, fan_in: int, generator: torch.Generator | None):
    bound = math.sqrt(1.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t


class Conv2d(nn.Module):
    def __init__(self, c_in, c_out, kernel=1, stride=1, groups=1, generator=None):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ContractError("channels must be divisible by groups")
        self.stride, self.groups = stride, groups
        self.weight = nn.Parameter(torch.empty(c_out, c_in // groups, kernel, kernel))
        _uniform_(self.weight, c_in // groups * kernel * kernel, generator)

    def forward(self, x):
        return conv2d(x, self.weight, self.stride, self.groups)

    def flops(self, h_out, w_out) -> int:
        c_out, c_in_g, k, _ = self.weight.shape
        return 2 * k * k * c_in_g * c_out * h_out * w_out


class BatchNorm2d(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var, self.training)


class ReLU6(nn.Module):
    def forward(self, x):
        return relu6(x)


class ReLU(nn.Module):
    def forward(self, x):
        return F.relu(x)


class ZeroPad2d(nn.Module):
    def __init__(self, pad):
        super().__init__()
        self.pad = pad

    def forward(self, x):
        return zero_pad(x, self.pad)


class AdaptiveAvgPool1x1(nn.Module):
    def forward(self, x):
        return adaptive_avg_pool_1x1(x)


class Linear(nn.Module):
    def __init__(self, d_in, d_out, bias=True, generator=None):
        super().__init__()
        self.weight = nn.Parameter(_uniform_(torch.empty(d_out, d_in), d_in, generator))
        self.bias = nn.Parameter(_uniform_(torch.empty(d_out), d_in, generator)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class SEBlock(nn.Module):
    def __init__(self, channels, reduction=16, bias=False, generator=None):
        super().__init__()
        if channels % reduction:
            raise ContractError(f"channels {channels} not divisible by SE reduction {reduction}")
        hidden = channels // reduction
        self.reduce = Linear(channels, hidden, bias=bias, generator=generator)
        self.expand = Linear(hidden, channels, bias=bias, generator=generator)

    def forward(self, x):
        return se_block(x, self.reduce.weight, self.expand.weight, self.reduce.bias, self.expand.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def conv_param_count(c_in, c_out, k, groups=1, bias=False) -> int:
    return c_in // groups * c_out * k * k + (c_out if bias else 0)


def bn_param_count(c) -> int:
    return 2 * c


def linear_param_count(d_in, d_out, bias=True) -> int:
    return d_in * d_out + (d_out if bias else 0)


# --------------------------------------------------------------------------- optimisation


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """eta(e) = eta0 * (1 + cos(pi e / E)) / 2, reaching 0 at e = E."""
    if total_epochs <= 0:
        raise ContractError("total_epochs must be positive")
    e = min(max(epoch, 0), total_epochs)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * e / total_epochs))


@dataclass
class OptimizerState:
    base_lr: float = 1e-4
    total_epochs: int = 256
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)

    def lr_at(self, epoch: int) -> float:
        return cosine_lr(self.base_lr, epoch, self.total_epochs)

    def describe(self) -> dict:
        return {
            "optimizer": "adam",
            "betas": list(self.betas),
            "eps": self.eps,
            "base_lr": self.base_lr,
            "schedule": "cosine-to-zero, stepped per epoch",
            "total_epochs": self.total_epochs,
        }


@torch.no_grad()
def adam_step(params, grads, state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update applied in place to ``params``."""
    params = list(params)
    grads = list(grads)
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    if len(params) != len(state.exp_avg) or len(grads) != len(params):
        raise ContractError("parameter list does not match optimizer state")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractError("gradient shape does not match parameter")
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
