"""MobilePosenet: a small inverted-residual CNN with squeeze-excitation, two 3-vector heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .. import nn_engine as ne
from ..errors import ContractError

# (expansion t, output channels c, repeats n, first stride s)
DEFAULT_STAGES = ((1, 16, 1, 1), (6, 32, 2, 1), (6, 64, 2, 2), (6, 128, 2, 1), (1, 256, 1, 1))
PUBLISHED_PARAMETER_COUNT = 568_070
PUBLISHED_FLOPS = 10_565_104


@dataclass
class ModelConfig:
    in_channels: int = 6
    input_hw: tuple = (4, 4)
    pad: int = 2
    stem_channels: int = 32
    stem_kernel: int = 3
    stages: tuple = DEFAULT_STAGES
    head_channels: int = 512
    head_kernel: int = 1
    se_reduction: int = 16
    se_bias: bool = False
    expand_when_t1: bool = False
    use_se: bool = True
    use_coord_channels: bool = True

    def __post_init__(self):
        self.stages = tuple(tuple(int(v) for v in s) for s in self.stages)
        self.input_hw = tuple(int(v) for v in self.input_hw)
        for t, c, n, s in self.stages:
            if t < 1 or n < 1 or s not in (1, 2) or c < 1:
                raise ContractError(f"invalid stage {(t, c, n, s)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["input_hw"] = list(self.input_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ConvBnRelu(nn.Module):
    def __init__(self, c_in, c_out, kernel, generator=None):
        super().__init__()
        self.conv = ne.Conv2d(c_in, c_out, kernel, generator=generator)
        self.bn = ne.BatchNorm2d(c_out)
        self.act = ne.ReLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class IRAB(nn.Module):
    """Inverted residual attention block.

    1x1 expand + BN + ReLU6 (omitted when t == 1), 3x3 depthwise (stride s) +
    BN + ReLU6, linear 1x1 projection + BN, then squeeze-excitation. The skip
    connection is used when stride is 1 and channel count is unchanged.
    """

    def __init__(self, c_in, c_out, t, stride, use_se=True, se_reduction=16, se_bias=False, expand_when_t1=False, generator=None):
        super().__init__()
        hidden = c_in * t
        layers = []
        if t != 1 or expand_when_t1:
            layers += [ne.Conv2d(c_in, hidden, 1, generator=generator), ne.BatchNorm2d(hidden), ne.ReLU6()]
        layers += [
            ne.Conv2d(hidden, hidden, 3, stride=stride, groups=hidden, generator=generator),
            ne.BatchNorm2d(hidden),
            ne.ReLU6(),
            ne.Conv2d(hidden, c_out, 1, generator=generator),
            ne.BatchNorm2d(c_out),
        ]
        if use_se:
            layers.append(ne.SEBlock(c_out, se_reduction, bias=se_bias, generator=generator))
        self.body = nn.Sequential(*layers)
        self.stride = stride
        self.use_residual = stride == 1 and c_in == c_out

    def forward(self, x):
        y = self.body(x)
        return x + y if self.use_residual else y


class MobilePosenet(nn.Module):
    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        g = generator
        blocks = [ne.ZeroPad2d(config.pad), ConvBnRelu(config.in_channels, config.stem_channels, config.stem_kernel, g)]
        c = config.stem_channels
        for t, c_out, n, s in config.stages:
            for i in range(n):
                blocks.append(
                    IRAB(c, c_out, t, s if i == 0 else 1, config.use_se, config.se_reduction, config.se_bias, config.expand_when_t1, g)
                )
                c = c_out
        blocks.append(ConvBnRelu(c, config.head_channels, config.head_kernel, g))
        blocks.append(ne.AdaptiveAvgPool1x1())
        self.features = nn.Sequential(*blocks)
        self.position_head = ne.Linear(config.head_channels, 3, generator=g)
        self.heading_head = ne.Linear(config.head_channels, 3, generator=g)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.config.in_channels or tuple(x.shape[2:]) != self.config.input_hw:
            raise ContractError(f"expected input (B, {self.config.in_channels}, *{self.config.input_hw}), got {tuple(x.shape)}")
        f = self.features(x).flatten(1)
        return self.position_head(f), self.heading_head(f)

    def shape_trace(self) -> list[tuple]:
        """Per-stage activation shapes (without batch) for a single input."""
        shapes = []
        was_training = self.training
        self.eval()
        hooks = []
        x = torch.zeros(1, self.config.in_channels, *self.config.input_hw)
        shapes.append(tuple(x.shape[1:]))
        for m in self.features:
            hooks.append(m.register_forward_hook(lambda _m, _i, out: shapes.append(tuple(out.shape[1:]))))
        try:
            with torch.no_grad():
                f = self.features(x)
                shapes.append(tuple(f.flatten(1).shape[1:]))
                heads = (tuple(self.position_head(f.flatten(1)).shape[1:]), tuple(self.heading_head(f.flatten(1)).shape[1:]))
        finally:
            for h in hooks:
                h.remove()
            self.train(was_training)
        # collapse repeated IRABs of one stage into a single entry, matching the stage table
        collapsed = [shapes[0], shapes[1], shapes[2]]
        idx = 3
        for _t, _c, n, _s in self.config.stages:
            idx += n
            collapsed.append(shapes[idx - 1])
        collapsed += [shapes[idx], shapes[idx + 1], shapes[idx + 2], heads]
        return collapsed

    def flops(self) -> int:
        """Multiply-accumulates x 2 over convolutions and linear layers."""
        total = 0
        hooks = []

        def conv_hook(m, _i, out):
            nonlocal total
            total += m.flops(out.shape[2], out.shape[3])

        def lin_hook(m, _i, out):
            nonlocal total
            total += 2 * m.weight.shape[0] * m.weight.shape[1]

        for m in self.modules():
            if isinstance(m, ne.Conv2d):
                hooks.append(m.register_forward_hook(conv_hook))
            elif isinstance(m, ne.Linear):
                hooks.append(m.register_forward_hook(lin_hook))
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                self(torch.zeros(1, self.config.in_channels, *self.config.input_hw))
        finally:
            for h in hooks:
                h.remove()
            self.train(was_training)
        return total


def build_model(config: ModelConfig | None = None, seed: int = 0) -> MobilePosenet:
    config = config or ModelConfig()
    gen = torch.Generator().manual_seed(int(seed))
    return MobilePosenet(config, gen)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    n = ne.conv_param_count(config.in_channels, config.stem_channels, config.stem_kernel) + ne.bn_param_count(config.stem_channels)
    c = config.stem_channels
    for t, c_out, reps, _s in config.stages:
        for _ in range(reps):
            hidden = c * t
            if t != 1 or config.expand_when_t1:
                n += ne.conv_param_count(c, hidden, 1) + ne.bn_param_count(hidden)
            n += ne.conv_param_count(hidden, hidden, 3, groups=hidden) + ne.bn_param_count(hidden)
            n += ne.conv_param_count(hidden, c_out, 1) + ne.bn_param_count(c_out)
            if config.use_se:
                r = c_out // config.se_reduction
                n += ne.linear_param_count(c_out, r, config.se_bias) + ne.linear_param_count(r, c_out, config.se_bias)
            c = c_out
    n += ne.conv_param_count(c, config.head_channels, config.head_kernel) + ne.bn_param_count(config.head_channels)
    n += 2 * ne.linear_param_count(config.head_channels, 3)
    return n
