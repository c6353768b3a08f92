"""Two-stage 4x super-resolution generator.

Layout (tensors are NCHW inside the network)::

    C0 -> R0 -> I0 -> F0(C0, I0) -> U0 -> C1 (+ S(C0)) -> R1 -> I1
       -> F1(I1, C1, S(C0)) -> U1 -> output head

Each half ends with a nearest-neighbour 2x upsampling, so the total
magnification is 4x.  The feature mixing modules F0/F1 hold unconstrained
logits and combine their inputs with softmax weights, which keeps the
combination convex whatever the logit values are.
"""
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ShapeError

PRELU_INIT = 0.25


@dataclass(frozen=True)
class GeneratorConfig:
    n_g: int = 8
    ch0: int = 64
    ch1: int = 128
    outer_kernel: int = 9
    inner_kernel: int = 3
    outer_padding: int = 4
    inner_padding: int = 1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.n_g < 1:
            raise ConfigurationError(f"n_g must be >= 1, got {self.n_g}")
        if self.ch0 < 1 or self.ch1 < 1:
            raise ConfigurationError("channel widths must be >= 1")
        for name in ("outer_kernel", "inner_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigurationError(f"{name} must be a positive odd integer, got {k}")

    def to_dict(self):
        return asdict(self)


def init_conv_(conv):
    """Fan-in scaled normal weights, zero bias."""
    nn.init.kaiming_normal_(conv.weight, a=PRELU_INIT, mode="fan_in", nonlinearity="leaky_relu")
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def _conv(c_in, c_out, kernel, padding):
    conv = nn.Conv2d(c_in, c_out, kernel, stride=1, padding=padding)
    init_conv_(conv)
    return conv


def nn_upsample2x(t):
    """Replicate every pixel of an NCHW tensor into a 2x2 block."""
    return t.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


def feature_mix(inputs, logits):
    """Convex combination ``sum_k softmax(logits)_k * inputs[k]``."""
    if len(inputs) < 2:
        raise ShapeError("feature_mix needs at least two inputs")
    if logits.shape != (len(inputs),):
        raise ShapeError(f"expected {len(inputs)} logits, got shape {tuple(logits.shape)}")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ShapeError(f"feature_mix inputs differ in shape: {tuple(shape)} vs {tuple(t.shape)}")
    weights = torch.softmax(logits, dim=0)
    out = weights[0] * inputs[0]
    for w, t in zip(weights[1:], inputs[1:]):
        out = out + w * t
    return out


class FeatureMix(nn.Module):
    """Learnable convex mixing of ``k`` same-shaped feature maps."""

    def __init__(self, k):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(k))

    @property
    def weights(self):
        return torch.softmax(self.logits, dim=0)

    def forward(self, *inputs):
        return feature_mix(list(inputs), self.logits)


class ConvAct(nn.Module):
    """Convolution -> optional batch norm -> optional PReLU."""

    def __init__(self, c_in, c_out, kernel, padding, norm=False, act=True, momentum=0.1):
        super().__init__()
        self.conv = _conv(c_in, c_out, kernel, padding)
        self.norm = nn.BatchNorm2d(c_out, momentum=momentum) if norm else None
        self.act = nn.PReLU(c_out, init=PRELU_INIT) if act else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act is not None:
            x = self.act(x)
        return x


class ResidualBlock(nn.Module):
    """conv-BN-PReLU, conv-BN, added back onto the block input."""

    def __init__(self, channels, kernel=3, padding=1, momentum=0.1):
        super().__init__()
        self.sub1 = ConvAct(channels, channels, kernel, padding, norm=True, act=True, momentum=momentum)
        self.sub2 = ConvAct(channels, channels, kernel, padding, norm=True, act=False, momentum=momentum)

    def forward(self, x):
        return x + self.sub2(self.sub1(x))


class ResidualStack(nn.Module):
    def __init__(self, channels, n_blocks, kernel=3, padding=1, momentum=0.1):
        super().__init__()
        self.channels = channels
        self.blocks = nn.Sequential(
            *[ResidualBlock(channels, kernel, padding, momentum) for _ in range(n_blocks)]
        )

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"residual stack expects {self.channels} channels, got {x.shape[1]}")
        return self.blocks(x)


class UpBlock(nn.Module):
    """Stabilising conv + PReLU followed by nearest-neighbour 2x upsampling."""

    def __init__(self, c_in, c_out, kernel=3, padding=1):
        super().__init__()
        self.c_in = c_in
        self.conv = ConvAct(c_in, c_out, kernel, padding, norm=False, act=True)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape[1]}")
        return nn_upsample2x(self.conv(x))


class Generator(nn.Module):
    """Maps an (N, 3, H, W) batch in [0, 1] to (N, 3, 4H, 4W).

    No clipping happens in ``forward``; use :meth:`super_resolve` for
    inference output restricted to [0, 1].
    """

    def __init__(self, config=None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        ko, po, ki, pi, m = (cfg.outer_kernel, cfg.outer_padding, cfg.inner_kernel,
                             cfg.inner_padding, cfg.bn_momentum)
        self.c0 = ConvAct(3, cfg.ch0, ko, po)
        self.r0 = ResidualStack(cfg.ch0, cfg.n_g, ki, pi, m)
        self.i0 = ConvAct(cfg.ch0, cfg.ch0, ki, pi, norm=True, momentum=m)
        self.f0 = FeatureMix(2)
        self.u0 = UpBlock(cfg.ch0, cfg.ch0, ki, pi)
        self.c1 = ConvAct(cfg.ch0, cfg.ch1, ko, po)
        self.skip = UpBlock(cfg.ch0, cfg.ch1, ki, pi)
        self.r1 = ResidualStack(cfg.ch1, cfg.n_g, ki, pi, m)
        self.i1 = ConvAct(cfg.ch1, cfg.ch1, ki, pi, norm=True, momentum=m)
        self.f1 = FeatureMix(3)
        self.u1 = UpBlock(cfg.ch1, cfg.ch1, ki, pi)
        # output head: no normalisation, no activation
        self.head = nn.Sequential(_conv(cfg.ch1, cfg.ch0, ki, pi), _conv(cfg.ch0, 3, ki, pi))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"generator expects (N, 3, H, W), got {tuple(x.shape)}")
        c0 = self.c0(x)
        f0 = self.f0(c0, self.i0(self.r0(c0)))
        u0 = self.u0(f0)
        c1 = self.c1(u0)
        s = self.skip(c0)
        i1 = self.i1(self.r1(c1 + s))
        f1 = self.f1(i1, c1, s)
        return self.head(self.u1(f1))

    @torch.no_grad()
    def super_resolve(self, x):
        """Inference-mode forward pass with the output clipped to [0, 1]."""
        was_training = self.training
        self.eval()
        try:
            return self(x).clamp_(0.0, 1.0)
        finally:
            self.train(was_training)


def parameter_count(*models):
    """Number of trainable scalars across ``models``."""
    return sum(p.numel() for m in models for p in m.parameters() if p.requires_grad)
