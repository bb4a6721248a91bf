"""Composite network blocks: multi-kernel depthwise convolution, inverted
residuals, channel/spatial attention, the grouped attention gate and the
segmentation head.

Convolutions followed by batch norm carry no bias; the attention pointwise
convolutions and segmentation heads do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (BatchNorm2d, Conv2d, channel_shuffle, channel_stats,
                  concat_channels, global_pool, relu, relu6, sigmoid)
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor4, add, hadamard


def validate_kernels(kernels) -> tuple[int, ...]:
    """Kernel sets are non-empty lists of odd sizes in [1, 7]; duplicates allowed."""
    ks = tuple(int(k) for k in kernels)
    if not ks:
        raise ValueError("kernel set must be non-empty")
    for k in ks:
        if k < 1 or k > 7 or k % 2 == 0:
            raise ValueError(f"kernel sizes must be odd and in [1, 7], got {k}")
    return ks


@dataclass(frozen=True)
class BlockHyper:
    """Shared block hyperparameters.

    expansion: hidden width multiplier of the inverted residual.
    ca_reduction: channel-attention squeeze ratio.
    sa_kernel: spatial-attention convolution size.
    shuffle_groups / shuffle_enabled: channel shuffle after the kernel sum.
    gag_kernel: attention-gate depthwise kernel size.
    """

    expansion: int = 2
    ca_reduction: int = 16
    sa_kernel: int = 7
    shuffle_groups: int = 2
    gag_kernel: int = 3
    shuffle_enabled: bool = True

    def __post_init__(self):
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")
        if self.ca_reduction < 1:
            raise ValueError(f"ca_reduction must be >= 1, got {self.ca_reduction}")
        if self.sa_kernel % 2 == 0 or self.sa_kernel < 1:
            raise ValueError(f"sa_kernel must be odd, got {self.sa_kernel}")
        if self.shuffle_groups < 1 or self.gag_kernel < 1:
            raise ValueError("shuffle_groups and gag_kernel must be positive")

    def to_dict(self) -> dict:
        return {
            "expansion": self.expansion,
            "ca_reduction": self.ca_reduction,
            "sa_kernel": self.sa_kernel,
            "shuffle_groups": self.shuffle_groups,
            "gag_kernel": self.gag_kernel,
            "shuffle_enabled": self.shuffle_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockHyper":
        return cls(**d)


class MultiKernelDepthwiseConv:
    """Parallel depthwise branches over a kernel set, summed, then shuffled.

    Each branch is depthwise conv -> batch norm -> relu6 with padding
    (k-1)/2 so every branch keeps the input's spatial size.
    """

    def __init__(self, channels: int, kernels, hyper: BlockHyper,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.channels = channels
        self.kernels = validate_kernels(kernels)
        self.shuffle_groups = hyper.shuffle_groups if hyper.shuffle_enabled else 0
        if self.shuffle_groups and channels % self.shuffle_groups:
            raise ShapeError(
                f"shuffle groups {self.shuffle_groups} do not divide {channels} channels")
        self.branches = []
        for k in self.kernels:
            conv = Conv2d(channels, channels, k, padding=(k - 1) // 2, groups=channels,
                          bias=False, rng=rng, dtype=dtype)
            self.branches.append((conv, BatchNorm2d(channels, dtype=dtype)))

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        acc = None
        for conv, bn in self.branches:
            y = relu6(bn.forward(conv.forward(x), mode))
            acc = y if acc is None else add(acc, y)
        if self.shuffle_groups:
            acc = channel_shuffle(acc, self.shuffle_groups)
        return acc

    def named_parameters(self, prefix: str):
        for i, (conv, bn) in enumerate(self.branches):
            yield from conv.named_parameters(f"{prefix}.b{i}.conv")
            yield from bn.named_parameters(f"{prefix}.b{i}.bn")

    def named_buffers(self, prefix: str):
        for name, bn in self.named_bn_layers(prefix):
            yield from bn.named_buffers(name)

    def named_bn_layers(self, prefix: str):
        for i, (_, bn) in enumerate(self.branches):
            yield f"{prefix}.b{i}.bn", bn


class MultiKernelInvertedResidual:
    """Pointwise expand -> multi-kernel depthwise -> pointwise project.

    The projection maps the hidden width to c_out (which may differ from
    c_in in the decoder); an identity shortcut is added only when
    c_in == c_out and the shortcut flag is on.
    """

    def __init__(self, c_in: int, c_out: int, kernels, hyper: BlockHyper,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE, shortcut: bool = True):
        hidden = hyper.expansion * c_in
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden
        self.pwc1 = Conv2d(c_in, hidden, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype=dtype)
        self.mkdc = MultiKernelDepthwiseConv(hidden, kernels, hyper, rng, dtype)
        self.pwc2 = Conv2d(hidden, c_out, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(c_out, dtype=dtype)
        self.use_shortcut = bool(shortcut) and c_in == c_out

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        t = relu6(self.bn1.forward(self.pwc1.forward(x), mode))
        t = self.mkdc.forward(t, mode)
        y = self.bn2.forward(self.pwc2.forward(t), mode)
        if self.use_shortcut:
            y = add(y, x)
        return y

    def named_parameters(self, prefix: str):
        yield from self.pwc1.named_parameters(f"{prefix}.pwc1")
        yield from self.bn1.named_parameters(f"{prefix}.bn1")
        yield from self.mkdc.named_parameters(f"{prefix}.mkdc")
        yield from self.pwc2.named_parameters(f"{prefix}.pwc2")
        yield from self.bn2.named_parameters(f"{prefix}.bn2")

    def named_buffers(self, prefix: str):
        for name, bn in self.named_bn_layers(prefix):
            yield from bn.named_buffers(name)

    def named_bn_layers(self, prefix: str):
        yield f"{prefix}.bn1", self.bn1
        yield from self.mkdc.named_bn_layers(f"{prefix}.mkdc")
        yield f"{prefix}.bn2", self.bn2


class ChannelAttention:
    """Per-channel gating from pooled descriptors.

    Max- and average-pooled descriptors share one squeeze/excite pair of
    pointwise convolutions (with biases); their logits are summed and
    squashed to coefficients in (0, 1).
    """

    def __init__(self, channels: int, reduction: int, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE):
        reduced = max(1, channels // reduction)
        self.channels, self.reduced = channels, reduced
        self.fc1 = Conv2d(channels, reduced, 1, bias=True, rng=rng, dtype=dtype)
        self.fc2 = Conv2d(reduced, channels, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        del mode  # no batch norm inside
        logits = None
        for kind in ("max", "avg"):
            path = self.fc2.forward(relu(self.fc1.forward(global_pool(x, kind))))
            logits = path if logits is None else add(logits, path)
        return hadamard(x, sigmoid(logits))

    def named_parameters(self, prefix: str):
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")

    def named_buffers(self, prefix: str):
        return iter(())

    def named_bn_layers(self, prefix: str):
        return iter(())


class SpatialAttention:
    """Per-pixel gating from cross-channel max/mean maps through one large-kernel conv."""

    def __init__(self, kernel: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(2, 1, kernel, padding=(kernel - 1) // 2, bias=True,
                           rng=rng, dtype=dtype)

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        del mode
        stats = concat_channels(channel_stats(x, "max"), channel_stats(x, "mean"))
        return hadamard(x, sigmoid(self.conv.forward(stats)))

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(f"{prefix}.conv")

    def named_buffers(self, prefix: str):
        return iter(())

    def named_bn_layers(self, prefix: str):
        return iter(())


class MultiKernelInvertedResidualAttention:
    """Channel attention, spatial attention, then the inverted residual."""

    def __init__(self, c_in: int, c_out: int, kernels, hyper: BlockHyper,
                 rng: np.random.Generator, dtype=DEFAULT_DTYPE, shortcut: bool = True):
        self.ca = ChannelAttention(c_in, hyper.ca_reduction, rng, dtype)
        self.sa = SpatialAttention(hyper.sa_kernel, rng, dtype)
        self.mkir = MultiKernelInvertedResidual(c_in, c_out, kernels, hyper, rng,
                                                dtype, shortcut)

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        return self.mkir.forward(self.sa.forward(self.ca.forward(x, mode), mode), mode)

    def named_parameters(self, prefix: str):
        yield from self.ca.named_parameters(f"{prefix}.ca")
        yield from self.sa.named_parameters(f"{prefix}.sa")
        yield from self.mkir.named_parameters(f"{prefix}.mkir")

    def named_buffers(self, prefix: str):
        yield from self.mkir.named_buffers(f"{prefix}.mkir")

    def named_bn_layers(self, prefix: str):
        yield from self.mkir.named_bn_layers(f"{prefix}.mkir")


class GroupedAttentionGate:
    """Skip-connection gate driven by a higher-level signal.

    Gating and input features each pass a depthwise 3x3 conv + BN; the
    relu of their sum goes through a 1x1 conv (to one channel) + BN and a
    sigmoid to produce the attention map applied to the skip features.
    ``variant="ag"`` switches both paths to dense 1x1 convolutions.
    """

    def __init__(self, channels: int, hyper: BlockHyper, rng: np.random.Generator,
                 dtype=DEFAULT_DTYPE, variant: str = "gag"):
        if variant not in ("gag", "ag"):
            raise ValueError(f"gate variant must be 'gag' or 'ag', got {variant!r}")
        self.channels = channels
        if variant == "gag":
            k, groups = hyper.gag_kernel, channels
        else:
            k, groups = 1, 1
        pad = (k - 1) // 2
        self.gc_g = Conv2d(channels, channels, k, padding=pad, groups=groups,
                           bias=False, rng=rng, dtype=dtype)
        self.bn_g = BatchNorm2d(channels, dtype=dtype)
        self.gc_x = Conv2d(channels, channels, k, padding=pad, groups=groups,
                           bias=False, rng=rng, dtype=dtype)
        self.bn_x = BatchNorm2d(channels, dtype=dtype)
        self.psi = Conv2d(channels, 1, 1, bias=True, rng=rng, dtype=dtype)
        self.bn_psi = BatchNorm2d(1, dtype=dtype)

    def forward(self, g: Tensor4, x: Tensor4, mode: str = "train") -> Tensor4:
        if g.data.shape != x.data.shape:
            raise ShapeError(f"gate inputs differ: {g.data.shape} vs {x.data.shape}")
        s = relu(add(self.bn_g.forward(self.gc_g.forward(g), mode),
                     self.bn_x.forward(self.gc_x.forward(x), mode)))
        m = sigmoid(self.bn_psi.forward(self.psi.forward(s), mode))
        return hadamard(x, m)

    def named_parameters(self, prefix: str):
        yield from self.gc_g.named_parameters(f"{prefix}.gc_g")
        yield from self.bn_g.named_parameters(f"{prefix}.bn_g")
        yield from self.gc_x.named_parameters(f"{prefix}.gc_x")
        yield from self.bn_x.named_parameters(f"{prefix}.bn_x")
        yield from self.psi.named_parameters(f"{prefix}.psi")
        yield from self.bn_psi.named_parameters(f"{prefix}.bn_psi")

    def named_buffers(self, prefix: str):
        for name, bn in self.named_bn_layers(prefix):
            yield from bn.named_buffers(name)

    def named_bn_layers(self, prefix: str):
        yield f"{prefix}.bn_g", self.bn_g
        yield f"{prefix}.bn_x", self.bn_x
        yield f"{prefix}.bn_psi", self.bn_psi


class SegmentationHead:
    """1x1 convolution with bias producing single-channel raw logits."""

    def __init__(self, channels: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(channels, 1, 1, bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor4, mode: str = "train") -> Tensor4:
        del mode
        return self.conv.forward(x)

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(f"{prefix}.conv")

    def named_buffers(self, prefix: str):
        return iter(())

    def named_bn_layers(self, prefix: str):
        return iter(())
