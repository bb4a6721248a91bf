"""Five-stage encoder/decoder assembly with gated skip fusion and four
segmentation heads.

Wiring (input H x W, divisible by 16):

    s1 = ENC1(x)  @H      s2 = ENC2(pool(s1)) @H/2   ... s5 = ENC5(pool(s4)) @H/16
    d5 = DEC5(s5) @H/16 (C5 -> C4)
    d4 = DEC4(GATE(up2(d5), s4) + up2(d5)) @H/8  (C4 -> C3)
    d3, d2 analogous at H/4, H/2; d1 = DEC1(GATE(up2(d2), s1) + up2(d2)) @H (C1 -> C1)
    p4..p1 = 1x1 heads on d4..d1 at their native resolutions.

Encoders are inverted-residual blocks (attention-prefixed variants
optional); decoders are always attention-prefixed.  Upsampling is plain
bilinear 2x with no convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import (BlockHyper, GroupedAttentionGate,
                     MultiKernelInvertedResidual,
                     MultiKernelInvertedResidualAttention, SegmentationHead,
                     validate_kernels)
from .ops import bilinear_resize, max_pool_2x2
from .tensor import DEFAULT_DTYPE, ShapeError, Tensor4, add

PRESET_CHANNELS = {
    "t": (4, 8, 16, 24, 32),
    "s": (8, 16, 32, 48, 80),
    "std": (16, 32, 64, 96, 160),
    "m": (32, 64, 128, 192, 320),
    "l": (64, 128, 256, 384, 512),
}

GATE_CHOICES = ("gag", "ag", "none")
ENCODER_CHOICES = ("mkir", "mkira")


@dataclass(frozen=True)
class VariantConfig:
    """Complete structural description of one network variant."""

    channels: tuple[int, ...]
    kernels: tuple[int, ...] = (1, 3, 5)
    hyper: BlockHyper = field(default_factory=BlockHyper)
    encoder_block: str = "mkir"
    gate: str = "gag"
    in_channels: int = 3
    shortcut: bool = True

    def __post_init__(self):
        ch = tuple(int(c) for c in self.channels)
        if len(ch) != 5:
            raise ValueError(f"channel list must have 5 entries, got {len(ch)}")
        if min(ch) < 1:
            raise ValueError(f"channels must be positive, got {ch}")
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "kernels", validate_kernels(self.kernels))
        if self.encoder_block not in ENCODER_CHOICES:
            raise ValueError(f"encoder_block must be one of {ENCODER_CHOICES}")
        if self.gate not in GATE_CHOICES:
            raise ValueError(f"gate must be one of {GATE_CHOICES}")
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "kernels": list(self.kernels),
            "hyper": self.hyper.to_dict(),
            "encoder_block": self.encoder_block,
            "gate": self.gate,
            "in_channels": self.in_channels,
            "shortcut": self.shortcut,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VariantConfig":
        return cls(channels=tuple(d["channels"]), kernels=tuple(d["kernels"]),
                   hyper=BlockHyper.from_dict(d["hyper"]),
                   encoder_block=d["encoder_block"], gate=d["gate"],
                   in_channels=d["in_channels"], shortcut=d["shortcut"])


def preset(name: str) -> VariantConfig:
    """Published size variants: t, s, std, m, l."""
    key = name.lower()
    if key not in PRESET_CHANNELS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESET_CHANNELS)}")
    return VariantConfig(channels=PRESET_CHANNELS[key])


@dataclass
class SegOutputs:
    """Raw-logit prediction maps; p1 is the final full-resolution prediction."""

    p1: Tensor4
    p2: Tensor4
    p3: Tensor4
    p4: Tensor4


class Network:
    """Materialized network: blocks plus their named learnable tensors.

    Construction is deterministic for a given (config, seed); parameter
    paths enumerate encoder stages 1-5, decoder stages 5-1, gates 4-1 and
    heads 4-1, and are stable across runs for a fixed config.
    """

    def __init__(self, cfg: VariantConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        enc_cls = (MultiKernelInvertedResidual if cfg.encoder_block == "mkir"
                   else MultiKernelInvertedResidualAttention)

        enc_widths = [cfg.in_channels] + list(ch[:4])
        self.encoders = [
            enc_cls(enc_widths[i], ch[i], cfg.kernels, cfg.hyper, rng, dtype,
                    shortcut=cfg.shortcut)
            for i in range(5)
        ]
        # decoder i consumes width dec_in[i] and emits dec_out[i]
        dec_in = [ch[4], ch[3], ch[2], ch[1], ch[0]]
        dec_out = [ch[3], ch[2], ch[1], ch[0], ch[0]]
        self.decoders = [
            MultiKernelInvertedResidualAttention(dec_in[i], dec_out[i], cfg.kernels,
                                                 cfg.hyper, rng, dtype,
                                                 shortcut=cfg.shortcut)
            for i in range(5)
        ]
        if cfg.gate == "none":
            self.gates = [None] * 4
        else:
            self.gates = [
                GroupedAttentionGate(c, cfg.hyper, rng, dtype, variant=cfg.gate)
                for c in (ch[3], ch[2], ch[1], ch[0])
            ]
        self.heads = [SegmentationHead(c, rng, dtype) for c in (ch[2], ch[1], ch[0], ch[0])]

    # -- tensor enumeration -------------------------------------------------
    def _named_blocks(self):
        for i, enc in enumerate(self.encoders):
            yield f"enc{i + 1}", enc
        for i, dec in enumerate(self.decoders):
            yield f"dec{5 - i}", dec
        for i, gate in enumerate(self.gates):
            if gate is not None:
                yield f"gate{4 - i}", gate
        for i, head in enumerate(self.heads):
            yield f"head{4 - i}", head

    def named_parameters(self) -> dict[str, Tensor4]:
        out: dict[str, Tensor4] = {}
        for prefix, block in self._named_blocks():
            for name, p in block.named_parameters(prefix):
                out[name] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, block in self._named_blocks():
            for name, b in block.named_buffers(prefix):
                out[name] = b
        return out

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def named_bn_layers(self):
        for prefix, block in self._named_blocks():
            yield from block.named_bn_layers(prefix)

    def load_tensors(self, mapping: dict[str, np.ndarray]) -> None:
        """Overwrite parameters and running statistics from a name->array map."""
        params = self.named_parameters()
        expected = set(params) | set(self.named_buffers())
        got = set(mapping)
        if expected != got:
            missing = sorted(expected - got)[:4]
            extra = sorted(got - expected)[:4]
            raise ShapeError(f"tensor name mismatch (missing {missing}, extra {extra})")
        for name, p in params.items():
            arr = np.asarray(mapping[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()
            p.grad = None
        for path, bn in self.named_bn_layers():
            mean = np.asarray(mapping[f"{path}.running_mean"])
            var = np.asarray(mapping[f"{path}.running_var"])
            if mean.size != bn.channels or var.size != bn.channels:
                raise ShapeError(f"{path}: running stat size mismatch")
            bn.set_buffers(mean, var)

    def snapshot_tensors(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for name, b in self.named_buffers().items():
            out[name] = b.copy()
        return out

    # -- forward -------------------------------------------------------------
    def forward(self, image: Tensor4, mode: str = "eval") -> SegOutputs:
        n, c, h, w = image.data.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"network expects {self.cfg.in_channels} input channels, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"input dims must be divisible by 16, got {h}x{w}")
        if h < 32 or w < 32:
            raise ShapeError(f"input dims must be at least 32, got {h}x{w}")
        if image.data.dtype != self.dtype:
            raise ShapeError(f"input dtype {image.data.dtype} != network dtype {self.dtype}")

        skips = []
        t = image
        for i, enc in enumerate(self.encoders):
            s = enc.forward(t, mode)
            skips.append(s)
            if i < 4:
                t = max_pool_2x2(s)

        d = self.decoders[0].forward(skips[4], mode)
        stage_outputs = []  # d4, d3, d2, d1
        for dec, gate, skip in zip(self.decoders[1:], self.gates, reversed(skips[:4])):
            u = bilinear_resize(d, d.data.shape[2] * 2, d.data.shape[3] * 2)
            gated = skip if gate is None else gate.forward(u, skip, mode)
            d = dec.forward(add(gated, u), mode)
            stage_outputs.append(d)

        d4, d3, d2, d1 = stage_outputs
        return SegOutputs(
            p1=self.heads[3].forward(d1, mode),
            p2=self.heads[2].forward(d2, mode),
            p3=self.heads[1].forward(d3, mode),
            p4=self.heads[0].forward(d4, mode),
        )


def build_network(cfg: VariantConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    """Deterministically initialize a network for the given config and seed."""
    return Network(cfg, seed=seed, dtype=dtype)


def forward(net: Network, image: Tensor4, mode: str = "eval") -> SegOutputs:
    return net.forward(image, mode)
