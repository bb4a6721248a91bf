"""Analytic, layer-by-layer parameter and multiply-accumulate counting.

This module walks the variant configuration symbolically — it never
materializes tensors — so it serves as an independent oracle against the
built network.  Counting convention: 1 MAC is reported as 1 FLOP; spatial
convolutions only (batch norm, activations, pooling, resizing and the
channel-attention convolutions on global-pooled 1x1 descriptors count as
zero, so every counted term scales with input area).  Batch-norm affine
pairs count as parameters; running statistics do not.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .network import VariantConfig

CONVENTION = "mac"


@dataclass(frozen=True)
class LayerRow:
    path: str
    params: int
    macs: int | None


@dataclass
class ComplexityReport:
    rows: list[LayerRow]
    input_size: tuple[int, int] | None = None
    convention: str = CONVENTION
    total_params: int = field(init=False)
    total_macs: int | None = field(init=False)

    def __post_init__(self):
        self.total_params = sum(r.params for r in self.rows)
        if self.input_size is None:
            self.total_macs = None
        else:
            self.total_macs = sum(r.macs or 0 for r in self.rows)

    def to_json(self) -> str:
        doc = {
            "input": list(self.input_size) if self.input_size else None,
            "convention": self.convention,
            "rows": [{"path": r.path, "params": r.params, "macs": r.macs}
                     for r in self.rows],
            "total_params": self.total_params,
            "total_macs": self.total_macs,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ComplexityReport":
        doc = json.loads(text)
        rows = [LayerRow(r["path"], r["params"], r["macs"]) for r in doc["rows"]]
        size = tuple(doc["input"]) if doc["input"] else None
        return cls(rows=rows, input_size=size, convention=doc["convention"])

    def __eq__(self, other):
        if not isinstance(other, ComplexityReport):
            return NotImplemented
        return (self.rows == other.rows and self.input_size == other.input_size
                and self.convention == other.convention)


# ---------------------------------------------------------------------------
# symbolic walk


def _conv(path, c_in, c_out, k, *, groups=1, bias=False, hw=None, runs=1):
    params = c_out * (c_in // groups) * k * k + (c_out if bias else 0)
    macs = None
    if hw is not None:
        macs = hw[0] * hw[1] * c_out * (c_in // groups) * k * k * runs
    return LayerRow(path, params, macs)


def _bn(path, c, hw):
    return LayerRow(path, 2 * c, 0 if hw is not None else None)


def _mkir_rows(prefix, c_in, c_out, cfg: VariantConfig, hw):
    h = cfg.hyper.expansion * c_in
    yield _conv(f"{prefix}.pwc1", c_in, h, 1, hw=hw)
    yield _bn(f"{prefix}.bn1", h, hw)
    for i, k in enumerate(cfg.kernels):
        yield _conv(f"{prefix}.mkdc.b{i}.conv", h, h, k, groups=h, hw=hw)
        yield _bn(f"{prefix}.mkdc.b{i}.bn", h, hw)
    yield _conv(f"{prefix}.pwc2", h, c_out, 1, hw=hw)
    yield _bn(f"{prefix}.bn2", c_out, hw)


def _attention_rows(prefix, c, cfg: VariantConfig, hw):
    reduced = max(1, c // cfg.hyper.ca_reduction)
    # squeeze/excite acts on global-pooled 1x1 descriptors: zero MACs by the
    # spatial-convolutions-only convention (keeps every term area-scaling)
    point = (1, 1) if hw is not None else None
    yield _conv(f"{prefix}.ca.fc1", c, reduced, 1, bias=True, hw=point, runs=0)
    yield _conv(f"{prefix}.ca.fc2", reduced, c, 1, bias=True, hw=point, runs=0)
    yield _conv(f"{prefix}.sa.conv", 2, 1, cfg.hyper.sa_kernel, bias=True, hw=hw)


def _mkira_rows(prefix, c_in, c_out, cfg: VariantConfig, hw):
    yield from _attention_rows(prefix, c_in, cfg, hw)
    yield from _mkir_rows(f"{prefix}.mkir", c_in, c_out, cfg, hw)


def _gate_rows(prefix, c, cfg: VariantConfig, hw):
    if cfg.gate == "gag":
        k, groups = cfg.hyper.gag_kernel, c
    else:
        k, groups = 1, 1
    yield _conv(f"{prefix}.gc_g", c, c, k, groups=groups, hw=hw)
    yield _bn(f"{prefix}.bn_g", c, hw)
    yield _conv(f"{prefix}.gc_x", c, c, k, groups=groups, hw=hw)
    yield _bn(f"{prefix}.bn_x", c, hw)
    yield _conv(f"{prefix}.psi", c, 1, 1, bias=True, hw=hw)
    yield _bn(f"{prefix}.bn_psi", 1, hw)


def _walk(cfg: VariantConfig, input_hw: tuple[int, int] | None):
    ch = cfg.channels

    def at(level):  # spatial size at 1/2^level of the input
        if input_hw is None:
            return None
        return (input_hw[0] >> level, input_hw[1] >> level)

    enc_widths = [cfg.in_channels] + list(ch[:4])
    for i in range(5):
        prefix, hw = f"enc{i + 1}", at(i)
        if cfg.encoder_block == "mkira":
            yield from _mkira_rows(prefix, enc_widths[i], ch[i], cfg, hw)
        else:
            yield from _mkir_rows(prefix, enc_widths[i], ch[i], cfg, hw)

    dec_in = [ch[4], ch[3], ch[2], ch[1], ch[0]]
    dec_out = [ch[3], ch[2], ch[1], ch[0], ch[0]]
    dec_levels = [4, 3, 2, 1, 0]
    for i in range(5):
        yield from _mkira_rows(f"dec{5 - i}", dec_in[i], dec_out[i], cfg,
                               at(dec_levels[i]))

    if cfg.gate != "none":
        for i, (c, level) in enumerate(zip((ch[3], ch[2], ch[1], ch[0]), (3, 2, 1, 0))):
            yield from _gate_rows(f"gate{4 - i}", c, cfg, at(level))

    head_in = [ch[2], ch[1], ch[0], ch[0]]
    for i, (c, level) in enumerate(zip(head_in, (3, 2, 1, 0))):
        yield _conv(f"head{4 - i}.conv", c, 1, 1, bias=True, hw=at(level))


def count_params(cfg: VariantConfig) -> ComplexityReport:
    """Parameter counts per layer (no MACs)."""
    return ComplexityReport(rows=list(_walk(cfg, None)))


def count_macs(cfg: VariantConfig, input_h: int, input_w: int) -> ComplexityReport:
    """Parameter and MAC counts for a given input size (batch of one)."""
    if input_h % 16 or input_w % 16:
        raise ValueError(f"input dims must be divisible by 16, got {input_h}x{input_w}")
    return ComplexityReport(rows=list(_walk(cfg, (input_h, input_w))),
                            input_size=(input_h, input_w))


def report_render(report: ComplexityReport, format: str = "text") -> str:
    """Render a report as aligned text or as the JSON interchange schema."""
    if format == "json":
        return report.to_json()
    if format != "text":
        raise ValueError(f"unknown format {format!r}")
    lines = ["# convention: 1 MAC = 1 FLOP; spatial convolutions only; "
             "BN/activation/pool/resize and pooled-descriptor convs count as zero"]
    if report.input_size:
        lines.append(f"# input: {report.input_size[0]}x{report.input_size[1]}")
    width = max((len(r.path) for r in report.rows), default=10)
    for r in report.rows:
        macs = "-" if r.macs is None else str(r.macs)
        lines.append(f"{r.path:<{width}}  params={r.params:<10d} macs={macs}")
    lines.append(f"total_params {report.total_params} "
                 f"({report.total_params / 1e6:.3f}M)")
    if report.total_macs is not None:
        lines.append(f"total_macs {report.total_macs} "
                     f"({report.total_macs / 1e9:.3f}G)")
    return "\n".join(lines)
