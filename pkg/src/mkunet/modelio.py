"""Bit-exact persistence and portable image handling.

Checkpoint layout (little-endian throughout): magic ``MKUN``, u32 version
(=1), u32 config length + canonical JSON (sorted keys, no whitespace),
u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 dtype
tag (0 = float32), u8 rank, rank x u64 dims, raw element bytes.

Images use binary netpbm: P5 grayscale (replicated to three channels on
read) and P6 color, maxval 255 only.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import Network, VariantConfig, build_network
from .tensor import Tensor4
from .training import Sample

MAGIC = b"MKUN"
VERSION = 1
_DTYPE_F32 = 0


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


class DataError(ValueError):
    """Dataset directory violates the images/masks pairing convention."""


# ---------------------------------------------------------------------------
# checkpoints


def _canonical_config(cfg: VariantConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(net: Network, path) -> None:
    if net.dtype != np.float32:
        raise CheckpointError("checkpoints store float32 networks only")
    tensors: dict[str, np.ndarray] = {name: p.data for name, p in net.named_parameters().items()}
    tensors.update(net.named_buffers())
    cfg_blob = _canonical_config(net.cfg)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Network:
    """Rebuild the network from its config block and load every tensor bit-exactly."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = reader.unpack("<I")
    try:
        cfg = VariantConfig.from_dict(json.loads(reader.take(cfg_len)))
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad config block: {exc}") from exc
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        tag, rank = reader.unpack("<BB")
        if tag != _DTYPE_F32:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor {name}")
        dims = reader.unpack(f"<{rank}Q")
        n_elem = 1
        for d in dims:
            n_elem *= d
        raw = reader.take(4 * n_elem)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if reader.pos != len(reader.blob):
        raise CheckpointError(f"{len(reader.blob) - reader.pos} trailing bytes")
    net = build_network(cfg, seed=0)
    try:
        net.load_tensors(tensors)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint inconsistent with its config: {exc}") from exc
    return net


# ---------------------------------------------------------------------------
# netpbm images


def _parse_pnm_header(blob: bytes, allowed=(b"P5", b"P6")):
    # netpbm grammar: tokens separated by whitespace, '#' comments to end of line
    magic = blob[:2]
    if magic not in allowed:
        raise ValueError(f"unsupported netpbm magic {magic!r} (only "
                         f"{'/'.join(m.decode() for m in allowed)})")
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    return magic, tokens[0], tokens[1], tokens[2], pos


def read_image(path) -> Tensor4:
    """Read a P5 (grayscale, replicated to 3 channels) or P6 image scaled to [0,1]."""
    blob = Path(path).read_bytes()
    magic, width, height, maxval, pos = _parse_pnm_header(blob)
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = blob[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"truncated pixel data: wanted {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float32) / 255.0
    if magic == b"P5":
        plane = arr.reshape(1, 1, height, width)
        data = np.repeat(plane, 3, axis=1)
    else:
        data = arr.reshape(height, width, 3).transpose(2, 0, 1)[None]
    return Tensor4(np.ascontiguousarray(data))


def write_pgm(path, plane: np.ndarray) -> None:
    """Write one uint8 (h, w) plane as binary P5."""
    h, w = plane.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(plane.astype(np.uint8).tobytes())


def write_mask(mask_or_prob, path, *, as_binary: bool = True,
               threshold: float = 0.5) -> None:
    """Write a (1,1,h,w) map in [0,1] as P5: {0,255} binary or round(255*p)."""
    data = mask_or_prob.data if isinstance(mask_or_prob, Tensor4) else np.asarray(mask_or_prob)
    if data.shape[:2] != (1, 1) or data.ndim != 4:
        raise ValueError(f"expected shape (1,1,h,w), got {data.shape}")
    if data.min() < 0 or data.max() > 1:
        raise ValueError("values must lie in [0, 1]")
    plane = data[0, 0]
    if as_binary:
        out = np.where(plane > threshold, 255, 0).astype(np.uint8)
    else:
        out = np.rint(255.0 * plane).astype(np.uint8)
    write_pgm(path, out)


# ---------------------------------------------------------------------------
# dataset directories


def dataset_scan(root) -> list[tuple[str, Path, Path]]:
    """Pair dir/images/* with dir/masks/* by stem; sorted by stem.

    Returns (stem, image_path, mask_path) triples; any orphan image or
    mask raises a DataError naming the stems.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    images = {}
    if img_dir.is_dir():
        for p in img_dir.iterdir():
            if p.suffix.lower() in (".pgm", ".ppm"):
                images[p.stem] = p
    masks = {}
    if mask_dir.is_dir():
        for p in mask_dir.iterdir():
            if p.suffix.lower() == ".pgm":
                masks[p.stem] = p
    orphan_images = sorted(set(images) - set(masks))
    orphan_masks = sorted(set(masks) - set(images))
    if orphan_images or orphan_masks:
        raise DataError(f"unpaired files: images without masks {orphan_images}, "
                        f"masks without images {orphan_masks}")
    return [(stem, images[stem], masks[stem]) for stem in sorted(images)]


def load_sample(image_path, mask_path) -> Sample:
    """Load one pair; the mask is re-binarized at 127."""
    image = read_image(image_path).data[0]
    mask_blob = Path(mask_path).read_bytes()
    magic, width, height, maxval, pos = _parse_pnm_header(mask_blob, allowed=(b"P5",))
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    raster = mask_blob[pos:pos + width * height]
    if len(raster) != width * height:
        raise ValueError("truncated mask data")
    raw = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    mask = (raw > 127).astype(np.float32)[None]
    return Sample(image=image, mask=mask)


def load_dataset(root) -> list[Sample]:
    return [load_sample(img, mask) for _, img, mask in dataset_scan(root)]
