"""Core containers and the CMT1 tensor file format.

CMT1 layout, little-endian throughout:

    bytes 0-3   ASCII "CMT1"
    bytes 4-7   u32 ndim
    next        ndim x u32 dims
    next        u32 dtype code (1 = float32, 2 = uint8)
    rest        row-major payload, no padding, no footer

Tensors are plain numpy arrays; the functions below enforce the container
invariants (1 <= ndim <= 4, every dim >= 1, dtype in {float32, uint8}) at the
IO boundary so a written file always round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFile,
    FormatError,
    InvalidBox,
    InvalidShape,
    IoError,
    ShapeMismatch,
)

MAGIC = b"CMT1"

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {1: np.dtype(np.float32), 2: np.dtype(np.uint8)}

MAX_NDIM = 4


def _check_tensor(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in _DTYPE_CODES:
        raise InvalidShape(f"unsupported dtype {arr.dtype}; expected float32 or uint8")
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise InvalidShape(f"ndim must be in [1, {MAX_NDIM}], got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise InvalidShape(f"all dims must be >= 1, got shape {tuple(arr.shape)}")
    return arr


def write_tensor(arr: np.ndarray, path: str | Path) -> None:
    """Write a float32/uint8 array to `path` in the CMT1 layout."""
    arr = _check_tensor(np.ascontiguousarray(arr))
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    header += struct.pack("<I", _DTYPE_CODES[arr.dtype])
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    try:
        Path(path).write_bytes(header + payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a CMT1 file back into a numpy array, bit-exact to what was written."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (ndim,) = struct.unpack_from("<I", blob, 4)
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"{path}: ndim {ndim} outside [1, {MAX_NDIM}]")
    offset = 8
    if len(blob) < offset + 4 * ndim + 4:
        raise CorruptFile(f"{path}: header truncated")
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    (code,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if code not in _CODE_DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: zero-sized dim in shape {shape}")
    dtype = _CODE_DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise CorruptFile(
            f"{path}: payload is {len(payload)} bytes, shape {shape} needs {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return data.reshape(shape)


@dataclass
class FeatureGrid:
    """Dense local features for one image at feature resolution, shape [H, W, C]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise InvalidShape(f"feature grid must be [H, W, C], got shape {v.shape}")
        if any(d < 1 for d in v.shape):
            raise InvalidShape(f"feature grid dims must be >= 1, got {v.shape}")
        c = v.shape[2]
        if c < 2 or c % 2 != 0:
            raise InvalidShape(f"channel count must be even and >= 2, got {c}")
        if not np.all(np.isfinite(v)):
            raise InvalidShape("feature grid contains non-finite values")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def nodes(self) -> np.ndarray:
        """Row-major flattening to [H*W, C]; node i = (i // W, i % W)."""
        return self.values.reshape(-1, self.values.shape[2])


@dataclass
class BinaryMask:
    """A {0,1}-valued uint8 mask of shape [H, W]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise InvalidShape(f"mask must be 2-d, got shape {v.shape}")
        if any(d < 1 for d in v.shape):
            raise InvalidShape(f"mask dims must be >= 1, got {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise InvalidShape("mask entries must be exactly 0 or 1")
        self.values = v.astype(np.uint8)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def foreground_count(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel box: rows [r0, r1), cols [c0, c1)."""

    r0: int
    c0: int
    r1: int
    c1: int

    def __post_init__(self):
        if self.r0 < 0 or self.c0 < 0 or self.r0 >= self.r1 or self.c0 >= self.c1:
            raise InvalidBox(
                f"box rows [{self.r0},{self.r1}) cols [{self.c0},{self.c1}) is empty or negative"
            )

    @property
    def area(self) -> int:
        return (self.r1 - self.r0) * (self.c1 - self.c0)


def mask_from_bbox(box: BoundingBox, height: int, width: int) -> BinaryMask:
    """Rasterize a bounding box into a binary mask of shape [height, width]."""
    if box.r1 > height or box.c1 > width:
        raise InvalidBox(
            f"box rows [{box.r0},{box.r1}) cols [{box.c0},{box.c1}) "
            f"exceeds mask {height}x{width}"
        )
    values = np.zeros((height, width), dtype=np.uint8)
    values[box.r0 : box.r1, box.c0 : box.c1] = 1
    return BinaryMask(values)


def downsample_mask(mask: BinaryMask, h: int, w: int) -> BinaryMask:
    """Reduce a mask to h x w blocks; a block is 1 iff its mean is >= 0.5.

    Block i spans source rows [floor(i*H/h), floor((i+1)*H/h)), likewise for
    columns. Ties round to foreground so thin objects survive.
    """
    if h < 1 or w < 1:
        raise InvalidShape(f"target shape must be >= 1x1, got {h}x{w}")
    src_h, src_w = mask.height, mask.width
    if h > src_h or w > src_w:
        raise InvalidShape(
            f"target {h}x{w} exceeds source {src_h}x{src_w}; only downsampling is supported"
        )
    row_edges = [(i * src_h) // h for i in range(h + 1)]
    col_edges = [(j * src_w) // w for j in range(w + 1)]
    out = np.zeros((h, w), dtype=np.uint8)
    src = mask.values
    for i in range(h):
        for j in range(w):
            block = src[row_edges[i] : row_edges[i + 1], col_edges[j] : col_edges[j + 1]]
            out[i, j] = 1 if block.mean() >= 0.5 else 0
    return BinaryMask(out)


# Episode directory layout: see read_episode/synth.generate_synthetic_episode.
SUPPORT_FEAT = "support_feat.cmt"
QUERY_FEAT = "query_feat.cmt"
SUPPORT_MASK = "support_mask.cmt"
QUERY_GT = "query_gt.cmt"


def read_episode(episode_dir: str | Path) -> tuple[FeatureGrid, FeatureGrid, BinaryMask, BinaryMask | None]:
    """Load (support features, query features, support mask, optional query gt)."""
    episode_dir = Path(episode_dir)
    paths = {name: episode_dir / name for name in (SUPPORT_FEAT, QUERY_FEAT, SUPPORT_MASK)}
    for name, p in paths.items():
        if not p.exists():
            raise IoError(f"episode file missing: {p}")
    support = FeatureGrid(read_tensor(paths[SUPPORT_FEAT]))
    query = FeatureGrid(read_tensor(paths[QUERY_FEAT]))
    mask = BinaryMask(read_tensor(paths[SUPPORT_MASK]))
    gt_path = episode_dir / QUERY_GT
    gt = BinaryMask(read_tensor(gt_path)) if gt_path.exists() else None
    if support.channels != query.channels:
        raise ShapeMismatch(
            f"support has {support.channels} channels, query has {query.channels}"
        )
    return support, query, mask, gt
