"""CMT1 serialization, masks, bounding boxes, downsampling."""

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otmatch.errors import (
    CorruptFile,
    FormatError,
    InvalidBox,
    InvalidShape,
    IoError,
)
from otmatch.tensorio import (
    BinaryMask,
    BoundingBox,
    FeatureGrid,
    downsample_mask,
    mask_from_bbox,
    read_tensor,
    write_tensor,
)


# ============================================================================
# CMT1 round-trip and byte layout
# ============================================================================


def test_round_trip_small_float(tmp_path):
    t = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_tensor(t, tmp_path / "t.cmt")
    back = read_tensor(tmp_path / "t.cmt")
    assert back.dtype == np.float32
    assert np.array_equal(back, t)


@st.composite
def tensors(draw):
    ndim = draw(st.integers(1, 4))
    shape = tuple(draw(st.integers(1, 5)) for _ in range(ndim))
    if draw(st.booleans()):
        flat = draw(
            st.lists(
                st.floats(-1e6, 1e6, width=32),
                min_size=int(np.prod(shape)),
                max_size=int(np.prod(shape)),
            )
        )
        return np.array(flat, dtype=np.float32).reshape(shape)
    flat = draw(
        st.lists(st.integers(0, 255), min_size=int(np.prod(shape)), max_size=int(np.prod(shape)))
    )
    return np.array(flat, dtype=np.uint8).reshape(shape)


@settings(max_examples=100, deadline=None)
@given(tensors())
def test_round_trip_property(tmp_path_factory, t):
    path = tmp_path_factory.mktemp("rt") / "t.cmt"
    write_tensor(t, path)
    back = read_tensor(path)
    assert back.dtype == t.dtype
    assert back.shape == t.shape
    assert back.tobytes() == t.tobytes()


def test_exact_byte_layout_scalar_float(tmp_path):
    path = tmp_path / "half.cmt"
    write_tensor(np.array([0.5], dtype=np.float32), path)
    blob = path.read_bytes()
    # magic(4) + ndim(4) + one dim(4) + dtype(4) + one float32(4), no padding
    assert len(blob) == 20
    assert blob[:4] == b"CMT1"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    assert struct.unpack("<I", blob[8:12]) == (1,)
    assert struct.unpack("<I", blob[12:16]) == (1,)  # float32 code
    assert blob[16:] == bytes([0x00, 0x00, 0x00, 0x3F])


def test_exact_byte_layout_uint8_mask(tmp_path):
    path = tmp_path / "ones.cmt"
    write_tensor(np.ones((2, 2), dtype=np.uint8), path)
    blob = path.read_bytes()
    assert blob[-4:] == bytes([1, 1, 1, 1])
    assert struct.unpack("<I", blob[16:20]) == (2,)  # uint8 code


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cmt"
    path.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(FormatError):
        read_tensor(path)


def test_payload_length_mismatch(tmp_path):
    path = tmp_path / "short.cmt"
    # declares [3,3] float32 (36 payload bytes) but carries 35
    header = b"CMT1" + struct.pack("<I", 2) + struct.pack("<II", 3, 3) + struct.pack("<I", 1)
    path.write_bytes(header + b"\x00" * 35)
    with pytest.raises(CorruptFile):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "odd.cmt"
    header = b"CMT1" + struct.pack("<I", 1) + struct.pack("<I", 1) + struct.pack("<I", 9)
    path.write_bytes(header + b"\x00" * 4)
    with pytest.raises(FormatError):
        read_tensor(path)


def test_zero_dim_rejected_before_write(tmp_path):
    with pytest.raises(InvalidShape):
        write_tensor(np.zeros((0, 3), dtype=np.float32), tmp_path / "zero.cmt")
    assert not (tmp_path / "zero.cmt").exists()


def test_unsupported_dtype_rejected(tmp_path):
    with pytest.raises(InvalidShape):
        write_tensor(np.zeros(3, dtype=np.int64), tmp_path / "i64.cmt")


def test_unwritable_path():
    with pytest.raises(IoError):
        write_tensor(np.ones(1, dtype=np.uint8), "/nonexistent-dir/t.cmt")


def test_read_missing_file(tmp_path):
    with pytest.raises(IoError):
        read_tensor(tmp_path / "absent.cmt")


# ============================================================================
# Containers
# ============================================================================


def test_feature_grid_rejects_odd_channels():
    with pytest.raises(InvalidShape):
        FeatureGrid(np.zeros((2, 2, 3), dtype=np.float32))


def test_feature_grid_rejects_nonfinite():
    v = np.zeros((2, 2, 4), dtype=np.float32)
    v[0, 0, 0] = np.nan
    with pytest.raises(InvalidShape):
        FeatureGrid(v)


def test_binary_mask_rejects_two():
    with pytest.raises(InvalidShape):
        BinaryMask(np.array([[0, 2]], dtype=np.uint8))


# ============================================================================
# Bounding boxes
# ============================================================================


def test_bbox_full_cover():
    mask = mask_from_bbox(BoundingBox(0, 0, 4, 4), 4, 4)
    assert mask.values.sum() == 16


def test_bbox_single_cell():
    mask = mask_from_bbox(BoundingBox(0, 0, 1, 1), 4, 4)
    assert mask.values[0, 0] == 1
    assert mask.values.sum() == 1


def test_bbox_empty_row_range_rejected():
    with pytest.raises(InvalidBox):
        BoundingBox(2, 2, 2, 3)


def test_bbox_out_of_range():
    with pytest.raises(InvalidBox):
        mask_from_bbox(BoundingBox(0, 0, 5, 2), 4, 4)


def test_bbox_popcount_equals_area():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h, w = int(rng.integers(2, 30)), int(rng.integers(2, 30))
        r0 = int(rng.integers(0, h))
        r1 = int(rng.integers(r0 + 1, h + 1))
        c0 = int(rng.integers(0, w))
        c1 = int(rng.integers(c0 + 1, w + 1))
        box = BoundingBox(r0, c0, r1, c1)
        assert mask_from_bbox(box, h, w).values.sum() == box.area


# ============================================================================
# Downsampling
# ============================================================================


def test_downsample_all_ones():
    mask = BinaryMask(np.ones((8, 8), dtype=np.uint8))
    out = downsample_mask(mask, 4, 4)
    assert np.array_equal(out.values, np.ones((4, 4), dtype=np.uint8))


def test_downsample_all_zeros():
    mask = BinaryMask(np.zeros((8, 8), dtype=np.uint8))
    out = downsample_mask(mask, 4, 4)
    assert out.values.sum() == 0


def test_downsample_tie_rounds_to_foreground():
    mask = BinaryMask(np.array([[1, 1], [0, 0]], dtype=np.uint8))
    out = downsample_mask(mask, 1, 1)
    assert out.values[0, 0] == 1  # block mean 0.5 meets the threshold


def test_downsample_identity_at_equal_resolution():
    rng = np.random.default_rng(3)
    mask = BinaryMask((rng.random((5, 7)) < 0.5).astype(np.uint8))
    out = downsample_mask(mask, 5, 7)
    assert np.array_equal(out.values, mask.values)


def test_downsample_rejects_upsampling():
    mask = BinaryMask(np.ones((4, 4), dtype=np.uint8))
    with pytest.raises(InvalidShape):
        downsample_mask(mask, 8, 8)


def test_downsample_rejects_zero_target():
    mask = BinaryMask(np.ones((4, 4), dtype=np.uint8))
    with pytest.raises(InvalidShape):
        downsample_mask(mask, 0, 4)
