import gzip
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lesionseg.nifti import (
    BadMagicError,
    InvalidSpacingError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
    read_nifti,
    write_nifti,
)
from lesionseg.volume import CtVolume, LabelVolume, VolumeMeta

DATA = Path(__file__).parent / "data"
FIXTURES = json.loads((DATA / "nibabel_fixtures.json").read_text())


def fixture_array(dtype, dims, seed):
    rng = np.random.default_rng(seed)
    if dtype == "uint8":
        return rng.integers(0, 8, size=dims, dtype=np.uint8)
    if dtype == "int16":
        return rng.integers(-1024, 3000, size=dims).astype(np.int16)
    return rng.standard_normal(dims).astype(np.float32)


def label_volume(data, spacing=(1.0, 1.0, 1.0)):
    return LabelVolume(VolumeMeta(data.shape, spacing), data)


def test_label_round_trip_8cubed(tmp_path):
    data = np.random.default_rng(0).integers(0, 8, size=(8, 8, 8), dtype=np.uint8)
    write_nifti(label_volume(data, (2.5, 0.7, 0.7)), tmp_path / "l.nii")
    back = read_nifti(tmp_path / "l.nii")
    assert isinstance(back, LabelVolume)
    assert back.data.dtype == np.uint8 and np.array_equal(back.data, data)
    assert back.meta.spacing_mm == (2.5, np.float32(0.7), np.float32(0.7))


@settings(max_examples=40, deadline=None)
@given(
    st.sampled_from(["uint8", "int16", "float32"]),
    st.tuples(*[st.integers(1, 7)] * 3),
    st.tuples(*[st.sampled_from([0.5, 0.75, 1.0, 2.5, 5.0])] * 3),
    st.booleans(),
    st.integers(0, 2**31),
)
def test_round_trip_bit_exact(tmp_path_factory, dtype, dims, spacing, gz, seed):
    path = tmp_path_factory.mktemp("rt") / ("v.nii.gz" if gz else "v.nii")
    data = fixture_array(dtype, dims, seed)
    meta = VolumeMeta(dims, spacing)
    vol = LabelVolume(meta, data) if dtype == "uint8" else CtVolume(meta, data)
    write_nifti(vol, path)
    back = read_nifti(path)
    assert back.data.dtype == data.dtype
    assert back.data.tobytes() == data.tobytes()
    assert back.meta.spacing_mm == spacing and back.meta.dims == dims


def test_write_is_byte_reproducible(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    vol = CtVolume(VolumeMeta(data.shape, (1, 2, 3)), data)
    write_nifti(vol, tmp_path / "a.nii.gz")
    write_nifti(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_header_layout(tmp_path):
    data = np.zeros((2, 3, 4), np.uint8)
    write_nifti(label_volume(data, (3.0, 2.0, 1.0)), tmp_path / "h.nii")
    raw = (tmp_path / "h.nii").read_bytes()
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<8h", raw[40:56])[:4] == (3, 4, 3, 2)  # x, y, z extents
    assert struct.unpack("<f", raw[108:112])[0] == 352.0
    assert struct.unpack("<8f", raw[76:108])[1:4] == (1.0, 2.0, 3.0)
    assert len(raw) == 352 + data.size


@pytest.mark.parametrize("entry", FIXTURES, ids=[f["file"] for f in FIXTURES])
def test_third_party_fixture_parses_identically(entry):
    vol = read_nifti(DATA / entry["file"])
    want = fixture_array(entry["dtype"], tuple(entry["dims"]), entry["seed"])
    assert vol.data.dtype == want.dtype
    assert np.array_equal(vol.data, want)
    np.testing.assert_allclose(vol.meta.spacing_mm, entry["spacing_mm"], rtol=1e-6)


def test_live_cross_check_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    data = np.random.default_rng(5).integers(-500, 500, size=(5, 6, 7)).astype(np.int16)
    write_nifti(CtVolume(VolumeMeta(data.shape, (2.0, 0.5, 0.75)), data), tmp_path / "ours.nii.gz")
    img = nib.load(tmp_path / "ours.nii.gz")
    assert np.array_equal(np.asarray(img.dataobj).transpose(2, 1, 0), data)
    np.testing.assert_allclose(img.header.get_zooms(), (0.75, 0.5, 2.0))


def write_raw(path, data=np.zeros((2, 2, 2), np.uint8), **patch):
    write_nifti(label_volume(data), path)
    raw = bytearray(path.read_bytes())
    offsets = {"magic": (344, "4s"), "datatype": (70, "<h"), "pixdim1": (80, "<f"), "sizeof_hdr": (0, "<i")}
    for key, value in patch.items():
        off, fmt = offsets[key]
        struct.pack_into(fmt, raw, off, value)
    path.write_bytes(bytes(raw))
    return path


def test_two_file_magic_is_unsupported_format(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        read_nifti(write_raw(tmp_path / "x.nii", magic=b"ni1\x00"))


def test_bad_magic(tmp_path):
    with pytest.raises(BadMagicError):
        read_nifti(write_raw(tmp_path / "x.nii", magic=b"abcd"))
    with pytest.raises(BadMagicError):
        read_nifti(write_raw(tmp_path / "y.nii", sizeof_hdr=123))


def test_unsupported_datatype(tmp_path):
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(write_raw(tmp_path / "x.nii", datatype=64))
    vol = CtVolume(VolumeMeta((1, 1, 1), (1, 1, 1)), np.zeros((1, 1, 1), np.float32))
    vol.data = vol.data.astype(np.float64)
    with pytest.raises(UnsupportedDatatypeError):
        write_nifti(vol, tmp_path / "bad.nii")


def test_non_positive_pixdim(tmp_path):
    with pytest.raises(InvalidSpacingError):
        read_nifti(write_raw(tmp_path / "x.nii", pixdim1=0.0))


def test_truncated_payload(tmp_path):
    p = write_raw(tmp_path / "x.nii", data=np.ones((4, 4, 4), np.uint8))
    p.write_bytes(p.read_bytes()[:-10])
    with pytest.raises(TruncatedPayloadError):
        read_nifti(p)
    q = tmp_path / "short.nii.gz"
    q.write_bytes(gzip.compress(b"\x5c\x01\x00\x00" + b"\x00" * 20))
    with pytest.raises(TruncatedPayloadError):
        read_nifti(q)


def test_errors_are_distinct_types():
    kinds = {BadMagicError, UnsupportedFormatError, UnsupportedDatatypeError, TruncatedPayloadError, InvalidSpacingError}
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)


def test_label_kind_requires_uint8(tmp_path):
    data = np.zeros((2, 2, 2), np.int16)
    write_nifti(CtVolume(VolumeMeta(data.shape, (1, 1, 1)), data), tmp_path / "i.nii")
    with pytest.raises(UnsupportedDatatypeError):
        read_nifti(tmp_path / "i.nii", kind="label")
    assert isinstance(read_nifti(tmp_path / "i.nii"), CtVolume)


def test_volume_meta_validation():
    with pytest.raises(ValueError):
        VolumeMeta((0, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        VolumeMeta((2, 2, 2), (1, -1, 1))
    with pytest.raises(ValueError):
        LabelVolume(VolumeMeta((1, 1, 1), (1, 1, 1)), np.full((1, 1, 1), 9, np.uint8))
