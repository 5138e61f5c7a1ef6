import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from perfvox.errors import (DegenerateInput, DimensionalityError, MalformedHeader, ParseError,
                            UnsupportedDatatype, IoError)
from perfvox.volume_io import (BrainMask, CohortManifest, ParticipantMeta, Volume3D, auto_mask, load_manifest,
                               load_nifti, normalize_intensity, save_nifti, write_manifest)


def hand_header(dims, code, bitpix, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0, endian="<", magic=b"n+1\x00",
                ndim=3, vox_offset=352.0):
    """Independent NIfTI-1 header writer used as the oracle for the reader."""
    h = bytearray(348)
    struct.pack_into(endian + "i", h, 0, 348)
    struct.pack_into(endian + "8h", h, 40, ndim, *dims, *([1] * (7 - len(dims))))
    struct.pack_into(endian + "2h", h, 70, code, bitpix)
    struct.pack_into(endian + "8f", h, 76, 1.0, *pixdim, 0, 0, 0, 0)
    struct.pack_into(endian + "f", h, 108, vox_offset)
    struct.pack_into(endian + "2f", h, 112, slope, inter)
    h[344:348] = magic
    return bytes(h)


def write_hand(path, dims, arr, code, bitpix, dtype, endian="<", **kw):
    raw = hand_header(dims, code, bitpix, endian=endian, **kw) + b"\0" * 4
    raw += np.asarray(arr).astype(np.dtype(endian + dtype)).tobytes(order="F")
    path.write_bytes(raw)


def test_minimal_float32_file(tmp_path):
    vals = np.arange(8, dtype=np.float32).reshape((2, 2, 2), order="F")
    p = tmp_path / "a.nii"
    write_hand(p, (2, 2, 2), vals, 16, 32, "f4")
    v = load_nifti(p)
    assert v.dims == (2, 2, 2)
    assert v.spacing == (1.0, 1.0, 1.0)
    assert np.array_equal(v.data.ravel(order="F"), np.arange(8))


def test_gzip_is_transparent(tmp_path):
    vals = np.arange(8, dtype=np.float32).reshape((2, 2, 2), order="F")
    p = tmp_path / "a.nii"
    write_hand(p, (2, 2, 2), vals, 16, 32, "f4")
    pz = tmp_path / "a.nii.gz"
    pz.write_bytes(gzip.compress(p.read_bytes()))
    assert np.array_equal(load_nifti(p).data, load_nifti(pz).data)


def test_scaling_applied_to_int16(tmp_path):
    p = tmp_path / "s.nii"
    write_hand(p, (1, 1, 1), np.array([[[4]]]), 4, 16, "i2", slope=0.5, inter=1.0)
    v = load_nifti(p)
    assert v.data[0, 0, 0] == 4 * 0.5 + 1


def test_zero_slope_means_unscaled(tmp_path):
    p = tmp_path / "s.nii"
    write_hand(p, (1, 1, 1), np.array([[[4]]]), 4, 16, "i2", slope=0.0, inter=7.0)
    assert load_nifti(p).data[0, 0, 0] == 4


def test_big_endian_header(tmp_path):
    vals = np.arange(24, dtype=np.float64).reshape((2, 3, 4), order="F")
    p = tmp_path / "be.nii"
    write_hand(p, (2, 3, 4), vals, 64, 64, "f8", endian=">", pixdim=(2.0, 3.0, 3.5))
    v = load_nifti(p)
    assert np.array_equal(v.data, vals)
    assert v.spacing == (2.0, 3.0, 3.5)


def test_pair_files(tmp_path):
    vals = np.arange(8, dtype=np.uint8).reshape((2, 2, 2), order="F")
    (tmp_path / "p.hdr").write_bytes(hand_header((2, 2, 2), 2, 8, magic=b"ni1\x00", vox_offset=0.0))
    (tmp_path / "p.img").write_bytes(vals.tobytes(order="F"))
    assert np.array_equal(load_nifti(tmp_path / "p.hdr").data, vals)


def test_nan_replaced_and_counted(tmp_path):
    vals = np.array([np.nan, 1, 2, np.nan, 4, 5, 6, 7], dtype=np.float32).reshape((2, 2, 2), order="F")
    p = tmp_path / "n.nii"
    write_hand(p, (2, 2, 2), vals, 16, 32, "f4")
    v = load_nifti(p)
    assert v.nan_count == 2
    assert np.all(np.isfinite(v.data)) and v.data.ravel(order="F")[0] == 0


def test_header_errors(tmp_path):
    p = tmp_path / "bad.nii"
    write_hand(p, (2, 2, 2), np.zeros(8), 16, 32, "f4", magic=b"xx1\x00")
    with pytest.raises(MalformedHeader):
        load_nifti(p)
    write_hand(p, (2, 2, 2, 3), np.zeros(24), 16, 32, "f4", ndim=4)
    with pytest.raises(DimensionalityError):
        load_nifti(p)
    write_hand(p, (2, 2, 2), np.zeros(8), 32, 64, "f8")  # complex64 code
    with pytest.raises(UnsupportedDatatype):
        load_nifti(p)
    p.write_bytes(b"\0" * 100)
    with pytest.raises(MalformedHeader):
        load_nifti(p)
    with pytest.raises(IoError):
        load_nifti(tmp_path / "missing.nii")


def test_roundtrip_int32_labels(tmp_path):
    lab = np.arange(60).reshape(3, 4, 5) - 1
    v = Volume3D(lab, datatype="int32")
    save_nifti(v, tmp_path / "l.nii.gz")
    assert np.array_equal(load_nifti(tmp_path / "l.nii.gz").data, lab)


@pytest.mark.parametrize("dt", ["uint8", "int16", "int32", "float32", "float64"])
def test_roundtrip_every_datatype(tmp_path, dt):
    data = np.arange(2 * 3 * 4).reshape(2, 3, 4).astype(float)
    v = Volume3D(data, spacing=(1.5, 2.0, 3.5), datatype=dt)
    save_nifti(v, tmp_path / "x.nii")
    w = load_nifti(tmp_path / "x.nii")
    assert np.array_equal(w.data, data)
    assert np.allclose(w.spacing, v.spacing, atol=1e-6)
    assert w.datatype == dt


@given(st.integers(0, 2**32 - 1))
def test_roundtrip_random_float32(seed):
    import tempfile
    from pathlib import Path

    data = np.random.default_rng(seed).normal(size=(7, 5, 3)).astype(np.float32)
    v = Volume3D(data)
    with tempfile.TemporaryDirectory() as d:
        save_nifti(v, Path(d) / "r.nii.gz")
        w = load_nifti(Path(d) / "r.nii.gz")
    assert np.max(np.abs(w.data - data.astype(np.float64))) == 0


def test_affine_roundtrip(tmp_path):
    aff = np.array([[2, 0, 0, -10], [0, 2, 0, 5], [0, 0, 3, 1], [0, 0, 0, 1]], dtype=float)
    v = Volume3D(np.ones((2, 2, 2)), spacing=(2, 2, 3), affine=aff)
    save_nifti(v, tmp_path / "a.nii")
    assert np.allclose(load_nifti(tmp_path / "a.nii").affine, aff)


def test_save_is_byte_deterministic(tmp_path):
    v = Volume3D(np.random.default_rng(0).normal(size=(4, 4, 4)))
    save_nifti(v, tmp_path / "a.nii.gz")
    save_nifti(v, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_volume_invariants():
    with pytest.raises(DimensionalityError):
        Volume3D(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume3D(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume3D(np.full((2, 2, 2), np.nan))
    v = Volume3D(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_normalize_two_points():
    data = np.array([2.0, 4.0, 9.0]).reshape(3, 1, 1)
    mask = BrainMask(np.array([True, True, False]).reshape(3, 1, 1))
    z = normalize_intensity(Volume3D(data), mask, "zscore").data.ravel()
    assert z.tolist() == [-1.0, 1.0, 0.0]
    m = normalize_intensity(Volume3D(data), mask, "mean1").data.ravel()
    assert np.allclose(m, [2 / 3, 4 / 3, 0.0], atol=1e-15)


def test_normalize_random_moments(rng):
    v = Volume3D(rng.normal(50, 7, size=(10, 10, 10)))
    mask = BrainMask(rng.uniform(size=(10, 10, 10)) < 0.7)
    z = normalize_intensity(v, mask).data[mask.data]
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9
    m = normalize_intensity(v, mask, "mean1").data[mask.data]
    assert abs(m.mean() - 1) < 1e-9


def test_normalize_idempotent(rng):
    v = Volume3D(rng.gamma(2.0, 3.0, size=(6, 6, 6)))
    mask = BrainMask.full(v.dims)
    once = normalize_intensity(v, mask)
    twice = normalize_intensity(once, mask)
    assert np.max(np.abs(once.data - twice.data)) < 1e-9


def test_normalize_degenerate():
    v = Volume3D(np.full((3, 3, 3), 5.0))
    with pytest.raises(DegenerateInput):
        normalize_intensity(v, BrainMask.full(v.dims))
    with pytest.raises(DegenerateInput):
        normalize_intensity(Volume3D(np.zeros((3, 3, 3)) + np.eye(3)[None] - np.eye(3)[None]),
                            BrainMask.full((3, 3, 3)), "mean1")
    one = np.zeros((3, 3, 3), dtype=bool)
    one[0, 0, 0] = True
    with pytest.raises(DegenerateInput):
        normalize_intensity(Volume3D(np.arange(27.0).reshape(3, 3, 3)), BrainMask(one))


def test_auto_mask_examples():
    data = np.zeros((2, 2, 2))
    data[0] = 10
    m = auto_mask(Volume3D(data), 0.5)
    assert np.array_equal(m.data, data == 10)
    assert auto_mask(Volume3D(np.full((3, 3, 3), 4.0)), 0.5).count == 27
    with pytest.raises(DegenerateInput):
        auto_mask(Volume3D(np.zeros((2, 2, 2))))


def test_auto_mask_matches_analytic_sphere():
    from perfvox.synth import PhantomSpec, generate_phantom

    spec = PhantomSpec(dims=(24, 24, 24), base_mean=50, radial_decay=5.0)
    m = auto_mask(generate_phantom(spec), 0.1).data
    c = np.array([12, 12, 12])
    idx = np.indices(spec.dims).reshape(3, -1).T
    r = np.linalg.norm(idx - c, axis=1).reshape(spec.dims)
    radius = (50 - 5) / 5.0  # intensity 50 - 5 r exceeds 5 iff r < 9
    assert np.all(m[r < radius - 1])
    assert not np.any(m[r > radius + 1])


@given(st.floats(0.01, 0.98), st.floats(0.01, 0.98))
def test_auto_mask_monotone(a, b):
    lo, hi = sorted((a, b))
    v = Volume3D(np.random.default_rng(3).uniform(0, 1, size=(6, 6, 6)) ** 2 + 0.001)
    assert not np.any(auto_mask(v, hi).data & ~auto_mask(v, lo).data)


def test_manifest_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,age,sex,path\ns1,30,F,a.nii\ns2,45,m,b.nii\n")
    m = load_manifest(p)
    assert len(m) == 2 and m.sexes == ["F", "M"] and list(m.ages) == [30, 45]
    assert m.resolve(m.rows[0]) == tmp_path / "a.nii"


@pytest.mark.parametrize("row,needle", [
    ("s1,30,female,a.nii", "sex"),
    ("s1,131,F,a.nii", "age"),
    ("s1,3x,F,a.nii", "age"),
    ("s1,30,F", "field"),
])
def test_manifest_bad_rows(tmp_path, row, needle):
    p = tmp_path / "m.csv"
    p.write_text("id,age,sex,path\n" + row + "\n")
    with pytest.raises(ParseError, match=needle):
        load_manifest(p)


def test_manifest_duplicate_id_named(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,age,sex,path\ndup7,30,F,a.nii\ndup7,31,M,b.nii\n")
    with pytest.raises(ParseError, match="dup7"):
        load_manifest(p)


def test_manifest_roundtrip(tmp_path):
    m = CohortManifest([ParticipantMeta("a", 10, "F", "a.nii"), ParticipantMeta("b", 90, "M", "b.nii")])
    write_manifest(m, tmp_path / "m.csv")
    back = load_manifest(tmp_path / "m.csv")
    assert back.ids == ["a", "b"] and list(back.ages) == [10, 90]
