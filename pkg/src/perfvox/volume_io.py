"""Volumetric scalar maps: NIfTI-1 I/O, brain masks, intensity normalization
and cohort manifests.

Volumes are stored as float64 arrays indexed ``[x, y, z]`` (NIfTI order,
x fastest on disk). Arrays held by :class:`Volume3D` and :class:`BrainMask`
are marked read-only so a loaded volume can be shared between workers.
"""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateInput,
    DimensionalityError,
    IoError,
    MalformedHeader,
    ParseError,
    ShapeMismatch,
    UnsupportedDatatype,
)

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> (name, numpy type char)
DATATYPES = {
    2: ("uint8", "u1"),
    4: ("int16", "i2"),
    8: ("int32", "i4"),
    16: ("float32", "f4"),
    64: ("float64", "f8"),
}
DATATYPE_CODES = {name: code for code, (name, _) in DATATYPES.items()}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Volume3D:
    """A 3D scalar field with voxel spacing in mm.

    ``datatype`` remembers the on-disk type so that a save after a load
    writes the same representation; ``nan_count`` is the number of NaN
    voxels replaced by 0 at load time.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    affine: Optional[np.ndarray] = None
    datatype: str = "float32"
    nan_count: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise DimensionalityError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ShapeMismatch(f"volume dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be three positive finite values, got {self.spacing}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        if self.datatype not in DATATYPE_CODES:
            raise UnsupportedDatatype(self.datatype)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", spacing)
        if self.affine is not None:
            aff = np.asarray(self.affine, dtype=np.float64)
            if aff.shape != (4, 4):
                raise ValueError("affine must be 4x4")
            object.__setattr__(self, "affine", _frozen(aff))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data: np.ndarray, **changes) -> "Volume3D":
        kw = dict(spacing=self.spacing, affine=self.affine, datatype=self.datatype)
        kw.update(changes)
        return Volume3D(data, **kw)


@dataclass(frozen=True, eq=False)
class BrainMask:
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=bool)
        if data.ndim != 3:
            raise DimensionalityError(f"mask must be 3D, got shape {data.shape}")
        if not data.any():
            raise DegenerateInput("mask contains no voxels")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self) -> tuple:
        return tuple(int(n) for n in self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def full(cls, dims) -> "BrainMask":
        return cls(np.ones(dims, dtype=bool))


def check_mask(v: Volume3D, mask: BrainMask) -> None:
    if v.dims != mask.dims:
        raise ShapeMismatch(f"mask dims {mask.dims} do not match volume dims {v.dims}")


# --------------------------------------------------------------------------
# NIfTI-1


def _read_bytes(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise IoError(f"corrupt gzip stream in {path}: {exc}") from exc
    return raw


def _image_path_for(hdr_path: Path) -> Path:
    name = hdr_path.name
    for suffix, repl in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(suffix):
            cand = hdr_path.with_name(name[: -len(suffix)] + repl)
            if cand.exists():
                return cand
            return hdr_path.with_name(name[: -len(suffix)] + ".img")
    return hdr_path.with_suffix(".img")


def _quaternion_affine(q, pixdim, qfac) -> np.ndarray:
    b, c, d, qx, qy, qz = q
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 1e-7 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    scale = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    aff = np.eye(4)
    aff[:3, :3] = r * scale
    aff[:3, 3] = (qx, qy, qz)
    return aff


def load_nifti(path) -> Volume3D:
    """Read a 3D NIfTI-1 volume (``.nii``, ``.nii.gz`` or ``.hdr``/``.img``).

    The scaling ``scl_slope``/``scl_inter`` is applied when the slope is
    non-zero. NaN voxels become 0 and are counted in ``nan_count``.
    """
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such file: {path}")
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"{path}: file shorter than the {HEADER_SIZE}-byte header")

    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise MalformedHeader(f"{path}: sizeof_hdr is not {HEADER_SIZE}")

    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise MalformedHeader(f"{path}: bad magic {magic!r}")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = struct.unpack(endian + "f", raw[108:112])[0]
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", raw[252:256])
    quatern = struct.unpack(endian + "6f", raw[256:280])
    srows = struct.unpack(endian + "12f", raw[280:328])

    if dim[0] != 3:
        raise DimensionalityError(f"{path}: expected a 3D volume, header has dim[0]={dim[0]}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"{path}: NIfTI datatype code {datatype}")
    dtname, tchar = DATATYPES[datatype]
    shape = tuple(int(n) for n in dim[1:4])
    if min(shape) < 1:
        raise MalformedHeader(f"{path}: non-positive dimension in {shape}")
    nvox = shape[0] * shape[1] * shape[2]
    dt = np.dtype(endian + tchar)

    if magic == b"ni1\x00":
        img_path = _image_path_for(path)
        if not img_path.exists():
            raise IoError(f"{path}: image file {img_path} not found")
        payload = _read_bytes(img_path)
        offset = int(vox_offset)
    else:
        payload = raw
        offset = int(vox_offset) if vox_offset >= HEADER_SIZE else VOX_OFFSET
    nbytes = nvox * dt.itemsize
    if len(payload) < offset + nbytes:
        raise IoError(f"{path}: truncated image data ({len(payload) - offset} of {nbytes} bytes)")
    arr = np.frombuffer(payload, dtype=dt, count=nvox, offset=offset)
    data = arr.reshape(shape, order="F").astype(np.float64)
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        data = data * slope + inter
        dtname = "float64"

    nan = ~np.isfinite(data)
    nan_count = int(nan.sum())
    if nan_count:
        data[nan] = 0.0

    spacing = tuple(abs(float(p)) if p and np.isfinite(p) else 1.0 for p in pixdim[1:4])
    affine = None
    if sform_code > 0:
        affine = np.vstack([np.array(srows, dtype=np.float64).reshape(3, 4), [0, 0, 0, 1]])
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        affine = _quaternion_affine(quatern, spacing, qfac)
    return Volume3D(data, spacing=spacing, affine=affine, datatype=dtname, nan_count=nan_count)


def _header_bytes(v: Volume3D, dtname: str) -> bytes:
    code = DATATYPE_CODES[dtname]
    itemsize = np.dtype(DATATYPES[code][1]).itemsize
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *v.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    if v.affine is not None:
        struct.pack_into("<2h", hdr, 252, 0, 1)
        struct.pack_into("<12f", hdr, 280, *v.affine[:3].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def save_nifti(v: Volume3D, path, dtype: Optional[str] = None) -> None:
    """Write ``v`` as single-file NIfTI-1; gzip when ``path`` ends in ``.gz``.

    ``dtype`` defaults to the volume's own ``datatype``. Integer targets
    round to nearest; values outside the type's range are an error.
    """
    path = Path(path)
    dtname = dtype or v.datatype
    if dtname not in DATATYPE_CODES:
        raise UnsupportedDatatype(dtname)
    np_dt = np.dtype("<" + DATATYPES[DATATYPE_CODES[dtname]][1])
    data = v.data
    if np_dt.kind in "iu":
        info = np.iinfo(np_dt)
        data = np.rint(data)
        if data.min() < info.min or data.max() > info.max:
            raise ValueError(f"intensities out of range for {dtname}")
    payload = _header_bytes(v, dtname) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += np.asarray(data, dtype=np_dt).tobytes(order="F")
    if path.name.endswith(".gz"):
        # mtime=0 keeps the gzip stream byte-identical across runs
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --------------------------------------------------------------------------
# masks and normalization


def auto_mask(v: Volume3D, threshold_fraction: float = 0.05) -> BrainMask:
    """Voxels brighter than ``threshold_fraction`` times the volume maximum."""
    if not 0 < threshold_fraction < 1:
        raise ValueError("threshold_fraction must lie in (0, 1)")
    vmax = float(v.data.max())
    if vmax <= 0:
        raise DegenerateInput("volume has no positive intensity; cannot threshold")
    return BrainMask(v.data > threshold_fraction * vmax)


def normalize_intensity(v: Volume3D, mask: BrainMask, mode: str = "zscore") -> Volume3D:
    """Standardize intensities over the mask; voxels outside it become 0.

    ``zscore`` gives masked mean 0 and (population) standard deviation 1,
    ``mean1`` divides by the masked mean.
    """
    check_mask(v, mask)
    m = mask.data
    if m.sum() < 2:
        raise DegenerateInput("normalization needs at least two masked voxels")
    vals = v.data[m]
    out = np.zeros(v.dims)
    if mode == "zscore":
        mu = vals.mean()
        sd = np.sqrt(np.mean((vals - mu) ** 2))
        if not sd > 0:
            raise DegenerateInput("constant masked intensities cannot be z-scored")
        out[m] = (vals - mu) / sd
    elif mode == "mean1":
        mu = vals.mean()
        if mu == 0:
            raise DegenerateInput("masked mean is zero")
        out[m] = vals / mu
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return v.with_data(out, datatype="float64")


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ParticipantMeta:
    id: str
    age: int
    sex: str
    volume_path: str


@dataclass
class CohortManifest:
    rows: list
    base_dir: Path = field(default_factory=Path)

    def __post_init__(self):
        if not self.rows:
            raise ParseError("manifest is empty")
        seen = set()
        for r in self.rows:
            if r.id in seen:
                raise ParseError(f"duplicate participant id {r.id!r}")
            seen.add(r.id)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def ids(self) -> list:
        return [r.id for r in self.rows]

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age for r in self.rows], dtype=int)

    @property
    def sexes(self) -> list:
        return [r.sex for r in self.rows]

    def resolve(self, row: ParticipantMeta) -> Path:
        p = Path(row.volume_path)
        return p if p.is_absolute() else self.base_dir / p


MANIFEST_HEADER = ["id", "age", "sex", "path"]


def parse_sex(token: str) -> str:
    tok = token.strip()
    if tok not in ("M", "F", "m", "f"):
        raise ParseError(f"unknown sex token {token!r}; expected M or F")
    return tok.upper()


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.reader(text.splitlines())
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError(f"{path}: empty manifest") from None
    if [h.strip().lower() for h in header] != MANIFEST_HEADER:
        raise ParseError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(header)}")
    rows = []
    seen = set()
    for lineno, rec in enumerate(reader, start=2):
        if not rec or all(not c.strip() for c in rec):
            continue
        if len(rec) != 4:
            raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
        pid, age_s, sex_s, vpath = (c.strip() for c in rec)
        if not pid:
            raise ParseError(f"{path}:{lineno}: empty id")
        if pid in seen:
            raise ParseError(f"{path}:{lineno}: duplicate id {pid!r}")
        seen.add(pid)
        try:
            age = int(age_s)
        except ValueError:
            raise ParseError(f"{path}:{lineno}: age {age_s!r} is not an integer") from None
        if not 0 <= age <= 130:
            raise ParseError(f"{path}:{lineno}: age {age} outside [0, 130]")
        try:
            sex = parse_sex(sex_s)
        except ParseError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        rows.append(ParticipantMeta(pid, age, sex, vpath))
    return CohortManifest(rows, base_dir=path.parent)


def write_manifest(manifest: CohortManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in manifest.rows:
            w.writerow([r.id, r.age, r.sex, r.volume_path])


def volume_from_array(data: Sequence, spacing=(1.0, 1.0, 1.0), **kw) -> Volume3D:
    return Volume3D(np.asarray(data, dtype=np.float64), spacing=spacing, **kw)


__all__ = [
    "Volume3D",
    "BrainMask",
    "ParticipantMeta",
    "CohortManifest",
    "load_nifti",
    "save_nifti",
    "auto_mask",
    "normalize_intensity",
    "load_manifest",
    "write_manifest",
    "check_mask",
    "volume_from_array",
]
