"""Regional perfusion features: supervoxel means and peri-regional shells."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import MissingVolume, ParseError, ShapeMismatch
from .slic3d import SupervoxelLabeling
from .volume_io import BrainMask, CohortManifest, Volume3D, parse_sex

DEFAULT_MARGINS = (0.2, 0.5, 1.0, 5.0)


def _check(v: Volume3D, l: SupervoxelLabeling):
    if v.dims != l.dims:
        raise ShapeMismatch(f"volume dims {v.dims} differ from labeling dims {l.dims}")


def supervoxel_means(v: Volume3D, l: SupervoxelLabeling) -> np.ndarray:
    """Mean intensity per cluster; empty clusters give 0."""
    _check(v, l)
    inside = l.labels >= 0
    lab = l.labels[inside]
    sums = np.bincount(lab, weights=v.data[inside], minlength=l.k)
    counts = np.bincount(lab, minlength=l.k)
    out = np.zeros(l.k)
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz]
    return out


def margin_voxels(margin_mm: float, spacing: Sequence[float]) -> np.ndarray:
    """Per-axis box expansion for a margin: ``ceil(r / spacing)``, at least 1."""
    return np.array([max(1, math.ceil(margin_mm / s)) for s in spacing], dtype=int)


def _integral(a: np.ndarray) -> np.ndarray:
    out = np.zeros(tuple(n + 1 for n in a.shape))
    out[1:, 1:, 1:] = a.cumsum(0).cumsum(1).cumsum(2)
    return out


def _box_sums(ii: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Sums over half-open boxes [lo, hi) given an integral image."""
    x0, y0, z0 = lo.T
    x1, y1, z1 = hi.T
    return (ii[x1, y1, z1] - ii[x0, y1, z1] - ii[x1, y0, z1] - ii[x1, y1, z0]
            + ii[x0, y0, z1] + ii[x0, y1, z0] + ii[x1, y0, z0] - ii[x0, y0, z0])


def bounding_boxes(l: SupervoxelLabeling):
    """``(lo, hi, present)``: half-open voxel boxes per cluster."""
    lo = np.zeros((l.k, 3), dtype=int)
    hi = np.zeros((l.k, 3), dtype=int)
    present = np.zeros(l.k, dtype=bool)
    for j, box in enumerate(ndimage.find_objects(l.labels + 1, max_label=l.k)):
        if box is None:
            continue
        present[j] = True
        lo[j] = [s.start for s in box]
        hi[j] = [s.stop for s in box]
    return lo, hi, present


def shell_means(v: Volume3D, l: SupervoxelLabeling, mask: Optional[BrainMask] = None,
                margins_mm: Sequence[float] = DEFAULT_MARGINS, return_counts: bool = False):
    """Mean intensity in the margin-expanded bounding box of each cluster.

    The shell is the cluster's bounding box grown by ``margin_voxels`` on
    each side, clipped to the volume, restricted to the mask and minus the
    cluster's own voxels (other clusters' voxels stay in). Empty shells give
    0. Returns a ``K x len(margins)`` array, plus the voxel counts when
    ``return_counts`` is set.
    """
    _check(v, l)
    margins = [float(r) for r in margins_mm]
    if any(r <= 0 for r in margins) or margins != sorted(margins):
        raise ValueError("margins must be positive and ascending")
    m = (l.labels >= 0) if mask is None else mask.data
    if m.shape != l.dims:
        raise ShapeMismatch("mask dims differ from labeling dims")
    mf = m.astype(np.float64)
    ii_val = _integral(v.data * mf)
    ii_cnt = _integral(mf)
    lo, hi, present = bounding_boxes(l)
    inside = l.labels >= 0
    csum = np.bincount(l.labels[inside], weights=v.data[inside], minlength=l.k)
    csize = np.bincount(l.labels[inside], minlength=l.k).astype(np.float64)
    dims = np.array(v.dims)

    means = np.zeros((l.k, len(margins)))
    counts = np.zeros((l.k, len(margins)), dtype=np.int64)
    for col, r in enumerate(margins):
        e = margin_voxels(r, v.spacing)
        blo = np.maximum(lo - e, 0)
        bhi = np.minimum(hi + e, dims)
        s = _box_sums(ii_val, blo, bhi) - csum
        n = np.rint(_box_sums(ii_cnt, blo, bhi) - csize)
        ok = present & (n > 0)
        means[ok, col] = s[ok] / n[ok]
        counts[present, col] = n[present].astype(np.int64)
    if return_counts:
        return means, counts
    return means


@dataclass
class FeatureVector:
    participant_id: str
    cluster_means: np.ndarray
    shell_means: np.ndarray
    sizes: np.ndarray
    margins_mm: tuple = DEFAULT_MARGINS
    empty_shells: int = 0


def extract_features(pid: str, v: Volume3D, l: SupervoxelLabeling, mask: Optional[BrainMask] = None,
                     margins_mm: Sequence[float] = DEFAULT_MARGINS) -> FeatureVector:
    cm = supervoxel_means(v, l)
    if margins_mm:
        sm, cnt = shell_means(v, l, mask, margins_mm, return_counts=True)
        empty = int(((cnt == 0) & (l.sizes[:, None] > 0)).sum())
    else:
        sm, empty = np.zeros((l.k, 0)), 0
    return FeatureVector(pid, cm, sm, np.asarray(l.sizes, dtype=np.int64).copy(),
                         tuple(float(r) for r in margins_mm), empty)


@dataclass
class FeatureMatrix:
    """Participants x features, rows in manifest order."""

    ids: list
    ages: np.ndarray
    sexes: list
    cluster_means: np.ndarray  # N x K
    shell_means: np.ndarray  # N x K x M
    sizes: np.ndarray  # N x K
    margins_mm: tuple = DEFAULT_MARGINS
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.cluster_means.shape[1]

    @property
    def n(self) -> int:
        return len(self.ids)

    def row(self, i: int) -> FeatureVector:
        return FeatureVector(self.ids[i], self.cluster_means[i], self.shell_means[i],
                             self.sizes[i], self.margins_mm)

    def columns(self) -> list:
        cols = [f"c{j}" for j in range(self.k)]
        cols += [f"s{j}_{_fmt_margin(r)}" for j in range(self.k) for r in self.margins_mm]
        return cols

    def sex_labels(self) -> np.ndarray:
        """1 for F, 0 for M."""
        return np.array([1 if s == "F" else 0 for s in self.sexes], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "age", "sex"] + self.columns())
        flat_shell = self.shell_means.reshape(self.n, -1)
        for i in range(self.n):
            vals = [repr(float(x)) for x in self.cluster_means[i]]
            vals += [repr(float(x)) for x in flat_shell[i]]
            w.writerow([self.ids[i], int(self.ages[i]), self.sexes[i]] + vals)
        return buf.getvalue()

    def sizes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + [f"n{j}" for j in range(self.k)])
        for i in range(self.n):
            w.writerow([self.ids[i]] + [int(x) for x in self.sizes[i]])
        return buf.getvalue()

    def schema(self) -> dict:
        return {"K": self.k, "margins_mm": list(self.margins_mm), "columns": self.columns(), **self.meta}

    def save(self, path) -> None:
        """Write ``path`` (features), ``*_sizes.csv`` and ``*.schema.json``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        _sizes_path(path).write_text(self.sizes_csv())
        _schema_path(path).write_text(json.dumps(self.schema(), indent=2, sort_keys=True) + "\n")


def _fmt_margin(r: float) -> str:
    return format(float(r), "g")


def _sizes_path(path: Path) -> Path:
    return path.with_name(path.stem + "_sizes.csv")


def _schema_path(path: Path) -> Path:
    return path.with_name(path.stem + ".schema.json")


def load_feature_matrix(path) -> FeatureMatrix:
    path = Path(path)
    try:
        rows = list(csv.reader(path.read_text().splitlines()))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if len(rows) < 2:
        raise ParseError(f"{path}: no feature rows")
    header = rows[0]
    if header[:3] != ["id", "age", "sex"]:
        raise ParseError(f"{path}: header must start with id,age,sex")
    cols = header[3:]
    k = sum(1 for c in cols if c.startswith("c"))
    shell_cols = cols[k:]
    margins = []
    for c in shell_cols:
        lab, _, r = c[1:].partition("_")
        if lab == "0":
            margins.append(float(r))
    nm = len(margins)
    if len(shell_cols) != k * nm:
        raise ParseError(f"{path}: shell columns do not form a K x margins grid")
    ids, ages, sexes, data = [], [], [], []
    for rec in rows[1:]:
        if not rec:
            continue
        if len(rec) != len(header):
            raise ParseError(f"{path}: row for {rec[0]!r} has {len(rec)} fields, expected {len(header)}")
        ids.append(rec[0])
        ages.append(int(rec[1]))
        sexes.append(parse_sex(rec[2]))
        data.append([float(x) for x in rec[3:]])
    data = np.array(data, dtype=np.float64).reshape(len(ids), -1)
    sizes = np.ones((len(ids), k), dtype=np.int64)
    sp = _sizes_path(path)
    if sp.exists():
        srows = list(csv.reader(sp.read_text().splitlines()))[1:]
        by_id = {r[0]: [int(x) for x in r[1:]] for r in srows if r}
        sizes = np.array([by_id[i] for i in ids], dtype=np.int64)
    meta = {}
    schema = _schema_path(path)
    if schema.exists():
        meta = {key: val for key, val in json.loads(schema.read_text()).items()
                if key not in ("K", "margins_mm", "columns")}
    return FeatureMatrix(ids, np.array(ages), sexes, data[:, :k],
                         data[:, k:].reshape(len(ids), k, nm), sizes, tuple(margins), meta)


def build_feature_matrix(manifest: CohortManifest, labelings: Sequence[SupervoxelLabeling],
                         volumes: Sequence[Volume3D], margins_mm: Sequence[float] = DEFAULT_MARGINS,
                         masks: Optional[Sequence[BrainMask]] = None, meta: Optional[dict] = None,
                         vectors: Optional[Sequence[FeatureVector]] = None) -> FeatureMatrix:
    """Assemble per-participant features in manifest order.

    Precomputed ``vectors`` (e.g. from parallel workers) are used as-is;
    otherwise features are extracted from ``volumes`` and ``labelings``.
    """
    n = len(manifest)
    if vectors is None:
        if volumes is None or len(volumes) != n or any(v is None for v in volumes):
            raise MissingVolume("one volume per manifest row is required")
        if len(labelings) != n:
            raise ShapeMismatch("one labeling per manifest row is required")
        vectors = []
        for i, row in enumerate(manifest):
            mk = masks[i] if masks is not None else None
            vectors.append(extract_features(row.id, volumes[i], labelings[i], mk, margins_mm))
    if len(vectors) != n:
        raise MissingVolume("one feature vector per manifest row is required")
    ks = {len(fv.cluster_means) for fv in vectors}
    if len(ks) != 1:
        raise ShapeMismatch(f"participants have different cluster counts {sorted(ks)}")
    for row, fv in zip(manifest, vectors):
        if fv.participant_id != row.id:
            raise ShapeMismatch(f"feature row {fv.participant_id!r} out of manifest order")
    return FeatureMatrix(
        ids=manifest.ids,
        ages=manifest.ages,
        sexes=manifest.sexes,
        cluster_means=np.vstack([fv.cluster_means for fv in vectors]),
        shell_means=np.stack([fv.shell_means for fv in vectors]),
        sizes=np.vstack([fv.sizes for fv in vectors]),
        margins_mm=tuple(float(r) for r in margins_mm),
        meta=dict(meta or {}),
    )
