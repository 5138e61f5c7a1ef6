"""Anatomical labelling of supervoxels by majority vote against a
co-registered integer atlas, and per-ROI sex comparisons."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptySelection, ParseError, ShapeMismatch
from .features import FeatureMatrix
from .slic3d import SupervoxelLabeling
from .stats import ttest_two_sample
from .volume_io import Volume3D, load_nifti

LOW_CONFIDENCE = 0.10


@dataclass
class AtlasVolume:
    volume: Volume3D
    names: Mapping[int, str]

    def __post_init__(self):
        d = self.volume.data
        if not np.all(d == np.rint(d)) or d.min() < 0:
            raise ParseError("atlas intensities must be non-negative integers")
        present = {int(i) for i in np.unique(d) if i > 0}
        missing = sorted(present - set(self.names))
        if missing:
            raise ParseError(f"lookup table lacks names for atlas ids {missing[:10]}")

    @property
    def ids(self) -> np.ndarray:
        return np.rint(self.volume.data).astype(np.int64)


def load_lookup(path) -> dict:
    """Read a ``roi_id,name`` CSV."""
    rows = list(csv.reader(Path(path).read_text(encoding="utf-8").splitlines()))
    if not rows or [c.strip().lower() for c in rows[0]] != ["roi_id", "name"]:
        raise ParseError(f"{path}: header must be roi_id,name")
    out = {}
    for r in rows[1:]:
        if not r:
            continue
        try:
            out[int(r[0])] = r[1].strip()
        except (ValueError, IndexError):
            raise ParseError(f"{path}: bad lookup row {r}") from None
    return out


def load_atlas(nifti_path, lookup_path) -> AtlasVolume:
    return AtlasVolume(load_nifti(nifti_path), load_lookup(lookup_path))


@dataclass(frozen=True)
class RoiEntry:
    roi_id: int
    roi_name: str
    vote_fraction: float
    labeled_fraction: float
    flag: str  # "", "low_confidence", "unassigned" or "empty"


def majority_label(l: SupervoxelLabeling, atlas: AtlasVolume) -> dict:
    """Plurality non-zero atlas id per cluster (ties to the lowest id).

    ``vote_fraction`` is the winning count over the cluster's labelled
    voxels. Clusters without labelled voxels, and empty clusters, map to
    ROI 0 with vote fraction 0.
    """
    if atlas.volume.dims != l.dims:
        raise ShapeMismatch(
            f"atlas dims {atlas.volume.dims} differ from labeling dims {l.dims}; "
            "resample the atlas onto the CBF grid (nearest neighbour) first")
    ids = atlas.ids
    inside = l.labels >= 0
    lab = l.labels[inside]
    roi = ids[inside]
    sizes = np.bincount(lab, minlength=l.k)
    labelled = roi > 0
    uniq, code = np.unique(roi[labelled], return_inverse=True)
    counts = np.zeros((l.k, max(len(uniq), 1)), dtype=np.int64)
    np.add.at(counts, (lab[labelled], code), 1)
    nlab = counts.sum(axis=1)
    out = {}
    for j in range(l.k):
        if sizes[j] == 0:
            out[j] = RoiEntry(0, "unassigned", 0.0, 0.0, "empty")
            continue
        if nlab[j] == 0:
            out[j] = RoiEntry(0, "unassigned", 0.0, 0.0, "unassigned")
            continue
        best = int(np.argmax(counts[j]))  # first max == lowest roi id
        rid = int(uniq[best])
        frac_lab = nlab[j] / sizes[j]
        out[j] = RoiEntry(rid, atlas.names.get(rid, str(rid)), counts[j, best] / nlab[j], float(frac_lab),
                          "low_confidence" if frac_lab < LOW_CONFIDENCE else "")
    return out


def assignment_csv(assign: Mapping[int, RoiEntry]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster_id", "roi_id", "roi_name", "vote_fraction", "flag"])
    for cid in sorted(assign):
        e = assign[cid]
        w.writerow([cid, e.roi_id, e.roi_name, repr(float(e.vote_fraction)), e.flag])
    return buf.getvalue()


def roi_sex_compare(fm: FeatureMatrix, assign: Mapping[int, RoiEntry], significant_clusters: Iterable[int],
                    variant: str = "pooled") -> list:
    """Female vs male t-test per ROI over the selected clusters.

    Each participant's ROI value is the mean of its member clusters'
    features. Results are sorted by ascending p (then ROI id); the
    ``TTestResult.id`` is the ROI id, group a is female, group b male.
    """
    sel = sorted({int(c) for c in significant_clusters})
    if not sel:
        raise EmptySelection("no significant clusters to map onto ROIs")
    bad = [c for c in sel if not 0 <= c < fm.k]
    if bad:
        raise ValueError(f"cluster ids {bad} outside 0..{fm.k - 1}")
    members = {}
    for c in sel:
        rid = assign[c].roi_id
        if rid == 0:
            continue
        members.setdefault(rid, []).append(c)
    if not members:
        raise EmptySelection("none of the selected clusters has an ROI assignment")
    sexes = np.array(fm.sexes)
    results = []
    for rid in sorted(members):
        vals = fm.cluster_means[:, members[rid]].mean(axis=1)
        results.append(ttest_two_sample(vals[sexes == "F"], vals[sexes == "M"], variant, id=rid))
    results.sort(key=lambda r: (r.p_two_sided, r.id))
    return results


def roi_report_csv(results, names: Mapping[int, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["roi_id", "roi_name", "t", "df", "p", "mean_F", "mean_M", "n_F", "n_M"])
    for r in results:
        w.writerow([r.id, names.get(r.id, str(r.id)), repr(r.t), repr(r.df), repr(r.p_two_sided),
                    repr(r.mean_a), repr(r.mean_b), r.n_a, r.n_b])
    return buf.getvalue()
