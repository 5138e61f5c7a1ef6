"""3D SLIC supervoxels over a masked scalar volume.

Clustering runs in the joint (x, y, z, intensity) space with distance

    D**2 = (I - c)**2 + (m / S)**2 * d_s**2

where ``S`` is the seed grid step in voxels, ``m`` the compactness and
``d_s`` the Euclidean voxel distance with each axis scaled by
``spacing / min(spacing)``. Each centroid only competes for voxels inside
the window ``|x - c_x| <= S`` (per axis).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DegenerateInput, ShapeMismatch, ValidationError
from .volume_io import BrainMask, Volume3D, check_mask, load_nifti, save_nifti


@dataclass(frozen=True)
class SlicParams:
    k: int = 100
    compactness: float = 10.0
    smoothing_sigma: float = 1.0
    max_iters: int = 10
    tol: float = 1e-3
    connectivity: int = 6
    perturb_seeds: bool = True

    def validate(self, masked_count: Optional[int] = None) -> None:
        if int(self.k) != self.k or self.k < 1:
            raise ValidationError(f"k must be a positive integer, got {self.k}")
        if masked_count is not None and self.k > masked_count:
            raise DegenerateInput(f"k={self.k} exceeds the {masked_count} masked voxels")
        if not self.compactness > 0:
            raise ValidationError(f"compactness must be > 0, got {self.compactness}")
        if not self.smoothing_sigma >= 0:
            raise ValidationError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.connectivity not in (6, 26):
            raise ValidationError(f"connectivity must be 6 or 26, got {self.connectivity}")


@dataclass(eq=False)
class SupervoxelLabeling:
    """Per-voxel labels plus the centroid table.

    ``labels`` is -1 outside the mask and 0..k-1 inside. ``centroids`` has
    one row ``(x, y, z, mean intensity)`` per cluster; empty clusters keep
    their last position and report intensity 0. ``seed_keys`` holds the
    ``(iz, iy, ix, sub)`` seed-grid cell each cluster was seeded from and
    defines the canonical cluster order.
    """

    labels: np.ndarray
    centroids: np.ndarray
    sizes: np.ndarray
    step: float
    seed_keys: np.ndarray
    cost_history: list = field(default_factory=list)
    n_iter: int = 0
    orphans: int = 0

    @property
    def k(self) -> int:
        return len(self.sizes)

    @property
    def dims(self) -> tuple:
        return tuple(self.labels.shape)


# --------------------------------------------------------------------------
# smoothing


def gaussian_kernel1d(sigma_vox: float) -> np.ndarray:
    """Normalized Gaussian taps over the offsets with ``|i| < 3 sigma``."""
    if sigma_vox <= 0:
        return np.ones(1)
    r = max(0, math.ceil(3.0 * sigma_vox) - 1)
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return w / w.sum()


def _convolve_axis(a: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    r = len(w) // 2
    if r == 0:
        return a * w[0]
    a = np.moveaxis(a, axis, 0)
    out = a * w[r]
    for o in range(1, r + 1):
        if o >= a.shape[0]:
            break
        out[o:] += w[r - o] * a[:-o]
        out[:-o] += w[r + o] * a[o:]
    return np.moveaxis(out, 0, axis)


def gaussian_smooth(v: Volume3D, sigma_mm: float, mask: Optional[BrainMask] = None) -> Volume3D:
    """Separable masked Gaussian blur.

    The kernel is renormalized by the mask weight it actually covers, so
    constants stay constant at mask and volume borders. Voxels outside the
    mask are returned unchanged.
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    if sigma_mm == 0:
        return v
    if mask is not None:
        check_mask(v, mask)
        m = mask.data.astype(np.float64)
    else:
        m = np.ones(v.dims)
    num = v.data * m
    den = m.copy()
    for axis in range(3):
        w = gaussian_kernel1d(sigma_mm / v.spacing[axis])
        num = _convolve_axis(num, w, axis)
        den = _convolve_axis(den, w, axis)
    out = np.array(v.data, dtype=np.float64)
    inside = m > 0
    out[inside] = num[inside] / den[inside]
    return v.with_data(out, datatype="float64")


# --------------------------------------------------------------------------
# seeding


def _axis_scale(spacing) -> np.ndarray:
    sp = np.asarray(spacing, dtype=np.float64)
    return sp / sp.min()


def _gradient_energy(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    gx = p[2:, 1:-1, 1:-1] - p[:-2, 1:-1, 1:-1]
    gy = p[1:-1, 2:, 1:-1] - p[1:-1, :-2, 1:-1]
    gz = p[1:-1, 1:-1, 2:] - p[1:-1, 1:-1, :-2]
    return gx * gx + gy * gy + gz * gz


def _seed_grid(mask: np.ndarray, k: int):
    """Grid cells of step S over the mask bounding box.

    Returns S, masked voxel coordinates, their cell ids, the per-axis cell
    counts and the cell centers (voxel units).
    """
    coords = np.argwhere(mask)
    count = len(coords)
    step = (count / k) ** (1.0 / 3.0)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    ncell = np.maximum(1, np.ceil((hi - lo + 1) / step).astype(int))
    cell = np.floor((coords - lo + 0.5) / step).astype(int)
    cell = np.minimum(cell, ncell - 1)
    # z-major cell order: (iz, iy, ix)
    cell_id = (cell[:, 2] * ncell[1] + cell[:, 1]) * ncell[0] + cell[:, 0]
    center = lo - 0.5 + (cell + 0.5) * step
    return step, coords, cell, cell_id, center


def init_centroids(v: Volume3D, mask: BrainMask, k: int, perturb: bool = True):
    """Place ``k`` seeds on the masked seed grid.

    Returns ``(centroids, S, seed_keys)`` where ``centroids`` is ``k x 4``
    (x, y, z, intensity) and ``seed_keys`` is ``k x 4`` (iz, iy, ix, sub),
    sorted ascending.

    Each non-empty grid cell contributes the masked voxel nearest its
    center (ties to the lowest flat index). Surplus seeds are dropped from
    the least populated cells first and missing seeds are added to the most
    populated cells; among equally populated cells the lowest grid index
    is kept longest and served first.
    """
    check_mask(v, mask)
    m = mask.data
    count = int(m.sum())
    if k < 1:
        raise ValidationError("k must be >= 1")
    if k > count:
        raise DegenerateInput(f"k={k} exceeds the {count} masked voxels")

    step, coords, cell, cell_id, center = _seed_grid(m, k)
    flat = np.ravel_multi_index(coords.T, m.shape)
    d2 = ((coords - center) ** 2).sum(axis=1)
    order = np.lexsort((flat, d2, cell_id))
    first = np.ones(len(order), dtype=bool)
    first[1:] = cell_id[order][1:] != cell_id[order][:-1]
    seed_rows = order[first]
    cell_ids, cell_counts = np.unique(cell_id, return_counts=True)

    seeds = {}  # cell id -> list of voxel row indices into coords
    for r in seed_rows:
        seeds[int(cell_id[r])] = [int(r)]
    n = len(seeds)

    if n > k:
        by_size = sorted(zip(cell_counts, -cell_ids))
        for _, neg in by_size[: n - k]:
            del seeds[int(-neg)]
    elif n < k:
        members = {}
        srt = np.argsort(cell_id, kind="stable")
        bounds = np.searchsorted(cell_id[srt], cell_ids)
        for j, cid in enumerate(cell_ids):
            end = bounds[j + 1] if j + 1 < len(cell_ids) else len(srt)
            members[int(cid)] = srt[bounds[j]:end]
        ranked = [int(c) for _, c in sorted(zip(-cell_counts, cell_ids))]
        while n < k:
            progressed = False
            for cid in ranked:
                if n >= k:
                    break
                rows = members[cid]
                taken = seeds[cid]
                if len(rows) <= len(taken):
                    continue
                pts = coords[rows]
                dmin = np.full(len(rows), np.inf)
                for t in taken:
                    dmin = np.minimum(dmin, ((pts - coords[t]) ** 2).sum(axis=1))
                # farthest voxel from the cell's existing seeds, lowest flat index on ties
                best = np.lexsort((flat[rows], -dmin))[0]
                seeds[cid].append(int(rows[best]))
                n += 1
                progressed = True
            if not progressed:
                raise DegenerateInput("could not place the requested number of seeds")

    keys = []
    pos = []
    for cid in sorted(seeds):
        for sub, r in enumerate(seeds[cid]):
            ix, iy, iz = cell[r]
            keys.append((iz, iy, ix, sub))
            pos.append(coords[r])
    keys = np.array(keys, dtype=np.int64)
    pos = np.array(pos, dtype=np.int64)

    img = v.data
    if perturb:
        pos = _perturb_seeds(img, m, pos)
    cents = np.empty((k, 4))
    cents[:, :3] = pos
    cents[:, 3] = img[pos[:, 0], pos[:, 1], pos[:, 2]]
    return cents, step, keys


def _perturb_seeds(img: np.ndarray, mask: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Move each seed to the lowest-gradient masked voxel of its 3x3x3
    neighbourhood; the current position wins ties, then lowest flat index.
    Positions held by another seed are skipped."""
    grad = _gradient_energy(img)
    shape = np.array(img.shape)
    occupied = {tuple(p) for p in pos}
    out = pos.copy()
    offsets = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)])
    for i, p in enumerate(pos):
        cur = tuple(p)
        best, best_g = cur, grad[cur]
        for q in p + offsets:
            if np.any(q < 0) or np.any(q >= shape):
                continue
            tq = tuple(q)
            if tq == cur or not mask[tq] or tq in occupied:
                continue
            g = grad[tq]
            if g < best_g or (g == best_g and best != cur and tq < best):
                best, best_g = tq, g
        if best != cur:
            occupied.discard(cur)
            occupied.add(best)
            out[i] = best
    return out


# --------------------------------------------------------------------------
# clustering


def _assign(img, mask, cents, step, wspatial, scale, labels, dist):
    """One assignment sweep; updates ``labels``/``dist`` in place."""
    shape = img.shape
    radius = step
    for j in range(len(cents)):
        cx, cy, cz, ci = cents[j]
        lo = [max(0, int(math.ceil(c - radius))) for c in (cx, cy, cz)]
        hi = [min(n, int(math.floor(c + radius)) + 1) for c, n in zip((cx, cy, cz), shape)]
        if any(h <= l for l, h in zip(lo, hi)):
            continue
        slc = tuple(slice(l, h) for l, h in zip(lo, hi))
        dx = ((np.arange(lo[0], hi[0]) - cx) * scale[0]) ** 2
        dy = ((np.arange(lo[1], hi[1]) - cy) * scale[1]) ** 2
        dz = ((np.arange(lo[2], hi[2]) - cz) * scale[2]) ** 2
        ds = dx[:, None, None] + dy[None, :, None] + dz[None, None, :]
        d = (img[slc] - ci) ** 2 + wspatial * ds
        bd = dist[slc]
        bl = labels[slc]
        better = mask[slc] & ((d < bd) | ((d == bd) & (bl > j)))
        bd[better] = d[better]
        bl[better] = j


def _point_cost(img, coords, lab, cents, wspatial, scale):
    c = cents[lab]
    ds = (((coords - c[:, :3]) * scale) ** 2).sum(axis=1)
    return (img[tuple(coords.T)] - c[:, 3]) ** 2 + wspatial * ds


def _update(img, mask, labels, cents):
    k = len(cents)
    coords = np.argwhere(mask)
    lab = labels[mask]
    sizes = np.bincount(lab, minlength=k)
    new = cents.copy()
    nz = sizes > 0
    for a in range(3):
        s = np.bincount(lab, weights=coords[:, a].astype(np.float64), minlength=k)
        new[nz, a] = s[nz] / sizes[nz]
    s = np.bincount(lab, weights=img[mask], minlength=k)
    new[nz, 3] = s[nz] / sizes[nz]
    return new, sizes


def assignment_cost(img: np.ndarray, mask: np.ndarray, labels: np.ndarray, cents: np.ndarray,
                    step: float, compactness: float, spacing=(1.0, 1.0, 1.0)) -> float:
    """Total sum of D**2 of every masked voxel to its own centroid."""
    coords = np.argwhere(mask)
    w = (compactness / step) ** 2
    return float(_point_cost(img, coords, labels[mask], cents, w, _axis_scale(spacing)).sum())


def run_slic(v: Volume3D, mask: BrainMask, p: SlicParams = SlicParams()) -> SupervoxelLabeling:
    """Segment the masked volume into ``p.k`` supervoxels.

    The input is blurred with ``p.smoothing_sigma`` (mm) before clustering.
    After the first sweep each voxel's current centroid always stays a
    candidate, so the total assignment cost never increases between sweeps.
    Connectivity is enforced once clustering has converged, then clusters
    are renumbered into seed-grid order.
    """
    check_mask(v, mask)
    m = mask.data
    p.validate(int(m.sum()))
    k = int(p.k)
    sm = gaussian_smooth(v, p.smoothing_sigma, mask)
    img = sm.data
    scale = _axis_scale(v.spacing)

    cents, step, keys = init_centroids(sm, mask, k, perturb=p.perturb_seeds)
    wspatial = (p.compactness / step) ** 2
    coords = np.argwhere(m)

    labels = np.full(v.dims, -1, dtype=np.int64)
    history = []
    n_iter = 0
    for it in range(p.max_iters):
        dist = np.full(v.dims, np.inf)
        if it > 0:
            dist[m] = _point_cost(img, coords, labels[m], cents, wspatial, scale)
        _assign(img, m, cents, step, wspatial, scale, labels, dist)
        orphan = m & (labels < 0)
        if orphan.any():
            _assign_global(img, orphan, cents, wspatial, scale, labels, dist)
        assert not (m & (labels < 0)).any()
        history.append(float(dist[m].sum()))
        new, _ = _update(img, m, labels, cents)
        moved = np.sqrt(((new[:, :3] - cents[:, :3]) ** 2).sum(axis=1))
        cents = new
        n_iter = it + 1
        if moved.mean() < p.tol:
            break

    lab = SupervoxelLabeling(
        labels=labels,
        centroids=cents,
        sizes=np.bincount(labels[m], minlength=k),
        step=float(step),
        seed_keys=keys,
        cost_history=history,
        n_iter=n_iter,
    )
    lab = enforce_connectivity(lab, mask, p.connectivity)
    lab = _finalize(lab, img, m)
    return relabel(lab, cluster_ordering(lab))


def _assign_global(img, where, cents, wspatial, scale, labels, dist):
    pts = np.argwhere(where)
    vals = img[where]
    best_d = np.full(len(pts), np.inf)
    best_l = np.zeros(len(pts), dtype=np.int64)
    for j, (cx, cy, cz, ci) in enumerate(cents):
        ds = (((pts - (cx, cy, cz)) * scale) ** 2).sum(axis=1)
        d = (vals - ci) ** 2 + wspatial * ds
        b = d < best_d
        best_d[b] = d[b]
        best_l[b] = j
    labels[where] = best_l
    dist[where] = best_d


def _finalize(lab: SupervoxelLabeling, img: np.ndarray, m: np.ndarray) -> SupervoxelLabeling:
    cents, sizes = _update(img, m, lab.labels, lab.centroids)
    cents[sizes == 0, 3] = 0.0
    lab.centroids = cents
    lab.sizes = sizes
    return lab


# --------------------------------------------------------------------------
# connectivity and ordering


def _structure(conn: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, 1 if conn == 6 else 3)


def enforce_connectivity(l: SupervoxelLabeling, mask: BrainMask, conn: int = 6) -> SupervoxelLabeling:
    """Keep the largest component of every label; merge smaller fragments.

    A fragment goes whole to the label owning the most distinct adjacent
    foreign voxels (lowest label on ties). A fragment with no labelled
    neighbour is an isolated piece of the mask: it takes the lowest empty
    label when one exists and is otherwise left in place and counted in
    ``orphans``.
    """
    if l.labels.shape != mask.dims:
        raise ShapeMismatch("labeling and mask dims differ")
    if conn not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    st = _structure(conn)
    labels = l.labels.copy()
    k = l.k
    orphans = 0
    stuck = set()
    used = np.bincount(labels[labels >= 0], minlength=k)
    while True:
        changed = False
        # shifted labels: background -1 becomes 0 (ignored), label j sits at objs[j]
        objs = ndimage.find_objects(labels + 1, max_label=k)
        for j in range(k):
            box = objs[j]
            if box is None:
                continue
            pad = tuple(slice(max(0, s.start - 1), min(n, s.stop + 1)) for s, n in zip(box, labels.shape))
            sub = labels[pad]
            comp, ncomp = ndimage.label(sub == j, structure=st)
            if ncomp <= 1:
                continue
            csize = np.bincount(comp.ravel())[1:]
            keep = int(np.argmax(csize)) + 1
            cboxes = ndimage.find_objects(comp)
            for c in range(1, ncomp + 1):
                if c == keep:
                    continue
                # work inside the fragment's own box grown by one voxel
                fb = tuple(slice(max(0, b.start - 1), min(n, b.stop + 1)) for b, n in zip(cboxes[c - 1], sub.shape))
                frag = comp[fb] == c
                fsub = sub[fb]
                ring = ndimage.binary_dilation(frag, structure=st) & ~frag
                nb = fsub[ring]
                nb = nb[(nb >= 0) & (nb != j)]
                nf = int(frag.sum())
                if len(nb):
                    to = int(np.argmax(np.bincount(nb)))
                    fsub[frag] = to
                    used[j] -= nf
                    used[to] += nf
                    changed = True
                    continue
                first = np.argwhere(frag)[0] + [a.start + b.start for a, b in zip(pad, fb)]
                key = (j, tuple(int(c) for c in first))
                if key in stuck:
                    continue
                empty = np.flatnonzero(used == 0)
                if len(empty):
                    to = int(empty[0])
                    fsub[frag] = to
                    used[j] -= nf
                    used[to] += nf
                    changed = True
                else:
                    stuck.add(key)
                    orphans += 1
        if not changed:
            break
    m = mask.data
    return SupervoxelLabeling(
        labels=labels,
        centroids=l.centroids.copy(),
        sizes=np.bincount(labels[m], minlength=k),
        step=l.step,
        seed_keys=l.seed_keys.copy(),
        cost_history=list(l.cost_history),
        n_iter=l.n_iter,
        orphans=orphans,
    )


def cluster_ordering(l: SupervoxelLabeling) -> np.ndarray:
    """Permutation ``perm[old] = new`` sorting clusters by seed-grid key
    (iz, iy, ix, sub)."""
    keys = np.asarray(l.seed_keys)
    order = np.lexsort(keys.T[::-1])
    perm = np.empty(len(order), dtype=np.int64)
    perm[order] = np.arange(len(order))
    return perm


def relabel(l: SupervoxelLabeling, perm: np.ndarray) -> SupervoxelLabeling:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.argsort(perm)
    labels = l.labels.copy()
    inside = labels >= 0
    labels[inside] = perm[labels[inside]]
    return SupervoxelLabeling(
        labels=labels,
        centroids=l.centroids[inv].copy(),
        sizes=l.sizes[inv].copy(),
        step=l.step,
        seed_keys=l.seed_keys[inv].copy(),
        cost_history=list(l.cost_history),
        n_iter=l.n_iter,
        orphans=l.orphans,
    )


# --------------------------------------------------------------------------
# serialization


def _sidecar_path(path: Path) -> Path:
    name = path.name
    for suf in (".nii.gz", ".nii"):
        if name.endswith(suf):
            return path.with_name(name[: -len(suf)] + ".json")
    return path.with_suffix(".json")


def save_labeling(l: SupervoxelLabeling, path, like: Optional[Volume3D] = None,
                  params: Optional[SlicParams] = None) -> Path:
    """Write labels as an int32 NIfTI plus a JSON sidecar; returns the sidecar path."""
    path = Path(path)
    spacing = like.spacing if like is not None else (1.0, 1.0, 1.0)
    affine = like.affine if like is not None else None
    save_nifti(Volume3D(l.labels, spacing=spacing, affine=affine, datatype="int32"), path)
    side = _sidecar_path(path)
    doc = {
        "k": l.k,
        "S": l.step,
        "sizes": [int(s) for s in l.sizes],
        "centroids": [[round(float(c), 10) for c in row] for row in l.centroids],
        "seed_keys": [[int(c) for c in row] for row in l.seed_keys],
        "n_iter": l.n_iter,
        "orphans": l.orphans,
        "cost_history": [round(c, 8) for c in l.cost_history],
        "params": asdict(params) if params is not None else None,
    }
    side.write_text(json.dumps(doc, indent=2) + "\n")
    return side


def load_labeling(path) -> SupervoxelLabeling:
    path = Path(path)
    vol = load_nifti(path)
    doc = json.loads(_sidecar_path(path).read_text())
    return SupervoxelLabeling(
        labels=np.rint(vol.data).astype(np.int64),
        centroids=np.array(doc["centroids"], dtype=np.float64).reshape(-1, 4),
        sizes=np.array(doc["sizes"], dtype=np.int64),
        step=float(doc["S"]),
        seed_keys=np.array(doc["seed_keys"], dtype=np.int64).reshape(-1, 4),
        cost_history=list(doc.get("cost_history", [])),
        n_iter=int(doc.get("n_iter", 0)),
        orphans=int(doc.get("orphans", 0)),
    )


def default_mask(v: Volume3D, mask_fraction: float = 0.05, conn: int = 6) -> BrainMask:
    """Largest connected component of the intensity threshold mask.

    Background noise above the threshold leaves speckle islands detached
    from the brain; no cluster can be connected across them, so they are
    dropped. Ties in component size go to the lowest component index.
    """
    from .volume_io import auto_mask

    m = auto_mask(v, mask_fraction).data
    comp, n = ndimage.label(m, structure=_structure(conn))
    if n <= 1:
        return BrainMask(m)
    sizes = np.bincount(comp.ravel())[1:]
    return BrainMask(comp == int(np.argmax(sizes)) + 1)


def segment_volume(v: Volume3D, params: SlicParams = SlicParams(), mask: Optional[BrainMask] = None,
                   mask_fraction: float = 0.05, normalization: Optional[str] = "zscore"):
    """Mask (``default_mask`` when ``mask`` is None), normalize and cluster.

    Returns ``(labeling, mask)``. ``normalization=None`` clusters raw
    intensities.
    """
    from .volume_io import normalize_intensity

    if mask is None:
        mask = default_mask(v, mask_fraction, params.connectivity)
    work = normalize_intensity(v, mask, normalization) if normalization else v
    return run_slic(work, mask, params), mask
