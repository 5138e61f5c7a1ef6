"""Pipeline stages shared by the CLI subcommands.

Stages run in order (segment, features, stats, classify, normfit, score).
Per-participant work fans out over a process pool when ``jobs > 1``;
results are always collected in manifest order so outputs do not depend
on the worker count.
"""
from __future__ import annotations

import json
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import __version__
from .classify import cross_validate
from .config import RunConfig
from .errors import MissingVolume
from .features import FeatureMatrix, build_feature_matrix, extract_features
from .slic3d import SupervoxelLabeling, save_labeling, segment_volume
from .stats import ClusterStats, cluster_sex_anova
from .svgplot import plot_file_text
from .volume_io import BrainMask, CohortManifest, Volume3D, load_manifest, load_nifti, normalize_intensity
from .vrs import age_trend, cohort_mean_cbf, fit_normative, score_cohort, score_csv, trend_csv

ARTIFACTS = {
    "features": "features.csv",
    "stats": "stats.csv",
    "stats_summary": "stats_summary.json",
    "cv_report": "cv_report.json",
    "cv_table": "cv_report.csv",
    "normative": "normative.json",
    "trend": "age_trend.csv",
    "trend_plot": "age_trend.svg",
    "cluster_plot": "cluster_means.svg",
    "vrs": "vrs.csv",
}


def pmap(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """Ordered map, in-process for ``jobs == 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


def load_cohort(manifest_path) -> tuple:
    manifest = load_manifest(manifest_path)
    missing = [str(manifest.resolve(r)) for r in manifest if not manifest.resolve(r).exists()]
    if missing:
        raise MissingVolume(f"manifest {manifest_path} references missing volume(s): {', '.join(missing[:5])}")
    return manifest, [load_nifti(manifest.resolve(r)) for r in manifest]


def _segment_task(args):
    v, cfg = args
    return segment_volume(v, cfg.slic, mask_fraction=cfg.mask_fraction,
                          normalization=None if cfg.normalization == "none" else cfg.normalization)


def segment_stage(volumes: Sequence[Volume3D], cfg: RunConfig, jobs: int = 1) -> tuple:
    res = pmap(_segment_task, [(v, cfg) for v in volumes], jobs)
    return [r[0] for r in res], [r[1] for r in res]


def feature_volume(v: Volume3D, mask: BrainMask, cfg: RunConfig) -> Volume3D:
    """The intensities features are read from: physical units by default,
    or the segmentation's normalized volume."""
    if cfg.feature_source == "normalized" and cfg.normalization != "none":
        return normalize_intensity(v, mask, cfg.normalization)
    return v


def _feature_task(args):
    pid, v, lab, mask, cfg = args
    return extract_features(pid, feature_volume(v, mask, cfg), lab, mask, cfg.margins)


def feature_meta(cfg: RunConfig) -> dict:
    return {"slic": asdict(cfg.slic), "normalization": cfg.normalization, "feature_source": cfg.feature_source,
            "mask_fraction": cfg.mask_fraction}


def features_stage(manifest: CohortManifest, volumes, labelings, masks, cfg: RunConfig, jobs: int = 1) -> FeatureMatrix:
    tasks = [(row.id, volumes[i], labelings[i], masks[i], cfg) for i, row in enumerate(manifest)]
    vectors = pmap(_feature_task, tasks, jobs)
    return build_feature_matrix(manifest, labelings, volumes, cfg.margins, meta=feature_meta(cfg), vectors=vectors)


def stats_stage(fm: FeatureMatrix, cfg: RunConfig) -> ClusterStats:
    return cluster_sex_anova(fm.cluster_means, fm.sexes, alpha=cfg.alpha)


def classify_stage(fm: FeatureMatrix, cfg: RunConfig, jobs: int = 1, kinds: Optional[Sequence[str]] = None,
                   permute_labels: bool = False) -> dict:
    from dataclasses import replace

    net = replace(cfg.net, seed=cfg.seed, input_len=fm.k)
    return {kind: cross_validate(fm.cluster_means, fm.sexes, kind=kind, cfg=net, l2=cfg.logreg_l2, k=cfg.folds,
                                 seed=cfg.seed, ids=fm.ids, jobs=jobs, permute_labels=permute_labels)
            for kind in (kinds or cfg.classifiers)}


def cv_json(reports: dict) -> str:
    return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n"


def cv_csv(reports: dict) -> str:
    lines = []
    for i, (kind, r) in enumerate(reports.items()):
        rows = r.to_csv().splitlines()
        if i == 0:
            lines.append("classifier," + rows[0])
        lines += [f"{kind},{row}" for row in rows[1:]]
    return "\n".join(lines) + "\n"


def normfit_stage(fm: FeatureMatrix, cfg: RunConfig) -> tuple:
    means = cohort_mean_cbf(fm, cfg.weighting)
    units = "physical" if cfg.feature_source == "raw" or cfg.normalization == "none" else cfg.normalization
    table = fit_normative(means, fm.ages, fm.sexes, cfg.age_bins,
                          meta={"weighting": cfg.weighting, "intensity_units": units})
    return table, means


def score_stage(fm: FeatureMatrix, table, means, cfg: RunConfig) -> list:
    return score_cohort(fm.ids, means, fm.ages, fm.sexes, table, cfg.vrs_k, cfg.age_bins, loocv=cfg.loocv)


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


def run_pipeline(manifest_path, cfg: RunConfig, out_dir=None, jobs: Optional[int] = None,
                 write_labels: bool = True, log: Callable = lambda msg: None) -> dict:
    """Run every stage and write the artifacts under ``out_dir``.

    On failure a ``FAILED`` file naming the stage and error is written next
    to whatever outputs were already produced, and the error propagates.
    """
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.out)
    jobs = cfg.jobs if jobs is None else jobs
    out.mkdir(parents=True, exist_ok=True)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    times: dict = {}
    paths = {k: out / v for k, v in ARTIFACTS.items()}
    stage = "load"

    def timed(name, fn):
        nonlocal stage
        stage = name
        t0 = time.perf_counter()
        res = fn()
        times[name] = round(time.perf_counter() - t0, 3)
        log(f"{name}: {times[name]:.1f}s")
        return res

    try:
        manifest, volumes = timed("load", lambda: load_cohort(manifest_path))
        labelings, masks = timed("segment", lambda: segment_stage(volumes, cfg, jobs))
        if write_labels:
            lab_dir = out / "labels"
            lab_dir.mkdir(exist_ok=True)
            for row, lab, v in zip(manifest, labelings, volumes):
                save_labeling(lab, lab_dir / f"{row.id}.nii.gz", like=v, params=cfg.slic)
        fm = timed("features", lambda: features_stage(manifest, volumes, labelings, masks, cfg, jobs))
        fm.save(paths["features"])
        st = timed("stats", lambda: stats_stage(fm, cfg))
        _write(paths["stats"], st.to_csv())
        _write(paths["stats_summary"], st.summary_json())
        _write(paths["cluster_plot"], plot_file_text(st.to_csv()))
        reports = timed("classify", lambda: classify_stage(fm, cfg, jobs))
        _write(paths["cv_report"], cv_json(reports))
        _write(paths["cv_table"], cv_csv(reports))
        table, means = timed("normfit", lambda: normfit_stage(fm, cfg))
        _write(paths["normative"], table.to_json())
        trend = trend_csv(age_trend(means, fm.ages, fm.sexes, cfg.age_bins))
        _write(paths["trend"], trend)
        _write(paths["trend_plot"], plot_file_text(trend))
        results = timed("score", lambda: score_stage(fm, table, means, cfg))
        _write(paths["vrs"], score_csv(results))
    except Exception as e:
        _write(failed, f"stage: {stage}\nerror: {type(e).__name__}: {e}\n")
        _write_run_manifest(out, manifest_path, cfg, jobs, times, status="failed")
        raise
    _write_run_manifest(out, manifest_path, cfg, jobs, times, status="ok")
    return {
        "paths": paths,
        "feature_matrix": fm,
        "stats": st,
        "cv": reports,
        "table": table,
        "scores": results,
        "times": times,
    }


def _write_run_manifest(out: Path, manifest_path, cfg: RunConfig, jobs: int, times: dict, status: str):
    import scipy

    doc = {
        "status": status,
        "manifest": str(manifest_path),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "jobs": jobs,
        "versions": {"perfvox": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_times_s": times,
        "artifacts": sorted(ARTIFACTS.values()),
    }
    _write(out / "run_manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


def labeling_for(row_id: str, label_dir: Path) -> Path:
    return Path(label_dir) / f"{row_id}.nii.gz"


def masks_from_labelings(labelings: Sequence[SupervoxelLabeling]) -> list:
    return [BrainMask(lab.labels >= 0) for lab in labelings]
