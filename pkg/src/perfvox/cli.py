"""Command-line entry point: ``perfvox <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 validation failure (bad
flags, config or inputs that fail a precondition).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, apply, load_config
from .errors import ConfigError, PerfvoxError, ValidationError


def _add_globals(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="flat key = value config file")
    p.add_argument("--seed", type=int, default=d, help="master seed")
    p.add_argument("--jobs", type=int, default=d, help="worker processes for per-participant stages")
    p.add_argument("--out", default=d, help="output directory")
    p.add_argument("--set", action="append", default=d, metavar="KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="perfvox", description="Supervoxel perfusion analytics for 3D CBF maps")
    _add_globals(ap, suppress=False)
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_globals(p, suppress=True)
        return p

    p = cmd("synth", "write a synthetic cohort (volumes + manifest)")
    p.add_argument("--n-female", type=int, default=97)
    p.add_argument("--n-male", type=int, default=89)
    p.add_argument("--effect-size", type=float, default=0.10)
    p.add_argument("--effect-clusters", type=int, default=15, help="number of clusters carrying the female uplift")
    p.add_argument("--age-slope", type=float, default=0.002)
    p.add_argument("--dims", type=int, default=32, help="cube edge length in voxels")
    p.add_argument("--base", type=float, default=50.0)
    p.add_argument("--decay", type=float, default=1.0, help="radial decay per mm")
    p.add_argument("--noise", type=float, default=None, help="noise sigma (default 0.05 * base)")

    p = cmd("segment", "SLIC-segment one volume")
    p.add_argument("volume")
    p.add_argument("--mask", help="mask NIfTI (non-zero = brain); default auto-threshold")
    p.add_argument("--k", type=int, help="number of supervoxels")
    p.add_argument("--compactness", type=float)
    p.add_argument("--sigma", type=float, help="smoothing sigma in mm")

    p = cmd("features", "build the feature matrix from volumes and labelings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="directory of <id>.nii.gz labelings")

    p = cmd("stats", "per-cluster female vs male ANOVA with Bonferroni correction")
    p.add_argument("--features", required=True)

    p = cmd("classify", "stratified cross-validated sex classification")
    p.add_argument("--features", required=True)
    p.add_argument("--classifier", choices=("cnn", "logreg", "both"), default="both")
    p.add_argument("--permute-labels", action="store_true", help="null control with shuffled labels")

    p = cmd("normfit", "fit the age/sex normative table")
    p.add_argument("--features", required=True)

    p = cmd("score", "vascular risk scores against a normative table")
    p.add_argument("--features", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--k", type=float, help="VRS scale factor")
    p.add_argument("--loocv", action="store_true", help="score each participant against a table refit without them")

    p = cmd("pipeline", "segment, features, stats, classify, normfit and score in one run")
    p.add_argument("--manifest", required=True)

    p = cmd("plot", "SVG line chart from an age-trend CSV or a stats report")
    p.add_argument("input")
    p.add_argument("--output", help="SVG path (default <out>/<input stem>.svg)")
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = apply(cfg, key.strip(), value, "--set")
    for flag in ("seed", "jobs", "out"):
        v = getattr(args, flag, None)
        if v is not None:
            cfg = apply(cfg, flag, str(v), f"--{flag}")
    try:
        return cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"invalid configuration: {e}") from None


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _say(msg: str):
    print(msg, file=sys.stderr)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    from .synth import PhantomSpec, generate_cohort, spread_clusters, canonical_cohort_spec
    from .volume_io import save_nifti, write_manifest

    noise = 0.05 * args.base if args.noise is None else args.noise
    phantom = PhantomSpec(dims=(args.dims,) * 3, base_mean=args.base, radial_decay=args.decay,
                          noise_sigma=noise, seed=cfg.seed)
    spec = canonical_cohort_spec(seed=cfg.seed, effect_size=args.effect_size, age_slope=args.age_slope,
                                 effect_clusters=spread_clusters(cfg.slic.k, args.effect_clusters, offset=3),
                                 counts={"F": args.n_female, "M": args.n_male})
    coh = generate_cohort(spec, phantom, cfg.slic, cfg.mask_fraction,
                          None if cfg.normalization == "none" else cfg.normalization)
    out = _out(cfg)
    for row, v in zip(coh.manifest, coh.volumes):
        save_nifti(v, out / row.volume_path)
    write_manifest(coh.manifest, out / "manifest.csv")
    info = {"effect_clusters": list(spec.effect_clusters), "effect_size": spec.effect_size,
            "age_slope": spec.age_slope, "seed": cfg.seed, "dims": list(phantom.dims), "base_mean": args.base,
            "radial_decay": args.decay, "noise_sigma": noise, "n_female": args.n_female, "n_male": args.n_male}
    (out / "synth.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    _say(f"wrote {len(coh.volumes)} volumes and manifest.csv to {out}")
    return 0


def cmd_segment(args, cfg: RunConfig) -> int:
    from .slic3d import save_labeling, segment_volume
    from .volume_io import BrainMask, load_nifti

    slic = cfg.slic
    for flag, attr in (("k", "k"), ("compactness", "compactness"), ("sigma", "smoothing_sigma")):
        val = getattr(args, flag)
        if val is not None:
            slic = replace(slic, **{attr: val})
            try:
                slic.validate()
            except ValidationError as e:
                raise ValidationError(f"--{flag}: {e}") from None
    v = load_nifti(args.volume)
    mask = None
    if args.mask:
        m = load_nifti(args.mask)
        mask = BrainMask(m.data != 0)
    lab, _ = segment_volume(v, slic, mask=mask, mask_fraction=cfg.mask_fraction,
                            normalization=None if cfg.normalization == "none" else cfg.normalization)
    name = Path(args.volume).name
    for suf in (".nii.gz", ".nii", ".hdr"):
        if name.endswith(suf):
            name = name[: -len(suf)]
            break
    side = save_labeling(lab, _out(cfg) / f"{name}_labels.nii.gz", like=v, params=slic)
    _say(f"{lab.k} supervoxels, {lab.n_iter} iterations; sidecar {side}")
    return 0


def _load_fm(path):
    from .features import load_feature_matrix

    return load_feature_matrix(path)


def cmd_features(args, cfg: RunConfig) -> int:
    from .pipeline import feature_meta, features_stage, labeling_for, load_cohort, masks_from_labelings
    from .slic3d import load_labeling

    manifest, volumes = load_cohort(args.manifest)
    labelings = []
    for row in manifest:
        p = labeling_for(row.id, Path(args.labels))
        if not p.exists():
            from .errors import MissingVolume

            raise MissingVolume(f"no labeling for {row.id}: {p}")
        labelings.append(load_labeling(p))
    fm = features_stage(manifest, volumes, labelings, masks_from_labelings(labelings), cfg, cfg.jobs)
    fm.meta.update(feature_meta(cfg))
    fm.save(_out(cfg) / "features.csv")
    _say(f"feature matrix {fm.n} x {fm.k} written to {cfg.out}")
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    from .pipeline import stats_stage

    st = stats_stage(_load_fm(args.features), cfg)
    out = _out(cfg)
    (out / "stats.csv").write_text(st.to_csv())
    (out / "stats_summary.json").write_text(st.summary_json())
    _say(f"{len(st.significant)} of {st.n_tests} clusters significant after Bonferroni")
    return 0


def cmd_classify(args, cfg: RunConfig) -> int:
    from .pipeline import classify_stage, cv_csv, cv_json

    kinds = ("cnn", "logreg") if args.classifier == "both" else (args.classifier,)
    reports = classify_stage(_load_fm(args.features), cfg, cfg.jobs, kinds, permute_labels=args.permute_labels)
    out = _out(cfg)
    (out / "cv_report.json").write_text(cv_json(reports))
    (out / "cv_report.csv").write_text(cv_csv(reports))
    for k, r in reports.items():
        _say(f"{k}: accuracy {r.accuracy:.3f}")
    return 0


def cmd_normfit(args, cfg: RunConfig) -> int:
    from .pipeline import normfit_stage
    from .vrs import age_trend, trend_csv

    fm = _load_fm(args.features)
    table, means = normfit_stage(fm, cfg)
    out = _out(cfg)
    (out / "normative.json").write_text(table.to_json())
    (out / "age_trend.csv").write_text(trend_csv(age_trend(means, fm.ages, fm.sexes, cfg.age_bins)))
    return 0


def cmd_score(args, cfg: RunConfig) -> int:
    from .errors import IoError
    from .vrs import NormativeTable, cohort_mean_cbf, score_cohort, score_csv

    fm = _load_fm(args.features)
    try:
        table = NormativeTable.from_json(Path(args.table).read_text())
    except OSError as e:
        raise IoError(f"cannot read normative table {args.table}: {e.strerror}") from None
    k = cfg.vrs_k if args.k is None else args.k
    loocv = args.loocv or cfg.loocv
    weighting = table.meta.get("weighting", cfg.weighting)
    res = score_cohort(fm.ids, cohort_mean_cbf(fm, weighting), fm.ages, fm.sexes, table, k, table.bins, loocv=loocv)
    (_out(cfg) / "vrs.csv").write_text(score_csv(res))
    n_risk = sum(r.status == "AtRisk" for r in res)
    _say(f"{n_risk} of {len(res)} participants AtRisk")
    return 0


def cmd_pipeline(args, cfg: RunConfig) -> int:
    from .pipeline import run_pipeline

    res = run_pipeline(args.manifest, cfg, log=_say)
    cv = ", ".join(f"{k} {r.accuracy:.3f}" for k, r in res["cv"].items())
    _say(f"done: {len(res['stats'].significant)} significant clusters; CV accuracy {cv}")
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    from .errors import IoError
    from .svgplot import plot_file_text

    src = Path(args.input)
    try:
        text = src.read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read {src}: {e.strerror}") from None
    svg = plot_file_text(text)
    dest = Path(args.output) if args.output else _out(cfg) / (src.stem + ".svg")
    dest.parent.mkdir(parents=True, exist_ok=True)
    dest.write_text(svg, encoding="utf-8")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "segment": cmd_segment,
    "features": cmd_features,
    "stats": cmd_stats,
    "classify": cmd_classify,
    "normfit": cmd_normfit,
    "score": cmd_score,
    "pipeline": cmd_pipeline,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except ValidationError as e:
        _say(f"perfvox {args.command}: error: {e}")
        return 2
    except (PerfvoxError, OSError, ArithmeticError) as e:
        _say(f"perfvox {args.command}: {type(e).__name__}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
