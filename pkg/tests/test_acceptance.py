"""Acceptance checks. Each test prints one PASS/FAIL line for its criterion
(also collected into the terminal summary) and then asserts it."""
import math
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import scipy.stats as ss

from conftest import ACCEPTANCE, flood_fill_components
from perfvox.classify import cross_validate
from perfvox.config import RunConfig
from perfvox.features import load_feature_matrix, shell_means
from perfvox.net import ARCH_GRID, NetConfig, gradient_check, init_params, loss_and_grad
from perfvox.pipeline import ARTIFACTS, run_pipeline
from perfvox.slic3d import SlicParams, segment_volume
from perfvox.stats import anova_columns, anova_oneway, bonferroni, ttest_two_sample
from perfvox.svgplot import trend_series
from perfvox.synth import (CANONICAL_PHANTOM, PhantomSpec, canonical_cohort_spec, generate_cohort,
                           generate_phantom, phantom_mean_field)
from perfvox.volume_io import Volume3D, save_nifti, write_manifest
from perfvox.vrs import AT_RISK, DEFAULT_BINS, fit_normative, score_cohort

pytestmark = pytest.mark.acceptance


def record(name: str, checks: dict, detail: str = ""):
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else "")
    if failed:
        line += f" [failed: {', '.join(failed)}]"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


# ---------------------------------------------------------------- canonical cohort


@pytest.fixture(scope="module")
def canonical(tmp_path_factory):
    """The canonical cohort on disk plus one timed pipeline run (jobs 1)."""
    root = tmp_path_factory.mktemp("canonical")
    spec = canonical_cohort_spec()
    co = generate_cohort(spec, CANONICAL_PHANTOM)
    for row, v in zip(co.manifest, co.volumes):
        save_nifti(v, root / row.volume_path)
    write_manifest(co.manifest, root / "manifest.csv")
    cfg = RunConfig(seed=0)
    t0 = time.perf_counter()
    res = run_pipeline(root / "manifest.csv", cfg, out_dir=root / "run_a", jobs=1)
    wall = time.perf_counter() - t0
    return {"root": root, "spec": spec, "cohort": co, "cfg": cfg, "res": res, "wall": wall}


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "run_manifest.json"}


# ---------------------------------------------------------------- SLIC invariants


def test_slic_invariants_on_random_phantoms():
    r = np.random.default_rng(2024)
    worst_t, n_bad = 0.0, 0
    checks = {"labeled": True, "sizes": True, "connected": True, "cost": True, "runtime": True}
    for i in range(20):
        n = int(r.integers(32, 65))
        spec = PhantomSpec(dims=(n, n, n), base_mean=float(r.uniform(30, 70)), radial_decay=float(r.uniform(0.5, 2)),
                           noise_sigma=float(r.uniform(0.5, 5)), seed=int(r.integers(0, 2**31)))
        v = generate_phantom(spec)
        t0 = time.perf_counter()
        lab, mask = segment_volume(v, SlicParams())
        dt = time.perf_counter() - t0
        worst_t = max(worst_t, dt)
        m = mask.data
        checks["labeled"] &= bool(np.all(lab.labels[m] >= 0) and np.all(lab.labels[~m] == -1))
        checks["sizes"] &= int(lab.sizes.sum()) == int(m.sum()) and bool(
            np.array_equal(lab.sizes, np.bincount(lab.labels[m], minlength=lab.k)))
        comps = [flood_fill_components(lab.labels, j, 6) for j in np.flatnonzero(lab.sizes)]
        n_bad += sum(c != 1 for c in comps)
        checks["connected"] &= all(c == 1 for c in comps)
        h = np.array(lab.cost_history)
        checks["cost"] &= bool(np.all(np.diff(h) <= 1e-9 * h[0]))
        checks["runtime"] &= dt < 5.0
    record("SLIC invariants (20 phantoms, 32^3 to 64^3)", checks,
           f"worst runtime {worst_t:.2f}s, disconnected clusters {n_bad}")


# ---------------------------------------------------------------- statistics


def test_statistics_oracle_equivalence():
    checks = {}
    hand = anova_oneway([[1, 2], [5, 6]])
    # grand mean 3.5, SSB 16 on 1 df, SSW 1 on 2 df
    checks["hand anova"] = hand.F == 32.0 and (hand.df_between, hand.df_within) == (1, 2)
    tt = ttest_two_sample([1, 2], [5, 6])
    checks["hand t"] = tt.t == -4 / math.sqrt(0.5) and tt.df == 2

    r = np.random.default_rng(77)
    dp_a = dp_t = rel_ft = 0.0
    for _ in range(1000):
        g = int(r.integers(2, 6))
        groups = [r.normal(r.normal(), 1 + r.uniform(), size=int(r.integers(2, 25))) for _ in range(g)]
        dp_a = max(dp_a, abs(anova_oneway(groups).p - ss.f_oneway(*groups).pvalue))
        a, b = groups[0], groups[1]
        t = ttest_two_sample(a, b)
        dp_t = max(dp_t, abs(t.p_two_sided - ss.ttest_ind(a, b).pvalue))
        an = anova_oneway([a, b])
        rel_ft = max(rel_ft, abs(an.F - t.t ** 2) / max(1.0, an.F))
    checks["anova p"] = dp_a < 1e-9
    checks["t p"] = dp_t < 1e-9
    checks["F = t^2"] = rel_ft < 1e-10

    grp = np.array([0] * 97 + [1] * 89)
    fam = 0
    for _ in range(2000):
        _, p, _ = anova_columns(r.normal(size=(186, 100)), grp)
        fam += any(x.significant for x in bonferroni(p, 0.05))
    fwer = fam / 2000
    checks["FWER"] = fwer <= 0.06
    record("statistics oracle equivalence", checks,
           f"max |dp| anova {dp_a:.1e}, t {dp_t:.1e}; max rel F-t^2 {rel_ft:.1e}; FWER {fwer:.4f}")


# ---------------------------------------------------------------- classifiers


def test_classifier_recovery(canonical):
    cv = canonical["res"]["cv"]
    fm = canonical["res"]["feature_matrix"]
    cfg = canonical["cfg"]
    net = replace(cfg.net, seed=cfg.seed, input_len=fm.k)
    perm = {kind: cross_validate(fm.cluster_means, fm.sexes, kind=kind, cfg=net, l2=cfg.logreg_l2, k=cfg.folds,
                                 seed=cfg.seed, permute_labels=True).accuracy for kind in ("cnn", "logreg")}
    checks = {
        "cnn >= 0.90": cv["cnn"].accuracy >= 0.90,
        "logreg >= 0.80": cv["logreg"].accuracy >= 0.80,
        "permuted cnn": abs(perm["cnn"] - 0.5) <= 0.15,
        "permuted logreg": abs(perm["logreg"] - 0.5) <= 0.15,
    }
    record("classifier recovery (n=186, 97 F / 89 M)", checks,
           f"cnn {cv['cnn'].accuracy:.3f}, logreg {cv['logreg'].accuracy:.3f}, "
           f"permuted cnn {perm['cnn']:.3f}, permuted logreg {perm['logreg']:.3f}")


# ---------------------------------------------------------------- gradients


def test_gradient_correctness():
    r = np.random.default_rng(0)
    x, y = r.normal(size=(8, 100)), (r.uniform(size=8) < 0.5).astype(float)
    errs = [gradient_check(cfg, x, y, n_check=120) for cfg in ARCH_GRID]
    cfg = NetConfig()
    theta = init_params(cfg)
    good = loss_and_grad(cfg, theta, x, y)[1]
    scaled = gradient_check(cfg, x, y, theta=theta, grad_fn=lambda t: good * 1.05)
    shifted = gradient_check(cfg, x, y, theta=theta, grad_fn=lambda t: good + 1e-3)
    checks = {"grid < 1e-4": max(errs) < 1e-4, "fault detected": min(scaled, shifted) > 1e-2}
    record("gradient correctness", checks,
           f"max rel error over {len(ARCH_GRID)} architectures {max(errs):.1e}; "
           f"faults give {scaled:.1e} and {shifted:.1e}")


# ---------------------------------------------------------------- cluster recovery


def test_significant_cluster_recovery(canonical):
    sig = set(canonical["res"]["stats"].significant)
    eff = set(canonical["spec"].effect_clusters)
    hits, fp = len(sig & eff), len(sig - eff)
    checks = {"hits >= 80%": hits >= 0.8 * len(eff), "false positives <= 2": fp <= 2}
    record("significant-cluster recovery", checks, f"{hits}/{len(eff)} effect clusters, {fp} false positives")


# ---------------------------------------------------------------- VRS


def balanced_cohort(r, per_cell):
    ages, sexes = [], []
    for lo, hi in DEFAULT_BINS.bins:
        for s in "FM":
            ages += list(r.integers(lo, hi + 1, size=per_cell))
            sexes += [s] * per_cell
    return np.array(ages), sexes


def two_pass_at_risk(means, ages, sexes):
    cells = {}
    for m, a, s in zip(means, ages, sexes):
        cells.setdefault((DEFAULT_BINS.index(a), s), []).append(m)
    bound = {}
    for key, vals in cells.items():
        mu = sum(vals) / len(vals)
        bound[key] = mu - math.sqrt(sum((v - mu) ** 2 for v in vals) / (len(vals) - 1))
    return {i for i, (m, a, s) in enumerate(zip(means, ages, sexes)) if m < bound[(DEFAULT_BINS.index(a), s)]}


def test_vrs_equivalence():
    r = np.random.default_rng(31)
    same = homog = shift = True
    for _ in range(50):
        ages, sexes = balanced_cohort(r, int(r.integers(2, 15)))
        means = r.normal(50, 6, size=len(ages)) - 0.1 * ages
        ids = range(len(ages))
        t = fit_normative(means, ages, sexes)
        res = score_cohort(ids, means, ages, sexes, t)
        same &= {i for i, x in enumerate(res) if x.status == AT_RISK} == two_pass_at_risk(means, ages, sexes)
        c = float(r.uniform(0.1, 10))
        scaled = score_cohort(ids, means, ages, sexes, t, k=c)
        homog &= all(abs(b.vrs - c * a.vrs) <= 1e-12 * max(1.0, abs(c * a.vrs)) for a, b in zip(res, scaled))
        d = float(r.uniform(-20, 20))
        moved = score_cohort(ids, means + d, ages, sexes, fit_normative(means + d, ages, sexes))
        shift &= [a.status for a in res] == [b.status for b in moved] and bool(
            np.allclose([a.deficit for a in res], [b.deficit for b in moved], rtol=0, atol=1e-9))

    per_cell, reps = 200, 50
    hits = np.zeros(12)
    for _ in range(reps):
        ages, sexes = balanced_cohort(r, per_cell)
        means = r.normal(50, 5, size=len(ages))
        res = score_cohort(range(len(ages)), means, ages, sexes, fit_normative(means, ages, sexes))
        flags = np.array([x.status == AT_RISK for x in res])
        hits += flags.reshape(12, per_cell).sum(axis=1)
    frac = hits / (reps * per_cell)
    expected = ss.norm.cdf(-1.0)
    checks = {"oracle": same, "k-homogeneity": homog, "shift": shift,
              "null fraction": bool(np.all(np.abs(frac - expected) <= 0.03))}
    record("VRS equivalence", checks,
           f"null AtRisk fraction per cell {frac.min():.4f} to {frac.max():.4f} (target {expected:.4f} +- 0.03)")


# ---------------------------------------------------------------- shell gradient


def test_shell_gradient():
    spec = replace(CANONICAL_PHANTOM, noise_sigma=0.0)
    v = Volume3D(phantom_mean_field(spec), spacing=spec.spacing)
    lab, mask = segment_volume(v, SlicParams())
    sm = shell_means(v, lab, mask, (0.2, 5.0))
    centre = (np.array(spec.dims) - 1) / 2
    core = [j for j in range(lab.k) if lab.sizes[j] and np.linalg.norm(lab.centroids[j, :3] - centre) < 6]
    ok = [sm[j, 1] <= sm[j, 0] for j in core]
    checks = {"core clusters found": len(core) > 0, "5 mm <= 0.2 mm": all(ok)}
    record("shell gradient", checks, f"{sum(ok)}/{len(core)} core clusters")


# ---------------------------------------------------------------- age and sex trend


def test_age_sex_trend(canonical):
    res = canonical["res"]
    bins, series = trend_series(res["paths"]["trend"].read_text())
    f = next(s for s in series if s.name == "F").ys
    m = next(s for s in series if s.name == "M").ys
    checks = {
        "complete": None not in f and None not in m and len(f) == len(DEFAULT_BINS),
        "F > M every bin": all(a > b for a, b in zip(f, m)),
        "F decreasing": all(a > b for a, b in zip(f, f[1:])),
        "M decreasing": all(a > b for a, b in zip(m, m[1:])),
    }
    record("age/sex trend recovery", checks,
           "F " + " ".join(f"{x:.2f}" for x in f) + "; M " + " ".join(f"{x:.2f}" for x in m))


# ---------------------------------------------------------------- determinism and wall time


def test_determinism(canonical):
    root, cfg = canonical["root"], canonical["cfg"]
    run_pipeline(root / "manifest.csv", cfg, out_dir=root / "run_b", jobs=1)
    run_pipeline(root / "manifest.csv", cfg, out_dir=root / "run_c", jobs=8)
    a, b, c = (tree_bytes(root / d) for d in ("run_a", "run_b", "run_c"))
    fm_a = load_feature_matrix(root / "run_a" / ARTIFACTS["features"])
    checks = {
        "all artifacts": set(ARTIFACTS.values()) <= set(a),
        "rerun identical": a == b,
        "jobs 1 vs 8 identical": a == c,
        "feature matrix complete": fm_a.n == 186,
    }
    diff = sorted(k for k in a if a.get(k) != c.get(k))
    record("determinism", checks, f"{len(a)} files compared" + (f", differing {diff[:5]}" if diff else ""))


def test_end_to_end_wall_time(canonical):
    wall = canonical["wall"]
    times = canonical["res"]["times"]
    record("end-to-end wall time (n=186, 32^3)", {"< 300 s": wall < 300.0},
           f"{wall:.1f}s (" + ", ".join(f"{k} {v:.1f}s" for k, v in times.items()) + ")")


def test_example_cohort_sixty():
    # 30 F / 30 M through the whole pipeline
    spec = canonical_cohort_spec(counts={"F": 30, "M": 30})
    co = generate_cohort(spec, CANONICAL_PHANTOM)
    with tempfile.TemporaryDirectory() as d:
        root = Path(d)
        for row, v in zip(co.manifest, co.volumes):
            save_nifti(v, root / row.volume_path)
        write_manifest(co.manifest, root / "manifest.csv")
        res = run_pipeline(root / "manifest.csv", RunConfig(), out_dir=root / "out")
        present = all((root / "out" / name).exists() for name in ARTIFACTS.values())
    acc = {k: r.accuracy for k, r in res["cv"].items()}
    checks = {"artifacts": present, "cv >= 0.9": all(a >= 0.9 for a in acc.values())}
    record("n=60 cohort end to end", checks, ", ".join(f"{k} {a:.3f}" for k, a in acc.items()))
