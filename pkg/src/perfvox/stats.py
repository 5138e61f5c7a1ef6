"""Group statistics for supervoxel features: one-way ANOVA per cluster with
Bonferroni correction, two-sample t-tests and Brown-Forsythe diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput
from .special import f_sf, t_sf_two_sided


@dataclass(frozen=True)
class OnewayResult:
    """F statistic and p-value; iterates as ``(F, p)``."""

    F: float
    p: float
    df_between: int
    df_within: int
    degenerate: bool = False

    def __iter__(self):
        return iter((self.F, self.p))


@dataclass(frozen=True)
class AnovaResult:
    cluster_id: int
    F: float
    p_raw: float
    p_bonferroni: float
    significant: bool


@dataclass(frozen=True)
class TTestResult:
    id: object
    t: float
    df: float
    p_two_sided: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int


def _groups(groups) -> list:
    gs = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(gs) < 2:
        raise DegenerateInput("ANOVA needs at least two groups")
    if any(len(g) < 2 for g in gs):
        raise DegenerateInput("every group needs at least two values")
    return gs


def anova_oneway(groups: Sequence[Sequence[float]]) -> OnewayResult:
    """One-way ANOVA. Zero within-group variance (with group means differing)
    is reported as ``F = inf, p = 0`` and flagged ``degenerate``."""
    gs = _groups(groups)
    allv = np.concatenate(gs)
    grand = allv.mean()
    if not np.any(allv != allv[0]):
        raise DegenerateInput("all values are identical; ANOVA undefined")
    means = [g.mean() for g in gs]
    ssb = sum(len(g) * (m - grand) ** 2 for g, m in zip(gs, means))
    ssw = sum(float(((g - m) ** 2).sum()) for g, m in zip(gs, means))
    df1 = len(gs) - 1
    df2 = len(allv) - len(gs)
    if ssw == 0:
        return OnewayResult(math.inf, 0.0, df1, df2, degenerate=True)
    F = (ssb / df1) / (ssw / df2)
    return OnewayResult(F, f_sf(F, df1, df2), df1, df2)


def anova_columns(x: np.ndarray, groups: np.ndarray) -> tuple:
    """Vectorized one-way ANOVA over the columns of ``x`` (n x p) with
    integer group codes per row. Returns ``(F, p, degenerate)`` arrays;
    columns with zero total variance get ``F = nan, p = 1``."""
    x = np.asarray(x, dtype=np.float64)
    groups = np.asarray(groups)
    codes = np.unique(groups)
    n, g = len(groups), len(codes)
    grand = x.mean(axis=0)
    ssb = np.zeros(x.shape[1])
    ssw = np.zeros(x.shape[1])
    for c in codes:
        xs = x[groups == c]
        m = xs.mean(axis=0)
        ssb += len(xs) * (m - grand) ** 2
        ssw += ((xs - m) ** 2).sum(axis=0)
    df1, df2 = g - 1, n - g
    flat = np.all(x == x[0], axis=0)
    F = np.full(x.shape[1], np.nan)
    p = np.ones(x.shape[1])
    with np.errstate(divide="ignore", invalid="ignore"):
        Fv = (ssb / df1) / (ssw / df2)
    for j in range(x.shape[1]):
        if flat[j]:
            continue
        if ssw[j] == 0:
            F[j], p[j] = math.inf, 0.0
        else:
            F[j] = Fv[j]
            p[j] = f_sf(Fv[j], df1, df2)
    return F, p, flat


def bonferroni(p_values: Sequence[float], alpha: float = 0.05, F: Optional[Sequence[float]] = None,
               cluster_ids: Optional[Sequence[int]] = None) -> list:
    """Bonferroni-adjust ``p_values``; significant iff ``min(1, p n) < alpha``."""
    p = [float(v) for v in p_values]
    n = len(p)
    ids = list(cluster_ids) if cluster_ids is not None else list(range(n))
    Fs = list(F) if F is not None else [math.nan] * n
    out = []
    for cid, f, pv in zip(ids, Fs, p):
        adj = min(1.0, pv * n)
        out.append(AnovaResult(int(cid), float(f), pv, adj, adj < alpha))
    return out


def ttest_two_sample(a: Sequence[float], b: Sequence[float], variant: str = "pooled",
                     id: object = None) -> TTestResult:
    """Independent two-sample t-test (pooled variance or Welch)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise DegenerateInput("each group needs at least two values")
    na, nb = len(a), len(b)
    ma, mb = a.mean(), b.mean()
    va = ((a - ma) ** 2).sum() / (na - 1)
    vb = ((b - mb) ** 2).sum() / (nb - 1)
    if va == 0 and vb == 0 and ma == mb:
        raise DegenerateInput("both groups constant and equal; t undefined")
    if variant == "pooled":
        df = na + nb - 2
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    elif variant == "welch":
        qa, qb = va / na, vb / nb
        se = math.sqrt(qa + qb)
        den = (qa * qa / (na - 1) if qa else 0.0) + (qb * qb / (nb - 1) if qb else 0.0)
        df = (qa + qb) ** 2 / den if den > 0 else float(na + nb - 2)
    else:
        raise ValueError(f"unknown t-test variant {variant!r}")
    diff = ma - mb
    t = math.copysign(math.inf, diff) if se == 0 else diff / se
    return TTestResult(id, t, float(df), t_sf_two_sided(t, df), float(ma), float(mb), na, nb)


def levene_brown_forsythe(groups: Sequence[Sequence[float]]) -> OnewayResult:
    """Brown-Forsythe test: ANOVA on absolute deviations from group medians."""
    gs = _groups(groups)
    dev = [np.abs(g - np.median(g)) for g in gs]
    allv = np.concatenate(dev)
    if not np.any(allv != allv[0]):
        # every deviation equal: spreads are identical across groups
        return OnewayResult(0.0, 1.0, len(gs) - 1, len(allv) - len(gs))
    return anova_oneway(dev)


def skewness(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    m2 = np.mean(d**2)
    return float(np.mean(d**3) / m2**1.5) if m2 > 0 else 0.0


def excess_kurtosis(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    d = x - x.mean()
    m2 = np.mean(d**2)
    return float(np.mean(d**4) / m2**2 - 3.0) if m2 > 0 else 0.0


# --------------------------------------------------------------------------
# per-cluster sex comparison


@dataclass
class ClusterStats:
    results: list  # AnovaResult per cluster, cluster-id order
    mean_F: np.ndarray
    mean_M: np.ndarray
    n_F: int
    n_M: int
    excluded: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    alpha: float = 0.05

    @property
    def n_tests(self) -> int:
        return len(self.results) - len(self.excluded)

    @property
    def significant(self) -> list:
        return [r.cluster_id for r in self.results if r.significant]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cluster_id", "F", "p_raw", "p_bonf", "significant", "mean_F", "mean_M", "n_F", "n_M"])
        for r in self.results:
            w.writerow([r.cluster_id, _num(r.F), _num(r.p_raw), _num(r.p_bonferroni), int(r.significant),
                        _num(self.mean_F[r.cluster_id]), _num(self.mean_M[r.cluster_id]), self.n_F, self.n_M])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_clusters": len(self.results),
            "n_tests": self.n_tests,
            "n_significant": len(self.significant),
            "significant_clusters": self.significant,
            "excluded_zero_variance": self.excluded,
            "degenerate_zero_within_variance": self.degenerate,
            "diagnostics": self.diagnostics,
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def _num(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def cluster_sex_anova(values: np.ndarray, sexes: Sequence[str], alpha: float = 0.05,
                      diagnostics: bool = True) -> ClusterStats:
    """Per-column ANOVA of female vs male values (``values`` is n x K).

    Columns constant across the whole cohort are excluded from the
    Bonferroni family and reported with ``p = 1``.
    """
    x = np.asarray(values, dtype=np.float64)
    sx = np.array([s.upper() for s in sexes])
    fem, mal = sx == "F", sx == "M"
    if fem.sum() < 2 or mal.sum() < 2:
        raise DegenerateInput("each sex needs at least two participants")
    keep = fem | mal
    x, sx = x[keep], sx[keep]
    fem, mal = sx == "F", sx == "M"
    F, p, flat = anova_columns(x, fem.astype(int))
    excluded = [int(j) for j in np.flatnonzero(flat)]
    n_tests = x.shape[1] - len(excluded)
    results = []
    for j in range(x.shape[1]):
        if flat[j]:
            results.append(AnovaResult(j, math.nan, 1.0, 1.0, False))
            continue
        adj = min(1.0, p[j] * n_tests)
        results.append(AnovaResult(j, float(F[j]), float(p[j]), adj, adj < alpha))
    degenerate = [int(j) for j in range(x.shape[1]) if not flat[j] and math.isinf(F[j])]
    diag = []
    if diagnostics:
        for j in range(x.shape[1]):
            if flat[j]:
                continue
            row = {"cluster_id": j}
            for name, sel in (("F", fem), ("M", mal)):
                row[f"skew_{name}"] = round(skewness(x[sel, j]), 6)
                row[f"kurtosis_{name}"] = round(excess_kurtosis(x[sel, j]), 6)
            try:
                row["levene_p"] = round(levene_brown_forsythe([x[fem, j], x[mal, j]]).p, 8)
            except DegenerateInput:
                row["levene_p"] = None
            diag.append(row)
    return ClusterStats(
        results=results,
        mean_F=x[fem].mean(axis=0),
        mean_M=x[mal].mean(axis=0),
        n_F=int(fem.sum()),
        n_M=int(mal.sum()),
        excluded=excluded,
        degenerate=degenerate,
        diagnostics=diag,
        alpha=alpha,
    )


def load_stats_csv(text: str) -> list:
    """Parse a stats report back into ``AnovaResult`` rows."""
    from .errors import ParseError

    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0][:5] != ["cluster_id", "F", "p_raw", "p_bonf", "significant"]:
        raise ParseError("not a stats report")
    out = []
    for r in rows[1:]:
        if r:
            out.append(AnovaResult(int(r[0]), float(r[1]), float(r[2]), float(r[3]), r[4] == "1"))
    return out
