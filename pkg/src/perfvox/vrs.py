"""Age/sex normative CBF tables and per-participant vascular risk scores.

A participant is Normal when their mean CBF is at least ``mu - sigma`` of
their (age bin, sex) cell and AtRisk otherwise; the deficit is the
shortfall below that bound and the score is ``k * deficit``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import BinCoverageError, DegenerateInput, InvalidK, ParseError, UnusableCell

SEXES = ("F", "M")
NORMAL, AT_RISK = "Normal", "AtRisk"


@dataclass(frozen=True)
class AgeBins:
    bins: tuple  # ((lo, hi), ...) inclusive integer ranges

    def __post_init__(self):
        b = tuple((int(lo), int(hi)) for lo, hi in self.bins)
        object.__setattr__(self, "bins", b)
        if not b:
            raise BinCoverageError("at least one age bin is required")
        for lo, hi in b:
            if lo > hi:
                raise BinCoverageError(f"age bin {lo}-{hi} is reversed")
        for (_, h0), (l1, _) in zip(b, b[1:]):
            if l1 <= h0:
                raise BinCoverageError(f"age bins overlap or are not ascending at {h0}/{l1}")

    def __len__(self):
        return len(self.bins)

    def __iter__(self):
        return iter(self.bins)

    def index(self, age) -> int:
        a = float(age)
        for i, (lo, hi) in enumerate(self.bins):
            if lo <= a <= hi:
                return i
        raise BinCoverageError(f"age {age} falls outside every bin {self.label()}")

    def label(self, i: Optional[int] = None) -> str:
        if i is None:
            return ",".join(f"{lo}-{hi}" for lo, hi in self.bins)
        lo, hi = self.bins[i]
        return f"{lo}-{hi}"

    @classmethod
    def parse(cls, text: str) -> "AgeBins":
        """``"8-12,13-20"`` or a preset name (``default``, ``coarse``)."""
        t = text.strip()
        if t.lower() in PRESETS:
            return PRESETS[t.lower()]
        out = []
        for part in t.split(","):
            try:
                lo, hi = part.strip().split("-")
                out.append((int(lo), int(hi)))
            except ValueError:
                raise ParseError(f"bad age bin {part!r}; expected lo-hi") from None
        return cls(tuple(out))


DEFAULT_BINS = AgeBins(((8, 12), (13, 20), (21, 30), (31, 50), (51, 70), (71, 92)))
COARSE_BINS = AgeBins(((8, 20), (21, 40), (41, 80), (81, 92)))
PRESETS = {"default": DEFAULT_BINS, "coarse": COARSE_BINS}


def participant_mean_cbf(fv, weighting: str = "voxel_weighted") -> float:
    """Mean CBF of one participant from their feature vector.

    ``voxel_weighted`` weights cluster means by size (the masked-volume
    mean); ``cluster_mean`` averages the non-empty clusters equally.
    """
    means = np.asarray(fv.cluster_means, dtype=np.float64)
    sizes = np.asarray(fv.sizes, dtype=np.float64)
    keep = sizes > 0
    if not keep.any():
        raise DegenerateInput(f"participant {getattr(fv, 'participant_id', '?')} has no non-empty clusters")
    if weighting == "voxel_weighted":
        return float(np.dot(means[keep], sizes[keep]) / sizes[keep].sum())
    if weighting == "cluster_mean":
        return float(means[keep].mean())
    raise ValueError(f"unknown weighting {weighting!r}")


def cohort_mean_cbf(fm, weighting: str = "voxel_weighted") -> np.ndarray:
    return np.array([participant_mean_cbf(fm.row(i), weighting) for i in range(fm.n)])


@dataclass(frozen=True)
class NormativeCell:
    lo: int
    hi: int
    sex: str
    mu: Optional[float]
    sigma: Optional[float]
    n: int
    usable: bool

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "sex": self.sex, "mu": self.mu, "sigma": self.sigma,
                "n": self.n, "usable": self.usable}


def _cell_stats(values: np.ndarray) -> tuple:
    n = len(values)
    mu = float(values.mean()) if n else None
    sigma = float(values.std(ddof=1)) if n >= 2 else None
    return mu, sigma, n


@dataclass
class NormativeTable:
    bins: AgeBins
    cells: dict  # (bin index, sex) -> NormativeCell
    meta: dict = field(default_factory=dict)

    def cell(self, age, sex: str) -> NormativeCell:
        return self.cells[(self.bins.index(age), _sex(sex))]

    def ordered(self) -> list:
        return [self.cells[(b, s)] for b in range(len(self.bins)) for s in SEXES]

    def to_dict(self) -> dict:
        return {"bins": [list(b) for b in self.bins], "cells": [c.to_dict() for c in self.ordered()],
                "meta": self.meta}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "NormativeTable":
        try:
            d = json.loads(text)
            bins = AgeBins(tuple(tuple(b) for b in d["bins"]))
            cells = {}
            for c in d["cells"]:
                cell = NormativeCell(int(c["lo"]), int(c["hi"]), _sex(c["sex"]), c["mu"], c["sigma"], int(c["n"]),
                                     bool(c["usable"]))
                cells[(bins.index(cell.lo), cell.sex)] = cell
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as e:
            raise ParseError(f"not a normative table: {e}") from None
        missing = [(b, s) for b in range(len(bins)) for s in SEXES if (b, s) not in cells]
        if missing:
            raise ParseError(f"normative table lacks cells {missing}")
        return cls(bins, cells, d.get("meta", {}))


def _sex(s: str) -> str:
    u = str(s).strip().upper()
    if u not in SEXES:
        raise ValueError(f"sex must be F or M, got {s!r}")
    return u


def _bin_codes(ages, bins: AgeBins) -> np.ndarray:
    return np.array([bins.index(a) for a in ages], dtype=np.int64)


def fit_normative(means, ages, sexes, bins: AgeBins = DEFAULT_BINS, meta: Optional[dict] = None) -> NormativeTable:
    """Per (age bin, sex) mean and sample std (ddof 1) of participant means.
    Cells with fewer than two participants are marked unusable."""
    means = np.asarray(means, dtype=np.float64)
    sx = np.array([_sex(s) for s in sexes])
    if not (len(means) == len(sx) == len(ages)):
        raise ValueError("means, ages and sexes must have equal length")
    codes = _bin_codes(ages, bins)
    cells = {}
    for b, (lo, hi) in enumerate(bins):
        for s in SEXES:
            mu, sigma, n = _cell_stats(means[(codes == b) & (sx == s)])
            cells[(b, s)] = NormativeCell(lo, hi, s, mu, sigma, n, n >= 2)
    return NormativeTable(bins, cells, dict(meta or {}))


def age_trend(means, ages, sexes, bins: AgeBins = DEFAULT_BINS) -> list:
    """Per-bin, per-sex mean/std/n rows (the normative cells, for plotting)."""
    return fit_normative(means, ages, sexes, bins).ordered()


def trend_csv(cells: Sequence[NormativeCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lo", "hi", "sex", "mean", "std", "n"])
    for c in cells:
        w.writerow([c.lo, c.hi, c.sex, "" if c.mu is None else repr(c.mu),
                    "" if c.sigma is None else repr(c.sigma), c.n])
    return buf.getvalue()


@dataclass(frozen=True)
class VrsResult:
    id: str
    age: float
    sex: str
    cbf: float
    bin: int
    lower_bound: float
    status: str
    deficit: float
    vrs: float
    k: float


def _check_k(k) -> float:
    k = float(k)
    if not (k > 0 and math.isfinite(k)):
        raise InvalidK(f"k must be a finite positive number, got {k}")
    return k


def _result(pid, age, sex, cbf, b, mu, sigma, k) -> VrsResult:
    lower = mu - sigma
    deficit = max(0.0, lower - cbf)
    return VrsResult(pid, age, sex, float(cbf), b, lower, AT_RISK if deficit > 0 else NORMAL, deficit, k * deficit, k)


def score(cbf_ind: float, age, sex: str, table: NormativeTable, k: float = 1.0, id: str = "") -> VrsResult:
    k = _check_k(k)
    sex = _sex(sex)
    b = table.bins.index(age)
    cell = table.cells[(b, sex)]
    if not cell.usable:
        raise UnusableCell(f"cell {table.bins.label(b)}/{sex} has n={cell.n}; at least 2 are needed")
    return _result(id, age, sex, cbf_ind, b, cell.mu, cell.sigma, k)


def score_cohort(ids, means, ages, sexes, table: Optional[NormativeTable] = None, k: float = 1.0,
                 bins: AgeBins = DEFAULT_BINS, loocv: bool = False) -> list:
    """Score every participant. With ``loocv`` each participant is scored
    against their cell recomputed without them (``table`` is then ignored)."""
    k = _check_k(k)
    means = np.asarray(means, dtype=np.float64)
    if not loocv:
        if table is None:
            raise ValueError("a normative table is required unless loocv is set")
        return [score(m, a, s, table, k, id=i) for i, m, a, s in zip(ids, means, ages, sexes)]
    sx = np.array([_sex(s) for s in sexes])
    codes = _bin_codes(ages, bins)
    out = []
    for j, (pid, m, a, s) in enumerate(zip(ids, means, ages, sx)):
        sel = (codes == codes[j]) & (sx == s)
        sel[j] = False
        mu, sigma, n = _cell_stats(means[sel])
        if n < 2:
            raise UnusableCell(f"leave-one-out cell {bins.label(codes[j])}/{s} for {pid} has n={n}")
        out.append(_result(pid, a, s, m, int(codes[j]), mu, sigma, k))
    return out


def score_csv(results: Sequence[VrsResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "age", "sex", "cbf", "lower_bound", "status", "deficit", "vrs"])
    for r in results:
        age = int(r.age) if float(r.age).is_integer() else r.age
        w.writerow([r.id, age, r.sex, repr(r.cbf), repr(r.lower_bound), r.status, repr(r.deficit), repr(r.vrs)])
    return buf.getvalue()
