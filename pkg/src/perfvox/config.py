"""Run configuration: a flat ``key = value`` text format.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' anything
    entry   := key ws* '=' ws* value ws* ['#' anything]
    key     := [a-z0-9_.]+          (see KEYS for the accepted set)

Lists are comma separated (``margins = 0.2, 0.5, 1, 5``); booleans are
``true``/``false``; conv layers are ``kernel x channels`` pairs
(``cnn.conv = 5x8, 5x16``); age bins are ``lo-hi`` pairs or a preset name
(``default``, ``coarse``). A key may appear once. Values from the command
line (``--set key=value``, ``--seed``, ``--jobs``, ``--out``) override the
file.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

from .errors import ConfigError, PerfvoxError
from .net import NetConfig
from .slic3d import SlicParams
from .vrs import DEFAULT_BINS, AgeBins

NORMALIZATIONS = ("zscore", "mean1", "none")
FEATURE_SOURCES = ("raw", "normalized")
WEIGHTINGS = ("voxel_weighted", "cluster_mean")
CLASSIFIERS = ("cnn", "logreg")


@dataclass(frozen=True)
class RunConfig:
    slic: SlicParams = SlicParams()
    mask_fraction: float = 0.05
    normalization: str = "zscore"
    feature_source: str = "raw"
    margins: tuple = (0.2, 0.5, 1.0, 5.0)
    age_bins: AgeBins = DEFAULT_BINS
    alpha: float = 0.05
    folds: int = 5
    classifiers: tuple = CLASSIFIERS
    net: NetConfig = field(default_factory=NetConfig)
    logreg_l2: float = 1e-2
    vrs_k: float = 1.0
    weighting: str = "voxel_weighted"
    loocv: bool = False
    seed: int = 0
    jobs: int = 1
    out: str = "perfvox-out"

    def validate(self) -> "RunConfig":
        """Check every stage's preconditions up front; raises ConfigError
        naming the offending key."""
        _guard("slic", self.slic.validate)
        _guard("cnn", self.net.validate)
        _check(0 < self.mask_fraction < 1, "mask.fraction", "must lie in (0, 1)")
        _check(self.normalization in NORMALIZATIONS, "normalization", f"must be one of {NORMALIZATIONS}")
        _check(self.feature_source in FEATURE_SOURCES, "features.source", f"must be one of {FEATURE_SOURCES}")
        _check(len(self.margins) > 0 and all(m > 0 for m in self.margins), "margins", "must be positive")
        _check(all(a < b for a, b in zip(self.margins, self.margins[1:])), "margins", "must be strictly ascending")
        _check(0 < self.alpha < 1, "alpha", "must lie in (0, 1)")
        _check(self.folds >= 2, "cv.folds", "must be >= 2")
        _check(len(self.classifiers) > 0 and all(c in CLASSIFIERS for c in self.classifiers), "classifiers",
               f"must be drawn from {CLASSIFIERS}")
        _check(self.logreg_l2 > 0, "logreg.l2", "must be > 0")
        _check(self.vrs_k > 0, "vrs.k", "must be > 0")
        _check(self.weighting in WEIGHTINGS, "vrs.weighting", f"must be one of {WEIGHTINGS}")
        _check(self.seed >= 0, "seed", "must be >= 0")
        _check(self.jobs >= 1, "jobs", "must be >= 1")
        return self

    def to_dict(self) -> dict:
        return {key: fmt(self) for key, (_, _, fmt) in KEYS.items()}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())


def _check(ok: bool, key: str, msg: str):
    if not ok:
        raise ConfigError(f"{key}: {msg}")


def _guard(prefix: str, fn: Callable):
    try:
        fn()
    except PerfvoxError as e:
        raise ConfigError(f"{prefix}.{e}") from None


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {s!r}")


def _floats(s: str) -> tuple:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _ints(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _conv(s: str) -> tuple:
    out = []
    for p in s.split(","):
        p = p.strip().lower()
        if not p:
            continue
        m = re.fullmatch(r"(\d+)\s*x\s*(\d+)", p)
        if not m:
            raise ValueError(f"conv layer {p!r} is not kernel x channels")
        out.append((int(m.group(1)), int(m.group(2))))
    return tuple(out)


def _names(s: str) -> tuple:
    return tuple(p.strip().lower() for p in s.split(",") if p.strip())


def _g(*path):
    def get(c):
        for a in path:
            c = getattr(c, a)
        return c
    return get


def _slic(attr):
    return lambda c, v: replace(c, slic=replace(c.slic, **{attr: v}))


def _net(attr):
    return lambda c, v: replace(c, net=replace(c.net, **{attr: v}))


def _top(attr):
    return lambda c, v: replace(c, **{attr: v})


def _fmt_list(vals) -> str:
    return ", ".join(f"{v:g}" if isinstance(v, float) else str(v) for v in vals)


def _plain(get):
    return lambda c: _fmt_scalar(get(c))


def _fmt_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, setter, formatter)
KEYS: Mapping[str, tuple] = {
    "slic.k": (int, _slic("k"), _plain(_g("slic", "k"))),
    "slic.compactness": (float, _slic("compactness"), _plain(_g("slic", "compactness"))),
    "slic.sigma": (float, _slic("smoothing_sigma"), _plain(_g("slic", "smoothing_sigma"))),
    "slic.max_iters": (int, _slic("max_iters"), _plain(_g("slic", "max_iters"))),
    "slic.tol": (float, _slic("tol"), _plain(_g("slic", "tol"))),
    "slic.connectivity": (int, _slic("connectivity"), _plain(_g("slic", "connectivity"))),
    "slic.perturb": (_bool, _slic("perturb_seeds"), _plain(_g("slic", "perturb_seeds"))),
    "mask.fraction": (float, _top("mask_fraction"), _plain(_g("mask_fraction"))),
    "normalization": (str.lower, _top("normalization"), _plain(_g("normalization"))),
    "features.source": (str.lower, _top("feature_source"), _plain(_g("feature_source"))),
    "margins": (_floats, _top("margins"), lambda c: _fmt_list(c.margins)),
    "age_bins": (AgeBins.parse, _top("age_bins"), lambda c: c.age_bins.label()),
    "alpha": (float, _top("alpha"), _plain(_g("alpha"))),
    "cv.folds": (int, _top("folds"), _plain(_g("folds"))),
    "classifiers": (_names, _top("classifiers"), lambda c: ", ".join(c.classifiers)),
    "cnn.conv": (_conv, _net("conv_layers"), lambda c: ", ".join(f"{k}x{ch}" for k, ch in c.net.conv_layers)),
    "cnn.dense": (_ints, _net("dense_widths"), lambda c: _fmt_list(c.net.dense_widths)),
    "cnn.learning_rate": (float, _net("learning_rate"), _plain(_g("net", "learning_rate"))),
    "cnn.epochs": (int, _net("epochs"), _plain(_g("net", "epochs"))),
    "cnn.batch_size": (int, _net("batch_size"), _plain(_g("net", "batch_size"))),
    "cnn.l2": (float, _net("l2"), _plain(_g("net", "l2"))),
    "logreg.l2": (float, _top("logreg_l2"), _plain(_g("logreg_l2"))),
    "vrs.k": (float, _top("vrs_k"), _plain(_g("vrs_k"))),
    "vrs.weighting": (str.lower, _top("weighting"), _plain(_g("weighting"))),
    "vrs.loocv": (_bool, _top("loocv"), _plain(_g("loocv"))),
    "seed": (int, _top("seed"), _plain(_g("seed"))),
    "jobs": (int, _top("jobs"), _plain(_g("jobs"))),
    "out": (str, _top("out"), _plain(_g("out"))),
}


def apply(cfg: RunConfig, key: str, value: str, origin: str = "") -> RunConfig:
    where = f"{origin}: " if origin else ""
    if key not in KEYS:
        raise ConfigError(f"{where}unknown config key {key!r}")
    parse, setter, _ = KEYS[key]
    try:
        return setter(cfg, parse(value.strip()))
    except ConfigError:
        raise
    except (ValueError, PerfvoxError) as e:
        raise ConfigError(f"{where}{key}: cannot use {value.strip()!r} ({e})") from None


def parse_config_text(text: str, base: RunConfig = RunConfig(), origin: str = "config") -> RunConfig:
    cfg = base
    seen = set()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not re.fullmatch(r"[a-z0-9_.]+", key):
            raise ConfigError(f"{origin}:{n}: malformed key {key!r}")
        if key in seen:
            raise ConfigError(f"{origin}:{n}: duplicate key {key!r}")
        seen.add(key)
        cfg = apply(cfg, key, value, f"{origin}:{n}")
    return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e.strerror}") from None
    return parse_config_text(text, origin=str(p))
