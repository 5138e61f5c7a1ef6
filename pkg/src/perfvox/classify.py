"""Sex classification from supervoxel features: stratified folds, the conv
net and logistic-regression trainers, metrics and cross-validation reports.

Labels are encoded 1 = female, 0 = male; a probability >= 0.5 predicts F.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateInput, LengthMismatch, ParseError, ShapeMismatch
from .net import P_MAX, P_MIN, NetConfig, adam_train, n_params, predict_proba, sigmoid
from .rng import SplitMix64, child_seed

METRIC_KEYS = ("accuracy", "precision_F", "recall_F", "f1_F", "precision_M", "recall_M", "f1_M")


def encode_labels(labels) -> np.ndarray:
    """Map 'F'/'M' (or 1/0) to a float array with F = 1."""
    out = []
    for v in labels:
        if isinstance(v, str):
            s = v.strip().upper()
            if s not in ("F", "M"):
                raise ValueError(f"unknown sex label {v!r}")
            out.append(1.0 if s == "F" else 0.0)
        else:
            if v not in (0, 1):
                raise ValueError(f"numeric labels must be 0 or 1, got {v!r}")
            out.append(float(v))
    return np.array(out, dtype=np.float64)


# --------------------------------------------------------------------------
# folds


def stratified_kfold(labels, k: int = 5, seed: int = 0) -> list:
    """Test-index arrays for ``k`` stratified folds.

    Each class is shuffled with its own seeded stream and dealt round-robin;
    the fold pointer carries over from one class to the next so fold sizes
    stay within one of each other.
    """
    y = encode_labels(labels)
    if k < 2:
        raise DegenerateInput("need at least two folds")
    folds = [[] for _ in range(k)]
    ptr = 0
    for ci, c in enumerate((1.0, 0.0)):
        idx = np.flatnonzero(y == c)
        if len(idx) < k:
            name = "F" if c == 1.0 else "M"
            raise DegenerateInput(f"class {name} has {len(idx)} examples, fewer than k={k} folds")
        order = idx[SplitMix64(child_seed(seed, ci)).permutation(len(idx))]
        for i in order:
            folds[ptr].append(int(i))
            ptr = (ptr + 1) % k
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def fold_assignment(folds: Sequence[np.ndarray], n: int) -> np.ndarray:
    out = np.full(n, -1, dtype=np.int64)
    for f, idx in enumerate(folds):
        out[idx] = f
    return out


# --------------------------------------------------------------------------
# models


@dataclass
class TrainedModel:
    kind: str  # "cnn" or "logreg"
    theta: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    config: Optional[NetConfig] = None
    l2: float = 0.0
    history: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        width = len(self.mean)
        if self.kind == "cnn":
            if self.config is None or self.config.input_len != width:
                raise ShapeMismatch("network input length must match the standardization width")
            expected = n_params(self.config)
        elif self.kind == "logreg":
            expected = width + 1
        else:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.theta) != expected:
            raise ShapeMismatch(f"{self.kind} model needs {expected} parameters, got {len(self.theta)}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std)) and np.all(self.std > 0)):
            raise ValueError("standardization constants must be finite with positive scale")

    @property
    def input_len(self) -> int:
        return len(self.mean)

    def standardize(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_len:
            raise ShapeMismatch(f"expected {self.input_len} features, got {x.shape[1]}")
        return (x - self.mean) / self.std

    def predict_proba(self, x) -> np.ndarray:
        """Probability of F for raw (unstandardized) feature rows."""
        return _forward_std(self, self.standardize(x))


def _forward_std(model: TrainedModel, xs: np.ndarray) -> np.ndarray:
    if model.kind == "cnn":
        return predict_proba(model.config, model.theta, xs)
    return np.clip(sigmoid(xs @ model.theta[:-1] + model.theta[-1]), P_MIN, P_MAX)


def forward(model: TrainedModel, x) -> float:
    """Probability for one already-standardized feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) != model.input_len:
        raise ShapeMismatch(f"expected a length-{model.input_len} vector, got shape {x.shape}")
    return float(_forward_std(model, x[None, :])[0])


def standardization(x: np.ndarray) -> tuple:
    """Per-column mean and population std; constant columns get scale 1."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _split(x, y, train_idx, min_per_class):
    x = np.asarray(x, dtype=np.float64)
    y = encode_labels(y)
    if x.ndim != 2 or len(x) != len(y):
        raise LengthMismatch(f"features {x.shape} and labels ({len(y)}) disagree")
    if train_idx is not None:
        x, y = x[train_idx], y[train_idx]
    n_f, n_m = int((y == 1).sum()), int((y == 0).sum())
    if min(n_f, n_m) < min_per_class:
        raise DegenerateInput(f"training split has {n_f} F and {n_m} M; need >= {min_per_class} per class")
    return x, y


def train(cfg: NetConfig, x, labels, train_idx=None) -> TrainedModel:
    """Fit the conv net on the training rows (all rows when ``train_idx`` is
    None). ``cfg.input_len`` follows the feature width."""
    x, y = _split(x, labels, train_idx, 2)
    cfg = replace(cfg, input_len=x.shape[1])
    mean, std = standardization(x)
    theta, hist = adam_train(cfg, (x - mean) / std, y)
    return TrainedModel("cnn", theta, mean, std, config=cfg,
                        history={"loss": hist.loss, "accuracy": hist.accuracy})


def _logreg_grad(theta, xs, y, l2):
    z = xs @ theta[:-1] + theta[-1]
    r = (sigmoid(z) - y) / len(y)
    g = np.empty_like(theta)
    g[:-1] = xs.T @ r + 2.0 * l2 * theta[:-1]
    g[-1] = r.sum()
    return g


def logreg_objective(model: TrainedModel, x, labels) -> float:
    xs = model.standardize(x)
    y = encode_labels(labels)
    z = xs @ model.theta[:-1] + model.theta[-1]
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + model.l2 * np.dot(model.theta[:-1], model.theta[:-1]))


def logreg_gradient(model: TrainedModel, x, labels) -> np.ndarray:
    return _logreg_grad(model.theta, model.standardize(x), encode_labels(labels), model.l2)


def train_logreg(x, labels, l2: float = 1e-2, train_idx=None, tol: float = 1e-6,
                 max_iter: int = 10000) -> TrainedModel:
    """L2-regularized logistic regression (intercept unpenalized) on
    standardized features by full-batch accelerated gradient descent with
    adaptive restart, stopping at gradient norm < ``tol``."""
    x, y = _split(x, labels, train_idx, 1)
    mean, std = standardization(x)
    xs = (x - mean) / std
    a = np.hstack([xs, np.ones((len(xs), 1))])
    lip = 0.25 * np.linalg.norm(a, 2) ** 2 / len(xs) + 2.0 * l2
    theta = np.zeros(xs.shape[1] + 1)
    v = theta.copy()
    t = 1.0
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        gv = _logreg_grad(v, xs, y, l2)
        new = v - gv / lip
        if np.dot(gv, new - theta) > 0:
            t = 1.0  # momentum is pointing uphill, restart
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        v = new + ((t - 1.0) / t_new) * (new - theta)
        theta, t = new, t_new
        gnorm = float(np.linalg.norm(_logreg_grad(theta, xs, y, l2)))
        if gnorm < tol:
            break
    return TrainedModel("logreg", theta, mean, std, l2=l2,
                        history={"iterations": it, "grad_norm": gnorm, "converged": gnorm < tol})


# --------------------------------------------------------------------------
# metrics


@dataclass
class EvalResult:
    accuracy: float
    precision_F: float
    recall_F: float
    f1_F: float
    precision_M: float
    recall_M: float
    f1_M: float
    confusion: list  # rows true F, M; columns predicted F, M
    n: int
    zero_division: list = field(default_factory=list)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_dict(self) -> dict:
        d = self.metrics()
        d.update(confusion=self.confusion, n=self.n, zero_division=self.zero_division)
        return d


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def evaluate(predictions, labels) -> EvalResult:
    """Per-class precision/recall/F1 and accuracy; ``predictions`` are
    probabilities of F (thresholded at 0.5) or hard 0/1 labels."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    y = encode_labels(labels)
    if len(p) != len(y):
        raise LengthMismatch(f"{len(p)} predictions for {len(y)} labels")
    pred_f = p >= 0.5
    true_f = y == 1
    tp = int(np.sum(pred_f & true_f))
    fn = int(np.sum(~pred_f & true_f))
    fp = int(np.sum(pred_f & ~true_f))
    tn = int(np.sum(~pred_f & ~true_f))
    flags: list = []
    out = {}
    for name, t_pos, f_pos, f_neg in (("F", tp, fp, fn), ("M", tn, fn, fp)):
        prec = _ratio(t_pos, t_pos + f_pos, f"precision_{name}", flags)
        rec = _ratio(t_pos, t_pos + f_neg, f"recall_{name}", flags)
        f1 = _ratio(2 * prec * rec, prec + rec, f"f1_{name}", flags)
        out.update({f"precision_{name}": prec, f"recall_{name}": rec, f"f1_{name}": f1})
    n = len(y)
    acc = (tp + tn) / n if n else _ratio(0, 0, "accuracy", flags)
    return EvalResult(accuracy=acc, confusion=[[tp, fn], [fp, tn]], n=n, zero_division=flags, **out)


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class CvReport:
    kind: str
    k: int
    seed: int
    folds: list  # EvalResult per fold
    aggregate: EvalResult  # pooled out-of-fold predictions
    fold_of: list  # fold id per participant
    probabilities: list
    ids: list = field(default_factory=list)
    label_permuted: bool = False
    histories: list = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return self.aggregate.accuracy

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "k": self.k,
            "seed": self.seed,
            "label_permuted": self.label_permuted,
            "aggregate": self.aggregate.to_dict(),
            "mean_fold_accuracy": float(np.mean([f.accuracy for f in self.folds])),
            "folds": [f.to_dict() for f in self.folds],
            "fold_assignment": [{"id": i, "fold": f, "p_F": p}
                                for i, f, p in zip(self.ids, self.fold_of, self.probabilities)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fold", *METRIC_KEYS, "tp_F", "fn_F", "fp_F", "tn_F", "n"])
        rows = [(str(i), f) for i, f in enumerate(self.folds)] + [("all", self.aggregate)]
        for name, e in rows:
            (tp, fn), (fp, tn) = e.confusion
            w.writerow([name, *(repr(float(getattr(e, k))) for k in METRIC_KEYS), tp, fn, fp, tn, e.n])
        return buf.getvalue()


def _fit_fold(args):
    kind, cfg, l2, x, y, train_idx, fold_seed = args
    if kind == "cnn":
        return train(replace(cfg, seed=fold_seed), x, y, train_idx)
    return train_logreg(x, y, l2=l2, train_idx=train_idx)


def cross_validate(x, labels, kind: str = "cnn", cfg: NetConfig = NetConfig(), l2: float = 1e-2,
                   k: int = 5, seed: int = 0, ids: Optional[Sequence[str]] = None, jobs: int = 1,
                   permute_labels: bool = False) -> CvReport:
    """Stratified k-fold CV. With ``permute_labels`` the labels are shuffled
    first (a null control that should score near chance)."""
    x = np.asarray(x, dtype=np.float64)
    y = encode_labels(labels)
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} feature rows for {len(y)} labels")
    if kind not in ("cnn", "logreg"):
        raise ValueError(f"unknown classifier {kind!r}")
    if permute_labels:
        y = y[SplitMix64(child_seed(seed, 0x5045524D)).permutation(len(y))]
    folds = stratified_kfold(y, k, seed)
    n = len(y)
    tasks = []
    for f, test in enumerate(folds):
        train_idx = np.setdiff1d(np.arange(n), test)
        tasks.append((kind, cfg, l2, x, y, train_idx, child_seed(cfg.seed, f)))
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
            models = list(ex.map(_fit_fold, tasks))
    else:
        models = [_fit_fold(t) for t in tasks]
    probs = np.zeros(n)
    fold_evals = []
    for test, model in zip(folds, models):
        probs[test] = model.predict_proba(x[test])
        fold_evals.append(evaluate(probs[test], y[test]))
    return CvReport(
        kind=kind, k=k, seed=seed, folds=fold_evals, aggregate=evaluate(probs, y),
        fold_of=fold_assignment(folds, n).tolist(), probabilities=[float(p) for p in probs],
        ids=list(ids) if ids is not None else [str(i) for i in range(n)],
        label_permuted=permute_labels, histories=[m.history for m in models],
    )


# --------------------------------------------------------------------------
# persistence

_BLOB_HEADER = struct.Struct("<Q")


def save_model(model: TrainedModel, path) -> Path:
    """Write ``<path>`` (JSON) and ``<path stem>.bin`` (uint64 count followed
    by little-endian float64 parameters)."""
    path = Path(path)
    blob = path.with_suffix(".bin")
    blob.write_bytes(_BLOB_HEADER.pack(len(model.theta)) + model.theta.astype("<f8").tobytes())
    meta = {
        "kind": model.kind,
        "config": model.config.to_dict() if model.config is not None else None,
        "l2": model.l2,
        "mean": [float(v) for v in model.mean],
        "std": [float(v) for v in model.std],
        "n_params": int(len(model.theta)),
        "parameters": blob.name,
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_model(path) -> TrainedModel:
    path = Path(path)
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
        raw = (path.parent / meta["parameters"]).read_bytes()
    except (json.JSONDecodeError, KeyError) as e:
        raise ParseError(f"{path}: not a model file ({e})") from None
    if len(raw) < _BLOB_HEADER.size:
        raise ParseError(f"{path}: truncated parameter blob")
    (count,) = _BLOB_HEADER.unpack_from(raw)
    if len(raw) != _BLOB_HEADER.size + 8 * count or count != meta["n_params"]:
        raise ParseError(f"{path}: parameter blob length does not match its header")
    theta = np.frombuffer(raw, dtype="<f8", offset=_BLOB_HEADER.size).astype(np.float64)
    cfg = NetConfig.from_dict(meta["config"]) if meta["config"] is not None else None
    return TrainedModel(meta["kind"], theta, np.array(meta["mean"]), np.array(meta["std"]), config=cfg,
                        l2=float(meta["l2"]))
