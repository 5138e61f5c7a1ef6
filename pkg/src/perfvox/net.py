"""A small 1D convolutional network over the ordered cluster axis.

Architecture: ``[conv(k, c) -> ReLU] * n -> flatten -> [dense(w) -> ReLU] * m
-> dense(1) -> sigmoid``, with stride 1 and zero padding that preserves the
sequence length. Loss is mean binary cross-entropy plus ``l2 * sum(W**2)``
over weight tensors (biases are not penalized).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np

from .errors import NonFinite, ShapeMismatch, ValidationError


@dataclass(frozen=True)
class NetConfig:
    input_len: int = 100
    conv_layers: tuple = ((5, 8), (5, 16))
    dense_widths: tuple = (32,)
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 16
    l2: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.input_len < 0:
            raise ValidationError("input_len must be >= 0")
        for ks, ch in self.conv_layers:
            if ks < 1 or ks % 2 == 0:
                raise ValidationError(f"conv kernel size must be odd, got {ks}")
            if ch < 1:
                raise ValidationError("conv channels must be >= 1")
        if any(w < 1 for w in self.dense_widths):
            raise ValidationError("dense widths must be >= 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.l2 < 0 or not self.learning_rate > 0:
            raise ValidationError("l2 must be >= 0 and learning_rate > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_layers"] = [list(c) for c in self.conv_layers]
        d["dense_widths"] = list(self.dense_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["conv_layers"] = tuple(tuple(c) for c in d.get("conv_layers", ()))
        d["dense_widths"] = tuple(d.get("dense_widths", ()))
        return cls(**d)


# default architecture grid exercised by the gradient checks
ARCH_GRID = (
    NetConfig(),
    NetConfig(conv_layers=((3, 4),), dense_widths=(8,)),
    NetConfig(conv_layers=((5, 8), (3, 8), (3, 4)), dense_widths=(16, 8)),
    NetConfig(conv_layers=((7, 2),), dense_widths=()),
    NetConfig(conv_layers=(), dense_widths=(16,)),
    NetConfig(conv_layers=(), dense_widths=()),
)


@lru_cache(maxsize=64)
def param_shapes(cfg: NetConfig) -> tuple:
    """``(name, shape, is_weight)`` in flat-vector order."""
    shapes = []
    cin = 1
    for i, (ks, ch) in enumerate(cfg.conv_layers):
        shapes.append((f"conv{i}.W", (ks, cin, ch), True))
        shapes.append((f"conv{i}.b", (ch,), False))
        cin = ch
    width = cfg.input_len * cin
    for i, w in enumerate(cfg.dense_widths):
        shapes.append((f"dense{i}.W", (width, w), True))
        shapes.append((f"dense{i}.b", (w,), False))
        width = w
    shapes.append(("out.W", (width, 1), True))
    shapes.append(("out.b", (1,), False))
    return tuple(shapes)


def n_params(cfg: NetConfig) -> int:
    return sum(int(np.prod(s)) for _, s, _ in param_shapes(cfg))


def unflatten(cfg: NetConfig, theta: np.ndarray) -> list:
    out, pos = [], 0
    for _, shape, _ in param_shapes(cfg):
        n = int(np.prod(shape))
        out.append(theta[pos:pos + n].reshape(shape))
        pos += n
    if pos != len(theta):
        raise ShapeMismatch(f"parameter vector has {len(theta)} entries, architecture needs {pos}")
    return out


@lru_cache(maxsize=64)
def _weight_mask(cfg: NetConfig) -> np.ndarray:
    m = np.concatenate([np.full(int(np.prod(s)), w, dtype=bool) for _, s, w in param_shapes(cfg)])
    m.flags.writeable = False
    return m


def weight_mask(cfg: NetConfig) -> np.ndarray:
    return _weight_mask(cfg)


@lru_cache(maxsize=64)
def _weight_scale(cfg: NetConfig) -> np.ndarray:
    m = _weight_mask(cfg).astype(np.float64)
    m.flags.writeable = False
    return m


def l2_penalty(cfg: NetConfig, theta: np.ndarray) -> float:
    w = theta * _weight_scale(cfg)
    return cfg.l2 * float(np.dot(w, w))


def init_params(cfg: NetConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """He-normal weights, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    parts = []
    for _, shape, is_w in param_shapes(cfg):
        if is_w:
            fan_in = int(np.prod(shape[:-1])) or 1
            parts.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).ravel())
        else:
            parts.append(np.zeros(int(np.prod(shape))))
    return np.concatenate(parts)


def _im2col(h: np.ndarray, ks: int) -> np.ndarray:
    b, length, c = h.shape
    r = ks // 2
    pad = np.zeros((b, length + 2 * r, c))
    pad[:, r:r + length] = h
    cols = np.stack([pad[:, j:j + length] for j in range(ks)], axis=2)
    return cols.reshape(b, length, ks * c)


def forward_batch(cfg: NetConfig, theta: np.ndarray, x: np.ndarray, cache: bool = False):
    """Logits for a batch ``x`` of shape (B, input_len)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_len:
        raise ShapeMismatch(f"expected inputs of length {cfg.input_len}, got shape {x.shape}")
    ps = unflatten(cfg, theta)
    tape = []
    h = x[:, :, None]
    i = 0
    for ks, ch in cfg.conv_layers:
        W, b = ps[i], ps[i + 1]
        cols = _im2col(h, ks)
        pre = cols @ W.reshape(-1, ch) + b
        tape.append(("conv", cols, pre, h.shape))
        h = np.maximum(pre, 0.0)
        i += 2
    h = h.reshape(len(x), -1)
    for _ in cfg.dense_widths:
        W, b = ps[i], ps[i + 1]
        pre = h @ W + b
        tape.append(("dense", h, pre, None))
        h = np.maximum(pre, 0.0)
        i += 2
    W, b = ps[i], ps[i + 1]
    z = (h @ W + b)[:, 0]
    tape.append(("out", h, None, None))
    return (z, tape) if cache else z


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_and_grad(cfg: NetConfig, theta: np.ndarray, x: np.ndarray, y: np.ndarray, need_grad: bool = True):
    """Mean BCE + L2 penalty and its gradient with respect to ``theta``."""
    y = np.asarray(y, dtype=np.float64)
    z, tape = forward_batch(cfg, theta, x, cache=True)
    n = len(y)
    bce = np.mean(np.logaddexp(0.0, z) - y * z)
    loss = bce + l2_penalty(cfg, theta)
    if not need_grad:
        return loss, None

    ps = unflatten(cfg, theta)
    grads = [None] * len(ps)
    dz = ((sigmoid(z) - y) / n)[:, None]
    i = len(ps) - 2
    _, h, _, _ = tape[-1]
    grads[i] = h.T @ dz
    grads[i + 1] = dz.sum(axis=0)
    dh = dz @ ps[i].T
    for kind, inp, pre, shape in reversed(tape[:-1]):
        i -= 2
        if kind == "dense":
            dpre = dh * (pre > 0)
            grads[i] = inp.T @ dpre
            grads[i + 1] = dpre.sum(axis=0)
            dh = dpre @ ps[i].T
        else:
            if dh.ndim == 2:
                dh = dh.reshape(pre.shape)
            W = ps[i]
            ks, cin, ch = W.shape
            dpre = dh * (pre > 0)
            grads[i] = (inp.reshape(-1, ks * cin).T @ dpre.reshape(-1, ch)).reshape(W.shape)
            grads[i + 1] = dpre.sum(axis=(0, 1))
            dcols = (dpre @ W.reshape(-1, ch).T).reshape(shape[0], shape[1], ks, cin)
            r = ks // 2
            length = shape[1]
            dpad = np.zeros((shape[0], length + 2 * r, cin))
            for j in range(ks):
                dpad[:, j:j + length] += dcols[:, :, j]
            dh = dpad[:, r:r + length]
    g = np.concatenate([gr.ravel() for gr in grads])
    g += (2.0 * cfg.l2) * theta * _weight_scale(cfg)
    return loss, g


# closest doubles to 0 and 1, so saturated logits still give a probability in (0, 1)
P_MIN, P_MAX = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def predict_proba(cfg: NetConfig, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.clip(sigmoid(forward_batch(cfg, theta, np.atleast_2d(x))), P_MIN, P_MAX)


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)


def adam_train(cfg: NetConfig, x: np.ndarray, y: np.ndarray, theta: Optional[np.ndarray] = None):
    """Mini-batch Adam (beta1 0.9, beta2 0.999) for ``cfg.epochs`` epochs.

    Returns ``(theta, history)``; the history holds the full-batch training
    loss and accuracy after every epoch.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    theta = init_params(cfg, rng) if theta is None else theta.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    t = 0
    n = len(y)
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            _, g = loss_and_grad(cfg, theta, x[idx], y[idx])
            t += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            theta = theta - cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)
        z = forward_batch(cfg, theta, x)
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + l2_penalty(cfg, theta)
        if not np.isfinite(loss) or not np.all(np.isfinite(theta)):
            bad = int(np.sum(~np.isfinite(theta)))
            raise NonFinite(f"training diverged at epoch {epoch}: loss={loss}, non-finite parameters={bad}, "
                            f"last loss={hist.loss[-1] if hist.loss else None}")
        hist.loss.append(float(loss))
        hist.accuracy.append(float(np.mean((z >= 0) == (y == 1))))
    return theta, hist


# central differences with h = 1e-5 carry ~1e-11 absolute round-off on an O(1)
# loss, so gradients below ~1e-6 are compared on an absolute scale
REL_ERR_FLOOR = 1e-6


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = REL_ERR_FLOOR) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _loss_and_pattern(cfg: NetConfig, theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    z, tape = forward_batch(cfg, theta, x, cache=True)
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + l2_penalty(cfg, theta)
    pattern = np.concatenate([(pre > 0).ravel() for _, _, pre, _ in tape if pre is not None] + [np.zeros(0, bool)])
    return loss, pattern


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    n_kink_skipped: int
    worst_index: int


def gradient_check(cfg: NetConfig, x: np.ndarray, y: np.ndarray, theta: Optional[np.ndarray] = None,
                   n_check: int = 100, h: float = 1e-5, seed: int = 0,
                   grad_fn: Optional[Callable] = None, report: bool = False):
    """Max relative error between the analytic gradient and central finite
    differences over ``n_check`` randomly chosen parameters (all of them
    when there are fewer). ``grad_fn(theta) -> grad`` overrides the
    analytic gradient, e.g. to inject a fault.

    A parameter whose +-h perturbation flips the sign of any ReLU input
    straddles a kink where the loss is not differentiable; it is skipped
    and another parameter is drawn in its place.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    rng = np.random.default_rng(seed)
    if theta is None:
        theta = init_params(cfg, rng)
        # small non-zero biases so ReLU inputs sit away from their kinks
        theta = theta + np.where(weight_mask(cfg), 0.0, rng.normal(0, 0.1, len(theta)))
    g = grad_fn(theta) if grad_fn is not None else loss_and_grad(cfg, theta, x, y)[1]
    _, base = _loss_and_pattern(cfg, theta, x, y)
    worst, worst_i, checked, skipped = 0.0, -1, 0, 0
    for p in rng.permutation(len(theta)):
        if checked >= n_check:
            break
        tp = theta.copy()
        tp[p] += h
        lp, pat_p = _loss_and_pattern(cfg, tp, x, y)
        tp[p] -= 2 * h
        lm, pat_m = _loss_and_pattern(cfg, tp, x, y)
        if not (np.array_equal(pat_p, base) and np.array_equal(pat_m, base)):
            skipped += 1
            continue
        err = float(relative_error(g[p], (lp - lm) / (2 * h)))
        checked += 1
        if err > worst or worst_i < 0:
            worst, worst_i = err, int(p)
    if report:
        return GradCheckReport(worst, checked, skipped, worst_i)
    return worst
