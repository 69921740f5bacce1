"""Dense float64 kernels and their hand-derived gradients.

Every layer the engine trains goes through the small vocabulary below:
linear maps, LayerNorm, exact-erf GeLU, row softmax, softmax cross-entropy
and multi-head attention. Backward functions take the upstream gradient and
the cache produced by the matching forward.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Mapping, Optional

import numpy as np
from scipy.special import erf

LN_EPS = 1e-6
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class DimensionError(ValueError):
    """Raised when operand shapes do not line up."""


class MacCounter:
    """Accumulates multiply-accumulate counts of the matmuls it sees."""

    def __init__(self) -> None:
        self.total = 0

    def add(self, a: int, b: int, c: int, times: int = 1) -> None:
        self.total += int(a) * int(b) * int(c) * int(times)


def _check_finite(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name}: non-finite values")


def matmul(a: np.ndarray, b: np.ndarray, counter: Optional[MacCounter] = None) -> np.ndarray:
    """2-D matrix product with shape validation and optional MAC counting."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if counter is not None:
        counter.add(a.shape[0], a.shape[1], b.shape[1])
    return a @ b


def softmax_rows(a: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction.

    Entries equal to ``-inf`` get exactly zero weight; a row must hold at
    least one finite entry.
    """
    a = np.asarray(a, dtype=np.float64)
    if np.isnan(a).any():
        raise FloatingPointError("softmax_rows: NaN input")
    shifted = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


# ---------------------------------------------------------------- layer norm

def layer_norm(x, scale, shift, eps: float = LN_EPS):
    return layer_norm_fwd(x, scale, shift, eps)[0]


def layer_norm_fwd(x, scale, shift, eps=LN_EPS):
    x = np.asarray(x, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if scale.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise DimensionError("layer_norm: scale/shift length must equal x.cols")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * scale + shift, (xhat, rstd, scale)


def layer_norm_bwd(dy, cache):
    xhat, rstd, scale = cache
    c = xhat.shape[-1]
    lead = tuple(range(xhat.ndim - 1))
    dscale = np.sum(dy * xhat, axis=lead)
    dshift = np.sum(dy, axis=lead)
    dxhat = dy * scale
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True) / c)
    return dx, dscale, dshift


# ---------------------------------------------------------------- GeLU

def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x, cdf=None):
    """Derivative of exact GeLU: Phi(x) + x * pdf(x)."""
    x = np.asarray(x, dtype=np.float64)
    if cdf is None:
        cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


# ---------------------------------------------------------------- linear

def linear_fwd(x, w, b=None):
    """y = x W^T (+ b) over the last axis of ``x``."""
    y = x @ w.T
    if b is not None:
        y = y + b
    return y


def linear_bwd(dy, x, w, with_bias=False):
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = dy2.T @ x2
    dx = dy @ w
    if with_bias:
        return dx, dw, dy2.sum(axis=0)
    return dx, dw


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------- attention

class HeadLayout:
    """Per-sample split of the first ``phi`` channels into equal heads.

    Heads are packed into fixed ``C // heads`` wide slots (zero-padded when
    ``phi < C``) so every sample can share one batched matmul.
    """

    def __init__(self, phi, channels: int, heads: int):
        phi = np.atleast_1d(np.asarray(phi, dtype=np.int64))
        if np.any(phi % heads) or np.any(phi < heads) or np.any(phi > channels):
            raise ValueError(f"widths {phi.tolist()} invalid for {heads} heads, {channels} channels")
        self.batch, self.channels, self.heads = phi.shape[0], channels, heads
        self.slot = channels // heads
        hd = (phi // heads)[:, None]
        j = np.arange(heads * self.slot)[None, :]
        head, pos = j // self.slot, j % self.slot
        self.to_idx = np.where(pos < hd, head * hd + pos, channels)
        k = np.arange(channels)[None, :]
        self.from_idx = np.where(k < phi[:, None], (k // hd) * self.slot + k % hd, heads * self.slot)
        self.head_dim = hd[:, 0]

    def split(self, x: np.ndarray) -> np.ndarray:
        """(B, T, C) -> (B, H, T, slot); channels past phi become zero."""
        b, t, _ = x.shape
        xp = np.concatenate([x, np.zeros((b, t, 1))], axis=2)
        g = np.take_along_axis(xp, self.to_idx[:, None, :], axis=2)
        return g.reshape(b, t, self.heads, self.slot).transpose(0, 2, 1, 3)

    def merge(self, y: np.ndarray) -> np.ndarray:
        """(B, H, T, slot) -> (B, T, C); inverse of :meth:`split` on live channels."""
        b, h, t, s = y.shape
        flat = y.transpose(0, 2, 1, 3).reshape(b, t, h * s)
        flat = np.concatenate([flat, np.zeros((b, t, 1))], axis=2)
        return np.take_along_axis(flat, self.from_idx[:, None, :], axis=2)

    def channel_mask(self) -> np.ndarray:
        return (self.from_idx < self.heads * self.slot).astype(np.float64)


def attention_fwd(q, k, v, layout: HeadLayout, key_live=None):
    """Batched multi-head attention with per-sample widths.

    q, k, v: (B, T, C); key_live: (B, T) bool or None. Each sample uses
    scale 1/sqrt(phi / heads). Returns the (B, T, C) head-concatenated output
    (zero past phi) and a cache.
    """
    scale = 1.0 / np.sqrt(layout.head_dim)[:, None, None, None]
    qh, kh, vh = layout.split(q), layout.split(k), layout.split(v)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if key_live is not None:
        s = np.where(key_live[:, None, None, :], s, -np.inf)
    a = softmax_rows(s)
    out = layout.merge(a @ vh)
    return out, (qh, kh, vh, layout, scale, a)


def attention_bwd(dout, cache):
    qh, kh, vh, layout, scale, a = cache
    doh = layout.split(dout)
    da = doh @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ doh
    ds = a * (da - np.sum(a * da, axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    return layout.merge(dqh), layout.merge(dkh), layout.merge(dvh)


# ---------------------------------------------------------------- checks & init

def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``f``.

    ``params`` is perturbed in place and restored. Relative error per
    coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-6, 1e-3]")
    worst = 0.0
    for name, p in params.items():
        g = np.asarray(analytic[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, param {p.shape}")
        # index in place: reshape(-1) would copy a non-contiguous array
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            fp = f(params)
            p[i] = old - h
            fm = f(params)
            p[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise FloatingPointError(f"non-finite objective while probing {name}{list(i)}")
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(g[i] - num) / max(1.0, abs(num)))
    return worst


def orthogonal_init(rows: int, cols: int, gain: float = 1.0, rng=None) -> np.ndarray:
    """(Semi-)orthogonal matrix scaled by ``gain``.

    QR of a Gaussian matrix with the sign of R's diagonal folded into Q, so
    the result is unique for a given draw.
    """
    if rows < 1 or cols < 1:
        raise ValueError("orthogonal_init needs rows, cols >= 1")
    rng = np.random.default_rng(rng)
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(gain * q)


class Adam:
    """Adam / AdamW over a dict of float64 arrays, updated in place."""

    def __init__(self, params: Dict[str, np.ndarray], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Mapping[str, np.ndarray], lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            if self.weight_decay:
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= s
    return total


def warmup_cosine(step: int, total: int, base_lr: float, min_lr: float,
                  warmup: int = 0, warmup_lr: float = 0.0) -> float:
    """Linear warm-up from ``warmup_lr`` then cosine decay to ``min_lr``."""
    if warmup > 0 and step < warmup:
        return warmup_lr + (base_lr - warmup_lr) * step / warmup
    span = max(1, total - warmup)
    prog = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * prog))
