"""Token reordering and reduction, plus masked batched counterparts.

Conventions used throughout:

* Row 0 of a token matrix is the CLS token. It is never scored, moved,
  pruned or merged. Keep ratios apply to the ``n`` non-CLS rows.
* ``round`` is half-up, and at least one non-CLS token always survives.
* Ties (equal scores, equal cosine similarity) go to the lowest index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import LN_EPS, layer_norm_fwd

STRATEGIES = ("prune", "merge", "prune_then_merge")


def round_half_up(x: float) -> int:
    # the 1e-9 nudge keeps products like 10 * 0.25 from landing on 2.4999...
    return int(math.floor(x + 0.5 + 1e-9))


def kept_count(n: int, t: float) -> int:
    """Non-CLS tokens kept when ``n`` tokens are reduced at ratio ``t``."""
    t = min(max(float(t), 0.0), 1.0)
    return max(1, min(n, round_half_up(n * t)))


@dataclass(frozen=True)
class TokenDecision:
    strategy: str = "prune"
    t: float = 1.0
    t_prune: float = 1.0
    t_merge: float = 1.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown token strategy {self.strategy!r}")
        for name in ("t", "t_prune", "t_merge"):
            object.__setattr__(self, name, min(max(float(getattr(self, name)), 0.0), 1.0))

    def output_count(self, n: int) -> int:
        if self.strategy == "prune_then_merge":
            return kept_count(kept_count(n, self.t_prune), self.t_merge)
        return kept_count(n, self.t)

    @property
    def is_identity(self) -> bool:
        if self.strategy == "prune_then_merge":
            return self.t_prune >= 1.0 and self.t_merge >= 1.0
        return self.t >= 1.0


# ------------------------------------------------------------------ unmasked

def sort_by_importance(x: np.ndarray, scores: np.ndarray):
    """Reorder non-CLS rows of ``x`` by descending score (stable).

    Returns the sorted matrix and ``perm`` with ``x_sorted = x[perm]``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != x.shape[0] - 1:
        raise ValueError("scores length must equal token count - 1")
    order = np.argsort(-scores, kind="stable") + 1
    perm = np.concatenate([[0], order])
    return x[perm], perm


def prune_tokens(x_sorted: np.ndarray, t: float) -> np.ndarray:
    n = x_sorted.shape[0] - 1
    return x_sorted[: 1 + kept_count(n, t)]


def split_tokens(x_sorted: np.ndarray, t: float):
    """Split sorted non-CLS rows into (important, unimportant).

    The CLS row is excluded from both halves.
    """
    n = x_sorted.shape[0] - 1
    m = kept_count(n, t)
    return x_sorted[1: 1 + m], x_sorted[1 + m:]


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity of rows of ``a`` against rows of ``b``; zero-norm rows give 0."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a, dtype=np.float64), where=na > 0)
    bn = np.divide(b, nb, out=np.zeros_like(b, dtype=np.float64), where=nb > 0)
    return an @ bn.T


def merge_assignment(im_feat: np.ndarray, un_feat: np.ndarray) -> np.ndarray:
    """Index of the most cosine-similar important row for each unimportant row."""
    if un_feat.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(cosine_matrix(un_feat, im_feat), axis=1)


def merge_tokens(x_im: np.ndarray, x_un: np.ndarray, mode: str = "sum",
                 im_feat: Optional[np.ndarray] = None,
                 un_feat: Optional[np.ndarray] = None) -> np.ndarray:
    """Fold each unimportant row into its best-matching important row.

    ``mode="sum"`` adds rows; ``mode="mean"`` replaces each destination by the
    mean of itself and everything merged into it. Matching uses the token
    values unless separate features (e.g. keys) are given.
    """
    if x_im.shape[0] == 0:
        raise ValueError("merge_tokens needs at least one important token")
    im_feat = x_im if im_feat is None else im_feat
    un_feat = x_un if un_feat is None else un_feat
    assign = merge_assignment(im_feat, un_feat)
    out = np.array(x_im, dtype=np.float64, copy=True)
    np.add.at(out, assign, x_un)
    if mode == "mean":
        sizes = 1.0 + np.bincount(assign, minlength=x_im.shape[0])
        out /= sizes[:, None]
    elif mode != "sum":
        raise ValueError(f"unknown merge mode {mode!r}")
    return out


def _merge_sorted(x_sorted, t, mode, feat_sorted):
    n = x_sorted.shape[0] - 1
    m = kept_count(n, t)
    f = x_sorted if feat_sorted is None else feat_sorted
    merged = merge_tokens(x_sorted[1: 1 + m], x_sorted[1 + m:], mode,
                          f[1: 1 + m], f[1 + m:])
    return np.vstack([x_sorted[:1], merged])


def prune_then_merge(x_sorted: np.ndarray, t_prune: float, t_merge: float,
                     mode: str = "sum", feat_sorted: Optional[np.ndarray] = None) -> np.ndarray:
    kept = prune_tokens(x_sorted, t_prune)
    f = None if feat_sorted is None else feat_sorted[: kept.shape[0]]
    return _merge_sorted(kept, t_merge, mode, f)


def reduce_tokens(x_sorted: np.ndarray, decision: TokenDecision, mode: str = "sum",
                  feat_sorted: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply a :class:`TokenDecision` to an importance-sorted token matrix."""
    if decision.strategy == "prune":
        return prune_tokens(x_sorted, decision.t)
    if decision.strategy == "merge":
        return _merge_sorted(x_sorted, decision.t, mode, feat_sorted)
    return prune_then_merge(x_sorted, decision.t_prune, decision.t_merge, mode, feat_sorted)


# ------------------------------------------------------------------ masks

@dataclass
class MaskPair:
    channel: np.ndarray   # (B, T, C) 1 where k < d_e[i]
    token: np.ndarray     # (B, T, C) 1 where j < d_t[i]
    d_e: np.ndarray
    d_t: np.ndarray


def build_masks(d_e: Sequence[int], d_t: Sequence[int], tokens: int, channels: int) -> MaskPair:
    d_e = np.asarray(d_e, dtype=np.int64)
    d_t = np.asarray(d_t, dtype=np.int64)
    if d_e.shape != d_t.shape:
        raise ValueError("d_e and d_t must have one entry per sample")
    if np.any(d_e < 0) or np.any(d_e > channels) or np.any(d_t < 0) or np.any(d_t > tokens):
        raise ValueError("mask extents out of range")
    b = d_e.shape[0]
    k = np.arange(channels)
    j = np.arange(tokens)
    ch = (k[None, :] < d_e[:, None]).astype(np.float64)
    tk = (j[None, :] < d_t[:, None]).astype(np.float64)
    channel = np.broadcast_to(ch[:, None, :], (b, tokens, channels)).copy()
    token = np.broadcast_to(tk[:, :, None], (b, tokens, channels)).copy()
    return MaskPair(channel, token, d_e, d_t)


def masked_merge_assignment(im_feat: np.ndarray, un_feat: np.ndarray) -> np.ndarray:
    """Batched argmax-cosine matching with +inf sentinels on dead rows.

    ``im_feat``: (B, M, C) and ``un_feat``: (B, U, C). Dead rows hold +inf
    in every channel; their similarities are forced to -inf before the
    argmax. Returns (B, U) destination indices, -1 for dead unimportant rows.
    """
    im_dead = np.isinf(im_feat).all(axis=-1)
    un_dead = np.isinf(un_feat).all(axis=-1)
    im = np.where(im_dead[..., None], 0.0, im_feat)
    un = np.where(un_dead[..., None], 0.0, un_feat)
    ni = np.linalg.norm(im, axis=-1, keepdims=True)
    nu = np.linalg.norm(un, axis=-1, keepdims=True)
    im = np.divide(im, ni, out=np.zeros_like(im), where=ni > 0)
    un = np.divide(un, nu, out=np.zeros_like(un), where=nu > 0)
    s = un @ np.swapaxes(im, -1, -2)
    s = np.where(im_dead[:, None, :] | un_dead[:, :, None], -np.inf, s)
    assign = np.argmax(s, axis=-1)
    return np.where(un_dead, -1, assign)


def masked_merge(x_im: np.ndarray, x_un: np.ndarray, mode: str = "sum",
                 im_feat: Optional[np.ndarray] = None,
                 un_feat: Optional[np.ndarray] = None) -> np.ndarray:
    """Merge per sample in a padded batch.

    Dead rows of ``x_im``/``x_un`` carry +inf sentinels. Output dead rows are 0.
    Any merge ratio is allowed, including more than half the tokens.
    """
    im_feat = x_im if im_feat is None else im_feat
    un_feat = x_un if un_feat is None else un_feat
    assign = masked_merge_assignment(im_feat, un_feat)
    im_live = ~np.isinf(x_im).all(axis=-1)
    b, m, _ = x_im.shape
    out = np.where(im_live[..., None], x_im, 0.0)
    sizes = im_live.astype(np.float64)
    for i in range(b):
        live = assign[i] >= 0
        np.add.at(out[i], assign[i][live], x_un[i][live])
        np.add.at(sizes[i], assign[i][live], 1.0)
    if mode == "mean":
        out = np.divide(out, sizes[..., None], out=np.zeros_like(out), where=sizes[..., None] > 0)
    elif mode != "sum":
        raise ValueError(f"unknown merge mode {mode!r}")
    return out


def masked_layer_norm(x: np.ndarray, channel_mask: np.ndarray, scale: np.ndarray,
                      shift: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    """LayerNorm over live channels only, via mean filling.

    Masked channels are zeroed, then filled with the live mean so a full-width
    LayerNorm sees the live mean; its output is rescaled by sqrt(live / C).
    The epsilon is scaled by live / C so live outputs match an ordinary
    LayerNorm over just the live channels. Masked outputs are zero.
    """
    m = np.asarray(channel_mask, dtype=np.float64)
    c = x.shape[-1]
    live = m.sum(axis=-1, keepdims=True)
    if np.any(live == 0):
        raise ValueError("masked_layer_norm: a row has every channel masked")
    xm = x * m
    mean = xm.sum(axis=-1, keepdims=True) / live
    filled = xm + (1.0 - m) * mean
    # var(filled) = var_live * live / C, so eps is scaled to match
    y, _ = layer_norm_fwd(filled, np.ones(c), np.zeros(c), eps * live / c)
    y = y * np.sqrt(live / c)
    return (y * scale + shift) * m


def decision_average(decisions):
    """Mean of continuous action vectors over a batch (inference mode).

    Accepts an array (B, action_dim) and returns the (action_dim,) mean; the
    caller decodes it once for the whole batch.
    """
    a = np.asarray(decisions, dtype=np.float64)
    if a.shape[0] == 0:
        raise ValueError("decision_average needs a nonempty batch")
    return a.mean(axis=0)
