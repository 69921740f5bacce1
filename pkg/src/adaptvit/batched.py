"""Masked batched execution of the elastic ViT, with hand-derived backward.

Samples in a batch may use different attention widths, MLP widths and token
counts. Tensors stay dense at (B, T, C_max):

* attention width: a per-sample channel-to-head map (zero past ``phi``)
  takes the place of slicing Wq/Wk/Wv and the output projection;
* MLP width: hidden units past ``gamma * C`` are multiplied by zero;
* token count: live tokens are a prefix of the T slots; dead keys get
  -inf logits and dead rows are zeroed after every block.

Reordering, pruning and merging are all written as a per-sample routing
matrix R with ``x_new = R @ x``, so their backward is ``R^T @ dx_new``.
Results match :func:`adaptvit.elastic.forward_sample` on the live slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tokens as tok
from .decisions import GroupDecision, decode_index
from .elastic import ElasticConfig, WeightStore, block_macs, full_macs, patchify
from scipy.special import erf

from .numerics import (HeadLayout, attention_bwd, attention_fwd, gelu_grad, layer_norm_bwd,
                       layer_norm_fwd, linear_bwd)


@dataclass
class GroupBatch:
    """Decoded decisions for one group across a batch."""

    phi: np.ndarray        # (B, K) attention widths
    hidden: np.ndarray     # (B, K) MLP hidden widths
    strategy: str
    t: np.ndarray          # (B,)
    t_prune: np.ndarray    # (B,)
    t_merge: np.ndarray    # (B,)

    @property
    def batch(self) -> int:
        return self.phi.shape[0]

    @classmethod
    def full(cls, config: ElasticConfig, batch: int, strategy: str = "prune") -> "GroupBatch":
        k = config.group_size
        ones = np.ones(batch)
        return cls(np.full((batch, k), config.c_max), np.full((batch, k), config.hidden_max),
                   strategy, ones, ones.copy(), ones.copy())

    @classmethod
    def from_decisions(cls, config: ElasticConfig, decs: Sequence[GroupDecision]) -> "GroupBatch":
        c = config.c_max
        phi = np.array([[config.embed_choices[i] for i in d.phi_idx] for d in decs])
        hid = np.array([[int(round(config.mlp_ratio_choices[i] * c)) for i in d.mlp_idx] for d in decs])
        return cls(phi, hid, decs[0].token.strategy,
                   np.array([d.token.t for d in decs]),
                   np.array([d.token.t_prune for d in decs]),
                   np.array([d.token.t_merge for d in decs]))

    @classmethod
    def from_actions(cls, config: ElasticConfig, actions: np.ndarray, strategy: str) -> "GroupBatch":
        a = np.clip(np.asarray(actions, dtype=np.float64), 0.0, 1.0)
        k, c = config.group_size, config.c_max
        emb = np.array(config.embed_choices)
        rat = np.array(config.mlp_ratio_choices)
        pi = np.vectorize(lambda s: decode_index(s, len(emb)))(a[:, :k])
        mi = np.vectorize(lambda s: decode_index(s, len(rat)))(a[:, k:2 * k])
        hid = np.rint(rat[mi] * c).astype(np.int64)
        b = a.shape[0]
        if strategy == "prune_then_merge":
            return cls(emb[pi], hid, strategy, np.ones(b), a[:, 2 * k].copy(), a[:, 2 * k + 1].copy())
        return cls(emb[pi], hid, strategy, a[:, 2 * k].copy(), np.ones(b), np.ones(b))

    def out_counts(self, n: np.ndarray) -> np.ndarray:
        """Non-CLS tokens left after this group's reduction, per sample."""
        if self.strategy == "prune_then_merge":
            p = np.array([tok.kept_count(int(ni), tp) for ni, tp in zip(n, self.t_prune)])
            return np.array([tok.kept_count(int(pi), tm) for pi, tm in zip(p, self.t_merge)])
        return np.array([tok.kept_count(int(ni), t) for ni, t in zip(n, self.t)])


@dataclass
class Flow:
    """Activations between groups."""

    x: np.ndarray          # (B, T, C)
    n: np.ndarray          # (B,) live non-CLS tokens
    keys: Optional[np.ndarray] = None      # last block's keys, zero past phi and dead rows
    phi_last: Optional[np.ndarray] = None  # attention width that produced ``keys``
    attn_cls: Optional[np.ndarray] = None  # last block's head-averaged CLS row, zero on dead slots

    @property
    def live(self) -> np.ndarray:
        return np.arange(self.x.shape[1])[None, :] < (self.n + 1)[:, None]


# ------------------------------------------------------------------ pieces

def embed_fwd(weights: WeightStore, images: np.ndarray):
    t = weights.tensors
    patches = patchify(images, weights.config.patch_side)
    e = patches @ t["patch_embed"].T
    b = e.shape[0]
    cls = np.broadcast_to(t["cls_token"], (b, 1, e.shape[2]))
    x = np.concatenate([cls, e], axis=1) + t["pos_embed"][None]
    return x, patches


def block_fwd(wb: Dict[str, np.ndarray], x, live, phi, hidden, heads):
    c = x.shape[2]
    h1, ln1 = layer_norm_fwd(x, wb["ln1.scale"], wb["ln1.shift"])
    q = h1 @ wb["wq"].T
    k = h1 @ wb["wk"].T
    v = h1 @ wb["wv"].T
    layout = HeadLayout(phi, c, heads)
    o, att = attention_fwd(q, k, v, layout, live)
    x1 = x + o @ wb["wo"].T
    h2, ln2 = layer_norm_fwd(x1, wb["ln2.scale"], wb["ln2.shift"])
    hmask = (np.arange(wb["w_up"].shape[0])[None, :] < hidden[:, None]).astype(np.float64)[:, None, :]
    u = h2 @ wb["w_up"].T
    cdf = 0.5 * (1.0 + erf(u / math.sqrt(2.0)))
    g = u * cdf * hmask
    x2 = (x1 + g @ wb["w_down"].T) * live[..., None]
    cache = dict(x=x, h1=h1, ln1=ln1, o=o, att=att, h2=h2, ln2=ln2, u=u, cdf=cdf, g=g,
                 hmask=hmask, live=live, phi=phi, k=k, layout=layout)
    return x2, cache


def block_bwd(wb, dx2, cache):
    gr = {}
    dx2 = dx2 * cache["live"][..., None]
    dx1 = dx2.copy()
    _, gr["w_down"] = linear_bwd(dx2, cache["g"], wb["w_down"])
    dg = dx2 @ wb["w_down"]
    du = dg * cache["hmask"] * gelu_grad(cache["u"], cache["cdf"])
    dh2, gr["w_up"] = linear_bwd(du, cache["h2"], wb["w_up"])
    d, gr["ln2.scale"], gr["ln2.shift"] = layer_norm_bwd(dh2, cache["ln2"])
    dx1 += d
    dx = dx1.copy()
    _, gr["wo"] = linear_bwd(dx1, cache["o"], wb["wo"])
    do = dx1 @ wb["wo"]
    dq, dk, dv = attention_bwd(do, cache["att"])
    h1 = cache["h1"]
    dh1 = np.zeros_like(h1)
    for name, dproj in (("wq", dq), ("wk", dk), ("wv", dv)):
        d, gr[name] = linear_bwd(dproj, h1, wb[name])
        dh1 += d
    d, gr["ln1.scale"], gr["ln1.shift"] = layer_norm_bwd(dh1, cache["ln1"])
    dx += d
    return dx, gr


def importance_scores(att_cache, mode: str, n: np.ndarray) -> np.ndarray:
    """(B, T-1) head-averaged CLS attention; dead slots get -inf."""
    a = att_cache[5]                       # (B, H, T, T)
    s = a[:, :, 0, 1:].mean(axis=1)
    if mode == "attn_vnorm":
        vh = att_cache[2]                  # (B, H, T, slot), zero past phi
        s = s * np.sqrt(np.sum(vh[:, :, 1:] ** 2, axis=(1, 3)))
    live = np.arange(s.shape[1])[None, :] < n[:, None]
    return np.where(live, s, -np.inf)


def routing(x, n, scores, gdec: GroupBatch, mode: str, feat=None):
    """Routing matrices (B, T, T) that sort then reduce, and new live counts."""
    b, t, _ = x.shape
    order = np.argsort(-scores, axis=1, kind="stable") + 1
    perm = np.concatenate([np.zeros((b, 1), dtype=np.int64), order], axis=1)
    pmat = np.zeros((b, t, t))
    pmat[np.arange(b)[:, None], np.arange(t)[None, :], perm] = 1.0
    if gdec.strategy == "prune":
        m = gdec.out_counts(n)
        r = np.zeros((b, t, t))
        keep = np.arange(t)[None, :] < (m + 1)[:, None]
        r[:, np.arange(t), np.arange(t)] = keep
        return r @ pmat, m
    if gdec.strategy == "merge":
        p = n
        m = gdec.out_counts(n)
    else:
        p = np.array([tok.kept_count(int(ni), tp) for ni, tp in zip(n, gdec.t_prune)])
        m = gdec.out_counts(n)
    src = x if feat is None else feat
    fs = np.einsum("bst,btc->bsc", pmat, src)[:, 1:]
    slot = np.arange(t - 1)[None, :]
    im_dead = slot >= m[:, None]
    un_dead = (slot < m[:, None]) | (slot >= p[:, None])
    im = np.where(im_dead[..., None], np.inf, fs)
    un = np.where(un_dead[..., None], np.inf, fs)
    assign = tok.masked_merge_assignment(im, un)
    r = np.zeros((b, t, t))
    keep = np.arange(t)[None, :] < (m + 1)[:, None]
    r[:, np.arange(t), np.arange(t)] = keep
    bi, ui = np.nonzero(assign >= 0)
    r[bi, 1 + assign[bi, ui], 1 + ui] = 1.0
    if mode == "mean":
        rs = r.sum(axis=2, keepdims=True)
        r = np.divide(r, rs, out=np.zeros_like(r), where=rs > 0)
    return r @ pmat, m


# ------------------------------------------------------------------ model

class MaskedViT:
    """Batched elastic ViT over a fixed :class:`WeightStore`.

    ``run_group`` advances a :class:`Flow` one group at a time so callers can
    make decisions between groups; ``forward`` runs a full plan.
    """

    def __init__(self, weights: WeightStore):
        self.weights = weights
        self.config = weights.config

    def start(self, images, keep_cache: bool = False):
        x, patches = embed_fwd(self.weights, images)
        n = np.full(x.shape[0], self.config.num_patches)
        tape = {"patches": patches, "groups": []} if keep_cache else None
        return Flow(x, n), tape

    def run_group(self, flow: Flow, g: int, gdec: GroupBatch, tape=None) -> Flow:
        cfg = self.config
        x, n = flow.x, flow.n
        rec = {"blocks": [], "route": None, "reduce_at": None}
        keys = att_row = None
        for j in range(cfg.group_size):
            i = g * cfg.group_size + j
            wb = self.weights.block(i)
            live = np.arange(x.shape[1])[None, :] < (n + 1)[:, None]
            x, cache = block_fwd(wb, x, live, gdec.phi[:, j], gdec.hidden[:, j], cfg.heads)
            rec["blocks"].append((i, cache))
            keys = cache["k"] * cache["layout"].channel_mask()[:, None, :] * live[..., None]
            att_row = cache["att"][5][:, :, 0, :].mean(axis=1) * live
            if j == 0 and g > 0:
                scores = importance_scores(cache["att"], cfg.importance, n)
                feat = keys if cfg.merge_feature == "k" else None
                r, n = routing(x, n, scores, gdec, cfg.merge_mode, feat)
                x = np.einsum("bst,btc->bsc", r, x)
                rec["route"] = r
        if tape is not None:
            tape["groups"].append(rec)
        return Flow(x, n, keys, gdec.phi[:, -1].copy(), att_row)

    def head(self, flow: Flow, tape=None) -> np.ndarray:
        t = self.weights.tensors
        cls, ln = layer_norm_fwd(flow.x[:, 0], t["norm.scale"], t["norm.shift"])
        if tape is not None:
            tape["head"] = (cls, ln)
        return cls @ t["head"].T

    def forward(self, images, plan: Sequence[GroupBatch], keep_cache: bool = False):
        """Logits for a batch under per-group decisions; group 1 is forced full."""
        flow, tape = self.start(images, keep_cache)
        flows = []
        for g, gdec in enumerate(plan):
            if g == 0:
                gdec = GroupBatch.full(self.config, flow.x.shape[0], gdec.strategy)
            flow = self.run_group(flow, g, gdec, tape)
            flows.append(flow)
        logits = self.head(flow, tape)
        return logits, flows, tape

    def backward(self, dlogits: np.ndarray, tape) -> Dict[str, np.ndarray]:
        """Gradients of all weight tensors given d(loss)/d(logits)."""
        t = self.weights.tensors
        grads = {k: np.zeros_like(v) for k, v in t.items()}
        cls, ln = tape["head"]
        grads["head"] = dlogits.T @ cls
        dcls, grads["norm.scale"], grads["norm.shift"] = layer_norm_bwd(dlogits @ t["head"], ln)
        last = tape["groups"][-1]["blocks"][-1][1]["x"]
        dx = np.zeros(last.shape)
        dx[:, 0] = dcls
        for rec in reversed(tape["groups"]):
            blocks = rec["blocks"]
            for pos in range(len(blocks) - 1, -1, -1):
                i, cache = blocks[pos]
                if pos == 0 and rec["route"] is not None:
                    dx = np.einsum("bst,bsc->btc", rec["route"], dx)
                wb = self.weights.block(i)
                dx, gb = block_bwd(wb, dx, cache)
                for k, v in gb.items():
                    grads[f"blocks.{i}.{k}"] += v
        grads["pos_embed"] = dx.sum(axis=0)
        grads["cls_token"] = dx[:, 0].sum(axis=0)
        p = tape["patches"]
        de = dx[:, 1:]
        grads["patch_embed"] = de.reshape(-1, de.shape[2]).T @ p.reshape(-1, p.shape[2])
        return grads


def plan_macs(config: ElasticConfig, plan: Sequence[GroupBatch]) -> np.ndarray:
    """Per-sample MACs (B,) for a batched plan (group 1 forced full)."""
    b = plan[0].batch
    c = config.c_max
    n = np.full(b, config.num_patches)
    total = np.zeros(b, dtype=np.int64)
    for g, gdec in enumerate(plan):
        if g == 0:
            gdec = GroupBatch.full(config, b, gdec.strategy)
        for j in range(config.group_size):
            for s in range(b):
                total[s] += block_macs(int(n[s]) + 1, int(gdec.phi[s, j]), int(gdec.hidden[s, j]),
                                       c, config.heads)
            if j == 0 and g > 0:
                n = gdec.out_counts(n)
    return total


def plan_keep_rate(config: ElasticConfig, plan: Sequence[GroupBatch]) -> np.ndarray:
    b = plan[0].batch
    n = np.full(b, config.num_patches)
    rate = np.ones(b)
    for gdec in plan[1:]:
        m = gdec.out_counts(n)
        rate *= m / n
        n = m
    return rate


def flops_ratio(config: ElasticConfig, plan: Sequence[GroupBatch]) -> np.ndarray:
    return plan_macs(config, plan) / full_macs(config)
