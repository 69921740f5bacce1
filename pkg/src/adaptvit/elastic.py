"""Weight-shared elastic ViT: sliced MHSA/MLP, grouped forward, MAC accounting.

This module holds the single-sample reference path. Every sub-network is a
prefix slice of the full weights, so narrow widths reuse the leading rows
(or columns) of the wide ones. The batched, masked path used for training
lives in :mod:`adaptvit.batched` and must agree with this one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tokens as tok
from .decisions import GroupDecision
from .numerics import MacCounter, gelu, layer_norm, matmul, softmax_rows


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ElasticConfig:
    depth: int = 6
    heads: int = 4
    embed_choices: tuple = (16, 32, 48)
    mlp_ratio_choices: tuple = (2, 4)
    group_size: int = 2
    image_side: int = 8
    patch_side: int = 2
    in_chans: int = 1
    num_classes: int = 4
    importance: str = "attn"        # "attn" or "attn_vnorm"
    merge_feature: str = "x"        # "x" or "k"
    merge_mode: str = "sum"         # "sum" or "mean"

    def __post_init__(self):
        object.__setattr__(self, "embed_choices", tuple(int(e) for e in self.embed_choices))
        object.__setattr__(self, "mlp_ratio_choices", tuple(float(r) for r in self.mlp_ratio_choices))
        self.validate()

    def validate(self) -> None:
        if self.depth < 1 or self.group_size < 1 or self.depth % self.group_size:
            raise ConfigError(f"depth {self.depth} not divisible by group size {self.group_size}")
        if list(self.embed_choices) != sorted(set(self.embed_choices)):
            raise ConfigError("embed_choices must be strictly ascending")
        if list(self.mlp_ratio_choices) != sorted(set(self.mlp_ratio_choices)):
            raise ConfigError("mlp_ratio_choices must be strictly ascending")
        for e in self.embed_choices:
            if e <= 0 or e % self.heads:
                raise ConfigError(f"embed choice {e} not divisible by {self.heads} heads")
        for r in self.mlp_ratio_choices:
            h = r * self.c_max
            if r <= 0 or abs(h - round(h)) > 1e-9:
                raise ConfigError(f"mlp ratio {r} gives non-integer hidden width")
        if self.image_side % self.patch_side:
            raise ConfigError("image_side must be a multiple of patch_side")
        if self.importance not in ("attn", "attn_vnorm"):
            raise ConfigError(f"unknown importance mode {self.importance!r}")
        if self.merge_feature not in ("x", "k"):
            raise ConfigError(f"unknown merge feature {self.merge_feature!r}")
        if self.merge_mode not in ("sum", "mean"):
            raise ConfigError(f"unknown merge mode {self.merge_mode!r}")

    @property
    def c_max(self) -> int:
        return self.embed_choices[-1]

    @property
    def r_max(self) -> float:
        return self.mlp_ratio_choices[-1]

    @property
    def hidden_max(self) -> int:
        return int(round(self.r_max * self.c_max))

    @property
    def num_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_side * self.patch_side * self.in_chans

    @property
    def groups(self) -> int:
        return self.depth // self.group_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["embed_choices"] = list(self.embed_choices)
        d["mlp_ratio_choices"] = list(self.mlp_ratio_choices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ElasticConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True)
class BlockArch:
    phi: int
    mlp_ratio: float

    def hidden(self, c_in: int) -> int:
        return int(round(self.mlp_ratio * c_in))


def max_arch(config: ElasticConfig) -> BlockArch:
    return BlockArch(config.c_max, config.r_max)


# ------------------------------------------------------------------ weights

def block_names(i: int) -> List[str]:
    p = f"blocks.{i}."
    return [p + n for n in ("ln1.scale", "ln1.shift", "wq", "wk", "wv", "wo",
                            "ln2.scale", "ln2.shift", "w_up", "w_down")]


def tensor_names(config: ElasticConfig) -> List[str]:
    names = ["patch_embed", "pos_embed", "cls_token"]
    for i in range(config.depth):
        names += block_names(i)
    return names + ["norm.scale", "norm.shift", "head"]


def tensor_shapes(config: ElasticConfig) -> Dict[str, tuple]:
    c, hid = config.c_max, config.hidden_max
    shapes = {"patch_embed": (c, config.patch_dim), "pos_embed": (config.tokens, c),
              "cls_token": (c,), "norm.scale": (c,), "norm.shift": (c,),
              "head": (config.num_classes, c)}
    for i in range(config.depth):
        p = f"blocks.{i}."
        shapes.update({p + "ln1.scale": (c,), p + "ln1.shift": (c,), p + "ln2.scale": (c,),
                       p + "ln2.shift": (c,), p + "wq": (c, c), p + "wk": (c, c),
                       p + "wv": (c, c), p + "wo": (c, c), p + "w_up": (hid, c),
                       p + "w_down": (c, hid)})
    return shapes


@dataclass
class WeightStore:
    """Full-width shared weights; every sub-network is sliced from these."""

    config: ElasticConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        shapes = tensor_shapes(self.config)
        if self.tensors:
            missing = set(shapes) - set(self.tensors)
            if missing:
                raise ConfigError(f"missing tensors: {sorted(missing)}")
            for k, s in shapes.items():
                if tuple(self.tensors[k].shape) != s:
                    raise ConfigError(f"{k}: shape {self.tensors[k].shape} != {s}")

    @classmethod
    def init(cls, config: ElasticConfig, rng=None) -> "WeightStore":
        rng = np.random.default_rng(rng)
        t = {}
        for name, shape in tensor_shapes(config).items():
            if name.endswith(".scale"):
                t[name] = np.ones(shape)
            elif name.endswith(".shift"):
                t[name] = np.zeros(shape)
            elif name in ("pos_embed", "cls_token", "head"):
                t[name] = rng.normal(0.0, 0.02, shape)
            else:
                t[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
        return cls(config, {k: t[k] for k in tensor_names(config)})

    def block(self, i: int) -> Dict[str, np.ndarray]:
        p = f"blocks.{i}."
        return {n[len(p):]: self.tensors[n] for n in block_names(i)}

    def copy(self) -> "WeightStore":
        return WeightStore(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.tensors[k], dtype="<f8").tobytes()
                        for k in tensor_names(self.config))


# ------------------------------------------------------------------ layers

def slice_projection(w: np.ndarray, phi: int) -> np.ndarray:
    """First ``phi`` rows of a projection (all input columns)."""
    if phi < 1 or phi > w.shape[0]:
        raise ValueError(f"slice width {phi} outside [1, {w.shape[0]}]")
    return w[:phi]


def mhsa_forward(x, wb, arch: BlockArch, heads: int, counter: Optional[MacCounter] = None):
    """Elastic multi-head self-attention on one sample.

    Returns the (n, C_in) output and a cache with the sliced keys/values,
    the per-head attention maps and the head-averaged CLS attention row.
    """
    phi = arch.phi
    if phi % heads:
        raise ConfigError(f"width {phi} not divisible by {heads} heads")
    q = matmul(x, slice_projection(wb["wq"], phi).T, counter)
    k = matmul(x, slice_projection(wb["wk"], phi).T, counter)
    v = matmul(x, slice_projection(wb["wv"], phi).T, counter)
    d = phi // heads
    scale = 1.0 / math.sqrt(d)
    outs, maps = [], []
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        a = softmax_rows(matmul(q[:, sl], k[:, sl].T, counter) * scale)
        outs.append(matmul(a, v[:, sl], counter))
        maps.append(a)
    o = np.concatenate(outs, axis=1)
    y = matmul(o, wb["wo"][:, :phi].T, counter)
    attn = np.stack(maps)
    return y, {"k": k, "v": v, "attn": attn, "attn_cls": attn[:, 0, :].mean(axis=0)}


def mlp_forward(x, wb, arch: BlockArch, counter: Optional[MacCounter] = None):
    hid = arch.hidden(x.shape[1])
    if hid > wb["w_up"].shape[0]:
        raise ConfigError(f"hidden width {hid} exceeds stored {wb['w_up'].shape[0]}")
    u = matmul(x, wb["w_up"][:hid].T, counter)
    return matmul(gelu(u), wb["w_down"][:, :hid].T, counter)


def block_forward(x, wb, arch: BlockArch, heads: int, counter: Optional[MacCounter] = None):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""
    a, cache = mhsa_forward(layer_norm(x, wb["ln1.scale"], wb["ln1.shift"]), wb, arch, heads, counter)
    y = x + a
    y = y + mlp_forward(layer_norm(y, wb["ln2.scale"], wb["ln2.shift"]), wb, arch, counter)
    return y, cache


def cls_importance(cache, mode: str = "attn") -> np.ndarray:
    """Importance of each non-CLS token from the CLS attention row."""
    row = cache["attn_cls"][1:]
    if mode == "attn":
        return row.copy()
    if mode == "attn_vnorm":
        return row * np.linalg.norm(cache["v"][1:], axis=1)
    raise ConfigError(f"unknown importance mode {mode!r}")


# ------------------------------------------------------------------ FLOPs

def block_matmul_shapes(n: int, phi: int, hidden: int, c_in: int, heads: int):
    """(a, b, c, times) for every matmul one block performs on ``n`` tokens."""
    d = phi // heads
    return [(n, c_in, phi, 3),          # Q, K, V
            (n, d, n, heads),           # Q K^T per head
            (n, n, d, heads),           # A V per head
            (n, phi, c_in, 1),          # output projection
            (n, c_in, hidden, 1),       # MLP up
            (n, hidden, c_in, 1)]       # MLP down


def block_macs(n: int, phi: int, hidden: int, c_in: int, heads: int) -> int:
    return sum(a * b * c * t for a, b, c, t in block_matmul_shapes(n, phi, hidden, c_in, heads))


def block_formula(n: int, phi: int, hidden: int, c_in: int) -> int:
    """4 n phi C + 2 n^2 phi + 2 n (gamma C) C."""
    return 4 * n * phi * c_in + 2 * n * n * phi + 2 * n * hidden * c_in


def closed_form_uniform(n: int, c: int, depth: int) -> int:
    """12 N C^2 + 2 N^2 C per block (full width, MLP ratio 4)."""
    return depth * (12 * n * c * c + 2 * n * n * c)


@dataclass
class FlopsReport:
    per_block: List[int]
    formula_total: int
    measured_total: int
    full_total: int

    @property
    def flops_ratio(self) -> float:
        return self.measured_total / self.full_total

    @property
    def gmacs(self) -> float:
        return self.measured_total / 1e9


def count_flops(config: ElasticConfig, archs: Sequence[BlockArch], token_counts: Sequence[int]) -> FlopsReport:
    """MACs of the transformer blocks for given per-block widths and token counts.

    ``token_counts`` include the CLS token. Patch embedding and the classifier
    head are not counted.
    """
    if len(archs) != config.depth or len(token_counts) != config.depth:
        raise ConfigError("need one arch and one token count per block")
    c = config.c_max
    per_block, formula = [], 0
    for a, n in zip(archs, token_counts):
        hid = a.hidden(c)
        per_block.append(block_macs(n, a.phi, hid, c, config.heads))
        formula += block_formula(n, a.phi, hid, c)
    measured = sum(per_block)
    if measured != formula:
        raise AssertionError(f"MAC count {measured} != formula {formula}")
    full = full_macs(config)
    if all(a == max_arch(config) for a in archs) and config.r_max == 4 and \
            all(n == token_counts[0] for n in token_counts):
        assert measured == closed_form_uniform(token_counts[0], c, config.depth)
    return FlopsReport(per_block, formula, measured, full)


def full_macs(config: ElasticConfig) -> int:
    c = config.c_max
    return config.depth * block_macs(config.tokens, c, config.hidden_max, c, config.heads)


def plan_token_counts(config: ElasticConfig, plan: Sequence[GroupDecision]) -> List[int]:
    """Tokens (incl. CLS) entering each block under a decision plan."""
    counts, n = [], config.num_patches
    for g, dec in enumerate(plan):
        counts.append(n + 1)
        if g > 0:
            n = dec.token.output_count(n)
        counts += [n + 1] * (config.group_size - 1)
    return counts


def plan_archs(config: ElasticConfig, plan: Sequence[GroupDecision]) -> List[BlockArch]:
    return [a for dec in plan for a in dec.archs(config)]


def plan_flops(config: ElasticConfig, plan: Sequence[GroupDecision]) -> FlopsReport:
    return count_flops(config, plan_archs(config, plan), plan_token_counts(config, plan))


def keep_rate(config: ElasticConfig, plan: Sequence[GroupDecision]) -> float:
    """Product over decided groups of the kept fraction of non-CLS tokens."""
    n, rate = config.num_patches, 1.0
    for dec in plan[1:]:
        m = dec.token.output_count(n)
        rate *= m / n
        n = m
    return rate


def sample_random_arch(config: ElasticConfig, rng) -> List[BlockArch]:
    """Independent uniform (width, MLP ratio) draw for every block."""
    e = rng.integers(0, len(config.embed_choices), size=config.depth)
    r = rng.integers(0, len(config.mlp_ratio_choices), size=config.depth)
    return [BlockArch(config.embed_choices[i], config.mlp_ratio_choices[j]) for i, j in zip(e, r)]


# ------------------------------------------------------------------ model

def patchify(images: np.ndarray, patch_side: int) -> np.ndarray:
    """(B, H, W[, ch]) images -> (B, patches, patch_side**2 * ch), row-major patches."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    b, h, w, ch = x.shape
    p = patch_side
    x = x.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * ch)


def embed(weights: WeightStore, patches: np.ndarray) -> np.ndarray:
    """(n, patch_dim) patch rows -> (n + 1, C) tokens with CLS and positions."""
    t = weights.tensors
    x = patches @ t["patch_embed"].T
    x = np.vstack([t["cls_token"][None, :], x])
    return x + t["pos_embed"]


@dataclass
class GroupTrace:
    group: int
    phi: List[int]
    mlp_ratio: List[float]
    token: tok.TokenDecision
    tokens_before: int
    tokens_after: int
    mac_count: int

    def to_json(self, sample_id: int) -> dict:
        d = {"sample_id": int(sample_id), "group": self.group, "phi": self.phi,
             "mlp_ratio": self.mlp_ratio, "tokens_before": self.tokens_before,
             "tokens_after": self.tokens_after, "mac_count": self.mac_count}
        if self.token.strategy == "prune_then_merge":
            d.update(t=None, t_prune=self.token.t_prune, t_merge=self.token.t_merge)
        else:
            d["t"] = self.token.t
        return d


@dataclass
class SampleResult:
    logits: np.ndarray
    group_keys: List[np.ndarray]
    group_attn: List[np.ndarray]
    traces: List[GroupTrace]
    flops: FlopsReport
    mac_counter: int


def forward_sample(weights: WeightStore, image: np.ndarray, plan: Sequence[GroupDecision]) -> SampleResult:
    """Run one image through the elastic network under a per-group plan.

    Group 1 always runs at full width on every token; its plan entry is
    ignored. In later groups the first block runs on all incoming tokens,
    its CLS attention ranks them, the token decision is applied, and the
    remaining blocks run on what is left.
    """
    cfg = weights.config
    if len(plan) != cfg.groups:
        raise ConfigError(f"plan has {len(plan)} groups, model has {cfg.groups}")
    plan = [GroupDecision.full(cfg, plan[0].token.strategy)] + list(plan[1:])
    counter = MacCounter()
    x = embed(weights, patchify(image[None], cfg.patch_side)[0])
    keys, attn, traces = [], [], []
    for g, dec in enumerate(plan):
        archs = dec.archs(cfg)
        before = x.shape[0]
        start = counter.total
        for j, arch in enumerate(archs):
            wb = weights.block(g * cfg.group_size + j)
            x, cache = block_forward(x, wb, arch, cfg.heads, counter)
            if j == 0 and g > 0:
                scores = cls_importance(cache, cfg.importance)
                x, perm = tok.sort_by_importance(x, scores)
                feat = None
                if cfg.merge_feature == "k":
                    feat = cache["k"][perm]
                x = tok.reduce_tokens(x, dec.token, cfg.merge_mode, feat)
        keys.append(cache["k"])
        attn.append(cache["attn_cls"])
        traces.append(GroupTrace(g, [a.phi for a in archs], [a.mlp_ratio for a in archs],
                                 dec.token, before, x.shape[0], counter.total - start))
    t = weights.tensors
    cls = layer_norm(x[:1], t["norm.scale"], t["norm.shift"])
    logits = (cls @ t["head"].T)[0]
    report = plan_flops(cfg, plan)
    return SampleResult(logits, keys, attn, traces, report, counter.total)


def model_forward(weights: WeightStore, images: np.ndarray, plans) -> List[SampleResult]:
    """Per-sample reference forward over a batch.

    ``plans`` is either one plan (list of :class:`GroupDecision`) shared by
    the batch or a list with one plan per image.
    """
    images = np.asarray(images, dtype=np.float64)
    if plans and isinstance(plans[0], GroupDecision):
        plans = [plans] * images.shape[0]
    return [forward_sample(weights, img, p) for img, p in zip(images, plans)]


def config_json(config: ElasticConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True)
