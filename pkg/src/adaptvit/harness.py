"""Training and evaluation pipelines.

1. :func:`pretrain_meta` trains the shared weights with a random width
   draw for every block at each step, on all tokens.
2. :func:`train_selector` freezes the backbone and runs PPO on Result-to-Go
   rollouts.
3. :func:`finetune_backbone` freezes the selector and tunes the backbone
   under its deterministic decisions.
4. :func:`evaluate` reports accuracy, MACs and token keep rate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .batched import GroupBatch, MaskedViT, plan_keep_rate, plan_macs
from .decisions import action_dim
from .elastic import ElasticConfig, WeightStore, full_macs, sample_random_arch
from .numerics import Adam, clip_grad_norm, softmax_cross_entropy, warmup_cosine
from .selector import (PPOParams, PPOTrainer, RewardParams, SelectorNets, Trajectory,
                       state_from_flow, STATE_MODES, compute_reward, gaussian_log_prob)
from .tokens import decision_average

log = logging.getLogger(__name__)

STRATEGY_ALIASES = {"prune": "prune", "merge": "merge", "prune-merge": "prune_then_merge",
                    "prune_then_merge": "prune_then_merge"}


# ------------------------------------------------------------------ data

@dataclass
class DatasetSpec:
    source: str = "synthetic"
    path: Optional[str] = None
    n_train: int = 2048
    n_test: int = 512
    image_side: int = 8
    patch_side: int = 2
    num_classes: int = 4
    hard_fraction: float = 0.2     # share of samples drawn at ``hard_complexity``
    easy_complexity: float = 0.0
    hard_complexity: float = 0.5
    easy_amplitude: float = 10.0
    hard_amplitude: float = 0.4
    noise: float = 0.5

    def __post_init__(self):
        if self.source not in ("synthetic", "file"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.source == "file" and not self.path:
            raise ValueError("file datasets need a path")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    complexity: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        c = None if self.complexity is None else self.complexity[idx]
        return Dataset(self.images[idx], self.labels[idx], c)


def class_patterns(num_classes: int, patch_dim: int) -> np.ndarray:
    """Unit-norm, mutually orthogonal-as-possible patch patterns per class."""
    h = np.array([[1.0]])
    while h.shape[0] < max(num_classes, patch_dim):
        h = np.block([[h, h], [h, -h]])
    pats = h[:num_classes, :patch_dim] if patch_dim <= h.shape[1] else None
    if pats is None or np.linalg.matrix_rank(pats) < min(num_classes, patch_dim):
        pats = np.linalg.qr(np.random.default_rng(0).standard_normal((patch_dim, num_classes)))[0].T
    return pats / np.linalg.norm(pats, axis=1, keepdims=True)


def informative_count(complexity: float, patches: int) -> int:
    return 1 + int(math.floor(complexity * (patches - 1) + 0.5))


def generate_synthetic(spec: DatasetSpec, n: int, rng) -> Dataset:
    """Class-conditional patch patterns on Gaussian background.

    Each image carries its class pattern in ``1 + round(c * (P - 1))``
    randomly placed patches, where ``c`` is the sample's complexity. Easy
    samples use one strong patch; hard samples spread weaker evidence over
    many patches.
    """
    rng = np.random.default_rng(rng)
    side, p = spec.image_side, spec.patch_side
    g = side // p
    npatch = g * g
    pats = class_patterns(spec.num_classes, p * p)
    labels = rng.integers(0, spec.num_classes, size=n)
    hard = rng.random(n) < spec.hard_fraction
    comp = np.where(hard, spec.hard_complexity, spec.easy_complexity)
    amp = np.where(hard, spec.hard_amplitude, spec.easy_amplitude)
    patches = spec.noise * rng.standard_normal((n, npatch, p * p))
    for i in range(n):
        k = informative_count(comp[i], npatch)
        where = rng.permutation(npatch)[:k]
        patches[i, where] += amp[i] * pats[labels[i]]
    imgs = patches.reshape(n, g, g, p, p).transpose(0, 1, 3, 2, 4).reshape(n, side, side)
    return Dataset(imgs, labels, comp)


def linear_probe_accuracy(train: Dataset, test: Dataset, ridge: float = 1e-2) -> float:
    """Ridge regression onto one-hot labels from raw pixels; test accuracy."""
    def feats(d):
        x = d.images.reshape(len(d), -1)
        return np.hstack([x, np.ones((len(d), 1))])
    k = int(max(train.labels.max(), test.labels.max())) + 1
    x = feats(train)
    y = np.eye(k)[train.labels]
    w = np.linalg.solve(x.T @ x + ridge * np.eye(x.shape[1]), x.T @ y)
    return float(np.mean(np.argmax(feats(test) @ w, axis=1) == test.labels))


def load_or_generate(spec: DatasetSpec, rng):
    """(train, test) datasets from a spec."""
    if spec.source == "file":
        from .container import load_dataset
        x, y = load_dataset(spec.path)
        cut = int(round(0.8 * len(y)))
        return Dataset(x[:cut], y[:cut]), Dataset(x[cut:], y[cut:])
    rng = np.random.default_rng(rng)
    train = generate_synthetic(spec, spec.n_train, rng)
    test = generate_synthetic(spec, spec.n_test, rng)
    return train, test


# ------------------------------------------------------------------ configs

@dataclass
class OptimConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    min_lr: float = 1e-5
    warmup_steps: int = 100
    warmup_lr: float = 1e-6
    weight_decay: float = 0.05
    grad_clip: float = 1.0


@dataclass
class SelectorConfig:
    steps: int = 20000            # decision steps (samples x decided groups)
    batch_size: int = 128
    hidden: int = 256
    init_log_std: float = -1.0
    init_mean: float = 0.5        # initial policy mean for every action entry
    state: str = "k_mean"         # "k_mean" or "cls_attn"
    ppo: PPOParams = field(default_factory=PPOParams)
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if self.state not in STATE_MODES:
            raise ValueError(f"unknown selector state {self.state!r}")
        if not 0.0 < self.init_mean < 1.0:
            raise ValueError("selector init_mean must lie in (0, 1)")
        if self.steps < 0 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("selector steps/batch_size/hidden out of range")


@dataclass
class TrainConfig:
    seed: int = 0
    strategy: str = "prune"
    model: ElasticConfig = field(default_factory=ElasticConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    pretrain: OptimConfig = field(default_factory=OptimConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    finetune: OptimConfig = field(default_factory=lambda: OptimConfig(
        steps=200, lr=2e-4, min_lr=2e-5, warmup_steps=0, weight_decay=1e-6))
    eval_batch: int = 64

    def __post_init__(self):
        self.strategy = STRATEGY_ALIASES.get(self.strategy, self.strategy)
        if self.strategy not in ("prune", "merge", "prune_then_merge"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.pretrain.batch_size < 1 or self.selector.batch_size < 1:
            raise ValueError("batch sizes must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = {k: d[k] for k in ("seed", "strategy", "eval_batch") if k in d}
        if "model" in d:
            kw["model"] = ElasticConfig.from_dict(d["model"])
        if "data" in d:
            kw["data"] = _build(DatasetSpec, d["data"], "data")
        for name in ("pretrain", "finetune"):
            if name in d:
                kw[name] = _build(OptimConfig, d[name], name)
        if "selector" in d:
            s = dict(d["selector"])
            ppo = _build(PPOParams, s.pop("ppo", {}), "selector.ppo")
            rew = _build(RewardParams, s.pop("reward", {}), "selector.reward")
            kw["selector"] = _build(SelectorConfig, s, "selector", ppo=ppo, reward=rew)
        return cls(**kw)


def _build(cls, d, where, **extra):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d, **extra)


# ------------------------------------------------------------------ pretraining

def _batches(n: int, bs: int, rng):
    while True:
        order = rng.permutation(n)
        for lo in range(0, n - bs + 1 if n >= bs else 1, bs):
            yield order[lo: lo + bs]


def pretrain_meta(cfg: TrainConfig, data: Dataset, weights: Optional[WeightStore] = None,
                  rng=None, callback=None):
    """Train the shared weights with a fresh random sub-network every step.

    All tokens are used; only widths vary. Returns (weights, loss history).
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    model_cfg = cfg.model
    if weights is None:
        weights = WeightStore.init(model_cfg, rng)
    opt_cfg = cfg.pretrain
    opt = Adam(weights.tensors, opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    net = MaskedViT(weights)
    history = []
    batches = _batches(len(data), opt_cfg.batch_size, rng)
    k = model_cfg.group_size
    for step in range(opt_cfg.steps):
        idx = next(batches)
        archs = sample_random_arch(model_cfg, rng)
        b = len(idx)
        plan = []
        for g in range(model_cfg.groups):
            sub = archs[g * k:(g + 1) * k]
            plan.append(GroupBatch(np.tile([a.phi for a in sub], (b, 1)),
                                   np.tile([a.hidden(model_cfg.c_max) for a in sub], (b, 1)),
                                   "prune", np.ones(b), np.ones(b), np.ones(b)))
        logits, _, tape = _forward_fixed(net, data.images[idx], plan)
        loss, dlogits = softmax_cross_entropy(logits, data.labels[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        grads = net.backward(dlogits, tape)
        clip_grad_norm(grads, opt_cfg.grad_clip)
        lr = warmup_cosine(step, opt_cfg.steps, opt_cfg.lr, opt_cfg.min_lr,
                           opt_cfg.warmup_steps, opt_cfg.warmup_lr)
        opt.step(grads, lr)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return weights, history


def _forward_fixed(net: MaskedViT, images, plan):
    """Forward where every group (including the first) uses ``plan`` as given."""
    flow, tape = net.start(images, keep_cache=True)
    for g, gdec in enumerate(plan):
        flow = net.run_group(flow, g, gdec, tape)
    return net.head(flow, tape), flow, tape


# ------------------------------------------------------------------ selector

@dataclass
class RolloutInfo:
    y_full: np.ndarray
    y_steps: List[np.ndarray]
    f_steps: List[np.ndarray]
    keep_steps: List[np.ndarray]
    plan: List[GroupBatch]
    logits_steps: List[np.ndarray]


def rollout_result_to_go(images, labels, weights: WeightStore, nets: SelectorNets, strategy: str,
                         reward: RewardParams, rng=None, deterministic: bool = False,
                         noise: Optional[np.ndarray] = None, forced_actions=None,
                         max_steps: Optional[int] = None):
    """Result-to-Go rollouts for a batch.

    Every group starts at full width with all tokens. For each decided group
    in order, the selector sees the previous group's output, its decision is
    applied to that group only, and the network runs to the end to score the
    decision. Decisions persist for later steps.

    ``noise`` (B, steps, action_dim) fixes the Gaussian draws per step;
    ``forced_actions`` (same shape) bypasses the policy entirely.
    """
    rng = np.random.default_rng(rng)
    cfg = weights.config
    net = MaskedViT(weights)
    b = images.shape[0]
    steps = cfg.groups - 1 if max_steps is None else min(max_steps, cfg.groups - 1)
    adim = action_dim(cfg.group_size, strategy)
    if noise is None and not deterministic and forced_actions is None:
        noise = rng.standard_normal((b, cfg.groups - 1, adim))

    plan = [GroupBatch.full(cfg, b, strategy) for _ in range(cfg.groups)]
    flow, _ = net.start(images)
    flows = []
    for g in range(cfg.groups):
        flow = net.run_group(flow, g, plan[g])
        flows.append(flow)
    y_full = np.argmax(net.head(flow), axis=1)

    cols = {k: [] for k in ("states", "actions", "raw", "logp", "values", "rewards")}
    info = RolloutInfo(y_full, [], [], [], plan, [])
    for s in range(steps):
        g = s + 1
        prev = flows[g - 1]
        state = nets.state(prev) if nets is not None else state_from_flow(prev)
        value = nets.value(state) if nets is not None else np.zeros(b)
        if forced_actions is not None:
            raw = np.asarray(forced_actions, dtype=np.float64)[:, s]
            logp = np.zeros(b)
        else:
            mean, ls = nets.actor_forward(state)
            raw = mean.copy() if deterministic else mean + np.exp(ls) * noise[:, s]
            logp = gaussian_log_prob(raw, mean, ls)
        act = np.clip(raw, 0.0, 1.0)
        plan[g] = GroupBatch.from_actions(cfg, act, strategy)
        flow = flows[g - 1]
        for h in range(g, cfg.groups):
            flow = net.run_group(flow, h, plan[h])
            flows[h] = flow
        logits = net.head(flow)
        y = np.argmax(logits, axis=1)
        f = plan_macs(cfg, plan) / full_macs(cfg)
        keep = plan_keep_rate(cfg, plan)
        r = compute_reward(y, y_full, labels, f, keep, reward)
        for k, v in zip(cols, (state, act, raw, logp, value, r)):
            cols[k].append(v)
        info.y_steps.append(y)
        info.f_steps.append(f)
        info.keep_steps.append(keep)
        info.logits_steps.append(logits)
    st = {k: np.stack(v, axis=1) for k, v in cols.items()}
    term = np.zeros(steps, dtype=bool)
    if steps == cfg.groups - 1 and steps:
        term[-1] = True
    trajs = [Trajectory(st["states"][i], st["actions"][i], st["raw"][i], st["logp"][i],
                        st["values"][i], st["rewards"][i], term.copy()) for i in range(b)]
    return trajs, info


def train_selector(cfg: TrainConfig, data: Dataset, weights: WeightStore,
                   nets: Optional[SelectorNets] = None, rng=None, callback=None):
    """PPO on Result-to-Go rollouts over ``data`` with the backbone frozen.

    Returns (nets, curve) where curve rows are dicts with keys step,
    actor_loss, critic_loss, entropy, mean_reward, mean_f, mean_t_r.
    """
    rng = np.random.default_rng(cfg.seed + 1 if rng is None else rng)
    sc = cfg.selector
    if nets is None:
        nets = SelectorNets.for_config(cfg.model, cfg.strategy, sc.hidden, rng,
                                       init_log_std=sc.init_log_std, state_mode=sc.state,
                                       init_mean=sc.init_mean)
    trainer = PPOTrainer(nets, sc.ppo)
    bs = min(sc.batch_size, len(data))
    batches = _batches(len(data), bs, rng)
    per_update = bs * (cfg.model.groups - 1)
    done, curve = 0, []
    # never exceed the decision-step budget
    while done + per_update <= sc.steps:
        idx = next(batches)
        trajs, info = rollout_result_to_go(data.images[idx], data.labels[idx], weights, nets,
                                           cfg.strategy, sc.reward, rng)
        stats = trainer.update(trajs, rng)
        done += per_update
        row = {"step": done, "actor_loss": stats["actor_loss"], "critic_loss": stats["critic_loss"],
               "entropy": stats["entropy"],
               "mean_reward": float(np.mean([t.rewards.mean() for t in trajs])),
               "mean_f": float(np.mean(info.f_steps[-1])),
               "mean_t_r": float(np.mean(info.keep_steps[-1]))}
        curve.append(row)
        if callback is not None:
            callback(row)
    return nets, curve


# ------------------------------------------------------------------ policy execution

def run_policy(net: MaskedViT, images, nets: Optional[SelectorNets], strategy: str,
               mode: str = "per-sample", keep_cache: bool = False, forced_actions=None):
    """Deterministic (mean-action) inference through the whole network.

    ``mode="batch-avg"`` averages the mean actions over the batch at each
    group and applies one decoded decision to every sample. With ``nets``
    None and no forced actions the full network runs.
    """
    cfg = net.config
    b = images.shape[0]
    flow, tape = net.start(images, keep_cache)
    plan, actions = [], []
    for g in range(cfg.groups):
        if g == 0 or (nets is None and forced_actions is None):
            gdec = GroupBatch.full(cfg, b, strategy)
            act = None
        else:
            if forced_actions is not None:
                act = np.broadcast_to(np.asarray(forced_actions[g - 1], dtype=np.float64),
                                      (b, action_dim(cfg.group_size, strategy)))
            else:
                state = nets.state(flow)
                act, _ = nets.actor_forward(state)
            if mode == "batch-avg":
                act = np.broadcast_to(decision_average(act), act.shape)
            elif mode != "per-sample":
                raise ValueError(f"unknown decision mode {mode!r}")
            act = np.clip(act, 0.0, 1.0)
            gdec = GroupBatch.from_actions(cfg, act, strategy)
        flow = net.run_group(flow, g, gdec, tape)
        plan.append(gdec)
        actions.append(act)
    logits = net.head(flow, tape)
    return logits, plan, actions, tape


def finetune_backbone(cfg: TrainConfig, data: Dataset, weights: WeightStore, nets: SelectorNets,
                      rng=None, steps: Optional[int] = None):
    """Cross-entropy tuning of a copy of ``weights`` under the frozen selector."""
    rng = np.random.default_rng(cfg.seed + 2 if rng is None else rng)
    oc = cfg.finetune
    steps = oc.steps if steps is None else steps
    weights = weights.copy()
    if steps <= 0:
        return weights, []
    opt = Adam(weights.tensors, oc.lr, weight_decay=oc.weight_decay)
    net = MaskedViT(weights)
    batches = _batches(len(data), min(oc.batch_size, len(data)), rng)
    history = []
    for step in range(steps):
        idx = next(batches)
        logits, _, _, tape = run_policy(net, data.images[idx], nets, cfg.strategy, keep_cache=True)
        loss, dlogits = softmax_cross_entropy(logits, data.labels[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"fine-tuning diverged at step {step}")
        grads = net.backward(dlogits, tape)
        clip_grad_norm(grads, oc.grad_clip)
        opt.step(grads, warmup_cosine(step, steps, oc.lr, oc.min_lr, oc.warmup_steps, oc.warmup_lr))
        history.append(loss)
    return weights, history


# ------------------------------------------------------------------ evaluation

@dataclass
class EvalReport:
    accuracy: float
    mean_gmacs: float
    mean_flops_ratio: float
    keep_rate: float
    channel_hist: Dict[str, Dict[str, int]]
    per_sample_macs: np.ndarray = field(repr=False, default=None)
    per_sample_keep: np.ndarray = field(repr=False, default=None)
    correct: np.ndarray = field(repr=False, default=None)
    traces: List[dict] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        return {"accuracy": self.accuracy, "mean_gmacs": self.mean_gmacs,
                "mean_flops_ratio": self.mean_flops_ratio, "keep_rate": self.keep_rate,
                "channel_hist": self.channel_hist}


def _group_traces(cfg: ElasticConfig, plan: Sequence[GroupBatch], offset: int) -> List[dict]:
    from .elastic import block_macs
    b = plan[0].batch
    n = np.full(b, cfg.num_patches)
    rows = []
    for g, gdec in enumerate(plan):
        after = gdec.out_counts(n) if g > 0 else n
        for i in range(b):
            macs = 0
            for j in range(cfg.group_size):
                cnt = n[i] if j == 0 else after[i]
                macs += block_macs(int(cnt) + 1, int(gdec.phi[i, j]), int(gdec.hidden[i, j]),
                                   cfg.c_max, cfg.heads)
            d = {"sample_id": offset + i, "group": g, "phi": [int(v) for v in gdec.phi[i]],
                 "mlp_ratio": [float(h) / cfg.c_max for h in gdec.hidden[i]],
                 "tokens_before": int(n[i]) + 1, "tokens_after": int(after[i]) + 1,
                 "mac_count": macs}
            if gdec.strategy == "prune_then_merge":
                d.update(t=None, t_prune=float(gdec.t_prune[i]), t_merge=float(gdec.t_merge[i]))
            else:
                d["t"] = float(gdec.t[i])
            rows.append(d)
        n = after
    return rows


def evaluate(data: Dataset, weights: WeightStore, nets: Optional[SelectorNets], strategy: str,
             mode: str = "per-sample", batch_size: int = 64, trace: bool = False,
             forced_actions=None) -> EvalReport:
    cfg = weights.config
    net = MaskedViT(weights)
    macs, keeps, correct, traces = [], [], [], []
    hist: Dict[str, Dict[str, int]] = {}
    for lo in range(0, len(data), batch_size):
        imgs = data.images[lo: lo + batch_size]
        logits, plan, _, _ = run_policy(net, imgs, nets, strategy, mode, forced_actions=forced_actions)
        if not nets and forced_actions is None:
            plan = [GroupBatch.full(cfg, imgs.shape[0], strategy) for _ in range(cfg.groups)]
        correct.append(np.argmax(logits, axis=1) == data.labels[lo: lo + batch_size])
        macs.append(plan_macs(cfg, plan))
        keeps.append(plan_keep_rate(cfg, plan))
        for g, gdec in enumerate(plan):
            h = hist.setdefault(str(g), {})
            for v in gdec.phi.reshape(-1):
                h[str(int(v))] = h.get(str(int(v)), 0) + 1
        if trace:
            traces += _group_traces(cfg, plan, lo)
    macs = np.concatenate(macs)
    keeps = np.concatenate(keeps)
    correct = np.concatenate(correct)
    return EvalReport(float(correct.mean()), float(np.mean(macs / 1e9)),
                      float(np.mean(macs / full_macs(cfg))), float(keeps.mean()), hist,
                      macs, keeps, correct, traces)
