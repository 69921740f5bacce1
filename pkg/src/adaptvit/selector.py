"""PPO actor-critic that picks per-group widths and token keep ratios.

The policy is a diagonal Gaussian: the actor's output goes through a
logistic sigmoid to give the mean in [0, 1], the log-std is a learned
state-independent vector clamped to [-5, 1]. Samples are clamped to [0, 1]
before decoding; log-probabilities use the unclamped sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .decisions import action_dim as _action_dim
from .numerics import Adam, clip_grad_norm, orthogonal_init

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class PPOParams:
    discount: float = 0.9
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.0
    actor_lr: float = 1e-4
    critic_lr: float = 5e-3
    grad_clip_norm: float = 0.5
    epochs_per_batch: int = 4
    minibatch: int = 64

    def __post_init__(self):
        if not (0.0 <= self.discount <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("discount and gae_lambda must lie in [0, 1]")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")


@dataclass
class RewardParams:
    a_f: float = 0.03
    a_t: float = 0.2
    smooth: bool = True

    def __post_init__(self):
        if self.a_f < 0 or self.a_t < 0:
            raise ValueError("penalty coefficients must be nonnegative")


@dataclass
class Trajectory:
    """One sample's decision sequence (one step per decided group)."""

    states: np.ndarray        # (L, state_dim)
    actions: np.ndarray       # (L, action_dim) clamped to [0, 1]
    raw_actions: np.ndarray   # (L, action_dim) pre-clamp Gaussian samples
    log_probs: np.ndarray     # (L,)
    values: np.ndarray        # (L,)
    rewards: np.ndarray       # (L,)
    terminal: np.ndarray      # (L,) bool
    next_value: float = 0.0

    def __len__(self) -> int:
        return self.rewards.shape[0]


# ------------------------------------------------------------------ networks

def _mlp_init(prefix: str, sizes: Sequence[int], out_gain: float, rng) -> Dict[str, np.ndarray]:
    p = {}
    for i in range(len(sizes) - 1):
        gain = out_gain if i == len(sizes) - 2 else math.sqrt(2.0)
        p[f"{prefix}.w{i}"] = orthogonal_init(sizes[i + 1], sizes[i], gain, rng)
        p[f"{prefix}.b{i}"] = np.zeros(sizes[i + 1])
    return p


def _mlp_fwd(p, prefix, x, layers=3):
    hs = [x]
    for i in range(layers):
        z = hs[-1] @ p[f"{prefix}.w{i}"].T + p[f"{prefix}.b{i}"]
        hs.append(np.tanh(z) if i < layers - 1 else z)
    return hs[-1], hs


def _mlp_bwd(p, prefix, dout, hs, layers=3):
    g = {}
    d = dout
    for i in range(layers - 1, -1, -1):
        g[f"{prefix}.w{i}"] = d.T @ hs[i]
        g[f"{prefix}.b{i}"] = d.sum(axis=0)
        if i > 0:
            d = (d @ p[f"{prefix}.w{i}"]) * (1.0 - hs[i] ** 2)
    return g


class SelectorNets:
    """Actor and critic, each three fully connected layers."""

    def __init__(self, state_dim: int, action_dim: int, hidden: int = 256, rng=None,
                 init_log_std: float = -1.0, state_mode: str = "k_mean", init_mean: float = 0.5):
        if state_mode not in STATE_MODES:
            raise ValueError(f"unknown state mode {state_mode!r}")
        if not 0.0 < init_mean < 1.0:
            raise ValueError("init_mean must lie in (0, 1)")
        rng = np.random.default_rng(rng)
        self.state_dim, self.action_dim, self.hidden = state_dim, action_dim, hidden
        self.state_mode = state_mode
        self.actor = _mlp_init("actor", [state_dim, hidden, hidden, action_dim], 0.01, rng)
        # output bias sets the initial policy mean; 0.5 is the plain zero bias
        self.actor["actor.b2"][:] = math.log(init_mean / (1.0 - init_mean))
        self.actor["actor.log_std"] = np.full(action_dim, float(init_log_std))
        self.critic = _mlp_init("critic", [state_dim, hidden, hidden, 1], 1.0, rng)

    @classmethod
    def for_config(cls, config, strategy: str, hidden: int = 256, rng=None, **kw) -> "SelectorNets":
        return cls(config.tokens, _action_dim(config.group_size, strategy), hidden, rng, **kw)

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {**self.actor, **self.critic}

    def log_std(self) -> np.ndarray:
        return np.clip(self.actor["actor.log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def actor_forward(self, states: np.ndarray):
        """(mean in [0, 1], log-std) for a (B, state_dim) batch."""
        z, _ = _mlp_fwd(self.actor, "actor", np.atleast_2d(states))
        return _sigmoid(z), np.broadcast_to(self.log_std(), z.shape)

    def state(self, flow) -> np.ndarray:
        return state_from_flow(flow, self.state_mode)

    def value(self, states: np.ndarray) -> np.ndarray:
        v, _ = _mlp_fwd(self.critic, "critic", np.atleast_2d(states))
        return v[:, 0]

    def copy(self) -> "SelectorNets":
        other = SelectorNets.__new__(SelectorNets)
        other.state_dim, other.action_dim, other.hidden = self.state_dim, self.action_dim, self.hidden
        other.state_mode = self.state_mode
        other.actor = {k: v.copy() for k, v in self.actor.items()}
        other.critic = {k: v.copy() for k, v in self.critic.items()}
        return other


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ------------------------------------------------------------------ policy

def gaussian_log_prob(raw, mean, log_std) -> np.ndarray:
    z = (raw - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    return float(np.sum(0.5 + 0.5 * _LOG_2PI + log_std))


def sample_action(mean, log_std, rng, deterministic: bool = False):
    """Gaussian draw around ``mean``; returns (clamped, raw, log_prob)."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.broadcast_to(log_std, mean.shape)
    raw = mean.copy() if deterministic else mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return np.clip(raw, 0.0, 1.0), raw, gaussian_log_prob(raw, mean, log_std)


# ------------------------------------------------------------------ state & reward

def build_state(keys: np.ndarray, state_dim: int) -> np.ndarray:
    """Channel mean of each row of a (tokens, phi) key matrix, zero-padded."""
    keys = np.asarray(keys, dtype=np.float64)
    out = np.zeros(state_dim)
    out[: keys.shape[0]] = keys.mean(axis=1)
    return out


def build_state_batch(keys: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Batched :func:`build_state` from masked (B, T, C) keys and widths (B,)."""
    return keys.sum(axis=2) / np.asarray(phi, dtype=np.float64)[:, None]


def build_state_attn(attn_cls: np.ndarray, state_dim: int) -> np.ndarray:
    """CLS attention row with the non-CLS entries sorted in descending order.

    Sorting makes the state independent of where evidence sits in the image.
    Accepts one row (T,) or a batch (B, T); dead slots must hold zeros.
    """
    a = np.atleast_2d(np.asarray(attn_cls, dtype=np.float64))
    out = np.zeros((a.shape[0], state_dim))
    out[:, 0] = a[:, 0]
    out[:, 1: a.shape[1]] = -np.sort(-a[:, 1:], axis=1)
    return out if np.ndim(attn_cls) == 2 else out[0]


STATE_MODES = ("k_mean", "cls_attn")


def state_from_flow(flow, mode: str = "k_mean") -> np.ndarray:
    """Selector input for every sample of a batched :class:`~adaptvit.batched.Flow`."""
    if mode == "k_mean":
        return build_state_batch(flow.keys, flow.phi_last)
    if mode == "cls_attn":
        return build_state_attn(flow.attn_cls, flow.attn_cls.shape[1])
    raise ValueError(f"unknown state mode {mode!r}")


def compute_reward(y, y_t, label, f, t_r, params: RewardParams):
    """Accuracy reward minus FLOPs-ratio and token-retention penalties.

    Smooth mode grants full accuracy reward when the adaptive prediction ``y``
    matches the full network's ``y_t``; otherwise, and in raw mode, the
    accuracy reward is the ground-truth hit indicator.
    """
    y, y_t, label = np.asarray(y), np.asarray(y_t), np.asarray(label)
    hit = (y == label).astype(np.float64)
    r_acc = np.where(y == y_t, 1.0, hit) if params.smooth else hit
    r = r_acc - params.a_f * np.asarray(f, dtype=np.float64) - params.a_t * np.asarray(t_r, dtype=np.float64)
    return r if r.ndim else float(r)


# ------------------------------------------------------------------ GAE

def compute_gae(traj: Trajectory, params: PPOParams):
    """Advantages and value targets (advantage + value) for one trajectory."""
    g, lam = params.discount, params.gae_lambda
    n = len(traj)
    adv = np.zeros(n)
    nxt_v, nxt_a = traj.next_value, 0.0
    for i in range(n - 1, -1, -1):
        live = 0.0 if traj.terminal[i] else 1.0
        delta = traj.rewards[i] + g * nxt_v * live - traj.values[i]
        nxt_a = delta + g * lam * live * nxt_a
        adv[i] = nxt_a
        nxt_v = traj.values[i]
    return adv, adv + traj.values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    if std < 1e-12:
        return adv - adv.mean()
    return (adv - adv.mean()) / std


# ------------------------------------------------------------------ loss

def ppo_loss(nets: SelectorNets, states, raw_actions, old_log_probs, advantages, returns,
             params: PPOParams):
    """Clipped-surrogate actor loss, entropy bonus and value loss with gradients.

    Returns (stats dict, grads dict keyed like ``nets.params``).
    """
    n = states.shape[0]
    z, hs_a = _mlp_fwd(nets.actor, "actor", states)
    mean = _sigmoid(z)
    raw_ls = nets.actor["actor.log_std"]
    ls = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * ls)
    diff = raw_actions - mean
    logp = np.sum(-0.5 * diff * diff * inv_var - ls - 0.5 * _LOG_2PI, axis=1)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - params.clip_eps, 1.0 + params.clip_eps)
    s1, s2 = ratio * advantages, clipped * advantages
    use_unclipped = s1 <= s2
    surrogate = np.where(use_unclipped, s1, s2)
    entropy = gaussian_entropy(ls)
    actor_loss = -surrogate.mean() - params.entropy_coef * entropy

    v, hs_c = _mlp_fwd(nets.critic, "critic", states)
    err = v[:, 0] - returns
    critic_loss = float(np.mean(err * err))

    dlogp = np.where(use_unclipped, -advantages * ratio / n, 0.0)
    dmean = dlogp[:, None] * diff * inv_var
    dz = dmean * mean * (1.0 - mean)
    grads = _mlp_bwd(nets.actor, "actor", dz, hs_a)
    dls = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - params.entropy_coef
    inside = (raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX)
    grads["actor.log_std"] = np.where(inside, dls, 0.0)
    grads.update(_mlp_bwd(nets.critic, "critic", (2.0 * err / n)[:, None], hs_c))

    total = actor_loss + critic_loss
    stats = {"actor_loss": float(actor_loss), "critic_loss": critic_loss, "entropy": entropy,
             "total": float(total), "clip_frac": float(np.mean(~use_unclipped)),
             "approx_kl": float(np.mean(old_log_probs - logp))}
    return stats, grads


class PPOTrainer:
    """Holds optimizer state across :meth:`update` calls."""

    def __init__(self, nets: SelectorNets, params: PPOParams):
        self.nets, self.params = nets, params
        self.actor_opt = Adam(nets.actor, params.actor_lr, eps=1e-5)
        self.critic_opt = Adam(nets.critic, params.critic_lr, eps=1e-5)

    def update(self, trajs: Sequence[Trajectory], rng) -> Dict[str, float]:
        """Several epochs of shuffled-minibatch PPO over a batch of trajectories."""
        p = self.params
        advs, rets = zip(*(compute_gae(t, p) for t in trajs))
        states = np.concatenate([t.states for t in trajs])
        raw = np.concatenate([t.raw_actions for t in trajs])
        old = np.concatenate([t.log_probs for t in trajs])
        adv = normalize_advantages(np.concatenate(advs))
        ret = np.concatenate(rets)
        n = states.shape[0]
        stats: Dict[str, List[float]] = {}
        for _ in range(p.epochs_per_batch):
            order = rng.permutation(n)
            for lo in range(0, n, p.minibatch):
                idx = order[lo: lo + p.minibatch]
                s, g = ppo_loss(self.nets, states[idx], raw[idx], old[idx], adv[idx], ret[idx], p)
                if not math.isfinite(s["total"]):
                    raise FloatingPointError(f"non-finite PPO loss: {s}")
                ga = {k: v for k, v in g.items() if k.startswith("actor.")}
                gc = {k: v for k, v in g.items() if k.startswith("critic.")}
                clip_grad_norm(ga, p.grad_clip_norm)
                clip_grad_norm(gc, p.grad_clip_norm)
                self.actor_opt.step(ga)
                self.critic_opt.step(gc)
                for k, v in s.items():
                    stats.setdefault(k, []).append(v)
        return {k: float(np.mean(v)) for k, v in stats.items()}
