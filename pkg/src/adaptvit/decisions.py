"""Per-group decisions: continuous actions and their decoded discrete form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .tokens import TokenDecision, round_half_up


def action_dim(group_size: int, strategy: str) -> int:
    """K MHSA slots + K MLP slots + one token ratio (two for prune_then_merge)."""
    return 2 * group_size + (2 if strategy == "prune_then_merge" else 1)


def decode_index(s: float, choices: int) -> int:
    """Index of an architectural candidate: min(round(s * E), E - 1)."""
    s = min(max(float(s), 0.0), 1.0)
    return min(round_half_up(s * choices), choices - 1)


@dataclass(frozen=True)
class GroupDecision:
    phi_idx: Tuple[int, ...]
    mlp_idx: Tuple[int, ...]
    token: TokenDecision = field(default_factory=TokenDecision)
    action: Tuple[float, ...] = ()

    def archs(self, config) -> list:
        from .elastic import BlockArch
        return [BlockArch(config.embed_choices[p], config.mlp_ratio_choices[r])
                for p, r in zip(self.phi_idx, self.mlp_idx)]

    @classmethod
    def full(cls, config, strategy: str = "prune") -> "GroupDecision":
        k = config.group_size
        return cls((len(config.embed_choices) - 1,) * k,
                   (len(config.mlp_ratio_choices) - 1,) * k,
                   TokenDecision(strategy))


def decode_action(action, config, strategy: str) -> GroupDecision:
    """Map an action vector in [0, 1]^d to a :class:`GroupDecision`.

    Layout: ``[s_mhsa_0..K-1, s_mlp_0..K-1, t]`` or, for prune_then_merge,
    ``[..., t_prune, t_merge]``.
    """
    a = np.clip(np.asarray(action, dtype=np.float64), 0.0, 1.0)
    k = config.group_size
    if a.shape[0] != action_dim(k, strategy):
        raise ValueError(f"action has {a.shape[0]} entries, expected {action_dim(k, strategy)}")
    e_mhsa = len(config.embed_choices)
    e_mlp = len(config.mlp_ratio_choices)
    phi = tuple(decode_index(s, e_mhsa) for s in a[:k])
    mlp = tuple(decode_index(s, e_mlp) for s in a[k:2 * k])
    if strategy == "prune_then_merge":
        tok = TokenDecision(strategy, t_prune=a[2 * k], t_merge=a[2 * k + 1])
    else:
        tok = TokenDecision(strategy, t=a[2 * k])
    return GroupDecision(phi, mlp, tok, tuple(float(v) for v in a))


def full_action(group_size: int, strategy: str) -> np.ndarray:
    return np.ones(action_dim(group_size, strategy))


def min_action(group_size: int, strategy: str, keep_tokens: bool = True) -> np.ndarray:
    a = np.zeros(action_dim(group_size, strategy))
    if keep_tokens:
        a[2 * group_size:] = 1.0
    return a


def plan_from_actions(actions: List[np.ndarray], config, strategy: str) -> List[GroupDecision]:
    """Decisions for every group given actions for groups 2..L."""
    plan = [GroupDecision.full(config, strategy)]
    plan += [decode_action(a, config, strategy) for a in actions]
    return plan
