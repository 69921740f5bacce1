"""Sample-adaptive elastic vision transformers in numpy.

A width-elastic ViT whose blocks run on prefix slices of shared weights, token
pruning/merging between block groups, and a PPO selector that picks widths and
token keep ratios per sample from the previous group's output.
"""

from .batched import GroupBatch, MaskedViT, flops_ratio, plan_keep_rate, plan_macs
from .decisions import GroupDecision, action_dim, decode_action, decode_index, plan_from_actions
from .elastic import (BlockArch, ConfigError, ElasticConfig, FlopsReport, WeightStore,
                      count_flops, forward_sample, full_macs, model_forward, sample_random_arch)
from .harness import (Dataset, DatasetSpec, EvalReport, TrainConfig, evaluate, finetune_backbone,
                      generate_synthetic, pretrain_meta, rollout_result_to_go, train_selector)
from .selector import (PPOParams, PPOTrainer, RewardParams, SelectorNets, Trajectory,
                       compute_gae, compute_reward)
from .tokens import TokenDecision, merge_tokens, prune_tokens, reduce_tokens

__version__ = "0.1.0"
