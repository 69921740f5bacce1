# %% [markdown]
# The toy pipeline end to end
#
# Pretrain the elastic network with random widths, train the selector with
# PPO on Result-to-Go rollouts, then evaluate per-sample and batch-averaged
# decisions. Short budgets keep this under a few minutes; configs/toy.json
# holds the full-size settings used with the command line tool.

# %%
import numpy as np

from adaptvit import TrainConfig, evaluate, pretrain_meta, train_selector
from adaptvit.harness import linear_probe_accuracy, load_or_generate

cfg = TrainConfig.from_dict({
    "pretrain": {"steps": 300},
    "selector": {"state": "cls_attn", "steps": 6000, "reward": {"a_f": 0.03, "a_t": 0.02},
                 "ppo": {"epochs_per_batch": 10, "minibatch": 32}},
})
train, test = load_or_generate(cfg.data, cfg.seed)
print("linear probe on pixels: %.3f" % linear_probe_accuracy(train, test))

# %%
weights, losses = pretrain_meta(cfg, train)
print("pretrain loss %.3f -> %.3f" % (losses[0], losses[-1]))
full = evaluate(test, weights, None, cfg.strategy)
print("full network: accuracy %.3f at %.4f GMACs" % (full.accuracy, full.mean_gmacs))

# %%
nets, curve = train_selector(cfg, train, weights)
print("last update:", {k: round(v, 3) for k, v in curve[-1].items()})

# %%
hard = test.complexity > 0
for mode in ("per-sample", "batch-avg"):
    r = evaluate(test, weights, nets, cfg.strategy, mode)
    print(f"{mode:10s} accuracy {r.accuracy:.3f}  MACs x{r.mean_flops_ratio:.2f}  "
          f"keep {r.keep_rate:.3f}  hard-sample MACs {np.mean(r.per_sample_macs[hard]) / 1e6:.2f}M  "
          f"easy-sample MACs {np.mean(r.per_sample_macs[~hard]) / 1e6:.2f}M")
