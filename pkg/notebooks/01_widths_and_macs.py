# %% [markdown]
# Width slicing and MAC accounting
#
# Every block owns full-size weights. A narrower block uses the first phi
# rows of Wq, Wk, Wv and the first phi input columns of Wo, so all widths share
# one set of parameters.

# %%
import numpy as np

from adaptvit import ElasticConfig, WeightStore, count_flops, forward_sample, plan_from_actions
from adaptvit.decisions import full_action, min_action
from adaptvit.elastic import BlockArch, closed_form_uniform, max_arch

# %% DeiT-Tiny at 224px: 196 patches plus CLS, 192 channels, 12 blocks
deit = ElasticConfig(depth=12, heads=3, embed_choices=(192,), mlp_ratio_choices=(4,),
                     group_size=3, image_side=224, patch_side=16, in_chans=3, num_classes=1000)
rep = count_flops(deit, [max_arch(deit)] * 12, [197] * 12)
print("DeiT-T blocks:", rep.measured_total, "MACs =", round(rep.gmacs, 4), "G")
print("closed form  :", closed_form_uniform(197, 192, 12))

# %% the toy model: three groups of two blocks, widths 16/32/48
cfg = ElasticConfig()
print("groups", cfg.groups, "tokens", cfg.tokens, "widths", cfg.embed_choices)
for phi in cfg.embed_choices:
    for r in cfg.mlp_ratio_choices:
        a = BlockArch(phi, r)
        print(f"  phi={phi:2d} ratio={r:.0f}  block MACs at 17 tokens:",
              count_flops(ElasticConfig(depth=2, group_size=2), [a, a], [17, 17]).per_block[0])

# %% one image under the widest and the smallest plan
rng = np.random.default_rng(0)
w = WeightStore.init(cfg, rng)
img = rng.standard_normal((8, 8))
for name, act in (("full", full_action(2, "prune")), ("min", min_action(2, "prune", False))):
    res = forward_sample(w, img, plan_from_actions([act] * 2, cfg, "prune"))
    print(name, "MACs", res.mac_counter, "ratio %.3f" % res.flops.flops_ratio,
          "tokens per group", [t.tokens_after for t in res.traces])
