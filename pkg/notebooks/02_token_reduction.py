# %% [markdown]
# Pruning and merging tokens
#
# Tokens are sorted by how much the CLS token attends to them. Pruning keeps
# the top fraction; merging folds each dropped token into its most similar
# kept token by cosine similarity.

# %%
import numpy as np

from adaptvit.tokens import kept_count, merge_assignment, merge_tokens, prune_tokens, \
    sort_by_importance

rng = np.random.default_rng(1)
x = rng.standard_normal((9, 4))       # CLS + 8 tokens
scores = rng.uniform(size=8)
xs, order = sort_by_importance(x, scores)
print("importance order", order)

# %% half-up rounding, never fewer than one token
print([kept_count(8, t) for t in (0.0, 0.06, 0.5, 0.56, 1.0)])

# %%
kept = prune_tokens(xs, 0.5)
print("pruned to", kept.shape[0] - 1, "tokens")

# %% merging keeps the mass of the dropped rows
im, un = xs[1:5], xs[5:]
print("destinations", merge_assignment(im, un))
merged = merge_tokens(im, un)
print("column sums equal:", np.allclose(merged.sum(0), im.sum(0) + un.sum(0)))
