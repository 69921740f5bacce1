"""Plain per-sample ViT written without any of the package's slicing helpers.

Used as an independent oracle for the full-width elastic network.
"""

import math

import numpy as np
from scipy.special import erf


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def dense_vit(tensors, image, depth, heads, patch):
    side = image.shape[0]
    rows = []
    for i in range(0, side, patch):
        for j in range(0, side, patch):
            rows.append(image[i:i + patch, j:j + patch].reshape(-1))
    x = np.array(rows) @ tensors["patch_embed"].T
    x = np.vstack([tensors["cls_token"], x]) + tensors["pos_embed"]
    for blk in range(depth):
        w = {k.split(".", 2)[2]: v for k, v in tensors.items() if k.startswith(f"blocks.{blk}.")}
        h = _ln(x, w["ln1.scale"], w["ln1.shift"])
        q, k, v = h @ w["wq"].T, h @ w["wk"].T, h @ w["wv"].T
        d = q.shape[1] // heads
        heads_out = []
        for hh in range(heads):
            s = slice(hh * d, (hh + 1) * d)
            heads_out.append(_softmax(q[:, s] @ k[:, s].T / math.sqrt(d)) @ v[:, s])
        x = x + np.hstack(heads_out) @ w["wo"].T
        u = _ln(x, w["ln2.scale"], w["ln2.shift"]) @ w["w_up"].T
        x = x + (0.5 * u * (1 + erf(u / math.sqrt(2)))) @ w["w_down"].T
    return _ln(x[0], tensors["norm.scale"], tensors["norm.shift"]) @ tensors["head"].T


def brute_merge(x_im, x_un, mode="sum"):
    """Loop-by-loop argmax-cosine merge, first index on ties."""
    out = [row.copy() for row in x_im]
    counts = [1] * len(x_im)
    idx = []
    for u in x_un:
        best, arg = -np.inf, 0
        for j, m in enumerate(x_im):
            nu, nm = np.sqrt(u @ u), np.sqrt(m @ m)
            s = 0.0 if nu == 0 or nm == 0 else (u @ m) / (nu * nm)
            if s > best:
                best, arg = s, j
        out[arg] = out[arg] + u
        counts[arg] += 1
        idx.append(arg)
    out = np.array(out)
    if mode == "mean":
        out = out / np.array(counts)[:, None]
    return out, idx


def gae_double_sum(rewards, values, next_value, terminal_last, gamma, lam):
    """A_t = sum_l (gamma lam)^l delta_{t+l}, written as an explicit double sum."""
    n = len(rewards)
    v_next = list(values[1:]) + [0.0 if terminal_last else next_value]
    deltas = [rewards[t] + gamma * v_next[t] - values[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** l * deltas[t + l] for l in range(n - t))
                     for t in range(n)])


def masked_vs_per_sample(weights, images, strategy, rng, low_merge=False):
    """Max |logit difference| between the batched masked path and per-sample runs."""
    from adaptvit.batched import GroupBatch, MaskedViT
    from adaptvit.decisions import action_dim, plan_from_actions
    from adaptvit.elastic import forward_sample

    cfg = weights.config
    b = images.shape[0]
    dim = action_dim(cfg.group_size, strategy)
    acts = []
    for _ in range(cfg.groups - 1):
        a = rng.uniform(size=(b, dim))
        if low_merge:
            a[:, 2 * cfg.group_size:] *= 0.5
        acts.append(a)
    plan = [GroupBatch.full(cfg, b, strategy)] + [GroupBatch.from_actions(cfg, a, strategy) for a in acts]
    logits, _, _ = MaskedViT(weights).forward(images, plan)
    ref = np.array([forward_sample(weights, images[i], plan_from_actions([a[i] for a in acts], cfg,
                                                                         strategy)).logits
                    for i in range(b)])
    return float(np.max(np.abs(logits - ref)))


def batched_grad_error(cfg, strategy, seed, probes=6):
    """Worst relative error of MaskedViT.backward against central differences."""
    from adaptvit.batched import GroupBatch, MaskedViT
    from adaptvit.decisions import action_dim
    from adaptvit.elastic import WeightStore
    from adaptvit.numerics import softmax_cross_entropy

    rng = np.random.default_rng(seed)
    w = WeightStore.init(cfg, rng)
    for k in w.tensors:
        w.tensors[k] += rng.normal(0, 0.1, w.tensors[k].shape)
    b = 3
    imgs = rng.normal(size=(b, cfg.image_side, cfg.image_side))
    y = np.arange(b) % cfg.num_classes
    acts = [rng.uniform(size=(b, action_dim(cfg.group_size, strategy))) for _ in range(cfg.groups - 1)]
    plan = [GroupBatch.full(cfg, b, strategy)] + [GroupBatch.from_actions(cfg, a, strategy) for a in acts]
    net = MaskedViT(w)

    def loss():
        return softmax_cross_entropy(net.forward(imgs, plan)[0], y)[0]

    lg, _, tape = net.forward(imgs, plan, keep_cache=True)
    grads = net.backward(softmax_cross_entropy(lg, y)[1], tape)
    worst, h = 0.0, 1e-5
    for name, p in w.tensors.items():
        f, gf = p.reshape(-1), grads[name].reshape(-1)
        for i in rng.choice(f.size, min(f.size, probes), replace=False):
            old = f[i]
            f[i] = old + h
            up = loss()
            f[i] = old - h
            dn = loss()
            f[i] = old
            num = (up - dn) / (2 * h)
            worst = max(worst, abs(num - gf[i]) / max(1.0, abs(num)))
    return worst


TINY = dict(depth=4, group_size=2, embed_choices=(8, 16), mlp_ratio_choices=(1, 2),
            image_side=4, patch_side=2, heads=2)
