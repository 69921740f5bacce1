"""Acceptance criteria, one test each.

Every test prints a single ``criterion N: PASS|FAIL`` line with the measured
numbers, then asserts. Criteria 7 to 10 train models and take several
minutes; run this file alone with ``pytest tests/test_acceptance.py -s``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from adaptvit.batched import GroupBatch, MaskedViT
from adaptvit.cli import _datasets, run as cli_run
from adaptvit.container import load_weights
from adaptvit.decisions import full_action, min_action, plan_from_actions
from adaptvit.elastic import (ElasticConfig, WeightStore, block_formula, closed_form_uniform,
                              count_flops, forward_sample, max_arch, plan_archs, plan_token_counts)
from adaptvit.harness import (SelectorConfig, TrainConfig, evaluate, generate_synthetic,
                              load_or_generate, pretrain_meta, rollout_result_to_go,
                              train_selector)
from adaptvit.numerics import Adam, clip_grad_norm, finite_diff_check, softmax_cross_entropy
from adaptvit.selector import (PPOParams, RewardParams, SelectorNets, Trajectory, compute_gae,
                               gaussian_log_prob, ppo_loss)
from adaptvit.tokens import merge_assignment, merge_tokens

from reference import (TINY, batched_grad_error, brute_merge, dense_vit, gae_double_sum,
                       masked_vs_per_sample)

PRETRAIN_STEPS = 800


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {n}: {detail}"
    return emit


@pytest.fixture(scope="module")
def backbone():
    """Meta-network pretrained on the default two-population data."""
    cfg = TrainConfig.from_dict({"pretrain": {"steps": PRETRAIN_STEPS}})
    train, test = load_or_generate(cfg.data, cfg.seed)
    t0 = time.perf_counter()
    w, _ = pretrain_meta(cfg, train)
    return w, train, test, time.perf_counter() - t0


def _with(cfg_dict):
    base = TrainConfig().to_dict()
    for dotted, v in cfg_dict.items():
        node = base
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = v
    return TrainConfig.from_dict(base)


def _decided_widths(rep, n):
    """Per-sample mean attention width and keep rate over the decided groups."""
    phi, cnt = np.zeros(n), np.zeros(n)
    for row in rep.traces:
        if row["group"] > 0:
            phi[row["sample_id"]] += np.mean(row["phi"])
            cnt[row["sample_id"]] += 1
    return phi / cnt, rep.per_sample_keep


# ------------------------------------------------------------------ 1

def test_criterion_1_flops_anchor(report):
    t0 = time.perf_counter()
    deit = ElasticConfig(depth=12, heads=3, embed_choices=(192,), mlp_ratio_choices=(4,),
                         group_size=3, image_side=224, patch_side=16, in_chans=3,
                         num_classes=1000)
    anchor = count_flops(deit, [max_arch(deit)] * 12, [197] * 12).measured_total
    rel = abs(anchor / 1.20e9 - 1)
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(50):
        heads = int(rng.choice([1, 2, 4]))
        emb = tuple(sorted(set(int(e) * heads for e in rng.integers(1, 6, size=3))))
        cfg = ElasticConfig(depth=int(rng.choice([2, 4, 6])), group_size=2, heads=heads,
                            embed_choices=emb, mlp_ratio_choices=(1, 2, 4),
                            image_side=8, patch_side=int(rng.choice([2, 4])))
        acts = [rng.uniform(size=2 * 2 + 1) for _ in range(cfg.groups - 1)]
        plan = plan_from_actions(acts, cfg, "prune")
        res = forward_sample(WeightStore.init(cfg, rng), rng.standard_normal((8, 8)), plan)
        formula = sum(block_formula(n, a.phi, a.hidden(cfg.c_max), cfg.c_max)
                      for a, n in zip(plan_archs(cfg, plan), plan_token_counts(cfg, plan)))
        mismatches += res.mac_counter != formula
    dt = time.perf_counter() - t0
    ok = anchor == closed_form_uniform(197, 192, 12) and rel < 0.05 and mismatches == 0 and dt < 1
    report(1, ok, f"DeiT-T {anchor} MACs ({rel:.2%} from 1.20e9), "
                  f"{mismatches}/50 formula mismatches, {dt:.2f} s")


# ------------------------------------------------------------------ 2

def test_criterion_2_slicing_identity(report):
    t0 = time.perf_counter()
    cfg = ElasticConfig()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        w = WeightStore.init(cfg, rng)
        img = rng.standard_normal((8, 8))
        full = plan_from_actions([full_action(2, "prune")] * 2, cfg, "prune")
        got = forward_sample(w, img, full).logits
        ref = dense_vit(w.tensors, img, cfg.depth, cfg.heads, cfg.patch_side)
        worst = max(worst, float(np.max(np.abs(got - ref))))
    dt = time.perf_counter() - t0
    report(2, worst < 1e-10 and dt < 10, f"max|d| {worst:.2e} over 20 seeds, {dt:.2f} s")


# ------------------------------------------------------------------ 3

def test_criterion_3_masked_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    strategies = ("prune", "merge", "prune_then_merge")
    for trial in range(100):
        feature, mode = [("x", "sum"), ("k", "mean")][trial % 2]
        cfg = ElasticConfig(merge_feature=feature, merge_mode=mode)
        w = WeightStore.init(cfg, rng)
        imgs = rng.standard_normal((8, 8, 8))
        worst = max(worst, masked_vs_per_sample(w, imgs, strategies[trial % 3], rng,
                                                low_merge=trial % 4 < 2))
    dt = time.perf_counter() - t0
    report(3, worst < 1e-8 and dt < 30, f"max|d| {worst:.2e} over 100 batches of 8, {dt:.2f} s")


# ------------------------------------------------------------------ 4

def test_criterion_4_merge_oracle(report):
    rng = np.random.default_rng(4)
    idx_bad, worst = 0, 0.0
    for _ in range(1000):
        m, u, c = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 6)
        x_im, x_un = rng.standard_normal((m, c)), rng.standard_normal((u, c))
        ref, ref_idx = brute_merge(x_im, x_un)
        idx_bad += list(merge_assignment(x_im, x_un)) != ref_idx
        worst = max(worst, float(np.max(np.abs(merge_tokens(x_im, x_un) - ref))))
    report(4, idx_bad == 0 and worst < 1e-12,
           f"{idx_bad}/1000 index mismatches, max|d| {worst:.2e}")


# ------------------------------------------------------------------ 5

def test_criterion_5_gae_oracle(report):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        g, lam = rng.uniform(), rng.uniform()
        term = np.zeros(n, bool)
        term[-1] = bool(rng.integers(2))
        t = Trajectory(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n),
                       rng.standard_normal(n), rng.standard_normal(n), term,
                       next_value=float(rng.standard_normal()))
        adv, _ = compute_gae(t, PPOParams(discount=g, gae_lambda=lam))
        ref = gae_double_sum(t.rewards, t.values, t.next_value, term[-1], g, lam)
        worst = max(worst, float(np.max(np.abs(adv - ref))))
    # dyadic rewards and values keep every sum exact, so identities can be compared bit for bit
    t = Trajectory(np.zeros((6, 1)), np.zeros((6, 1)), np.zeros((6, 1)), np.zeros(6),
                   rng.integers(-8, 9, 6) / 8.0, rng.integers(-8, 9, 6) / 8.0,
                   np.r_[[False] * 5, True])
    zero = np.array_equal(compute_gae(t, PPOParams(discount=0.0, gae_lambda=0.5))[0],
                          t.rewards - t.values)
    mc = np.array([t.rewards[i:].sum() for i in range(6)])
    one = np.array_equal(compute_gae(t, PPOParams(discount=1.0, gae_lambda=1.0))[0],
                         mc - t.values)
    report(5, worst < 1e-12 and zero and one,
           f"max|d| {worst:.2e} over 1000 trajectories, gamma=0 {zero}, lambda=gamma=1 {one}")


# ------------------------------------------------------------------ 6

def test_criterion_6_gradient_suite(report):
    t0 = time.perf_counter()
    cfg = ElasticConfig(**TINY)
    net_err = max(batched_grad_error(cfg, s, seed=6, probes=40)
                  for s in ("prune", "merge", "prune_then_merge"))
    rng = np.random.default_rng(6)
    nets = SelectorNets(6, 5, hidden=8, rng=rng)
    for v in nets.params.values():
        v += rng.normal(0, 0.3, v.shape)
    s = rng.standard_normal((12, 6))
    mean, ls = nets.actor_forward(s)
    raw = mean + np.exp(ls) * rng.standard_normal(mean.shape)
    old = gaussian_log_prob(raw, mean, ls) + rng.normal(0, 0.3, 12)
    adv, ret = rng.standard_normal(12), rng.standard_normal(12)
    p = PPOParams(entropy_coef=0.01)
    _, grads = ppo_loss(nets, s, raw, old, adv, ret, p)
    ppo_err = finite_diff_check(lambda q: ppo_loss(nets, s, raw, old, adv, ret, p)[0]["total"],
                                nets.params, grads, h=1e-6)
    dt = time.perf_counter() - t0
    report(6, net_err < 1e-4 and ppo_err < 1e-4 and dt < 60,
           f"network rel err {net_err:.1e}, PPO loss rel err {ppo_err:.1e}, {dt:.1f} s")


# ------------------------------------------------------------------ 7

def _mean_reward(images, labels, w, nets, strategy, reward, forced=None):
    kw = {"deterministic": True} if forced is None else {
        "forced_actions": np.broadcast_to(forced, (len(labels), 2, len(forced)))}
    trajs, _ = rollout_result_to_go(images, labels, w, nets, strategy, reward, **kw)
    return float(np.mean([t.rewards.mean() for t in trajs]))


def test_criterion_7_all_easy_convergence(report, backbone):
    w, _, _, _ = backbone
    cfg = _with({"data.hard_fraction": 0.0, "selector.state": "cls_attn",
                 "selector.steps": 20000, "selector.reward.a_f": 1.0,
                 "selector.reward.a_t": 0.05, "selector.ppo.actor_lr": 5e-4,
                 "selector.ppo.epochs_per_batch": 10, "selector.ppo.minibatch": 32})
    train, test = load_or_generate(cfg.data, 7)
    t0 = time.perf_counter()
    nets, curve = train_selector(cfg, train, w)
    rep = evaluate(test, w, nets, cfg.strategy, trace=True)
    dt = time.perf_counter() - t0
    at_min = {}
    for row in rep.traces:
        if row["group"] > 0:
            m = min(row["phi"]) == max(row["phi"]) == cfg.model.embed_choices[0] and \
                max(row["mlp_ratio"]) == cfg.model.mlp_ratio_choices[0]
            at_min[row["sample_id"]] = at_min.get(row["sample_id"], True) and m
    share = float(np.mean(list(at_min.values())))
    rw = cfg.selector.reward
    args = (test.images, test.labels, w, nets, cfg.strategy, rw)
    r_pol = _mean_reward(*args)
    r_max = _mean_reward(*args, forced=full_action(2, "prune"))
    r_min = _mean_reward(*args, forced=min_action(2, "prune", keep_tokens=True))
    ok = (curve[-1]["step"] <= 20000 and share > 0.9 and r_pol > r_max and r_pol > r_min
          and dt < 600)
    report(7, ok, f"min-width share {share:.3f}, reward {r_pol:.4f} vs always-max {r_max:.4f} "
                  f"and always-min-width {r_min:.4f}, {curve[-1]['step']} steps, {dt:.0f} s")


# ------------------------------------------------------------------ 8

def constructed_backbone(w, data, steps=300, seed=8):
    """Tune ``w`` so reduced later groups fail on hard samples only.

    Each step adds the cross-entropy of the full network on true labels and
    of a randomly reduced network (every decided entry below 0.8) on labels
    that are correct for easy samples and shifted by one class for hard ones.
    The result is an environment whose optimal policy is known: maximum
    capacity for hard samples and minimum for easy ones.
    """
    w = w.copy()
    cfg = w.config
    rng = np.random.default_rng(seed)
    net = MaskedViT(w)
    opt = Adam(w.tensors, 5e-4)
    dim = 2 * cfg.group_size + 1
    hard_all = data.complexity > 0
    for _ in range(steps):
        idx = rng.choice(len(data), 64, replace=False)
        b, y, hard = len(idx), data.labels[idx], hard_all[idx]
        full = [GroupBatch.full(cfg, b) for _ in range(cfg.groups)]
        reduced = [GroupBatch.full(cfg, b)] + [
            GroupBatch.from_actions(cfg, rng.uniform(0, 0.8, (b, dim)), "prune")
            for _ in range(cfg.groups - 1)]
        grads = None
        for plan, target in ((full, y), (reduced, np.where(hard, (y + 1) % cfg.num_classes, y))):
            logits, _, tape = net.forward(data.images[idx], plan, keep_cache=True)
            g = net.backward(softmax_cross_entropy(logits, target)[1], tape)
            grads = g if grads is None else {k: grads[k] + g[k] for k in g}
        clip_grad_norm(grads, 1.0)
        opt.step(grads, 5e-4)
    return w


def test_criterion_8_sample_adaptivity(report, backbone):
    w0, train, test, t_pre = backbone
    t0 = time.perf_counter()
    w = constructed_backbone(w0, train)
    cfg = _with({"selector.state": "cls_attn", "selector.steps": 60000,
                 "selector.reward.a_f": 0.3, "selector.reward.a_t": 0.05,
                 "selector.ppo.actor_lr": 5e-4, "selector.ppo.epochs_per_batch": 10,
                 "selector.ppo.minibatch": 32})
    nets, _ = train_selector(cfg, train, w)
    rep = evaluate(test, w, nets, cfg.strategy, trace=True)
    dt = time.perf_counter() - t0 + t_pre
    phi, keep = _decided_widths(rep, len(test))
    hard = test.complexity > 0
    ph, pe = phi[hard].mean(), phi[~hard].mean()
    kh, ke = keep[hard].mean(), keep[~hard].mean()
    ok = ph >= 1.1 * pe and kh >= 1.1 * ke and dt < 900
    report(8, ok, f"width hard {ph:.2f} vs easy {pe:.2f} (+{ph / pe - 1:.1%}), keep hard "
                  f"{kh:.3f} vs easy {ke:.3f}, {dt:.0f} s incl. pretraining")


# ------------------------------------------------------------------ 9

def test_criterion_9_token_penalty_ablation(report, backbone):
    w, train, test, _ = backbone
    out = {}
    for a_t in (0.0, 0.2):
        cfg = _with({"selector.state": "cls_attn", "selector.init_mean": 0.97,
                     "selector.reward.a_f": 0.0, "selector.reward.a_t": a_t})
        nets, _ = train_selector(cfg, train, w)
        out[a_t] = evaluate(test, w, nets, cfg.strategy)
    k0, k2 = out[0.0].keep_rate, out[0.2].keep_rate
    cost = out[0.0].accuracy - out[0.2].accuracy
    ok = k0 > 0.9 and k0 - k2 >= 0.2 and cost <= 0.02
    report(9, ok, f"keep {k0:.3f} at a_t=0, {k2:.3f} at a_t=0.2, accuracy cost {cost * 100:.2f} pts")


# ------------------------------------------------------------------ 10

def _pipeline(out, config):
    common = ["--config", str(config), "--out", str(out), "--data", str(out)]
    for cmd in ("gen-data", "pretrain", "train-selector", "finetune"):
        assert cli_run([cmd] + common) == 0
    res = {}
    for mode in ("per-sample", "batch-avg"):
        assert cli_run(["eval"] + common + ["--mode", mode]) == 0
        res[mode] = json.loads((out / "eval.json").read_text())
    return res


def test_criterion_10_end_to_end(report, tmp_path, capsys):
    config = Path(__file__).resolve().parents[1] / "configs" / "toy.json"
    t0 = time.perf_counter()
    res = _pipeline(tmp_path / "a", config)
    dt = time.perf_counter() - t0
    cfg = TrainConfig.from_dict(json.loads(config.read_text()))
    _, test = _datasets(cfg, str(tmp_path / "a"))
    meta = load_weights(tmp_path / "a" / "meta.prnc")[0]
    full = evaluate(test, meta, None, cfg.strategy)
    _pipeline(tmp_path / "b", config)
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("meta.prnc", "selector.prnc", "finetuned.prnc", "eval.json"))
    ps, ba = res["per-sample"]["selector"], res["batch-avg"]["selector"]
    reduction = 1 - ps["mean_gmacs"] / full.mean_gmacs
    drop = full.accuracy - ps["accuracy"]
    gap = abs(ps["accuracy"] - ba["accuracy"])
    ok = (full.accuracy >= 0.9 and reduction >= 0.3 and drop <= 0.02 and gap <= 0.02
          and same and dt < 1800)
    capsys.readouterr()
    report(10, ok, f"pretrain acc {full.accuracy:.3f}, MAC reduction {reduction:.1%}, "
                   f"accuracy drop {drop * 100:.2f} pts, mode gap {gap * 100:.2f} pts, "
                   f"deterministic {same}, {dt:.0f} s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
