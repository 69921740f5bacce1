import numpy as np
import pytest
from hypothesis import given, strategies as st

from adaptvit.numerics import layer_norm
from adaptvit.tokens import (TokenDecision, build_masks, decision_average, kept_count,
                             masked_layer_norm, masked_merge, masked_merge_assignment, merge_tokens,
                             prune_then_merge, prune_tokens, reduce_tokens, round_half_up,
                             sort_by_importance, split_tokens)

from reference import brute_merge


def test_round_half_up_frozen():
    assert [round_half_up(v) for v in (0.5, 1.5, 2.5, 2.4999, 10 * 0.25)] == [1, 2, 3, 2, 3]


def test_kept_count_keeps_at_least_one():
    assert kept_count(16, 0.0) == 1
    assert kept_count(16, 1.0) == 16
    assert kept_count(16, 0.5) == 8
    assert kept_count(5, 0.5) == 3


@given(st.integers(1, 200), st.floats(0, 1))
def test_kept_count_bounds_and_monotone(n, t):
    k = kept_count(n, t)
    assert 1 <= k <= n
    assert kept_count(n, min(1.0, t + 0.1)) >= k


def test_sort_is_stable_and_keeps_cls(rng):
    x = rng.standard_normal((6, 3))
    xs, perm = sort_by_importance(x, np.array([0.1, 0.5, 0.1, 0.9, 0.5]))
    assert list(perm) == [0, 4, 2, 5, 1, 3]
    np.testing.assert_array_equal(xs, x[perm])


def test_prune_keeps_top_rows(rng):
    x = rng.standard_normal((11, 4))
    np.testing.assert_array_equal(prune_tokens(x, 0.3), x[:4])
    im, un = split_tokens(x, 0.3)
    assert im.shape[0] == 3 and un.shape[0] == 7


def test_merge_frozen_example():
    im = np.array([[1.0, 0.0], [0.0, 1.0]])
    un = np.array([[2.0, 0.1], [0.2, 3.0], [5.0, 0.0]])
    np.testing.assert_allclose(merge_tokens(im, un), [[8.0, 0.1], [0.2, 4.0]])
    np.testing.assert_allclose(merge_tokens(im, un, "mean"), [[8 / 3, 0.1 / 3], [0.1, 2.0]])


@pytest.mark.parametrize("mode", ["sum", "mean"])
def test_merge_matches_brute_force(rng, mode):
    for _ in range(200):
        m, u, c = rng.integers(1, 5), rng.integers(0, 5), rng.integers(1, 5)
        x_im, x_un = rng.standard_normal((m, c)), rng.standard_normal((u, c))
        ref, _ = brute_merge(x_im, x_un, mode)
        np.testing.assert_allclose(merge_tokens(x_im, x_un, mode), ref, atol=1e-12)


def test_merge_sum_conserves_mass(rng):
    x_im, x_un = rng.standard_normal((3, 5)), rng.standard_normal((7, 5))
    np.testing.assert_allclose(merge_tokens(x_im, x_un).sum(0), x_im.sum(0) + x_un.sum(0))


def test_merge_uses_separate_features(rng):
    x_im, x_un = rng.standard_normal((2, 3)), rng.standard_normal((1, 3))
    f_im = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = merge_tokens(x_im, x_un, im_feat=f_im, un_feat=np.array([[0.0, 2.0]]))
    np.testing.assert_allclose(out, [x_im[0], x_im[1] + x_un[0]])


def test_reduce_identity_decisions(rng):
    x = rng.standard_normal((9, 4))
    for strat in ("prune", "merge", "prune_then_merge"):
        d = TokenDecision(strat)
        assert d.is_identity
        np.testing.assert_array_equal(reduce_tokens(x, d), x)


def test_prune_then_merge_counts(rng):
    x = rng.standard_normal((17, 4))
    out = prune_then_merge(x, 0.5, 0.5)
    assert out.shape[0] == 1 + TokenDecision("prune_then_merge", t_prune=0.5, t_merge=0.5).output_count(16)
    assert out.shape[0] == 5


def test_masked_merge_matches_per_sample(rng):
    b, t, c = 6, 7, 5
    x = rng.standard_normal((b, t, c))
    m = rng.integers(1, t, size=b)
    p = np.array([rng.integers(mi, t + 1) for mi in m])
    slot = np.arange(t)[None, :]
    im = np.where((slot >= m[:, None])[..., None], np.inf, x)
    un = np.where(((slot < m[:, None]) | (slot >= p[:, None]))[..., None], np.inf, x)
    for mode in ("sum", "mean"):
        out = masked_merge(im, un, mode)
        for i in range(b):
            ref = merge_tokens(x[i, :m[i]], x[i, m[i]:p[i]], mode)
            np.testing.assert_allclose(out[i, :m[i]], ref, atol=1e-12)
            assert np.all(out[i, m[i]:] == 0)


def test_masked_assignment_marks_dead_rows():
    im = np.array([[[1.0, 0.0], [np.inf, np.inf]]])
    un = np.array([[[0.0, 1.0], [np.inf, np.inf]]])
    np.testing.assert_array_equal(masked_merge_assignment(im, un), [[0, -1]])


@given(st.integers(1, 12), st.integers(0, 2**31))
def test_masked_layer_norm_equals_live_layer_norm(live, seed):
    r = np.random.default_rng(seed)
    c = 12
    x = r.standard_normal((3, c)) * 4
    mask = (np.arange(c) < live).astype(float)
    s, b = r.standard_normal(c), r.standard_normal(c)
    y = masked_layer_norm(x, np.broadcast_to(mask, x.shape), s, b)
    ref = layer_norm(x[:, :live], s[:live], b[:live])
    np.testing.assert_allclose(y[:, :live], ref, atol=1e-10)
    assert np.all(y[:, live:] == 0)


def test_build_masks_shapes():
    mp = build_masks([2, 3], [1, 4], tokens=4, channels=3)
    assert mp.channel.shape == (2, 4, 3)
    assert mp.channel[0, 0].tolist() == [1, 1, 0]
    assert mp.token[0, :, 0].tolist() == [1, 0, 0, 0]
    with pytest.raises(ValueError):
        build_masks([4], [1], tokens=4, channels=3)


def test_decision_average():
    np.testing.assert_allclose(decision_average([[0.0, 1.0], [1.0, 0.0]]), [0.5, 0.5])
