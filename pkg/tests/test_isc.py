import numpy as np
import pytest

from hrg import isc
from hrg.isc import MaskStrategy, build_mask, count_interaction_macs, inter_video_correlate
from hrg.tensor import DimensionError, Tensor

STRATEGIES = list(MaskStrategy)


def random_params(rng, C, heads, scale=0.5):
    p = isc.IscParams.init(rng, C, heads)
    for t in (p.wq, p.wk, p.wv, p.wo):
        t.data[...] = rng.standard_normal(t.shape) * scale
    p.ln_g.data[...] = 1.0 + 0.1 * rng.standard_normal(C)
    p.ln_b.data[...] = 0.1 * rng.standard_normal(C)
    return p


def naive_correlate(f_s, f_q, mask, p):
    """Independent loop over temporal slices and heads."""
    x = np.concatenate([f_s, f_q], axis=0)
    S, T, C = x.shape
    H = p.num_heads
    D = C // H
    g, b = p.ln_g.data, p.ln_b.data
    wq, wk, wv, wo = p.wq.data, p.wk.data, p.wv.data, p.wo.data
    out = x.copy()
    for t in range(T):
        sl = x[:, t, :]
        mu = sl.mean(axis=1, keepdims=True)
        var = ((sl - mu) ** 2).mean(axis=1, keepdims=True)
        h = (sl - mu) / np.sqrt(var + 1e-5) * g + b
        q, k, v = h @ wq, h @ wk, h @ wv
        for i in range(S):
            if not mask[i].any():
                continue
            heads = []
            for hd in range(H):
                cols = slice(hd * D, (hd + 1) * D)
                scores = np.array([q[i, cols] @ k[j, cols] / np.sqrt(D) for j in range(S)])
                keep = mask[i] > 0
                w = np.zeros(S)
                e = np.exp(scores[keep] - scores[keep].max())
                w[keep] = e / e.sum()
                heads.append(sum(w[j] * v[j, cols] for j in range(S)))
            out[i, t] = sl[i] + np.concatenate(heads) @ wo
    ns = f_s.shape[0]
    return out[:ns], out[ns:]


def test_mask_examples():
    np.testing.assert_array_equal(build_mask("adaptive", 2, 1, 1), [[1, 1, 0]] * 3)
    np.testing.assert_array_equal(build_mask("full", 2, 3, 4), np.ones((10, 10)))
    np.testing.assert_array_equal(build_mask("query-support", 2, 1, 1), [[0, 0, 0], [0, 0, 0], [1, 1, 0]])
    np.testing.assert_array_equal(build_mask("support-support", 2, 1, 1), [[1, 1, 0], [1, 1, 0], [0, 0, 0]])


def test_mask_rejects_empty_support():
    with pytest.raises(ValueError):
        build_mask("full", 0, 1, 1)


@pytest.mark.parametrize("heads", [1, 2])
def test_full_mask_matches_naive_oracle(heads, rng):
    for _ in range(10):
        N, K, L, T = rng.integers(1, 4, size=4)
        C = 4
        p = random_params(rng, C, heads)
        f_s = rng.standard_normal((N * K, T, C))
        f_q = rng.standard_normal((L, T, C))
        mask = build_mask("full", N, K, L)
        got = inter_video_correlate(Tensor(f_s), Tensor(f_q), mask, p)
        want = naive_correlate(f_s, f_q, mask, p)
        for a, b in zip(got, want):
            assert np.max(np.abs(a.data - b)) < 1e-10


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_every_strategy_matches_naive_oracle(strategy, rng):
    p = random_params(rng, 4, 2)
    f_s, f_q = rng.standard_normal((3, 2, 4)), rng.standard_normal((2, 2, 4))
    mask = build_mask(strategy, 3, 1, 2)
    got = inter_video_correlate(Tensor(f_s), Tensor(f_q), mask, p)
    for a, b in zip(got, naive_correlate(f_s, f_q, mask, p)):
        assert np.max(np.abs(a.data - b)) < 1e-10


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_masked_weights_exactly_zero(strategy, rng):
    N, K, L = 3, 2, 2
    p = random_params(rng, 4, 2)
    mask = build_mask(strategy, N, K, L)
    *_, w = inter_video_correlate(Tensor(rng.standard_normal((N * K, 3, 4))),
                                  Tensor(rng.standard_normal((L, 3, 4))), mask, p, return_weights=True)
    assert w.shape == (3, 2, N * K + L, N * K + L)
    assert np.all(w.data[..., mask == 0] == 0.0)
    live = mask.any(axis=1)
    np.testing.assert_allclose(w.data[..., live, :].sum(axis=-1), 1.0, atol=1e-12)


def test_support_support_passes_queries_through(rng):
    p = random_params(rng, 4, 2)
    f_q = rng.standard_normal((3, 2, 4))
    _, out_q = inter_video_correlate(Tensor(rng.standard_normal((2, 2, 4))), Tensor(f_q),
                                     build_mask("support-support", 2, 1, 3), p)
    assert out_q.data.tobytes() == f_q.tobytes()


def test_query_support_passes_supports_through(rng):
    p = random_params(rng, 4, 2)
    f_s = rng.standard_normal((2, 2, 4))
    out_s, _ = inter_video_correlate(Tensor(f_s), Tensor(rng.standard_normal((3, 2, 4))),
                                     build_mask("query-support", 2, 1, 3), p)
    assert out_s.data.tobytes() == f_s.tobytes()


def test_adaptive_query_perturbation_does_not_leak(rng):
    N, K, L, T, C = 3, 1, 4, 3, 4
    p = random_params(rng, C, 2)
    mask = build_mask("adaptive", N, K, L)
    f_s, f_q = rng.standard_normal((N * K, T, C)), rng.standard_normal((L, T, C))
    base_s, base_q = inter_video_correlate(Tensor(f_s), Tensor(f_q), mask, p)
    for j in range(L):
        pert = f_q.copy()
        pert[j] += rng.standard_normal((T, C))
        s2, q2 = inter_video_correlate(Tensor(f_s), Tensor(pert), mask, p)
        assert s2.data.tobytes() == base_s.data.tobytes()
        others = [i for i in range(L) if i != j]
        assert q2.data[others].tobytes() == base_q.data[others].tobytes()
        assert not np.array_equal(q2.data[j], base_q.data[j])


def test_support_permutation_equivariance(rng):
    N, K, L, T, C = 4, 1, 2, 2, 4
    p = random_params(rng, C, 2)
    mask = build_mask("adaptive", N, K, L)
    f_s, f_q = rng.standard_normal((N * K, T, C)), rng.standard_normal((L, T, C))
    perm = rng.permutation(N * K)
    full_perm = np.concatenate([perm, np.arange(N * K, N * K + L)])
    a_s, a_q = inter_video_correlate(Tensor(f_s), Tensor(f_q), mask, p)
    b_s, b_q = inter_video_correlate(Tensor(f_s[perm]), Tensor(f_q), mask[np.ix_(full_perm, full_perm)], p)
    np.testing.assert_allclose(b_s.data, a_s.data[perm], atol=1e-13)
    np.testing.assert_allclose(b_q.data, a_q.data, atol=1e-13)


def test_shape_errors(rng):
    p = random_params(rng, 4, 2)
    with pytest.raises(DimensionError):
        inter_video_correlate(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((1, 2, 4))), np.ones((3, 3)), p)
    with pytest.raises(DimensionError):
        inter_video_correlate(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((1, 3, 4))), np.ones((2, 2)), p)


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_mac_scaling_laws(heads):
    for T in (4, 8, 16):
        fac = [count_interaction_macs("factorized", 5, 1, 5, t, 32, heads)["score"] for t in (T // 2, T)]
        den = [count_interaction_macs("dense", 5, 1, 5, t, 32, heads)["score"] for t in (T // 2, T)]
        assert fac[1] == 2 * fac[0]
        assert den[1] == 4 * den[0]


def test_mac_counts_closed_form():
    S, T, C = 10, 8, 32
    assert count_interaction_macs("factorized", 5, 1, 5, T, C)["score"] == T * S * S * C
    assert count_interaction_macs("dense", 5, 1, 5, T, C)["score"] == (S * T) ** 2 * C


def test_mac_single_frame_modes_agree():
    a = count_interaction_macs("factorized", 5, 2, 3, 1, 16, 2)
    b = count_interaction_macs("dense", 5, 2, 3, 1, 16, 2)
    assert a == b


def test_mac_bad_mode():
    with pytest.raises(ValueError):
        count_interaction_macs("sparse", 1, 1, 1, 2, 4)
