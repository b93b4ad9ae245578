import numpy as np
import pytest
from conftest import check_grad

from hrg import ikt
from hrg.ikt import FrozenBankError, KnowledgeBank
from hrg.tensor import DimensionError, Tensor


def random_params(rng, C=4, M=3, heads=2, scale=0.5):
    p = ikt.IktParams.init(rng, C, M, heads)
    for t in (p.wk_t, p.wv_t, p.wq, p.wk, p.wv, p.wo):
        t.data[...] = rng.standard_normal(t.shape) * scale
    return p


def filled_bank(rng, G, C, occ=None, mu=0.99):
    bank = KnowledgeBank(G, C, mu)
    bank.update(rng.standard_normal((G if occ is None else occ, C)))
    return bank


def naive_prototypes(p, f_s, params):
    C = p.shape[1]
    tok = f_s.reshape(-1, C)
    K, V = tok @ params.wk_t.data, tok @ params.wv_t.data
    out = np.zeros_like(p)
    for i in range(p.shape[0]):
        s = np.array([p[i] @ K[j] for j in range(len(tok))]) / np.sqrt(C)
        w = np.exp(s - s.max())
        w /= w.sum()
        out[i] = sum(w[j] * V[j] for j in range(len(tok))) + p[i]
    return out


def naive_aggregate(f_s, p_bar, params):
    C = f_s.shape[-1]
    H = params.num_heads
    D = C // H
    g, b = params.ln_g.data, params.ln_b.data
    out = f_s.copy()
    K, V = p_bar @ params.wk.data, p_bar @ params.wv.data
    for v in range(f_s.shape[0]):
        for t in range(f_s.shape[1]):
            x = f_s[v, t]
            h = (x - x.mean()) / np.sqrt(x.var() + 1e-5) * g + b
            q = h @ params.wq.data
            heads = []
            for hd in range(H):
                c = slice(hd * D, (hd + 1) * D)
                s = K[:, c] @ q[c] / np.sqrt(D)
                w = np.exp(s - s.max())
                w /= w.sum()
                heads.append(w @ V[:, c])
            out[v, t] = x + np.concatenate(heads) @ params.wo.data
    return out


def test_prototypes_uniform_when_keys_zero(rng):
    params = random_params(rng)
    params.wk_t.data[...] = 0.0
    p = rng.standard_normal((3, 4))
    f_s = rng.standard_normal((2, 3, 4))
    out = ikt.construct_prototypes(Tensor(p), Tensor(f_s), params).data
    values = f_s.reshape(-1, 4) @ params.wv_t.data
    np.testing.assert_allclose(out, values.mean(axis=0) + p, atol=1e-14)


def test_prototypes_single_token(rng):
    params = random_params(rng)
    f_s = rng.standard_normal((1, 1, 4))
    for _ in range(3):
        p = rng.standard_normal((3, 4)) * 5
        out = ikt.construct_prototypes(Tensor(p), Tensor(f_s), params).data
        np.testing.assert_allclose(out, f_s[0] @ params.wv_t.data + p, atol=1e-13)


def test_prototypes_match_loop_oracle(rng):
    for _ in range(10):
        params = random_params(rng)
        p, f_s = rng.standard_normal((3, 4)), rng.standard_normal((3, 2, 4))
        got = ikt.construct_prototypes(Tensor(p), Tensor(f_s), params).data
        assert np.max(np.abs(got - naive_prototypes(p, f_s, params))) < 1e-10


def test_prototypes_shape_error(rng):
    with pytest.raises(DimensionError):
        ikt.construct_prototypes(Tensor(np.zeros((3, 5))), Tensor(np.zeros((2, 3, 4))), random_params(rng))


def test_retrieval_count():
    assert ikt.retrieval_count(0.7, 50) == 35
    assert ikt.retrieval_count(0.3, 2) == 1
    assert ikt.retrieval_count(1.0, 7) == 7


def test_retrieve_example_from_similarities():
    sim = np.array([[0.9, 0.1, 0.8, 0.2]])
    assert sorted(ikt.top_indices(sim, 2)[0]) == [0, 2]


def test_top_indices_ties_to_lower_index():
    assert list(ikt.top_indices(np.array([[0.5, 0.7, 0.5, 0.5]]), 3)[0]) == [1, 0, 2]


def test_top_indices_match_sort_oracle(rng):
    for _ in range(300):
        G = int(rng.integers(1, 12))
        sim = np.round(rng.uniform(-1, 1, size=(3, G)), 1)
        count = int(rng.integers(1, G + 1))
        got = ikt.top_indices(sim, count)
        for row, idx in zip(sim, got):
            oracle = sorted(range(G), key=lambda g: (-row[g], g))[:count]
            assert list(idx) == oracle


def test_retrieve_full_bank_kappa_one_is_full_softmax(rng):
    bank = filled_bank(rng, 6, 4)
    p_hat = rng.standard_normal((2, 4))
    got = ikt.retrieve(Tensor(p_hat), bank, 1.0).data
    sim = ikt._cosine(p_hat, bank.stored)
    w = np.exp(sim - sim.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(got, w @ bank.stored, atol=1e-14)


def test_retrieve_single_entry(rng):
    bank = filled_bank(rng, 5, 4, occ=1)
    got = ikt.retrieve(Tensor(rng.standard_normal((3, 4))), bank, 0.3).data
    np.testing.assert_allclose(got, np.tile(bank.stored[0], (3, 1)), atol=1e-15)


def test_retrieve_empty_bank_returns_zeros(rng):
    got = ikt.retrieve(Tensor(rng.standard_normal((3, 4))), KnowledgeBank(5, 4), 0.7)
    assert np.all(got.data == 0) and got.shape == (3, 4)


def test_retrieve_uniform_weighting(rng):
    bank = filled_bank(rng, 8, 4)
    p_hat = rng.standard_normal((2, 4))
    got = ikt.retrieve(Tensor(p_hat), bank, 0.5, weighting="uniform").data
    top = ikt.top_indices(ikt._cosine(p_hat, bank.stored), 4)
    np.testing.assert_allclose(got, bank.stored[top].mean(axis=1), atol=1e-14)


def test_retrieve_rejects_bad_kappa(rng):
    with pytest.raises(ValueError):
        ikt.retrieve(Tensor(np.zeros((1, 4))), filled_bank(rng, 3, 4), 0.0)


def test_retrieve_gradient_through_weights(rng):
    bank = filled_bank(rng, 6, 4)
    w = rng.standard_normal((2, 4))
    # the selected set is locally constant, so finite differences are valid
    assert check_grad(lambda p: (ikt.retrieve(p, bank, 0.5) * w).sum(), [(2, 4)], rng) < 1e-5


def test_aggregate_examples(rng):
    params = random_params(rng)
    f_s, p_hat = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 4))
    zero = Tensor(np.zeros((3, 4)))
    a = ikt.aggregate(Tensor(f_s), Tensor(p_hat), zero, params).data
    np.testing.assert_allclose(a, naive_aggregate(f_s, p_hat, params), atol=1e-10)
    params.wv.data[...] = 0.0
    b = ikt.aggregate(Tensor(f_s), Tensor(p_hat), zero, params).data
    np.testing.assert_array_equal(b, f_s)


def test_aggregate_matches_loop_oracle(rng):
    for _ in range(10):
        params = random_params(rng)
        f_s, p_hat, p_prime = rng.standard_normal((3, 2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        got = ikt.aggregate(Tensor(f_s), Tensor(p_hat), Tensor(p_prime), params).data
        assert np.max(np.abs(got - naive_aggregate(f_s, p_hat + p_prime, params))) < 1e-10


def test_aggregate_shape_error(rng):
    with pytest.raises(DimensionError):
        ikt.aggregate(Tensor(np.zeros((2, 3, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))),
                      random_params(rng))


def test_update_hand_arithmetic():
    bank = KnowledgeBank(1, 2, 0.99)
    bank.update([[1.0, 0.0]])
    bank.update([[0.0, 1.0]])
    np.testing.assert_allclose(bank.entries[0], [0.99, 0.01], atol=1e-15)


def test_update_fills_then_blends(rng):
    bank = KnowledgeBank(4, 3, 0.5)
    p = rng.standard_normal((3, 3))
    bank.update(p)
    assert bank.occupancy == 3
    np.testing.assert_array_equal(bank.stored, p)
    bank.update(rng.standard_normal((3, 3)))
    assert bank.occupancy == 4


def test_momentum_one_leaves_full_bank_unchanged(rng):
    bank = filled_bank(rng, 4, 3, mu=1.0)
    before = bank.entries.copy()
    bank.update(rng.standard_normal((5, 3)))
    np.testing.assert_array_equal(bank.entries, before)


@pytest.mark.parametrize("mu", [0.0, 0.5, 0.99, 1.0])
def test_update_is_exact_convex_combination(mu, rng):
    for _ in range(50):
        bank = filled_bank(rng, 5, 3, mu=mu)
        p = rng.standard_normal(3)
        t = int(np.argmax(ikt._cosine(p[None], bank.entries)[0]))
        old = bank.entries.copy()
        bank.update(p[None])
        expect = old.copy()
        expect[t] = mu * old[t] + (1.0 - mu) * p
        np.testing.assert_array_equal(bank.entries, expect)
        assert bank.occupancy == 5


def test_update_ties_to_lower_index():
    bank = KnowledgeBank(2, 2, 0.0)
    bank.update([[1.0, 0.0], [2.0, 0.0]])
    bank.update([[3.0, 0.0]])
    np.testing.assert_array_equal(bank.entries, [[3.0, 0.0], [2.0, 0.0]])


def test_freeze_blocks_updates_and_retrieval_is_read_only(rng):
    bank = filled_bank(rng, 6, 4)
    ikt.freeze_bank(bank)
    with pytest.raises(FrozenBankError):
        ikt.update_bank(bank, rng.standard_normal((1, 4)))
    before = bank.digest()
    for _ in range(1000):
        ikt.retrieve(Tensor(rng.standard_normal((3, 4))), bank, 0.7)
    assert bank.digest() == before
    ikt.unfreeze_bank(bank)
    ikt.update_bank(bank, rng.standard_normal((1, 4)))


def test_update_rejects_non_finite():
    with pytest.raises(ValueError):
        KnowledgeBank(2, 2).update([[np.nan, 0.0]])


def test_bank_serialization_round_trip(rng):
    bank = filled_bank(rng, 7, 4, occ=5, mu=0.9)
    raw = bank.to_bytes()
    assert len(raw) == 16 + 5 * 4 * 8
    back, used = KnowledgeBank.from_bytes(raw + b"tail", 4)
    assert used == len(raw)
    assert back.capacity == 7 and back.occupancy == 5 and back.momentum == 0.9
    np.testing.assert_array_equal(back.entries, bank.entries)
