import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_mine, central_diff, ms_brute_mine, ms_naive, rel_err, sc_naive, tm_naive
from varietyid.contrastive import (
    ContrastiveParams,
    LossKind,
    contrastive_objective,
    mine,
    ms_anchor_loss,
    ms_loss,
    ms_mine,
    ms_similarity,
    sc_loss,
    tm_loss,
)
from varietyid.encoder import l2_normalize


def random_batch(rng, m=None, h=4, n_labels=3):
    m = m or int(rng.integers(3, 9))
    labels = rng.integers(0, n_labels, size=m)
    while len(set(labels)) < 2:
        labels = rng.integers(0, n_labels, size=m)
    return rng.normal(size=(m, h)), labels


def unit(z):
    return l2_normalize(z)


def random_rotation(rng, h):
    q, r = np.linalg.qr(rng.normal(size=(h, h)))
    return q * np.sign(np.diag(r))


# -- mining ------------------------------------------------------------------


def test_mine_aab():
    pairs = mine(["A", "A", "B"])
    assert list(pairs.positives[0]) == [1] and list(pairs.negatives[0]) == [2]
    assert len(pairs.positives[2]) == 0 and list(pairs.negatives[2]) == [0, 1]
    assert sorted(map(tuple, pairs.triplets.tolist())) == [(0, 1, 2), (1, 0, 2)]


def test_mine_all_same():
    pairs = mine([3, 3, 3, 3])
    assert all(len(n) == 0 for n in pairs.negatives)
    assert len(pairs.triplets) == 0


def test_mine_abca_triplet_count():
    assert len(mine(["A", "B", "C", "A"]).triplets) == 4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=2, max_size=8))
def test_mine_matches_brute_force(labels):
    pairs = mine(labels)
    pos, neg, trip = brute_mine(labels)
    assert [sorted(p.tolist()) for p in pairs.positives] == pos
    assert [sorted(n.tolist()) for n in pairs.negatives] == neg
    assert sorted(map(tuple, pairs.triplets.tolist())) == trip
    assert len(trip) == sum(len(p) * len(n) for p, n in zip(pos, neg))


# -- SC ------------------------------------------------------------------------


def test_sc_negative_value_example():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    out = sc_loss(z, mine(["A", "A", "B"]), ContrastiveParams(tau=1.0))
    assert out.value == pytest.approx(-4.0, abs=1e-12)
    assert out.n_active == 2


def test_sc_all_same_label():
    z = unit(np.random.default_rng(0).normal(size=(4, 3)))
    out = sc_loss(z, mine([1, 1, 1, 1]))
    assert out.value == 0.0 and out.n_active == 0
    assert not out.grad.any()


def test_sc_input_errors():
    with pytest.raises(ValueError):
        sc_loss(np.ones((1, 2)), mine([0]))
    with pytest.raises(ValueError):
        sc_loss(np.array([[np.nan, 0.0], [1.0, 0.0]]), mine([0, 1]))


@pytest.mark.parametrize("denominator", ["negatives_only", "all"])
def test_sc_matches_naive_and_fd(denominator):
    rng = np.random.default_rng(11)
    params = ContrastiveParams(tau=0.5, supcon_denominator=denominator)
    for _ in range(20):
        z, labels = random_batch(rng)
        z = unit(z)
        pairs = mine(labels)
        out = sc_loss(z, pairs, params)
        assert out.value == pytest.approx(sc_naive(z, labels, 0.5, denominator), abs=1e-10)
        fd = central_diff(lambda x: sc_loss(x, pairs, params).value, z)
        assert rel_err(out.grad, fd) < 1e-6


def test_sc_all_denominator_is_nonnegative_supcon(rng):
    params = ContrastiveParams(supcon_denominator="all")
    for _ in range(10):
        z, labels = random_batch(rng)
        assert sc_loss(unit(z), mine(labels), params).value >= 0


# -- TM ------------------------------------------------------------------------


@pytest.mark.parametrize("zp,expected", [((0.0, 0.03), 0.0), ((0.0, 0.2), 0.15)])
def test_tm_scalar_examples(zp, expected):
    z = np.array([[0.0, 0.0], zp, [0.0, 0.1]])
    out = tm_loss(z, mine(["A", "A", "B"]), ContrastiveParams(margin=0.05))
    # Triplets (0,1,2) and (1,0,2); the second has d_ap == |zp|, d_an == |zp - z_n|.
    d = math.hypot(*zp)
    second = max(0.0, d - abs(zp[1] - 0.1) + 0.05)
    assert out.value == pytest.approx((expected + second) / 2, abs=1e-12)
    single = tm_loss(z, _only_triplet(0, 1, 2), ContrastiveParams(margin=0.05))
    assert single.value == pytest.approx(expected, abs=1e-12)


def _only_triplet(a, p, n):
    pairs = mine(["A", "A", "B"])
    pairs.triplets = np.array([[a, p, n]])
    return pairs


def test_tm_satisfied_margin_is_zero():
    # Every positive coincides with its anchor; every negative is 1 away.
    z = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    out = tm_loss(z, mine([0, 0, 1, 1]), ContrastiveParams(margin=0.05))
    assert out.value == 0.0
    assert not out.grad.any()


def test_tm_no_triplets():
    out = tm_loss(np.ones((3, 2)), mine([0, 0, 0]))
    assert out.value == 0.0 and not out.grad.any()


def test_tm_matches_naive_and_fd():
    rng = np.random.default_rng(12)
    params = ContrastiveParams(margin=0.3)
    checked = 0
    while checked < 20:
        z, labels = random_batch(rng)
        pairs = mine(labels)
        t = pairs.triplets
        hinge = (np.linalg.norm(z[t[:, 0]] - z[t[:, 1]], axis=1)
                 - np.linalg.norm(z[t[:, 0]] - z[t[:, 2]], axis=1) + 0.3)
        if np.any(np.abs(hinge) < 1e-4):
            continue
        out = tm_loss(z, pairs, params)
        assert out.value == pytest.approx(tm_naive(z, labels, 0.3), abs=1e-10)
        fd = central_diff(lambda x: tm_loss(x, pairs, params).value, z)
        assert rel_err(out.grad, fd) < 1e-6
        checked += 1


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tm_nonnegative(seed):
    rng = np.random.default_rng(seed)
    z, labels = random_batch(rng)
    assert tm_loss(z * rng.uniform(0, 5), mine(labels)).value >= 0


# -- MS ------------------------------------------------------------------------


def test_ms_anchor_example():
    value, _, _ = ms_anchor_loss(np.array([0.5]), np.array([0.2]))
    expected = 0.5 * math.log(1 + math.e) + math.log1p(math.exp(-40)) / 50
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.6566, abs=1e-4)


def test_ms_no_pairs_survive():
    z = unit(np.array([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0], [-0.9, -0.1]]))
    out = ms_loss(z, [0, 0, 1, 1])
    assert out.value == 0.0 and out.n_active == 0
    assert not out.grad.any()


def test_ms_matches_naive():
    rng = np.random.default_rng(13)
    p = ContrastiveParams()
    for _ in range(20):
        z, labels = random_batch(rng)
        z = unit(z)
        out = ms_loss(z, labels, p)
        assert out.value == pytest.approx(ms_naive(z, labels, p.alpha, p.beta, p.lam, p.epsilon), abs=1e-10)


def test_ms_gradient_fd_with_frozen_mining():
    rng = np.random.default_rng(14)
    p = ContrastiveParams()
    for _ in range(20):
        z, labels = random_batch(rng)
        kept = ms_mine(ms_similarity(z, "cosine"), labels, p.epsilon)
        out = ms_loss(z, labels, p, kept=kept)
        fd = central_diff(lambda x: ms_loss(x, labels, p, kept=kept).value, z)
        assert rel_err(out.grad, fd) < 1e-6


def test_ms_dot_similarity_gradient():
    rng = np.random.default_rng(15)
    p = ContrastiveParams(similarity="dot", beta=5.0)
    z, labels = random_batch(rng, m=6)
    z *= 0.3
    kept = ms_mine(ms_similarity(z, "dot"), labels, p.epsilon)
    out = ms_loss(z, labels, p, kept=kept)
    fd = central_diff(lambda x: ms_loss(x, labels, p, kept=kept).value, z)
    assert rel_err(out.grad, fd) < 1e-6


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_ms_mining_soundness(seed, eps):
    rng = np.random.default_rng(seed)
    z, labels = random_batch(rng)
    sim = ms_similarity(z, "cosine")
    keep_pos, keep_neg = ms_mine(sim, labels, eps)
    ref_pos, ref_neg = ms_brute_mine(sim.tolist(), labels.tolist(), eps)
    assert set(zip(*np.nonzero(keep_pos))) == ref_pos
    assert set(zip(*np.nonzero(keep_neg))) == ref_neg


# -- shared properties ---------------------------------------------------------


def _values(z, labels):
    u = unit(z)
    return (sc_loss(u, mine(labels)).value, tm_loss(z, mine(labels)).value, ms_loss(u, labels).value)


def test_rotation_invariance(rng):
    for _ in range(10):
        z, labels = random_batch(rng, h=5)
        q = random_rotation(rng, 5)
        np.testing.assert_allclose(_values(z @ q, labels), _values(z, labels), atol=1e-8)


def test_tm_translation_invariance(rng):
    for _ in range(10):
        z, labels = random_batch(rng)
        c = rng.normal(size=z.shape[1]) * 3
        a = tm_loss(z + c, mine(labels)).value
        assert a == pytest.approx(tm_loss(z, mine(labels)).value, abs=1e-10)


def test_label_permutation_invariance(rng):
    for _ in range(10):
        z, labels = random_batch(rng, n_labels=4)
        relabel = rng.permutation(4)[labels] + 10
        np.testing.assert_allclose(_values(z, relabel), _values(z, labels), atol=1e-12)


@pytest.mark.parametrize("kind", list(LossKind))
def test_gradient_step_decreases_loss(kind):
    rng = np.random.default_rng(20 + list(LossKind).index(kind))
    params = ContrastiveParams()
    done = 0
    while done < 10:
        z, labels = random_batch(rng, m=6)
        out = contrastive_objective(kind, z, labels, params)
        if out.value == 0.0 or not out.grad.any():
            continue
        after = contrastive_objective(kind, z - 1e-4 * out.grad, labels, params)
        assert after.value < out.value
        done += 1


def test_objective_normalizes_for_sc_and_ms(rng):
    z, labels = random_batch(rng)
    for kind in (LossKind.SC, LossKind.MS):
        a = contrastive_objective(kind, z, labels).value
        b = contrastive_objective(kind, 7.0 * z, labels).value
        assert a == pytest.approx(b, abs=1e-10)


def test_objective_skips_dead_embeddings(rng):
    z, labels = random_batch(rng, m=6)
    z[2] = 0.0
    for kind in (LossKind.SC, LossKind.MS):
        out = contrastive_objective(kind, z, labels)
        assert np.all(np.isfinite(out.grad))
        assert not out.grad[2].any()


def test_params_validation():
    for bad in (dict(tau=0.0), dict(margin=-1.0), dict(alpha=0.0), dict(similarity="l1"),
                dict(supcon_denominator="pos")):
        with pytest.raises(ValueError):
            ContrastiveParams(**bad).validate()
