import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snag import numkit as nk
from snag.evaluation import eval_ea, similarity_matrix
from snag.gmnm import NoiseConfig
from snag.graphdata import SyntheticSpec, generate_synthetic
from snag.mmea import (
    GmiWeights,
    MmeaConfig,
    MmeaModel,
    ProbationCache,
    alignment_problem,
    contrastive_loss,
    ecia_loss,
    gmi_embed,
    iir_loss,
    mutual_nearest,
    pair_confidence,
    probe_and_promote,
    train_mmea,
    update_probation,
)
from snag.numkit import check_gradients


def _brute_contrastive(e1, e2, tau):
    """Independent evaluation of the bidirectional probability form."""
    n = len(e1)
    total = 0.0
    for i in range(n):
        probs = []
        for anchor, partner, own in ((e1, e2, e1), (e2, e1, e2)):
            gamma = lambda x, y: math.exp(float(np.dot(x, y)) / tau)
            pos = gamma(anchor[i], partner[i])
            negs = sum(gamma(anchor[i], partner[j]) + gamma(anchor[i], own[j])
                       for j in range(n) if j != i)
            probs.append(pos / (pos + negs))
        total += -math.log((probs[0] + probs[1]) / 2)
    return total / n


class TestContrastive:
    def test_batch_of_one_is_zero(self):
        x = np.random.default_rng(0).normal(size=(1, 5))
        assert contrastive_loss(x, x + 1.0).item() == 0.0

    def test_two_orthogonal_pairs_by_hand(self):
        e = np.eye(2)
        expected = -math.log(math.e / (math.e + 2))
        assert contrastive_loss(e, e, tau=1.0).item() == pytest.approx(expected, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 6))
    def test_matches_brute_force(self, seed, n):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        got = contrastive_loss(a, b, tau=0.5, normalize=False).item()
        assert got == pytest.approx(_brute_contrastive(a, b, 0.5), rel=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_permutation_and_swap_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        base = contrastive_loss(a, b).item()
        perm = rng.permutation(5)
        assert contrastive_loss(a[perm], b[perm]).item() == pytest.approx(base, rel=1e-12)
        assert contrastive_loss(b, a).item() == pytest.approx(base, rel=1e-12)
        assert base >= 0

    def test_rejects_nonpositive_tau(self):
        with pytest.raises(ValueError, match="positive"):
            contrastive_loss(np.eye(2), np.eye(2), tau=0.0)

    def test_gradients(self):
        rng = np.random.default_rng(1)
        a, b = nk.parameter(rng.normal(size=(4, 3))), nk.parameter(rng.normal(size=(4, 3)))
        assert check_gradients(lambda x, y: contrastive_loss(x, y, 0.3), [a, b]) < 1e-4


class TestEcia:
    def test_min_confidence(self):
        assert pair_confidence(np.array([0.9]), np.array([0.2])).data.tolist() == [0.2]

    def test_unit_confidence_reduces_to_plain_sum(self):
        rng = np.random.default_rng(2)
        h1 = [rng.normal(size=(3, 4)) for _ in range(2)]
        h2 = [rng.normal(size=(3, 4)) for _ in range(2)]
        ones = np.ones((3, 2))
        plain = sum(contrastive_loss(a, b).item() for a, b in zip(h1, h2))
        assert ecia_loss(h1, h2, ones, ones).item() == pytest.approx(plain, rel=1e-12)

    def test_halving_phi_adds_log2_per_pair(self):
        rng = np.random.default_rng(3)
        h1, h2 = [rng.normal(size=(4, 3))], [rng.normal(size=(4, 3))]
        conf = np.full((4, 1), 0.8)
        halved = conf.copy()
        halved[2, 0] = 0.4
        diff = ecia_loss(h1, h2, conf, halved).item() - ecia_loss(h1, h2, conf, conf).item()
        assert diff == pytest.approx(math.log(2) / 4, rel=1e-10)   # mean over 4 pairs

    def test_gradients_through_confidences(self):
        rng = np.random.default_rng(4)
        h1 = [nk.parameter(rng.normal(size=(3, 2))) for _ in range(2)]
        h2 = [nk.parameter(rng.normal(size=(3, 2))) for _ in range(2)]
        c1 = nk.parameter(rng.uniform(0.2, 0.5, size=(3, 2)))
        c2 = nk.parameter(rng.uniform(0.6, 0.9, size=(3, 2)))
        params = h1 + h2 + [c1, c2]
        assert check_gradients(lambda *_: ecia_loss(h1, h2, c1, c2), params) < 1e-4


def test_iir_equals_contrastive_on_same_vectors():
    rng = np.random.default_rng(5)
    hb1, hb2 = rng.normal(size=(4, 2, 3)), rng.normal(size=(4, 2, 3))
    expected = contrastive_loss(hb1[:, 0], hb2[:, 0]).item() + contrastive_loss(hb1[:, 1], hb2[:, 1]).item()
    assert iir_loss(hb1, hb2).item() == pytest.approx(expected, rel=1e-12)


class TestGmi:
    def test_single_modality_identity(self):
        x = np.random.default_rng(6).normal(size=(3, 4))
        assert np.array_equal(gmi_embed([x], [1.0]).data, x)

    def test_doubling_one_weight(self):
        rng = np.random.default_rng(7)
        blocks = [rng.normal(size=(2, 3)) for _ in range(3)]
        base = gmi_embed(blocks, [0.2, 0.3, 0.5]).data
        doubled = gmi_embed(blocks, [0.2, 0.6, 0.5]).data
        assert np.allclose(doubled[:, 3:6], 2 * base[:, 3:6])
        assert np.array_equal(doubled[:, :3], base[:, :3]) and np.array_equal(doubled[:, 6:], base[:, 6:])

    def test_paper_width(self):
        blocks = [np.ones((1, 300))] * 5
        assert gmi_embed(blocks, GmiWeights(("g", "r", "a", "v", "s"))).shape == (1, 1500)

    def test_block_count_mismatch(self):
        with pytest.raises(ValueError, match="weights"):
            gmi_embed([np.ones((1, 2))], [0.5, 0.5])


def _data(jitter=0.0, n=60, img=1.0, seed=0):
    return generate_synthetic(SyntheticSpec(num_entities=n, num_triples=4 * n, seed_ratio=0.2,
                                            img_ratio=img, jitter=jitter, num_attributes=12), seed=seed)


def _problem(data, **kw):
    return alignment_problem(data.kg1, data.kg2, data.alignment, data.features1, data.features2,
                             data.attributes1, data.attributes2, d_r=16, d_a=16, **kw)


def test_modality_set_mismatch():
    data = _data()
    with pytest.raises(ValueError, match="modality sets differ"):
        alignment_problem(data.kg1, data.kg2, data.alignment, data.features1,
                          {"v": data.features2["v"]})


def test_problem_layout():
    data = _data(img=0.5)
    prob = _problem(data)
    assert prob.size == 120 and prob.adjacency.shape == (120, 120)
    assert not prob.adjacency[:60, 60:].any()
    assert set(prob.stores) == {"r", "a", "v", "s"}
    assert prob.stores["v"].present.sum() == 60       # 30 present per graph
    # aligned entities share relation bag-of-words
    pairs = data.alignment.pairs
    r = prob.stores["r"].matrix
    assert np.array_equal(r[pairs[:, 0]], r[60 + pairs[:, 1]])


def test_defaults():
    cfg = MmeaConfig()
    assert (cfg.dim, cfg.heads, cfg.batch_size, cfg.betas, cfg.warmup_frac) == (300, 1, 3500, (0.9, 0.999), 0.15)
    assert (cfg.epochs, cfg.iterative_epochs, cfg.probe_every, cfg.promote_after) == (500, 500, 5, 10)
    assert cfg.tau == 0.1 and cfg.noise.modalities == ("g", "r", "a", "v", "s")


def test_full_objective_gradients():
    data = _data(n=12)
    cfg = MmeaConfig(dim=4, ffn_dim=6, noise=NoiseConfig(rho=0.5))
    model = MmeaModel(_problem(data), cfg, np.random.default_rng(0))
    model.begin_epoch(cfg.noise, 0, 0)
    pairs = data.alignment.pairs[:4]
    params = list(model.parameters().values())

    def total(*_):
        parts = model.losses(pairs)
        return parts["gmi"] + parts["ecia"] + parts["iir"]

    assert check_gradients(total, params, eps=1e-6) < 1e-4


def test_zero_jitter_alignment_is_perfect_and_components_add_up():
    data = _data(n=80)
    cfg = MmeaConfig(dim=16, lr=5e-3, epochs=20, eval_every=5)
    model, trace, _ = train_mmea(_problem(data), cfg, seed=0)
    first = trace.rows[0]
    assert abs(first["loss"] - (first["gmi"] + first["ecia"] + first["iir"])) < 1e-9
    assert trace.rows[-1]["test_hits1"] == 1.0


def test_same_seed_same_trace():
    data = _data(n=40, jitter=0.3)
    cfg = MmeaConfig(dim=8, lr=5e-3, epochs=4, eval_every=2, noise=NoiseConfig(mode="off"))
    a = train_mmea(_problem(data), cfg, seed=3)[1].rows
    b = train_mmea(_problem(data), cfg, seed=3)[1].rows
    assert repr(a) == repr(b)


def test_early_stopping_restores_best():
    data = _data(n=60, jitter=0.5)
    cfg = MmeaConfig(dim=8, lr=5e-3, epochs=40, eval_every=1, val_ratio=0.3, patience=2)
    model, trace, _ = train_mmea(_problem(data), cfg, seed=0)
    assert len(trace.rows) <= 40
    val = [r["valid_hits1"] for r in trace.rows]
    emb1, emb2 = model.embeddings()
    assert max(val) >= val[-1]


def test_inference_embeddings_use_eval_ranking():
    data = _data(n=40)
    model = MmeaModel(_problem(data), MmeaConfig(dim=8), np.random.default_rng(0))
    emb1, emb2 = model.embeddings()
    test = data.alignment.test
    sims = similarity_matrix(emb1[test[:, 0]], emb2[test[:, 1]])
    mutual = mutual_nearest(emb1, emb2, test[:, 0], test[:, 1])
    for a, b in mutual:
        i = list(test[:, 0]).index(a)
        j = list(test[:, 1]).index(b)
        assert sims[i].argmax() == j and sims[:, j].argmax() == i
    assert eval_ea(emb1, emb2, test).ranks.shape == (len(test),)


class TestProbation:
    def test_promoted_after_ten_consecutive_checks(self):
        cache = ProbationCache()
        for check in range(9):
            assert update_probation(cache, [(1, 2)], check * 5) == []
        assert cache.counters == {(1, 2): 9}
        assert update_probation(cache, [(1, 2)], 45) == [(1, 2)]
        assert cache.promoted == [(1, 2)] and cache.counters == {} and cache.audit == [(45, 1, 2)]

    def test_break_resets_streak(self):
        cache = ProbationCache()
        for check in range(4):
            update_probation(cache, [(1, 2)], check * 5)
        update_probation(cache, [(3, 4)], 20)              # fifth check breaks the streak
        assert (1, 2) not in cache.counters and cache.counters[(3, 4)] == 1
        for check in range(9):
            update_probation(cache, [(1, 2)], 25 + check * 5)
        assert cache.counters[(1, 2)] == 9 and not cache.promoted
        update_probation(cache, [(1, 2)], 70)
        assert cache.promoted == [(1, 2)]

    def test_no_mutual_pairs_changes_nothing(self):
        cache = ProbationCache()
        assert update_probation(cache, [], 0) == [] and cache.counters == {} and cache.promoted == []

    @pytest.mark.parametrize("streak", range(1, 13))
    def test_exhaustive_streak_lengths(self, streak):
        cache = ProbationCache(promote_after=10)
        for check in range(streak):
            update_probation(cache, [(0, 0)], check * 5)
        assert bool(cache.promoted) == (streak >= 10)
        if streak < 10:
            assert cache.counters[(0, 0)] == streak
        else:
            assert cache.promoted == [(0, 0)] and cache.counters == {}

    def test_probe_schedule_and_exclusion(self):
        cache = ProbationCache(probe_every=5, promote_after=1)
        emb = np.eye(3)
        with pytest.raises(ValueError, match="every 5"):
            probe_and_promote(cache, emb, emb, 3, np.arange(3), np.arange(3))
        assert sorted(probe_and_promote(cache, emb, emb, 0, np.arange(3), np.arange(3))) == [(0, 0), (1, 1), (2, 2)]
        assert probe_and_promote(cache, emb, emb, 5, np.arange(3), np.arange(3)) == []
        assert len(cache.promoted) == 3

    def test_zero_jitter_promotions_are_correct(self):
        data = _data(n=60)
        cfg = MmeaConfig(dim=8, lr=5e-3, epochs=5, iterative_epochs=50, eval_every=10)
        _, trace, cache = train_mmea(_problem(data), cfg, seed=0, iterative=True)
        truth = set(map(tuple, data.alignment.pairs.tolist()))
        assert cache.promoted
        assert all(p in truth for p in cache.promoted)
        assert trace.rows[-1]["promoted"] == len(cache.promoted)
