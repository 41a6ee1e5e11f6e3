import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snag import numkit as nk
from snag.fusion import FusionWeights, VariantParams, confidence, fuse, fuse_variant, mhca
from snag.numkit import Tape, Tensor, check_gradients


def _weights(dim=4, heads=1, seed=0, ffn_dim=None):
    return FusionWeights(dim, heads, np.random.default_rng(seed), ffn_dim=ffn_dim)


def test_heads_must_divide_dim():
    with pytest.raises(ValueError, match="divisible"):
        _weights(dim=5, heads=2)


def test_single_modality_attention_is_one():
    w = _weights(dim=4, heads=2)
    h = np.random.default_rng(1).normal(size=(1, 4))
    out, beta = mhca(h, w)
    assert np.array_equal(beta.data, np.ones((2, 1, 1)))
    assert np.allclose(out.data, h @ w.w_v.data @ w.w_o.data)


def test_identical_rows_give_uniform_attention():
    w = _weights(dim=6, heads=3)
    h = np.tile(np.random.default_rng(2).normal(size=6), (4, 1))
    _, beta = mhca(h, w)
    assert np.allclose(beta.data, 0.25)


def test_mhca_matches_hand_unrolled_two_modalities():
    w = _weights(dim=2, heads=1)
    w.w_q.data[:] = [[1.0, 0.5], [-0.5, 2.0]]
    w.w_k.data[:] = [[0.3, -1.0], [1.2, 0.7]]
    w.w_v.data[:] = [[2.0, 0.0], [1.0, -1.0]]
    w.w_o.data[:] = [[0.5, 1.5], [-1.0, 0.25]]
    h = [[1.0, -2.0], [0.5, 3.0]]

    def vecmat(v, m):
        return [sum(v[k] * m[k][j] for k in range(2)) for j in range(2)]

    q = [vecmat(row, w.w_q.data.tolist()) for row in h]
    k = [vecmat(row, w.w_k.data.tolist()) for row in h]
    v = [vecmat(row, w.w_v.data.tolist()) for row in h]
    expected_beta, expected_out = [], []
    for m in range(2):
        logits = [sum(q[m][c] * k[j][c] for c in range(2)) / math.sqrt(2) for j in range(2)]
        z = sum(math.exp(x) for x in logits)
        b = [math.exp(x) / z for x in logits]
        expected_beta.append(b)
        head = [b[0] * v[0][c] + b[1] * v[1][c] for c in range(2)]
        expected_out.append(vecmat(head, w.w_o.data.tolist()))
    out, beta = mhca(np.array(h), w)
    assert np.allclose(beta.data[0], expected_beta, atol=1e-12)
    assert np.allclose(out.data, expected_out, atol=1e-12)


def test_default_head_counts_divide_paper_dims():
    FusionWeights(256, 2, np.random.default_rng(0))
    FusionWeights(300, 1, np.random.default_rng(0))


@pytest.mark.parametrize("m", [2, 3, 5])
def test_fuse_output_shapes(m):
    w = _weights(dim=4, heads=2)
    out = fuse(np.random.default_rng(m).normal(size=(m, 4)), w)
    assert out.hidden.shape == (m, 4)
    assert out.attention.shape == (2, m, m)
    assert out.confidence.shape == (m,)
    batched = fuse(np.random.default_rng(m).normal(size=(7, m, 4)), w)
    assert batched.hidden.shape == (7, m, 4) and batched.confidence.shape == (7, m)


def test_zero_ffn_reduces_second_block_to_layernorm():
    w = _weights(dim=4, heads=2)
    for t in (w.w_1, w.b_1, w.w_2, w.b_2):
        t.data[:] = 0.0
    h = np.random.default_rng(3).normal(size=(3, 4))
    attended, _ = mhca(h, w)
    first = nk.layer_norm(attended + Tensor(h))
    assert np.allclose(fuse(h, w).hidden.data, nk.layer_norm(first).data, atol=1e-12)


def test_fuse_gradient_through_both_residuals():
    rng = np.random.default_rng(4)
    w = _weights(dim=4, heads=2, ffn_dim=6)
    h = nk.parameter(rng.normal(size=(3, 3, 4)))
    target = rng.normal(size=(3, 3, 4))
    params = [h] + list(w.parameters().values())

    def loss(*_):
        out = fuse(h, w)
        return ((out.hidden - target) ** 2).sum() + (out.confidence * np.arange(3.0)).sum()

    assert check_gradients(loss, params, eps=1e-6) < 1e-4


def test_confidence_uniform_for_uniform_attention():
    assert np.allclose(confidence(np.full((2, 3, 3), 1 / 3)).data, 1 / 3)


def test_confidence_hand_value():
    # attention received: modality 0 gets 0.7 + 0.7, modality 1 gets 0.3 + 0.3
    beta = np.array([[[0.7, 0.3], [0.7, 0.3]]])
    a, b = 1.4 / math.sqrt(2), 0.6 / math.sqrt(2)
    expected = [math.exp(a) / (math.exp(a) + math.exp(b)), math.exp(b) / (math.exp(a) + math.exp(b))]
    out = confidence(beta).data
    assert np.allclose(out, expected, atol=1e-9)
    assert np.allclose(out, [0.638, 0.362], atol=5e-4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 5), heads=st.sampled_from([1, 2]))
def test_attention_and_confidence_are_distributions(seed, m, heads):
    w = _weights(dim=4, heads=heads, seed=seed % 7)
    out = fuse(np.random.default_rng(seed).normal(size=(2, m, 4)) * 3, w)
    assert np.abs(out.attention.data.sum(-1) - 1).max() < 1e-9
    assert np.abs(out.confidence.data.sum(-1) - 1).max() < 1e-9


def test_confidence_permutation_equivariant():
    w = _weights(dim=4, heads=2)
    h = np.random.default_rng(5).normal(size=(4, 4))
    perm = [2, 0, 3, 1]
    base = fuse(h, w)
    permuted = fuse(h[perm], w)
    assert np.allclose(permuted.confidence.data, base.confidence.data[perm], atol=1e-12)
    assert np.allclose(permuted.hidden.data, base.hidden.data[perm], atol=1e-12)


def test_identical_modalities_are_symmetric():
    w = _weights(dim=4, heads=2)
    out = fuse(np.tile(np.random.default_rng(6).normal(size=4), (3, 1)), w)
    assert np.allclose(out.hidden.data, out.hidden.data[0], atol=1e-12)
    assert np.allclose(out.confidence.data, 1 / 3)


def test_every_fusion_weight_receives_gradient():
    rng = np.random.default_rng(7)
    w = _weights(dim=4, heads=2)
    h = rng.normal(size=(5, 3, 4))
    target = rng.normal(size=(5, 3, 4))
    params = list(w.parameters().values())
    with Tape() as tape:
        out = fuse(h, w)
        loss = ((out.hidden - target) ** 2).sum() + (out.confidence * rng.normal(size=(5, 3))).sum()
    grads = tape.backward(loss, params)
    assert all(np.abs(g).max() > 0 for g in grads)


class TestVariants:
    def test_ws_single_modality_identity(self):
        p = VariantParams("WS", 1, 4, np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(1, 4))
        assert np.allclose(fuse_variant(h, "WS", p).data, h[0])

    def test_fc_identity_on_one_modality(self):
        p = VariantParams("FC", 1, 3, np.random.default_rng(0))
        p.weight.data[:] = np.eye(3)
        h = np.random.default_rng(2).normal(size=(1, 3))
        assert np.allclose(fuse_variant(h, "FC", p).data, h[0])

    def test_ts_is_confidence_weighted_sum(self):
        p = VariantParams("TS", 2, 4, np.random.default_rng(0))
        h = np.random.default_rng(3).normal(size=(2, 4))
        out = fuse(h, p.transformer)
        c, hb = out.confidence.data, out.hidden.data
        by_hand = [c[0] * hb[0][k] + c[1] * hb[1][k] for k in range(4)]
        assert np.allclose(fuse_variant(h, "TS", p).data, by_hand, atol=1e-12)

    def test_at_weights_are_convex(self):
        p = VariantParams("AT", 3, 4, np.random.default_rng(0))
        h = np.random.default_rng(4).normal(size=(6, 3, 4))
        out = fuse_variant(h, "AT", p).data
        lo, hi = h.min(axis=1), h.max(axis=1)
        assert ((out >= lo - 1e-12) & (out <= hi + 1e-12)).all()

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown fusion variant"):
            VariantParams("XX", 2, 4, np.random.default_rng(0))

    @pytest.mark.parametrize("kind", ["FC", "WS", "AT", "TS"])
    def test_variant_gradients(self, kind):
        rng = np.random.default_rng(8)
        p = VariantParams(kind, 3, 4, rng, heads=2, ffn_dim=5)
        h = nk.parameter(rng.normal(size=(2, 3, 4)))
        target = rng.normal(size=(2, 4))

        def loss(*_):
            return ((fuse_variant(h, kind, p) - target) ** 2).sum()

        assert check_gradients(loss, [h] + list(p.parameters().values()), eps=1e-6) < 1e-4
