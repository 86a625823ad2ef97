import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbnmt import tensor as T
from sbnmt.attention import (
    AttentionConfig,
    AttentionMaskError,
    AttentionParams,
    FusionConfig,
    MaskSpec,
    attention_weights,
    fuse,
    multi_head_attention,
    sb_multi_head,
    sb_multi_head_stacked,
    sbdpa,
    scaled_dot_attention,
    score_entries,
)
from sbnmt.tensor import Tensor

CAUSAL = MaskSpec("causal_self")


def rand(rng, *shape):
    return Tensor(rng.normal(size=shape))


def naive_attention(Q, K, V, mask=None):
    """Two-loop reference: explicit scores, -inf masking, softmax, weighted sum."""
    L, Lk = Q.shape[0], K.shape[0]
    out = np.zeros((L, V.shape[1]))
    for i in range(L):
        s = np.array([Q[i] @ K[j] / math.sqrt(Q.shape[1]) if mask is None or mask[i, j] else -np.inf
                      for j in range(Lk)])
        w = np.exp(s - s.max())
        w /= w.sum()
        for j in range(Lk):
            out[i] += w[j] * V[j]
    return out


def random_params(rng, d):
    return AttentionParams(*(Tensor(rng.normal(size=(d, d)) / math.sqrt(d)) for _ in range(4)))


def per_head_mha(q, k, v, p, h, mask=None):
    d = q.shape[-1]
    dk = d // h
    heads = []
    for i in range(h):
        sl = slice(i * dk, (i + 1) * dk)
        heads.append(naive_attention(q @ p.wq.data[:, sl], k @ p.wk.data[:, sl], v @ p.wv.data[:, sl], mask))
    return np.concatenate(heads, axis=-1) @ p.wo.data


# ---------------------------------------------------------------- config types

def test_attention_config_divisibility():
    assert AttentionConfig(64, 4).d_k == 16
    with pytest.raises(ValueError):
        AttentionConfig(10, 3)


def test_mask_kinds():
    assert MaskSpec("none").matrix(3, 3) is None
    m = CAUSAL.matrix(3, 3)
    np.testing.assert_array_equal(m, np.tril(np.ones((3, 3), bool)))
    np.testing.assert_array_equal(CAUSAL.cross().matrix(3, 3), m)  # inclusive j <= i
    with pytest.raises(ValueError):
        MaskSpec("banded")


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(mode="bilinear")
    with pytest.raises(ValueError):
        FusionConfig(lam=-0.1)
    with pytest.raises(ValueError):
        FusionConfig(activation="gelu")


# ---------------------------------------------------------------- scaled dot attention

def test_single_key_returns_value_row():
    rng = np.random.default_rng(0)
    V = rand(rng, 1, 3)
    out = scaled_dot_attention(rand(rng, 4, 5), rand(rng, 1, 5), V)
    np.testing.assert_allclose(out.data, np.repeat(V.data, 4, axis=0), atol=1e-15)


def test_identical_keys_average_values():
    rng = np.random.default_rng(1)
    k = rng.normal(size=(1, 4))
    V = np.array([[1.0, 2.0], [3.0, 6.0]])
    out = scaled_dot_attention(rand(rng, 2, 4), Tensor(np.repeat(k, 2, axis=0)), Tensor(V))
    np.testing.assert_allclose(out.data, [[2.0, 4.0], [2.0, 4.0]], atol=1e-15)


def test_matches_two_loop_reference():
    rng = np.random.default_rng(2)
    Q, K, V = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(scaled_dot_attention(Tensor(Q), Tensor(K), Tensor(V)).data,
                               naive_attention(Q, K, V), atol=1e-10)
    np.testing.assert_allclose(scaled_dot_attention(Tensor(Q), Tensor(K), Tensor(V), CAUSAL).data,
                               naive_attention(Q, K, V, CAUSAL.matrix(3, 3)), atol=1e-10)


def test_fully_masked_row_is_error():
    rng = np.random.default_rng(3)
    with pytest.raises(AttentionMaskError):
        scaled_dot_attention(rand(rng, 2, 4), rand(rng, 2, 4), rand(rng, 2, 4),
                             key_valid=np.array([False, False]))


def test_key_dim_mismatch():
    rng = np.random.default_rng(4)
    with pytest.raises(ValueError):
        scaled_dot_attention(rand(rng, 2, 4), rand(rng, 2, 3), rand(rng, 2, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
def test_attention_rows_sum_to_one(L, dk, seed):
    rng = np.random.default_rng(seed)
    w = attention_weights(rand(rng, 2, L, dk), rand(rng, 2, L, dk), CAUSAL).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)
    assert (np.triu(np.ones((L, L)), 1)[None] * w == 0).all()


def test_score_count_is_quadratic_in_length():
    rng = np.random.default_rng(5)
    for L in (4, 8):
        score_entries.clear()
        scaled_dot_attention(rand(rng, L, 2), rand(rng, L, 2), rand(rng, L, 2), site="probe")
        assert score_entries["probe"] == L * L


# ---------------------------------------------------------------- multi-head

def test_single_head_identity_projection_equals_attention():
    rng = np.random.default_rng(6)
    d = 4
    eye = lambda: Tensor(np.eye(d))
    q, k, v = rand(rng, 3, d), rand(rng, 5, d), rand(rng, 5, d)
    out = multi_head_attention(q, k, v, AttentionParams(eye(), eye(), eye(), eye()), 1)
    np.testing.assert_allclose(out.data, scaled_dot_attention(q, k, v).data, atol=1e-15)


def test_zero_output_projection():
    rng = np.random.default_rng(7)
    p = random_params(rng, 4)
    p.wo = Tensor(np.zeros((4, 4)))
    assert not multi_head_attention(rand(rng, 3, 4), rand(rng, 3, 4), rand(rng, 3, 4), p, 2).data.any()


@pytest.mark.parametrize("masked", [False, True])
def test_two_heads_match_per_head_oracle(masked):
    rng = np.random.default_rng(8)
    d, L = 6, 4
    p = random_params(rng, d)
    x = rng.normal(size=(L, d))
    mask = CAUSAL if masked else None
    out = multi_head_attention(Tensor(x), Tensor(x), Tensor(x), p, 2, mask)
    np.testing.assert_allclose(out.data, per_head_mha(x, x, x, p, 2, CAUSAL.matrix(L, L) if masked else None),
                               atol=1e-10)


def test_multi_head_gradient():
    rng = np.random.default_rng(9)
    p = random_params(rng, 4)
    x = rng.normal(size=(2, 3, 4))
    f = lambda t: T.tsum(T.tanh(multi_head_attention(t, t, t, p, 2, CAUSAL)))
    assert T.finite_difference_check(f, x) < 1e-6


# ---------------------------------------------------------------- fusion

def test_linear_lambda_zero_is_history():
    rng = np.random.default_rng(10)
    h, f = rand(rng, 3, 4), rand(rng, 3, 4)
    assert fuse(h, f, FusionConfig("linear", 0.0)).data.tobytes() == h.data.tobytes()


def test_nonlinear_zero_future_is_history():
    rng = np.random.default_rng(11)
    h = rand(rng, 3, 4)
    np.testing.assert_array_equal(fuse(h, Tensor(np.zeros((3, 4))), FusionConfig("nonlinear", 0.1)).data, h.data)


def test_fusion_formulas():
    rng = np.random.default_rng(12)
    h, f = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    np.testing.assert_allclose(fuse(Tensor(h), Tensor(f), FusionConfig("linear", 0.3)).data, h + 0.3 * f)
    np.testing.assert_allclose(fuse(Tensor(h), Tensor(f), FusionConfig("nonlinear", 0.3, "relu")).data,
                               h + 0.3 * np.maximum(f, 0))
    W, b = rng.normal(size=(6, 6)), rng.normal(size=6)
    g = 1 / (1 + np.exp(-(np.concatenate([h, f], -1) @ W + b)))
    cfg = FusionConfig("gate").with_gate(Tensor(W), Tensor(b))
    np.testing.assert_allclose(fuse(Tensor(h), Tensor(f), cfg).data, g[:, :3] * h + g[:, 3:] * f, atol=1e-14)


def test_gate_saturation_keeps_history():
    rng = np.random.default_rng(13)
    h, f = rand(rng, 2, 3), rand(rng, 2, 3)
    bias = np.concatenate([np.full(3, 50.0), np.full(3, -50.0)])
    cfg = FusionConfig("gate").with_gate(Tensor(np.zeros((6, 6))), Tensor(bias))
    np.testing.assert_allclose(fuse(h, f, cfg).data, h.data, atol=1e-20)


def test_gate_without_weights_is_error():
    rng = np.random.default_rng(14)
    with pytest.raises(ValueError):
        fuse(rand(rng, 2, 3), rand(rng, 2, 3), FusionConfig("gate"))


def test_fusion_shape_mismatch():
    rng = np.random.default_rng(15)
    with pytest.raises(ValueError):
        fuse(rand(rng, 2, 3), rand(rng, 3, 3), FusionConfig())


# ---------------------------------------------------------------- sbdpa

def test_identical_streams_linear_scale():
    rng = np.random.default_rng(16)
    q, k, v = rand(rng, 4, 3), rand(rng, 4, 3), rand(rng, 4, 3)
    hf, hb = sbdpa(q, k, v, q, k, v, CAUSAL, FusionConfig("linear", 0.4))
    ref = 1.4 * scaled_dot_attention(q, k, v, CAUSAL).data
    np.testing.assert_allclose(hf.data, ref, atol=1e-14)
    np.testing.assert_allclose(hb.data, ref, atol=1e-14)


def test_sbdpa_lambda_zero_is_plain_attention():
    rng = np.random.default_rng(17)
    args = [rand(rng, 4, 3) for _ in range(6)]
    hf, _ = sbdpa(*args, CAUSAL, FusionConfig("linear", 0.0))
    np.testing.assert_array_equal(hf.data, scaled_dot_attention(*args[:3], CAUSAL).data)


def test_sbdpa_compositional_oracle():
    rng = np.random.default_rng(18)
    qf, kf, vf, qb, kb, vb = (rng.normal(size=(5, 3)) for _ in range(6))
    m = CAUSAL.matrix(5, 5)
    hf, hb = sbdpa(*(Tensor(a) for a in (qf, kf, vf, qb, kb, vb)), CAUSAL, FusionConfig("nonlinear", 0.1))
    np.testing.assert_allclose(hf.data, naive_attention(qf, kf, vf, m) + 0.1 * np.tanh(naive_attention(qf, kb, vb, m)),
                               atol=1e-10)
    np.testing.assert_allclose(hb.data, naive_attention(qb, kb, vb, m) + 0.1 * np.tanh(naive_attention(qb, kf, vf, m)),
                               atol=1e-10)


def test_sbdpa_length_mismatch():
    rng = np.random.default_rng(19)
    with pytest.raises(ValueError):
        sbdpa(rand(rng, 4, 3), rand(rng, 4, 3), rand(rng, 4, 3), rand(rng, 4, 3), rand(rng, 5, 3), rand(rng, 5, 3),
              CAUSAL, FusionConfig())


# ---------------------------------------------------------------- synchronous bidirectional multi-head

def test_sb_multi_head_single_head_identity_equals_sbdpa():
    rng = np.random.default_rng(20)
    d = 4
    eye = AttentionParams(*(Tensor(np.eye(d)) for _ in range(4)))
    xs = [rand(rng, 4, d) for _ in range(6)]
    cfg = FusionConfig("nonlinear", 0.3)
    a = sb_multi_head(*xs, eye, 1, CAUSAL, cfg)
    b = sbdpa(*xs, CAUSAL, cfg)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.data, y.data, atol=1e-14)


def test_sb_multi_head_lambda_zero_equals_mha():
    rng = np.random.default_rng(21)
    p = random_params(rng, 6)
    xf, xb = rand(rng, 2, 5, 6), rand(rng, 2, 5, 6)
    hf, hb = sb_multi_head(xf, xf, xf, xb, xb, xb, p, 3, CAUSAL, FusionConfig("linear", 0.0))
    np.testing.assert_allclose(hf.data, multi_head_attention(xf, xf, xf, p, 3, CAUSAL).data, atol=1e-12)
    np.testing.assert_allclose(hb.data, multi_head_attention(xb, xb, xb, p, 3, CAUSAL).data, atol=1e-12)


def test_sb_multi_head_per_head_oracle():
    rng = np.random.default_rng(22)
    d, L, h = 6, 4, 2
    p = random_params(rng, d)
    xf, xb = rng.normal(size=(L, d)), rng.normal(size=(L, d))
    m = CAUSAL.matrix(L, L)
    hf, hb = sb_multi_head(*(Tensor(a) for a in (xf, xf, xf, xb, xb, xb)), p, h, CAUSAL,
                           FusionConfig("nonlinear", 0.1))
    dk = d // h

    def stream(x_own, x_other):
        heads = []
        for i in range(h):
            sl = slice(i * dk, (i + 1) * dk)
            proj = lambda x, w: x @ w.data[:, sl]
            hist = naive_attention(proj(x_own, p.wq), proj(x_own, p.wk), proj(x_own, p.wv), m)
            fut = naive_attention(proj(x_own, p.wq), proj(x_other, p.wk), proj(x_other, p.wv), m)
            heads.append(hist + 0.1 * np.tanh(fut))
        return np.concatenate(heads, -1) @ p.wo.data

    np.testing.assert_allclose(hf.data, stream(xf, xb), atol=1e-10)
    np.testing.assert_allclose(hb.data, stream(xb, xf), atol=1e-10)


@pytest.mark.parametrize("mode", ["linear", "nonlinear", "gate"])
def test_swapping_streams_swaps_outputs(mode):
    rng = np.random.default_rng(23)
    d = 4
    p = random_params(rng, d)
    cfg = FusionConfig(mode, 0.2)
    if mode == "gate":
        cfg = cfg.with_gate(rand(rng, 2 * d, 2 * d), rand(rng, 2 * d))
    xf, xb = rand(rng, 3, 5, d), rand(rng, 3, 5, d)
    hf, hb = sb_multi_head(xf, xf, xf, xb, xb, xb, p, 2, CAUSAL, cfg)
    sf, sb = sb_multi_head(xb, xb, xb, xf, xf, xf, p, 2, CAUSAL, cfg)
    np.testing.assert_array_equal(sf.data, hb.data)
    np.testing.assert_array_equal(sb.data, hf.data)


def test_padding_keys_are_ignored():
    rng = np.random.default_rng(24)
    d = 4
    p = random_params(rng, d)
    cfg = FusionConfig("nonlinear", 0.5)
    x = rng.normal(size=(2, 1, 5, d))
    valid = np.ones((2, 1, 5), bool)
    valid[1, 0, 3:] = False  # backward stream is two positions shorter
    out = sb_multi_head_stacked(Tensor(x), Tensor(x), Tensor(x), p, 2, CAUSAL, cfg, valid)
    x2 = x.copy()
    x2[1, 0, 3:] = rng.normal(size=(2, d))  # change only padded backward positions
    out2 = sb_multi_head_stacked(Tensor(x2), Tensor(x2), Tensor(x2), p, 2, CAUSAL, cfg, valid)
    np.testing.assert_array_equal(out.data[0], out2.data[0])


def test_sb_multi_head_gradients():
    rng = np.random.default_rng(25)
    d = 4
    p = random_params(rng, d)
    cfg = FusionConfig("gate").with_gate(rand(rng, 2 * d, 2 * d), rand(rng, 2 * d))
    x = rng.normal(size=(2, 1, 3, d))
    f = lambda t: T.tsum(T.tanh(sb_multi_head_stacked(t, t, t, p, 2, CAUSAL, cfg)))
    assert T.finite_difference_check(f, x) < 1e-6


# ---------------------------------------------------------------- leakage

def _input_grad(fn, x, pos):
    xt = Tensor(x, requires_grad=True)
    out = fn(xt)
    T.tsum(out[pos]).backward()
    return xt.grad


@pytest.mark.parametrize("seed", range(5))
def test_no_future_leakage_same_and_cross_stream(seed):
    rng = np.random.default_rng(seed)
    d, L = 4, 6
    p = random_params(rng, d)
    cfg = FusionConfig(["linear", "nonlinear", "gate"][seed % 3], 0.5)
    if cfg.mode == "gate":
        cfg = cfg.with_gate(rand(rng, 2 * d, 2 * d), rand(rng, 2 * d))
    x = rng.normal(size=(2, 1, L, d))
    fn = lambda t: sb_multi_head_stacked(t, t, t, p, 2, CAUSAL, cfg)
    for s in (0, 1):
        for i in range(L):
            g = _input_grad(fn, x, (s, 0, i))
            assert not g[:, :, i + 1:].any()  # neither own nor partner stream beyond i
            assert g[1 - s, 0, :i + 1].any()  # the partner prefix does contribute
