import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metatrans import nn
from metatrans import tensor as tn
from metatrans.tensor import DimensionError, Tensor


def block(seed=0, d=8, H=2, dh=4, dff=16):
    return nn.init_encoder_block(np.random.default_rng(seed), d, H, dh, dff)


def ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_softmax(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def ref_mha(x, p):
    """Loop-over-heads reference written against plain numpy."""
    H, d, dh = p.wq.shape
    heads = []
    for h in range(H):
        q, k, v = x @ p.wq.data[h], x @ p.wk.data[h], x @ p.wv.data[h]
        heads.append(ref_softmax(q @ k.T / np.sqrt(dh)) @ v)
    return np.concatenate(heads, axis=-1) @ p.wo.data


def ref_block(x, p, eps=1e-5):
    ln1 = lambda t: ref_layer_norm(t, p.ln1_gain.data, p.ln1_bias.data, eps)  # noqa: E731
    ln2 = lambda t: ref_layer_norm(t, p.ln2_gain.data, p.ln2_bias.data, eps)  # noqa: E731
    y = ln1(x + ref_mha(ln1(x), p))
    ffn = lambda t: np.maximum(t @ p.w1.data + p.b1.data, 0) @ p.w2.data + p.b2.data  # noqa: E731
    return ln2(y + ffn(ln2(y)))


# -- positional embedding

def test_positional_row_zero():
    row = nn.positional_embedding(4, 6)[0]
    assert np.all(row[0::2] == 0.0) and np.all(row[1::2] == 1.0)


def test_positional_single():
    assert nn.positional_embedding(1, 2).tolist() == [[0.0, 1.0]]


def test_positional_formula():
    T, d = 16, 8
    table = nn.positional_embedding(T, d)
    for pos in range(T):
        for i in range(d // 2):
            angle = pos / 10000 ** (2 * i / d)
            assert abs(table[pos, 2 * i] - np.sin(angle)) <= 1e-12
            assert abs(table[pos, 2 * i + 1] - np.cos(angle)) <= 1e-12
    assert np.abs(table).max() <= 1.0


def test_positional_rejects_odd_d():
    with pytest.raises(DimensionError):
        nn.positional_embedding(4, 5)
    with pytest.raises(DimensionError):
        nn.positional_embedding(0, 4)


# -- attention

def test_mha_matches_loop_reference():
    p = block(1)
    x = np.random.default_rng(1).normal(size=(5, 8))
    np.testing.assert_allclose(nn.multi_head_attention(x, p).data, ref_mha(x, p), atol=1e-12)


def test_mha_single_frame_closed_form():
    p = block(2)
    x = np.random.default_rng(2).normal(size=(1, 8))
    values = np.concatenate([x @ p.wv.data[h] for h in range(p.n_heads)], axis=-1)
    np.testing.assert_allclose(nn.multi_head_attention(x, p).data, values @ p.wo.data, atol=1e-12)


def test_mha_one_head_is_single_head_attention():
    p = block(3, H=1, dh=8)
    x = np.random.default_rng(3).normal(size=(6, 8))
    single = nn.self_attention(Tensor(x), p.wq[0], p.wk[0], p.wv[0]) @ p.wo
    np.testing.assert_allclose(nn.multi_head_attention(x, p).data, single.data, atol=1e-12)


def test_mha_shape_error():
    with pytest.raises(DimensionError):
        nn.multi_head_attention(np.ones((3, 7)), block())


def test_mha_batched_equals_per_sample():
    p = block(4)
    x = np.random.default_rng(4).normal(size=(3, 5, 8))
    batched = nn.multi_head_attention(x, p).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], ref_mha(x[i], p), atol=1e-12)


# -- encoder block

def test_block_matches_reference():
    p = block(5)
    x = np.random.default_rng(5).normal(size=(6, 8))
    np.testing.assert_allclose(nn.encoder_block(x, p).data, ref_block(x, p), atol=1e-12)


def test_block_constant_rows_stay_identical():
    p = block(6)
    x = np.tile(np.random.default_rng(6).normal(size=8), (7, 1))
    out = nn.encoder_block(x, p).data
    np.testing.assert_allclose(out, np.tile(out[0], (7, 1)), atol=1e-13)


def test_block_zero_weights_is_double_layer_norm():
    p = block(7)
    for name in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"):
        getattr(p, name).data[...] = 0.0
    x = np.random.default_rng(7).normal(size=(4, 8))
    ln = lambda t, g, b: tn.layer_norm_feature(t, g, b)  # noqa: E731
    oracle = ln(ln(x, p.ln1_gain, p.ln1_bias), p.ln2_gain, p.ln2_bias)
    np.testing.assert_allclose(nn.encoder_block(x, p).data, oracle.data, atol=1e-12)


def test_block_params_validate():
    p = block()
    p.validate()
    p.wo = Tensor(np.zeros((3, 8)))
    with pytest.raises(DimensionError):
        p.validate()


# -- permutation properties

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_equivariance_chain(seed, T):
    rng = np.random.default_rng(seed)
    p = block(seed % 7)
    x = rng.normal(size=(T, 8))
    perm = rng.permutation(T)
    fns = [
        lambda v: nn.self_attention(Tensor(v), p.wq[0], p.wk[0], p.wv[0]),
        lambda v: nn.multi_head_attention(v, p),
        lambda v: nn.feed_forward(Tensor(v), p),
        lambda v: tn.layer_norm_feature(v, p.ln1_gain, p.ln1_bias),
        lambda v: nn.encoder_block(v, p),
        lambda v: nn.encoder_stack(v, [p, block(seed % 5 + 1)]),
    ]
    for f in fns:
        np.testing.assert_allclose(f(x[perm]).data, f(x).data[perm], atol=1e-9, rtol=0)
    pooled = lambda v: nn.mean_pool_time(nn.encoder_stack(v, [p]))  # noqa: E731
    np.testing.assert_allclose(pooled(x[perm]).data, pooled(x).data, atol=1e-9, rtol=0)


def test_positional_embedding_breaks_invariance():
    p = block(8)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(10, 8))
    P = nn.positional_embedding(10, 8)

    def f(v):
        return nn.mean_pool_time(nn.encoder_stack(v + P, [p])).data

    worst = max(np.abs(f(x[rng.permutation(10)]) - f(x)).max() for _ in range(20))
    assert worst > 1e-3


# -- pooling, reversal, heads

def test_mean_pool_examples():
    r = np.array([1.0, -2.0, 3.0])
    assert nn.mean_pool_time(np.tile(r, (4, 1))).data.tolist() == [r.tolist()]
    assert nn.mean_pool_time(np.array([[0.0, 4.0], [2.0, 6.0]])).data.tolist() == [[1.0, 5.0]]


def test_mean_pool_gradient_spreads_evenly():
    x = Tensor(np.zeros((4, 3)), requires_grad=True)
    tn.backward(tn.sum_(nn.mean_pool_time(x)))
    assert np.all(x.grad == 0.25)


def test_mlp_head_zero_weights():
    h = nn.init_mlp_head(np.random.default_rng(0), 5, 7, 3)
    for t in h.named().values():
        t.data[...] = 0.0
    assert np.all(nn.mlp_head(np.ones((1, 5)), h).data == 0.0)


def test_mlp_head_identity_slice():
    w = np.zeros((5, 2))
    w[0, 0] = w[1, 1] = 1.0
    h = nn.MLPHead(None, None, Tensor(w), Tensor(np.zeros(2)))
    x = np.array([[0.3, -0.7, 2.0, 1.0, 5.0]])
    assert nn.mlp_head(x, h).data.tolist() == [[0.3, -0.7]]


def test_mlp_head_composition_oracle():
    rng = np.random.default_rng(9)
    h = nn.init_mlp_head(rng, 6, 4, 2)
    x = rng.normal(size=(1, 6))
    oracle = np.maximum(x @ h.w1.data + h.b1.data, 0) @ h.w2.data + h.b2.data
    np.testing.assert_allclose(nn.mlp_head(x, h).data, oracle, atol=1e-12, rtol=0)
    with pytest.raises(DimensionError):
        nn.mlp_head(np.ones((1, 5)), h)


def test_block_gradients_pass_grad_check():
    p = nn.init_encoder_block(np.random.default_rng(10), 4, 2, 2, 6)
    x = np.random.default_rng(11).uniform(-1, 1, size=(3, 4))
    w = np.random.default_rng(12).normal(size=(3, 4))
    params = list(p.named().values())
    rep = tn.grad_check(lambda: tn.sum_(nn.encoder_block(x, p) * w), params, tol=1e-4)
    assert rep["passed"], rep["errors"]
