import numpy as np
import pytest

from conftest import fd_grad, rel_err

from avsegkit.fusion import (
    ACTIVATIONS,
    FusionError,
    ProjectionWeights,
    cross_attend,
    cross_attend_grad,
    legacy_gated_fuse,
    mha,
    mha_forward,
    mha_grad,
)


def oracle_mha(q, k, v, activation):
    """Direct single-head evaluation of act(QK^T / sqrt(D)) V."""
    logits = q @ k.T / np.sqrt(q.shape[1])
    if activation == "softmax":
        e = np.exp(logits)
        attn = e / e.sum(axis=1, keepdims=True)
    elif activation == "sigmoid":
        attn = 1.0 / (1.0 + np.exp(-logits))
    elif activation == "minmax":
        lo = logits.min(axis=1, keepdims=True)
        hi = logits.max(axis=1, keepdims=True)
        attn = (logits - lo) / (hi - lo + 1e-8)
    elif activation == "channel":
        e = np.exp(logits)
        attn = e / e.sum(axis=0, keepdims=True)
    return attn @ v


# ---------------------------------------------------------------------------
# forward


def test_mha_matches_direct_formula_all_activations():
    rng = np.random.default_rng(0)
    for _ in range(20):
        q = rng.standard_normal((3, 4))
        k = rng.standard_normal((2, 4))
        v = rng.standard_normal((2, 4))
        for act in ACTIVATIONS:
            got = mha(q, k, v, activation=act)
            np.testing.assert_allclose(
                got, oracle_mha(q, k, v, act), atol=1e-12, rtol=0
            )


def test_single_key_softmax_returns_value_row():
    rng = np.random.default_rng(1)
    q = rng.standard_normal((5, 4))
    k = rng.standard_normal((1, 4))
    v = rng.standard_normal((1, 4))
    out = mha(q, k, v, activation="softmax")
    np.testing.assert_array_equal(out, np.repeat(v, 5, axis=0))


def test_single_key_sigmoid_orthogonal_halves_value():
    q = np.zeros((3, 4))
    k = np.ones((1, 4))
    v = np.arange(4.0)[np.newaxis, :]
    out = mha(q, k, v, activation="sigmoid")
    np.testing.assert_array_equal(out, np.repeat(0.5 * v, 3, axis=0))


def test_attention_matrix_ranges():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((6, 8))
    k = rng.standard_normal((4, 8))
    v = rng.standard_normal((4, 8))
    _, cache = mha_forward(q, k, v, activation="softmax")
    np.testing.assert_allclose(cache.attn.sum(axis=-1), 1.0, atol=1e-9, rtol=0)
    _, cache = mha_forward(q, k, v, activation="sigmoid")
    assert np.all((cache.attn > 0) & (cache.attn < 1))
    _, cache = mha_forward(q, k, v, activation="minmax")
    assert np.all((cache.attn >= 0) & (cache.attn <= 1))
    _, cache = mha_forward(q, k, v, activation="channel")
    np.testing.assert_allclose(cache.attn.sum(axis=-2), 1.0, atol=1e-9, rtol=0)


def test_minmax_constant_row_maps_to_zero():
    q = np.ones((2, 4))
    k = np.ones((3, 4))  # all logits equal per row
    v = np.ones((3, 4))
    _, cache = mha_forward(q, k, v, activation="minmax")
    np.testing.assert_array_equal(cache.attn, np.zeros((1, 2, 3)))


def test_head_split_validation():
    q = np.zeros((2, 5))
    with pytest.raises(FusionError, match="heads"):
        mha(q, q, q, num_heads=2)
    with pytest.raises(FusionError, match="activation"):
        mha(q, q, q, activation="relu")
    with pytest.raises(FusionError, match="feature dims"):
        mha(np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((2, 3)))


def test_multi_head_differs_from_single_but_same_shape():
    rng = np.random.default_rng(3)
    q = rng.standard_normal((3, 8))
    k = rng.standard_normal((2, 8))
    v = rng.standard_normal((2, 8))
    one = mha(q, k, v, num_heads=1)
    two = mha(q, k, v, num_heads=2)
    assert one.shape == two.shape == (3, 8)
    assert not np.allclose(one, two)


def test_token_permutation_invariance_softmax_sigmoid():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((5, 4))
    v = rng.standard_normal((5, 4))
    perm = rng.permutation(5)
    for act in ("softmax", "sigmoid"):
        np.testing.assert_allclose(
            mha(q, k, v, activation=act),
            mha(q, k[perm], v[perm], activation=act),
            atol=1e-12, rtol=0,
        )


# ---------------------------------------------------------------------------
# cross_attend forward


def test_cross_attend_zero_token_is_identity():
    rng = np.random.default_rng(5)
    u_v = rng.standard_normal((2, 2, 4))
    fused = cross_attend(u_v, np.zeros((1, 4))).fused
    np.testing.assert_array_equal(fused, u_v)


def test_cross_attend_matches_per_pixel_bruteforce():
    rng = np.random.default_rng(6)
    u_v = rng.standard_normal((2, 2, 4))
    u_a = rng.standard_normal((2, 4))
    # softmax/sigmoid/minmax act within each pixel's key row, so a pixel can
    # be checked in isolation; channel normalizes across pixels (below)
    for act in ("softmax", "sigmoid", "minmax"):
        fused = cross_attend(u_v, u_a, activation=act).fused
        for i in range(2):
            for j in range(2):
                pixel = u_v[i, j][np.newaxis, :]
                want = pixel + oracle_mha(pixel, u_a, u_a, act)
                np.testing.assert_allclose(fused[i, j], want[0],
                                           atol=1e-12, rtol=0)


def test_cross_attend_channel_matches_whole_grid_bruteforce():
    rng = np.random.default_rng(6)
    u_v = rng.standard_normal((2, 2, 4))
    u_a = rng.standard_normal((2, 4))
    fused = cross_attend(u_v, u_a, activation="channel").fused
    flat = u_v.reshape(4, 4)
    want = (flat + oracle_mha(flat, u_a, u_a, "channel")).reshape(2, 2, 4)
    np.testing.assert_allclose(fused, want, atol=1e-12, rtol=0)


def test_cross_attend_softmax_vs_sigmoid_differ():
    rng = np.random.default_rng(7)
    u_v = rng.standard_normal((2, 2, 4))
    u_a = rng.standard_normal((3, 4))
    a = cross_attend(u_v, u_a, activation="softmax").fused
    b = cross_attend(u_v, u_a, activation="sigmoid").fused
    assert not np.allclose(a, b)


def test_cross_attend_pixelwise_equivariance():
    rng = np.random.default_rng(8)
    flat = rng.standard_normal((6, 4))
    u_a = rng.standard_normal((2, 4))
    perm = rng.permutation(6)
    base = cross_attend(flat, u_a).fused
    shuffled = cross_attend(flat[perm], u_a).fused
    np.testing.assert_array_equal(shuffled, base[perm])


def test_cross_attend_grid_equals_flat():
    rng = np.random.default_rng(9)
    u_v = rng.standard_normal((3, 2, 4))
    u_a = rng.standard_normal((2, 4))
    grid = cross_attend(u_v, u_a).fused
    flat = cross_attend(u_v.reshape(6, 4), u_a).fused
    np.testing.assert_array_equal(grid.reshape(6, 4), flat)


def test_cross_attend_shape_validation():
    with pytest.raises(FusionError, match="rank"):
        cross_attend(np.zeros((2, 2, 2, 2)), np.zeros((1, 2)))
    with pytest.raises(FusionError, match="rank 2"):
        cross_attend(np.zeros((2, 4)), np.zeros(4))


# ---------------------------------------------------------------------------
# gradients


def scalar_loss(u_v, u_a, upstream, act, num_heads=1, weights=None):
    fused = cross_attend(u_v, u_a, activation=act, num_heads=num_heads,
                         weights=weights, keep_cache=False).fused
    return float((upstream * fused).sum())


@pytest.mark.parametrize("act", ACTIVATIONS)
def test_cross_attend_grad_matches_fd(act):
    rng = np.random.default_rng(10)
    u_v = rng.standard_normal((2, 2, 4))
    u_a = rng.standard_normal((2, 4))
    upstream = rng.standard_normal((2, 2, 4))
    result = cross_attend(u_v, u_a, activation=act)
    grads = cross_attend_grad(result, upstream)
    fd_v = fd_grad(lambda x: scalar_loss(x, u_a, upstream, act), u_v)
    fd_a = fd_grad(lambda x: scalar_loss(u_v, x, upstream, act), u_a)
    assert rel_err(grads.d_visual, fd_v) < 1e-4
    assert rel_err(grads.d_audio, fd_a) < 1e-4


def test_cross_attend_grad_multi_head_and_projections():
    rng = np.random.default_rng(11)
    u_v = rng.standard_normal((3, 4))
    u_a = rng.standard_normal((2, 4))
    upstream = rng.standard_normal((3, 4))
    weights = ProjectionWeights.random(4, rng)
    result = cross_attend(u_v, u_a, activation="sigmoid", num_heads=2,
                          weights=weights)
    grads = cross_attend_grad(result, upstream)

    def loss_with(wq=None, wk=None, wv=None, uv=u_v, ua=u_a):
        w = ProjectionWeights(
            wq if wq is not None else weights.wq,
            wk if wk is not None else weights.wk,
            wv if wv is not None else weights.wv,
        )
        return scalar_loss(uv, ua, upstream, "sigmoid", num_heads=2, weights=w)

    assert rel_err(grads.d_visual,
                   fd_grad(lambda x: loss_with(uv=x), u_v)) < 1e-4
    assert rel_err(grads.d_audio,
                   fd_grad(lambda x: loss_with(ua=x), u_a)) < 1e-4
    assert rel_err(grads.d_weights.wq,
                   fd_grad(lambda x: loss_with(wq=x), weights.wq)) < 1e-4
    assert rel_err(grads.d_weights.wk,
                   fd_grad(lambda x: loss_with(wk=x), weights.wk)) < 1e-4
    assert rel_err(grads.d_weights.wv,
                   fd_grad(lambda x: loss_with(wv=x), weights.wv)) < 1e-4


def test_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(12)
    result = cross_attend(rng.standard_normal((2, 2, 4)),
                          rng.standard_normal((2, 4)))
    grads = cross_attend_grad(result, np.zeros((2, 2, 4)))
    assert not grads.d_visual.any() and not grads.d_audio.any()


def test_residual_identity_with_silent_audio():
    rng = np.random.default_rng(13)
    upstream = rng.standard_normal((2, 2, 4))
    result = cross_attend(rng.standard_normal((2, 2, 4)), np.zeros((1, 4)))
    grads = cross_attend_grad(result, upstream)
    # keys and values are zero, so only the residual path carries signal
    np.testing.assert_array_equal(grads.d_visual, upstream)


def test_grad_requires_cache():
    result = cross_attend(np.zeros((2, 4)), np.zeros((1, 4)), keep_cache=False)
    with pytest.raises(FusionError, match="cache"):
        cross_attend_grad(result, np.zeros((2, 4)))


def test_mha_grad_identity_projections_match_raw():
    rng = np.random.default_rng(14)
    q = rng.standard_normal((3, 4))
    k = rng.standard_normal((2, 4))
    v = rng.standard_normal((2, 4))
    d_out = rng.standard_normal((3, 4))
    _, cache_raw = mha_forward(q, k, v, activation="softmax")
    _, cache_eye = mha_forward(q, k, v, activation="softmax",
                               weights=ProjectionWeights.identity(4))
    raw = mha_grad(cache_raw, d_out)
    eye = mha_grad(cache_eye, d_out)
    np.testing.assert_allclose(raw.d_q, eye.d_q, atol=1e-12, rtol=0)
    np.testing.assert_allclose(raw.d_k, eye.d_k, atol=1e-12, rtol=0)
    np.testing.assert_allclose(raw.d_v, eye.d_v, atol=1e-12, rtol=0)


# ---------------------------------------------------------------------------
# legacy comparison mode


def test_legacy_gated_fuse_matches_manual():
    rng = np.random.default_rng(15)
    u_v = rng.standard_normal((2, 2, 4))
    u_a = rng.standard_normal((3, 4))
    flat = u_v.reshape(4, 4)
    gate = oracle_mha(u_a, flat, flat, "softmax").mean(axis=0)
    want = (flat + flat * gate).reshape(2, 2, 4)
    np.testing.assert_allclose(legacy_gated_fuse(u_v, u_a), want,
                               atol=1e-12, rtol=0)


def test_legacy_gated_fuse_preserves_shape():
    rng = np.random.default_rng(16)
    u_v = rng.standard_normal((3, 5, 4))
    out = legacy_gated_fuse(u_v, rng.standard_normal((2, 4)))
    assert out.shape == (3, 5, 4)
