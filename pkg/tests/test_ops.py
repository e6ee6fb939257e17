"""nn ops: conv, layer norm, windowing, attention, shuffling, sampling."""

import numpy as np
import pytest

from dmsr import ops
from dmsr.tensor import Tensor, Tape, ShapeError

from helpers import check_gradients, weighted_sum_loss


# conv2d ---------------------------------------------------------------------


def conv2d_loops(x, w, b, stride, pad):
    """Naive six-loop convolution oracle."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for bb in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, c, u, v] * xp[bb, c, i * stride + u,
                                                          j * stride + v]
                    out[bb, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.random((1, 3, 5, 5))
    w = np.zeros((3, 3, 1, 1))
    for c in range(3):
        w[c, c, 0, 0] = 1.0
    out = ops.conv2d(Tensor(x), Tensor(w))
    np.testing.assert_allclose(out.data, x)


def test_conv2d_box_sum_on_constant():
    c = 0.7
    x = np.full((1, 1, 6, 6), c)
    w = np.ones((1, 1, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), padding=1).data
    np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c)


def test_conv2d_matches_naive_loops():
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (1, 3, 6, 6))
    w = rng.uniform(-1, 1, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, (4,))
    for stride, pad in [(1, 0), (1, 1), (2, 1)]:
        got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                         padding=pad).data
        want = conv2d_loops(x, w, b, stride, pad)
        assert np.abs(got - want).max() < 1e-10


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_conv2d_non_positive_output():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 5, 5))))


def test_conv2d_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(-1, 1, (2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (3,)), requires_grad=True)

    for stride, pad in [(1, 1), (2, 0)]:
        check_gradients(
            lambda: weighted_sum_loss(ops.conv2d(x, w, b, stride=stride, padding=pad)),
            [x, w, b], n_coords=6)


def test_depthwise_conv2d_matches_grouped_loops():
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 4, 5, 5))
    w = rng.uniform(-1, 1, (4, 3, 3))
    got = ops.depthwise_conv2d(Tensor(x), Tensor(w), padding=1).data
    # per-channel naive conv
    w4 = np.zeros((4, 4, 3, 3))
    for c in range(4):
        w4[c, c] = w[c]
    want = conv2d_loops(x, w4, None, 1, 1)
    assert np.abs(got - want).max() < 1e-10


def test_depthwise_conv2d_gradients():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (2,)), requires_grad=True)
    check_gradients(
        lambda: weighted_sum_loss(ops.depthwise_conv2d(x, w, b, padding=1)),
        [x, w, b], n_coords=6)


# layer norm ------------------------------------------------------------------


def test_layer_norm_constant_row():
    out = ops.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_already_normalized():
    out = ops.layer_norm(Tensor([-1.0, 1.0]), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-5)


def test_layer_norm_statistics():
    rng = np.random.default_rng(5)
    x = rng.uniform(-3, 3, (10, 16))
    out = ops.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)),
                         eps=1e-5).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-6
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_layer_norm_rejects_bad_eps():
    with pytest.raises(ValueError):
        ops.layer_norm(Tensor([1.0]), Tensor([1.0]), Tensor([0.0]), eps=0.0)


def test_layer_norm_gradients():
    rng = np.random.default_rng(6)
    x = Tensor(rng.uniform(-2, 2, (4, 8)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, (8,)), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, (8,)), requires_grad=True)
    check_gradients(lambda: weighted_sum_loss(ops.layer_norm(x, g, b)),
                    [x, g, b], n_coords=8)


# windows ----------------------------------------------------------------------


def test_window_partition_single_window():
    rng = np.random.default_rng(7)
    x = rng.random((1, 4, 4, 3))
    wins = ops.window_partition(Tensor(x), 4)
    assert wins.shape == (1, 16, 3)
    np.testing.assert_array_equal(wins.data[0], x.reshape(16, 3))


def test_window_round_trip_bit_exact():
    rng = np.random.default_rng(8)
    x = rng.random((2, 8, 8, 5))
    wins = ops.window_partition(Tensor(x), 4)
    assert wins.shape == (2 * 4, 16, 5)
    back = ops.window_merge(wins, 4, 8, 8)
    assert (back.data == x).all()


def test_window_non_divisible():
    with pytest.raises(ShapeError):
        ops.window_partition(Tensor(np.ones((1, 6, 6, 1))), 4)


def test_cyclic_shift_round_trip():
    from dmsr.tensor import roll
    rng = np.random.default_rng(9)
    x = Tensor(rng.random((1, 8, 8, 2)))
    shifted = roll(x, (-2, -2), (1, 2))
    back = roll(shifted, (2, 2), (1, 2))
    assert (back.data == x.data).all()


# attention ---------------------------------------------------------------------


def _attn_params(rng, dim, heads):
    return ops.AttentionParams(rng, dim, heads)


def test_attention_single_token_is_value_projection():
    rng = np.random.default_rng(10)
    p = _attn_params(rng, 8, 2)
    x = Tensor(rng.uniform(-1, 1, (3, 1, 8)))
    out = ops.multi_head_attention(x, p)
    # with one token the softmax weight is exactly 1, so output is
    # proj(v(x)); recompute that directly
    qkv = x.data @ p.qkv_w.data + p.qkv_b.data
    v = qkv[..., 16:24]
    want = v @ p.proj_w.data + p.proj_b.data
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_attention_softmax_rows_sum_to_one():
    rng = np.random.default_rng(11)
    p = _attn_params(rng, 8, 2)
    x = Tensor(rng.uniform(-1, 1, (2, 16, 8)))
    with Tape() as tape:
        ops.multi_head_attention(x, p)
    softmax_nodes = [n for n in tape.nodes if n.op == "softmax"]
    assert softmax_nodes, "attention must softmax its logits"
    for node in softmax_nodes:
        sums = node.out.data.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(12)
    p = _attn_params(rng, 8, 2)
    x = rng.uniform(-1, 1, (1, 16, 8))
    perm = rng.permutation(16)
    out = ops.multi_head_attention(Tensor(x), p).data
    out_perm = ops.multi_head_attention(Tensor(x[:, perm]), p).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-10)


def test_attention_head_divisibility():
    rng = np.random.default_rng(13)
    with pytest.raises(ShapeError):
        ops.AttentionParams(rng, 10, 3)


def test_attention_gradients():
    rng = np.random.default_rng(14)
    p = _attn_params(rng, 4, 2)
    x = Tensor(rng.uniform(-1, 1, (2, 6, 4)), requires_grad=True)
    leaves = [x] + p.parameters()
    check_gradients(lambda: weighted_sum_loss(ops.multi_head_attention(x, p)),
                    leaves, n_coords=4)


def test_attention_position_bias_breaks_permutation_symmetry():
    rng = np.random.default_rng(40)
    p = ops.AttentionParams(rng, 8, 2, window=4, position_bias=True)
    p.pos_bias.data[:] = rng.uniform(-1, 1, p.pos_bias.shape)
    x = rng.uniform(-1, 1, (1, 16, 8))
    perm = rng.permutation(16)
    out = ops.multi_head_attention(Tensor(x), p).data
    out_perm = ops.multi_head_attention(Tensor(x[:, perm]), p).data
    assert np.abs(out_perm - out[:, perm]).max() > 1e-6


def test_attention_position_bias_gradients():
    rng = np.random.default_rng(41)
    p = ops.AttentionParams(rng, 4, 2, window=2, position_bias=True)
    x = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
    leaves = [x, p.pos_bias]
    check_gradients(lambda: weighted_sum_loss(ops.multi_head_attention(x, p)),
                    leaves, n_coords=4)


def test_attention_position_bias_token_count_mismatch():
    rng = np.random.default_rng(42)
    p = ops.AttentionParams(rng, 4, 2, window=2, position_bias=True)
    with pytest.raises(ShapeError):
        ops.multi_head_attention(Tensor(rng.random((1, 9, 4))), p)


# pixel shuffle -----------------------------------------------------------------


def test_pixel_unshuffle_ramp():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = ops.pixel_unshuffle(Tensor(x), 4)
    assert out.shape == (1, 16, 1, 1)
    assert sorted(out.data.ravel().tolist()) == list(range(16))


def test_pixel_unshuffle_r1_identity():
    rng = np.random.default_rng(15)
    x = rng.random((2, 3, 4, 4))
    assert (ops.pixel_unshuffle(Tensor(x), 1).data == x).all()


def test_pixel_shuffle_round_trip_bit_exact():
    rng = np.random.default_rng(16)
    x = rng.random((2, 3, 8, 8))
    down = ops.pixel_unshuffle(Tensor(x), 2)
    assert down.shape == (2, 12, 4, 4)
    back = ops.pixel_shuffle(down, 2)
    assert (back.data == x).all()


def test_pixel_unshuffle_non_divisible():
    with pytest.raises(ShapeError):
        ops.pixel_unshuffle(Tensor(np.ones((1, 1, 6, 6))), 4)


# pooling -----------------------------------------------------------------------


def test_global_pool_constant():
    x = np.full((1, 2, 3, 3), 0.4)
    out = ops.adaptive_avg_pool_global(Tensor(x))
    assert out.shape == (1, 2, 1, 1)
    np.testing.assert_allclose(out.data, 0.4)


def test_global_pool_small_example():
    x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    assert ops.adaptive_avg_pool_global(Tensor(x)).data.item() == 4.0


def test_global_pool_matches_mean():
    rng = np.random.default_rng(17)
    x = rng.random((2, 3, 5, 7))
    got = ops.adaptive_avg_pool_global(Tensor(x)).data
    want = x.mean(axis=(2, 3), keepdims=True)
    assert np.abs(got - want).max() < 1e-12


# bilinear sampling ----------------------------------------------------------------


def _grid_coords(H, W):
    gy, gx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float),
                         indexing="ij")
    return np.stack([gy, gx], axis=-1)[None]


def test_bilinear_integer_coords_exact():
    rng = np.random.default_rng(18)
    x = rng.random((1, 2, 5, 6))
    coords = _grid_coords(5, 6)
    out = ops.bilinear_sample(Tensor(x), Tensor(coords))
    np.testing.assert_array_equal(out.data, x)


def test_bilinear_midpoint_average():
    x = np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2)
    coords = np.array([0.5, 0.5]).reshape(1, 1, 1, 2)
    out = ops.bilinear_sample(Tensor(x), Tensor(coords))
    assert out.data.item() == pytest.approx(1.5)


def test_bilinear_out_of_bounds_clamps():
    x = np.arange(4.0).reshape(1, 1, 2, 2)
    coords = np.array([[-5.0, -5.0], [10.0, 10.0]]).reshape(1, 2, 1, 2)
    out = ops.bilinear_sample(Tensor(x), Tensor(coords))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 3.0])


def test_bilinear_gradients_wrt_image_and_coords():
    rng = np.random.default_rng(19)
    x = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)), requires_grad=True)
    # keep coords strictly interior and away from the integer lattice
    base = rng.uniform(0.6, 4.4, (1, 3, 3, 2))
    base += 0.17 - (base % 1.0) * 0.01
    coords = Tensor(base, requires_grad=True)
    check_gradients(
        lambda: weighted_sum_loss(ops.bilinear_sample(x, coords)),
        [x, coords], rel_tol=1e-3, n_coords=8)
