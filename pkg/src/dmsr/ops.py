"""Neural building blocks shared by both backbones.

All ops are pure functions over Tensors and record themselves on the active
Tape, so gradients come from tensor.Tape.backward. Image tensors are NCHW;
attention operates on (batch*windows, tokens, channels).
"""

import numpy as np

from .tensor import (Tensor, ShapeError, record, ensure_tensor, matmul, reshape,
                     transpose, tmean, softmax_lastaxis, add, slice_axis)


class Module:
    """Minimal parameter container: attributes that are Tensors (requires_grad)
    or Modules (or lists of Modules) are walked in insertion order."""

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out.append((full, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(full + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def param(rng, shape, std=0.02):
    """Gaussian-initialized trainable tensor."""
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def param_conv(rng, out_ch, in_ch, kh, kw):
    """Fan-in scaled conv weight (He-style)."""
    std = np.sqrt(2.0 / (in_ch * kh * kw))
    return Tensor(rng.normal(0.0, std, size=(out_ch, in_ch, kh, kw)),
                  requires_grad=True)


def param_depthwise(rng, channels, kh, kw):
    """Fan-in scaled depthwise conv weight, one (kh, kw) filter per channel."""
    std = np.sqrt(2.0 / (kh * kw))
    return Tensor(rng.normal(0.0, std, size=(channels, kh, kw)), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# convolution


def _sliding_view(xp, kh, kw, stride):
    """(B,C,Hp,Wp) -> read-only view (B,C,kh,kw,Ho,Wo)."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, (B, C, kh, kw, Ho, Wo), (s0, s1, s2, s3, s2 * stride, s3 * stride),
        writeable=False)


def _spread_cols(dcols, B, C, kh, kw, Ho, Wo, Hp, Wp, stride):
    """col2im: scatter (B,C,kh,kw,Ho,Wo) gradients back onto the padded image."""
    buf = np.zeros((B, C, kh, kw, Hp, Wp))
    for ki in range(kh):
        for kj in range(kw):
            buf[:, :, ki, kj, ki:ki + stride * Ho:stride, kj:kj + stride * Wo:stride] = \
                dcols[:, :, ki, kj]
    return buf.sum(axis=(2, 3))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NCHW input with (out_ch, in_ch, kh, kw) weights."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent ({Ho}x{Wo})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _sliding_view(xp, kh, kw, stride).reshape(B, C * kh * kw, Ho * Wo)
    w2 = weight.data.reshape(O, C * kh * kw)
    out = np.matmul(w2, cols).reshape(B, O, Ho, Wo)

    inputs = (x, weight)
    if bias is not None:
        bias = ensure_tensor(bias)
        out = out + bias.data.reshape(1, O, 1, 1)
        inputs = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(B, O, Ho * Wo)
        gw = np.matmul(g2, cols.swapaxes(1, 2)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, Ho, Wo)
        gxp = _spread_cols(dcols, B, C, kh, kw, Ho, Wo, Hp, Wp, stride)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if len(inputs) == 3:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return record("conv2d", inputs, out, backward)


def depthwise_conv2d(x, weight, bias=None, padding=0):
    """Per-channel 3x3-style convolution; weight is (C, kh, kw), stride 1."""
    x, weight = ensure_tensor(x), ensure_tensor(weight)
    B, C, H, W = x.shape
    Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"depthwise_conv2d: {C} channels vs weight {Cw}")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = _sliding_view(xp, kh, kw, 1)
    out = np.einsum("bcijhw,cij->bchw", view, weight.data)

    inputs = (x, weight)
    if bias is not None:
        bias = ensure_tensor(bias)
        out = out + bias.data.reshape(1, C, 1, 1)
        inputs = (x, weight, bias)

    def backward(g):
        gw = np.einsum("bcijhw,bchw->cij", view, g)
        dcols = np.einsum("bchw,cij->bcijhw", g, weight.data)
        gxp = _spread_cols(dcols, B, C, kh, kw, Ho, Wo, Hp, Wp, 1)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if len(inputs) == 3:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return record("depthwise_conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# normalization, linear, attention


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x, gamma, beta = ensure_tensor(x), ensure_tensor(gamma), ensure_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        n = x.shape[-1]
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0).reshape(gamma.shape)
        gbeta = g.reshape(-1, n).sum(axis=0).reshape(beta.shape)
        gc = g * gamma.data
        gx = inv * (gc - gc.mean(axis=-1, keepdims=True)
                    - xhat * (gc * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return record("layer_norm", (x, gamma, beta), out, backward)


def linear(x, weight, bias=None):
    """x @ weight (+ bias) over the last axis; weight is (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


class AttentionParams(Module):
    """QKV/output projections; optional learned relative-position bias over a
    square token window (off by default)."""

    def __init__(self, rng, embed_dim, num_heads, window=None,
                 position_bias=False):
        if embed_dim % num_heads != 0:
            raise ShapeError(f"embed dim {embed_dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = embed_dim // num_heads
        self.qkv_w = param(rng, (embed_dim, 3 * embed_dim))
        self.qkv_b = zeros_param((3 * embed_dim,))
        self.proj_w = param(rng, (embed_dim, embed_dim))
        self.proj_b = zeros_param((embed_dim,))
        self.pos_bias = None
        self._pos_gather = None
        if position_bias:
            if window is None:
                raise ValueError("position_bias needs the window size")
            table_size = (2 * window - 1) ** 2
            self.pos_bias = param(rng, (table_size, num_heads))
            idx = _relative_index(window).reshape(-1)
            gather = np.zeros((idx.size, table_size))
            gather[np.arange(idx.size), idx] = 1.0
            self._pos_gather = gather                      # one-hot row lookup


def _relative_index(window):
    """(w*w, w*w) lookup into the (2w-1)^2 relative-displacement table."""
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window),
                                  indexing="ij"), axis=-1).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + window - 1
    return rel[..., 0] * (2 * window - 1) + rel[..., 1]


def multi_head_attention(x, p, mask=None):
    """Softmax attention over tokens; x is (N, L, C), mask (nW, L, L) or None.

    When a mask is given, N must be a multiple of nW and window i of every
    batch entry receives mask[i] added to its logits.
    """
    N, L, C = x.shape
    h, d = p.num_heads, p.head_dim
    if C != h * d:
        raise ShapeError(f"attention: channels {C} != heads*head_dim {h * d}")
    qkv = linear(x, p.qkv_w, p.qkv_b)                      # (N, L, 3C)
    qkv = reshape(qkv, (N, L, 3, h, d))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))                  # (3, N, h, L, d)
    q = reshape(slice_like(qkv, 0), (N, h, L, d))
    k = reshape(slice_like(qkv, 1), (N, h, L, d))
    v = reshape(slice_like(qkv, 2), (N, h, L, d))
    logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
    if p.pos_bias is not None:
        if p._pos_gather.shape[0] != L * L:
            raise ShapeError(f"position bias built for "
                             f"{int(np.sqrt(p._pos_gather.shape[0]))} tokens, got {L}")
        bias = matmul(Tensor(p._pos_gather), p.pos_bias)   # (L*L, heads)
        bias = transpose(reshape(bias, (L, L, h)), (2, 0, 1))
        logits = add(logits, reshape(bias, (1, h, L, L)))
    if mask is not None:
        nw = mask.shape[0]
        logits = reshape(logits, (N // nw, nw, h, L, L))
        logits = add(logits, Tensor(mask[None, :, None]))
        logits = reshape(logits, (N, h, L, L))
    attn = softmax_lastaxis(logits)
    out = matmul(attn, v)                                  # (N, h, L, d)
    out = reshape(transpose(out, (0, 2, 1, 3)), (N, L, C))
    return linear(out, p.proj_w, p.proj_b)


def slice_like(t, index):
    """First-axis single-slice helper used to split fused qkv."""
    return slice_axis(t, 0, index, index + 1)


# ---------------------------------------------------------------------------
# rearrangement


def window_partition(x, window):
    """(B, H, W, C) -> (B * H/w * W/w, w*w, C) of non-overlapping windows."""
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ShapeError(f"window {window} does not divide {H}x{W}")
    x = reshape(x, (B, H // window, window, W // window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B * (H // window) * (W // window), window * window, C))


def window_merge(windows, window, H, W):
    """Inverse of window_partition; bit-exact round trip."""
    nwin, L, C = windows.shape
    if L != window * window or H % window or W % window:
        raise ShapeError("window_merge: inconsistent window geometry")
    B = nwin // ((H // window) * (W // window))
    x = reshape(windows, (B, H // window, W // window, window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, H, W, C))


def pixel_unshuffle(x, r):
    """Space-to-depth: (B, C, H, W) -> (B, C*r*r, H/r, W/r)."""
    B, C, H, W = x.shape
    if H % r or W % r:
        raise ShapeError(f"pixel_unshuffle: factor {r} does not divide {H}x{W}")
    x = reshape(x, (B, C, H // r, r, W // r, r))
    x = transpose(x, (0, 1, 3, 5, 2, 4))
    return reshape(x, (B, C * r * r, H // r, W // r))


def pixel_shuffle(x, r):
    """Depth-to-space inverse of pixel_unshuffle."""
    B, Cr2, H, W = x.shape
    if Cr2 % (r * r):
        raise ShapeError(f"pixel_shuffle: channels {Cr2} not divisible by {r * r}")
    C = Cr2 // (r * r)
    x = reshape(x, (B, C, r, r, H, W))
    x = transpose(x, (0, 1, 4, 2, 5, 3))
    return reshape(x, (B, C, H * r, W * r))


def adaptive_avg_pool_global(x):
    """Per-channel spatial mean, kept as (B, C, 1, 1)."""
    return tmean(x, axis=(2, 3), keepdims=True)


# ---------------------------------------------------------------------------
# sampling


def bilinear_sample(x, coords):
    """Sample (B, C, H, W) at continuous (y, x) positions, border-clamped.

    coords is (B, Hs, Ws, 2) in pixel units; differentiable w.r.t. both the
    image and the coordinates (coordinate gradient is zero where clamped).
    """
    x, coords = ensure_tensor(x), ensure_tensor(coords)
    B, C, H, W = x.shape
    if coords.shape[0] != B or coords.shape[-1] != 2:
        raise ShapeError(f"bilinear_sample: bad coords shape {coords.shape}")
    cy_raw = coords.data[..., 0]
    cx_raw = coords.data[..., 1]
    cy = np.clip(cy_raw, 0.0, H - 1.0)
    cx = np.clip(cx_raw, 0.0, W - 1.0)
    with np.errstate(invalid="ignore"):  # NaN coords index 0, then stay NaN
        y0 = np.clip(np.floor(cy).astype(np.intp), 0, max(H - 2, 0))
        x0 = np.clip(np.floor(cx).astype(np.intp), 0, max(W - 2, 0))
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    ty = (cy - y0)[:, None]                                # (B, 1, Hs, Ws)
    tx = (cx - x0)[:, None]

    bidx = np.arange(B)[:, None, None]
    v00 = x.data[bidx, :, y0, x0].transpose(0, 3, 1, 2)    # (B, C, Hs, Ws)
    v01 = x.data[bidx, :, y0, x1].transpose(0, 3, 1, 2)
    v10 = x.data[bidx, :, y1, x0].transpose(0, 3, 1, 2)
    v11 = x.data[bidx, :, y1, x1].transpose(0, 3, 1, 2)
    out = ((1 - ty) * (1 - tx) * v00 + (1 - ty) * tx * v01
           + ty * (1 - tx) * v10 + ty * tx * v11)

    def backward(g):
        gx = np.zeros_like(x.data)
        b4 = np.arange(B)[:, None, None, None]
        c4 = np.arange(C)[None, :, None, None]
        np.add.at(gx, (b4, c4, y0[:, None], x0[:, None]), g * (1 - ty) * (1 - tx))
        np.add.at(gx, (b4, c4, y0[:, None], x1[:, None]), g * (1 - ty) * tx)
        np.add.at(gx, (b4, c4, y1[:, None], x0[:, None]), g * ty * (1 - tx))
        np.add.at(gx, (b4, c4, y1[:, None], x1[:, None]), g * ty * tx)

        dty = (-(1 - tx) * v00 - tx * v01 + (1 - tx) * v10 + tx * v11)
        dtx = (-(1 - ty) * v00 + (1 - ty) * v01 - ty * v10 + ty * v11)
        gy = (g * dty).sum(axis=1) * ((cy_raw > 0) & (cy_raw < H - 1))
        gxc = (g * dtx).sum(axis=1) * ((cx_raw > 0) & (cx_raw < W - 1))
        return gx, np.stack([gy, gxc], axis=-1)

    return record("bilinear_sample", (x, coords), out, backward)
