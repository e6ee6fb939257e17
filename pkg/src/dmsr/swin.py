"""Swin-style feature extractor: residual transformer blocks over windows.

Layers keep the spatial extents of the resampled input (no downsampling);
attention alternates between unshifted and half-window-shifted grids.
"""

import numpy as np

from .ops import (Module, AttentionParams, param, param_conv, zeros_param,
                  ones_param, conv2d, layer_norm, linear, multi_head_attention,
                  window_partition, window_merge)
from .tensor import ShapeError, gelu, reshape, transpose, roll, add


def shift_attention_mask(H, W, window, shift):
    """Additive logits mask that stops shifted windows attending across the
    cyclic wrap-around; shape (num_windows, w*w, w*w)."""
    img = np.zeros((H, W))
    cnt = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            img[hs, ws] = cnt
            cnt += 1
    img = img.reshape(H // window, window, W // window, window)
    win = img.transpose(0, 2, 1, 3).reshape(-1, window * window)
    diff = win[:, None, :] - win[:, :, None]
    return np.where(diff != 0, -1e9, 0.0)


class Mlp(Module):
    def __init__(self, rng, dim, hidden):
        self.fc1_w = param(rng, (dim, hidden))
        self.fc1_b = zeros_param((hidden,))
        self.fc2_w = param(rng, (hidden, dim))
        self.fc2_b = zeros_param((dim,))

    def forward(self, x):
        return linear(gelu(linear(x, self.fc1_w, self.fc1_b)), self.fc2_w, self.fc2_b)


class SwinLayer(Module):
    """One transformer layer: x + MSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, rng, dim, window, num_heads, shift, mlp_ratio=2.0,
                 position_bias=False):
        self.window = window
        self.shift = shift
        self.norm1_g = ones_param((dim,))
        self.norm1_b = zeros_param((dim,))
        self.attn = AttentionParams(rng, dim, num_heads, window=window,
                                    position_bias=position_bias)
        self.norm2_g = ones_param((dim,))
        self.norm2_b = zeros_param((dim,))
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))
        self._mask_cache = {}

    def _mask(self, H, W):
        if self.shift == 0:
            return None
        key = (H, W)
        if key not in self._mask_cache:
            self._mask_cache[key] = shift_attention_mask(H, W, self.window, self.shift)
        return self._mask_cache[key]

    def forward(self, x):
        """x is (B, H, W, C); window must divide H and W."""
        B, H, W, C = x.shape
        shortcut = x
        y = layer_norm(x, self.norm1_g, self.norm1_b)
        if self.shift:
            y = roll(y, (-self.shift, -self.shift), (1, 2))
        wins = window_partition(y, self.window)
        wins = multi_head_attention(wins, self.attn, mask=self._mask(H, W))
        y = window_merge(wins, self.window, H, W)
        if self.shift:
            y = roll(y, (self.shift, self.shift), (1, 2))
        x = add(shortcut, y)
        return add(x, self.mlp.forward(layer_norm(x, self.norm2_g, self.norm2_b)))


class Rstb(Module):
    """Residual block of several SwinLayers plus a trailing 3x3 convolution."""

    def __init__(self, rng, dim, window, num_heads, n_layers, mlp_ratio=2.0,
                 position_bias=False):
        self.layers = [SwinLayer(rng, dim, window, num_heads,
                                 shift=0 if i % 2 == 0 else window // 2,
                                 mlp_ratio=mlp_ratio, position_bias=position_bias)
                       for i in range(n_layers)]
        self.conv_w = param_conv(rng, dim, dim, 3, 3)
        self.conv_b = zeros_param((dim,))

    def forward(self, x):
        """(B, H, W, C) in and out, residual around the whole block."""
        y = x
        for layer in self.layers:
            y = layer.forward(y)
        y = transpose(y, (0, 3, 1, 2))
        y = conv2d(y, self.conv_w, self.conv_b, padding=1)
        y = transpose(y, (0, 2, 3, 1))
        return add(x, y)


class SwinBackbone(Module):
    """Input embedding conv followed by cfg.B residual swin transformer blocks."""

    def __init__(self, rng, in_ch, embed_dim, window, num_heads, n_blocks,
                 n_layers_per_block=2, mlp_ratio=2.0, position_bias=False):
        self.window = window
        self.conv_in_w = param_conv(rng, embed_dim, in_ch, 3, 3)
        self.conv_in_b = zeros_param((embed_dim,))
        self.blocks = [Rstb(rng, embed_dim, window, num_heads, n_layers_per_block,
                            mlp_ratio, position_bias) for _ in range(n_blocks)]

    def forward_blocks(self, x):
        """Run the residual block stack on embedded (B, C, H, W) features."""
        B, C, H, W = x.shape
        if H % self.window or W % self.window:
            raise ShapeError(f"window {self.window} does not divide {H}x{W}")
        y = transpose(x, (0, 2, 3, 1))
        for block in self.blocks:
            y = block.forward(y)
        return transpose(y, (0, 3, 1, 2))

    def forward(self, x):
        """(B, in_ch, H, W) -> (B, embed_dim, H, W), spatial extents unchanged."""
        return self.forward_blocks(conv2d(x, self.conv_in_w, self.conv_in_b, padding=1))


def zero_residual_branches(backbone):
    """Zero every projection feeding a residual sum, making the block stack an
    identity map. Used by initialization-property tests."""
    for block in backbone.blocks:
        for layer in block.layers:
            layer.attn.proj_w.data[:] = 0.0
            layer.attn.proj_b.data[:] = 0.0
            layer.mlp.fc2_w.data[:] = 0.0
            layer.mlp.fc2_b.data[:] = 0.0
        block.conv_w.data[:] = 0.0
        block.conv_b.data[:] = 0.0
