"""Joint-filter head and the full two-path super-resolution model.

Backbone features from the guidance and target branches become per-pixel
kernel fields: k*k normalized weights plus 2*k*k sampling offsets. The SR
depth map is the offset-displaced weighted average of the bicubic-upsampled
target.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import naf as naf_mod
from . import swin as swin_mod
from .data import bicubic_resize
from .ops import (Module, param_conv, zeros_param, conv2d, pixel_shuffle,
                  pixel_unshuffle, bilinear_sample)
from .tensor import (Tensor, ShapeError, add, mul, sigmoid, reshape, tmean,
                     sub, concat, slice_axis)

BACKBONES = ("swin", "naf")
DEFAULT_BLOCKS = {"swin": 4, "naf": 6}


@dataclass
class ModelConfig:
    """Architecture hyperparameters for either backbone."""

    backbone: str = "swin"
    num_blocks: int = 0          # 0 -> backbone default (swin 4, naf 6)
    embed_dim: int = 32
    window: int = 4
    heads: int = 2
    layers_per_block: int = 2    # STLs per residual swin block
    mlp_ratio: float = 2.0
    k: int = 3                   # filter size; k*k taps per output pixel
    scale: int = 8               # super-resolution factor
    resample_factor: int = 4     # input resampled into resample_factor**2 sub-images
    position_bias: bool = False  # learned relative position bias in attention

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.num_blocks == 0:
            self.num_blocks = DEFAULT_BLOCKS[self.backbone]
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"filter size k must be odd, got {self.k}")
        if self.scale not in (4, 8, 16):
            raise ValueError(f"scale must be 4, 8 or 16, got {self.scale}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.heads} heads")

    def to_flat_dict(self):
        return {f"model.{f.name}": getattr(self, f.name) for f in fields(self)}


@dataclass
class KernelField:
    """Per-pixel filter: weights (B, k*k, H, W) summing to one over taps,
    offsets (B, 2*k*k, H, W) as (dy, dx) pixel displacements per tap."""

    weights: Tensor
    offsets: Tensor


class HeadConvs(Module):
    """Two independent 3x3 conv stacks turning backbone features into raw
    weight and offset tensors; channel counts carry the subpixel factor r*r.

    The offset stack's last conv starts near-constant with bias sqrt(1/2):
    the guide*target product then opens at half-pixel displacements, the
    farthest point from the bilinear kernel's derivative kinks, which keeps
    early offset gradients well defined.
    """

    OFFSET_BIAS_INIT = float(np.sqrt(0.5))

    def __init__(self, rng, feat_ch, k, r):
        n_sub = r * r
        self.w1 = param_conv(rng, feat_ch, feat_ch, 3, 3)
        self.b1 = zeros_param((feat_ch,))
        self.w2 = param_conv(rng, k * k * n_sub, feat_ch, 3, 3)
        self.b2 = zeros_param((k * k * n_sub,))
        self.w3 = param_conv(rng, feat_ch, feat_ch, 3, 3)
        self.b3 = zeros_param((feat_ch,))
        self.w4 = Tensor(rng.normal(0.0, 0.001, (2 * k * k * n_sub, feat_ch, 3, 3)),
                         requires_grad=True)
        self.b4 = Tensor(np.full((2 * k * k * n_sub,), self.OFFSET_BIAS_INIT),
                         requires_grad=True)

    def forward(self, features):
        w = conv2d(features, self.w1, self.b1, padding=1)
        w = conv2d(w, self.w2, self.b2, padding=1)
        o = conv2d(features, self.w3, self.b3, padding=1)
        o = conv2d(o, self.w4, self.b4, padding=1)
        return w, o


def combine_weights(w_guide, w_target, k, r=4):
    """Sigmoid both raw tensors, multiply, subtract the per-pixel tap mean,
    add 1/k^2 so taps sum to one, then stitch to full resolution.

    Inputs are (B, k*k*r*r, h, w) with tap-major channel layout; output is
    (B, k*k, h*r, w*r) and satisfies the sum-to-one normalization exactly.
    """
    B, C, h, w = w_guide.shape
    kk = k * k
    if C != kk * r * r or w_target.shape != w_guide.shape:
        raise ShapeError(f"combine_weights: expected {kk * r * r} channels, "
                         f"got {w_guide.shape} and {w_target.shape}")
    p = mul(sigmoid(w_guide), sigmoid(w_target))
    p = reshape(p, (B, kk, r * r, h, w))
    p = sub(p, tmean(p, axis=1, keepdims=True))
    p = add(p, 1.0 / kk)
    p = reshape(p, (B, kk * r * r, h, w))
    return pixel_shuffle(p, r)


def combine_offsets(o_guide, o_target, k, r=4):
    """Element-wise product of the raw offset tensors, stitched to full
    resolution; no sigmoid and no normalization."""
    B, C, h, w = o_guide.shape
    if C != 2 * k * k * r * r or o_target.shape != o_guide.shape:
        raise ShapeError(f"combine_offsets: expected {2 * k * k * r * r} channels, "
                         f"got {o_guide.shape} and {o_target.shape}")
    return pixel_shuffle(mul(o_guide, o_target), r)


def apply_joint_filter(target_up, kernel_field, k):
    """Weighted average of the target over a k x k neighborhood whose taps are
    displaced by the learned offsets and fetched with border-clamped bilinear
    sampling. Differentiable end to end."""
    B, C, H, W = target_up.shape
    weights, offsets = kernel_field.weights, kernel_field.offsets
    if weights.shape != (B, k * k, H, W):
        raise ShapeError(f"apply_joint_filter: weights {weights.shape} vs "
                         f"expected {(B, k * k, H, W)}")
    if offsets.shape != (B, 2 * k * k, H, W):
        raise ShapeError(f"apply_joint_filter: offsets {offsets.shape} vs "
                         f"expected {(B, 2 * k * k, H, W)}")
    gy, gx = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    half = k // 2
    out = None
    for tap in range(k * k):
        dy, dx = tap // k - half, tap % k - half
        oy = reshape(slice_axis(offsets, 1, 2 * tap, 2 * tap + 1), (B, H, W, 1))
        ox = reshape(slice_axis(offsets, 1, 2 * tap + 1, 2 * tap + 2), (B, H, W, 1))
        cy = add(oy, Tensor((gy + dy)[None, :, :, None]))
        cx = add(ox, Tensor((gx + dx)[None, :, :, None]))
        sample = bilinear_sample(target_up, concat((cy, cx), axis=3))
        term = mul(slice_axis(weights, 1, tap, tap + 1), sample)
        out = term if out is None else add(out, term)
    return out


def identity_field(B, H, W, k):
    """Delta kernel: weight one on the center tap, zero offsets. Applying it
    reproduces the upsampled target exactly."""
    w = np.zeros((B, k * k, H, W))
    w[:, (k * k) // 2] = 1.0
    return KernelField(Tensor(w), Tensor(np.zeros((B, 2 * k * k, H, W))))


def make_backbone(rng, cfg, in_ch):
    if cfg.backbone == "swin":
        return swin_mod.SwinBackbone(rng, in_ch, cfg.embed_dim, cfg.window,
                                     cfg.heads, cfg.num_blocks,
                                     cfg.layers_per_block, cfg.mlp_ratio,
                                     cfg.position_bias)
    return naf_mod.NafBackbone(rng, in_ch, cfg.embed_dim, cfg.num_blocks)


class DmsrModel(Module):
    """Two-path joint-filtering network: guidance RGB + low-res depth in,
    super-resolved depth out."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        r = cfg.resample_factor
        self.cfg = cfg
        self.guide_backbone = make_backbone(rng, cfg, 3 * r * r)
        self.target_backbone = make_backbone(rng, cfg, r * r)
        self.guide_head = HeadConvs(rng, cfg.embed_dim, cfg.k, r)
        self.target_head = HeadConvs(rng, cfg.embed_dim, cfg.k, r)

    def check_extents(self, H, W, lr_h, lr_w):
        cfg = self.cfg
        s, r = cfg.scale, cfg.resample_factor
        if H % s or W % s:
            raise ShapeError(f"guidance extents {H}x{W} not divisible by scale {s}")
        if lr_h * s != H or lr_w * s != W:
            raise ShapeError(f"LR depth {lr_h}x{lr_w} does not match "
                             f"guidance {H}x{W} at scale {s}")
        div = r * cfg.window if cfg.backbone == "swin" else r
        if H % div or W % div:
            raise ShapeError(f"extents {H}x{W} not divisible by {div} "
                             f"(resample factor x window)")

    def forward(self, guidance, depth_lr):
        """guidance (B, 3, H, W) and depth_lr (B, 1, H/s, W/s) -> (B, 1, H, W)."""
        B, _, H, W = guidance.shape
        self.check_extents(H, W, depth_lr.shape[2], depth_lr.shape[3])
        target_up = upsample_lr(depth_lr, self.cfg.scale)
        field = self.kernel_field(guidance, target_up)
        return apply_joint_filter(target_up, field, self.cfg.k)

    def kernel_field(self, guidance, target_up):
        """Run both branches and recombine their raw tensors."""
        cfg = self.cfg
        r = cfg.resample_factor
        g_sub = pixel_unshuffle(guidance, r)
        t_sub = pixel_unshuffle(target_up, r)
        f_guide = self.guide_backbone.forward(g_sub)
        f_target = self.target_backbone.forward(t_sub)
        w_g, o_g = self.guide_head.forward(f_guide)
        w_t, o_t = self.target_head.forward(f_target)
        return KernelField(combine_weights(w_g, w_t, cfg.k, r),
                           combine_offsets(o_g, o_t, cfg.k, r))


def upsample_lr(depth_lr, scale):
    """Bicubic-upsample the LR depth to full resolution as a constant tensor
    (the upsample is input preprocessing, not a trained stage)."""
    x = depth_lr.data if isinstance(depth_lr, Tensor) else np.asarray(depth_lr)
    B, C, h, w = x.shape
    up = np.stack([bicubic_resize(x[b], h * scale, w * scale) for b in range(B)])
    return Tensor(up)
