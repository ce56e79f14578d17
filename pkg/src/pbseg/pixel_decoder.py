"""Context-aware modulation and the deformable-convolution feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Conv2d, Linear, Module, param
from .tensor import Tensor

# (dy, dx) of the 3x3 sampling lattice, row-major like the kernel weights
KERNEL_OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=np.float64)


class ContextModulation(Module):
    """Channel gate from a pooled descriptor: ``E' * sigmoid(gamma) + E'``."""

    def __init__(self, rng: np.random.Generator, dim: int):
        if dim < 4:
            raise ValueError(f"context modulation needs at least 4 channels, got {dim}")
        self.fc1 = Conv2d(rng, dim, dim // 4, k=1)
        self.fc2 = Conv2d(rng, dim // 4, dim, k=1)

    def descriptor(self, feat: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(T.global_avg_pool(feat))))

    def __call__(self, feat: Tensor) -> Tensor:
        gate = T.sigmoid(self.descriptor(feat))
        return feat * gate + feat


def context_modulate(feat: Tensor, params: ContextModulation) -> Tensor:
    return params(feat)


def sampling_points(offsets: Tensor, h: int, w: int) -> Tensor:
    """Absolute ``(9*h*w) x 2`` sample positions for offsets ``18 x h x w``.

    Offset channel ``2k`` is the y shift and ``2k+1`` the x shift of lattice
    position ``k``.
    """
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = np.stack([ys, xs], axis=-1)[None] + KERNEL_OFFSETS[:, None, None, :]
    shifts = offsets.reshape(9, 2, h, w).transpose(0, 2, 3, 1)
    return (shifts + Tensor(base)).reshape(9 * h * w, 2)


def deform_conv2d(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """3x3, stride 1, offsets-only deformable convolution of ``C x h x w``."""
    c, h, w = x.shape
    co = weight.shape[0]
    if weight.shape[1:] != (c, 3, 3):
        raise T.ShapeError(f"deform_conv: input {x.shape} does not match weight {weight.shape}")
    if offsets.shape != (18, h, w):
        raise T.ShapeError(f"deform_conv: offsets {offsets.shape} for input {x.shape}")
    cols = T.bilinear_sample(x, sampling_points(offsets, h, w))
    out = weight.reshape(co, c * 9) @ cols.reshape(c * 9, h * w)
    if bias is not None:
        out = out + bias.reshape(co, 1)
    return out.reshape(co, h, w)


class DeformConv(Module):
    """Deformable 3x3 conv whose offset predictor starts at exactly zero."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.offset = Conv2d(rng, dim, 18, k=3)
        self.offset.weight.data[...] = 0.0
        self.offset.bias.data[...] = 0.0
        self.main = Conv2d(rng, dim, dim, k=3)

    def __call__(self, x: Tensor) -> Tensor:
        return deform_conv2d(x, self.offset(x), self.main.weight, self.main.bias)


def deform_conv(x: Tensor, params: DeformConv) -> Tensor:
    return params(x)


@dataclass
class FeaturePyramid:
    backbone: list[Tensor]  # E_1..E_4
    projected: list[Tensor]  # E'_s
    modulated: list[Tensor]  # E^c_s
    levels: list[Tensor]  # R_1..R_4


class PixelDecoder(Module):
    """Builds ``R_1..R_4`` (strides 4..32) with a shared channel width."""

    def __init__(
        self,
        rng: np.random.Generator,
        in_channels: tuple[int, ...],
        dim: int,
        use_cam: bool = True,
        use_dconv: bool = True,
    ):
        self.use_cam = use_cam
        self.use_dconv = use_dconv
        self.proj = [Conv2d(rng, c, dim, k=1) for c in in_channels]
        self.cam = [ContextModulation(rng, dim) for _ in in_channels] if use_cam else []
        self.context_proj = Linear(rng, in_channels[-1], dim)
        # fusion convs for levels 2..4
        if use_dconv:
            self.fuse = [DeformConv(rng, dim) for _ in range(3)]
        else:
            self.fuse = [Conv2d(rng, dim, dim, k=3) for _ in range(3)]

    def __call__(self, feats: list[Tensor]) -> FeaturePyramid:
        if len(feats) != 4:
            raise ValueError(f"expected 4 backbone levels, got {len(feats)}")
        projected = [p(e) for p, e in zip(self.proj, feats)]
        modulated = [c(e) for c, e in zip(self.cam, projected)] if self.use_cam else list(projected)

        e4 = feats[3]
        pooled = T.global_avg_pool(e4).reshape(1, e4.shape[0])
        context = self.context_proj(pooled).reshape(-1, 1, 1)
        levels: list[Tensor | None] = [None] * 4
        levels[3] = self.fuse[2](modulated[3] + context)
        for s in (2, 1):
            up = T.upsample_bilinear_2x(levels[s + 1])
            if up.shape != modulated[s].shape:
                raise T.ShapeError(f"pyramid: upsampled {up.shape} vs level {modulated[s].shape}")
            levels[s] = self.fuse[s - 1](modulated[s] + up)
        up = T.upsample_bilinear_2x(levels[1])
        if up.shape != modulated[0].shape:
            raise T.ShapeError(f"pyramid: upsampled {up.shape} vs level {modulated[0].shape}")
        levels[0] = modulated[0] + up
        return FeaturePyramid(list(feats), projected, modulated, levels)


def build_pyramid(feats: list[Tensor], params: PixelDecoder) -> FeaturePyramid:
    return params(feats)
