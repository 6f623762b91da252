"""Dense optical flow: the backward warping operator and a coarse-to-fine
residual flow estimator in the style of SpyNet.

Flow convention: ``flow[:, 0]`` is the horizontal and ``flow[:, 1]`` the
vertical displacement in pixels; ``warp(x, flow)(p) = x(p + flow(p))``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError
from .sampling import bilinear_sample, pixel_grid


class FlowPyramid(NamedTuple):
    f1: torch.Tensor  # full resolution
    f2: torch.Tensor  # 1/2
    f3: torch.Tensor  # 1/4


def warp(x: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinear backward warp; samples outside the image read as zero.

    Accepts (B, C, H, W) with (B, 2, H, W) flow, or unbatched (C, H, W) / (2, H, W).
    """
    unbatched = x.dim() == 3
    if unbatched:
        x, flow = x.unsqueeze(0), flow.unsqueeze(0)
    if x.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise DimensionError(f"warp expects (B,C,H,W) and (B,2,H,W), got {tuple(x.shape)}, {tuple(flow.shape)}")
    B, C, H, W = x.shape
    if flow.shape[0] != B or flow.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"flow {tuple(flow.shape)} does not match feature {tuple(x.shape)}")
    ys, xs = pixel_grid(H, W, dtype=flow.dtype, device=flow.device)
    py = (ys + flow[:, 1]).reshape(B, -1)
    px = (xs + flow[:, 0]).reshape(B, -1)
    out = bilinear_sample(x, py, px).view(B, C, H, W)
    return out.squeeze(0) if unbatched else out


def warp_valid_mask(flow: torch.Tensor) -> torch.Tensor:
    """True where ``p + flow(p)`` lies inside the image (B, 1, H, W)."""
    B, _, H, W = flow.shape
    ys, xs = pixel_grid(H, W, dtype=flow.dtype, device=flow.device)
    sx = xs + flow[:, 0]
    sy = ys + flow[:, 1]
    return ((sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)).unsqueeze(1)


def upsample_flow(flow: torch.Tensor, size: tuple[int, int] | None = None) -> torch.Tensor:
    """2x bilinear upsampling with displacements rescaled to the finer grid."""
    unbatched = flow.dim() == 3
    if unbatched:
        flow = flow.unsqueeze(0)
    H, W = flow.shape[-2:]
    size = size or (2 * H, 2 * W)
    out = F.interpolate(flow, size=size, mode="bilinear", align_corners=False)
    out = torch.stack([out[:, 0] * (size[1] / W), out[:, 1] * (size[0] / H)], dim=1)
    return out.squeeze(0) if unbatched else out


class FlowLevel(nn.Module):
    """Residual flow predictor for one pyramid level."""

    def __init__(self, channels=(32, 64, 32, 16), kernel_size=7):
        super().__init__()
        layers = []
        c_in = 8  # reference, warped frame, upsampled flow
        for c in channels:
            layers += [nn.Conv2d(c_in, c, kernel_size, padding=kernel_size // 2), nn.LeakyReLU(0.1)]
            c_in = c
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(c_in, 2, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.body(x))


class FlowNet(nn.Module):
    """Coarse-to-fine flow estimator over ``levels`` average-pooled scales.

    Only the three finest flows are returned. The last convolution of every
    level starts at zero, so an untrained estimator outputs zero flow.
    """

    def __init__(self, levels: int = 5, channels=(32, 64, 32, 16), kernel_size: int = 7):
        super().__init__()
        if levels < 3:
            raise ValueError("FlowNet needs at least 3 levels")
        self.levels = levels
        self.level_nets = nn.ModuleList([FlowLevel(channels, kernel_size) for _ in range(levels)])

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def forward(self, img: torch.Tensor, ref: torch.Tensor) -> FlowPyramid:
        return self.estimate_pyramid(img, ref)

    def estimate_pyramid(self, img: torch.Tensor, ref: torch.Tensor) -> FlowPyramid:
        """Flows aligning ``img`` to ``ref``; inputs are (B, 3, H, W)."""
        if img.shape != ref.shape:
            raise DimensionError(f"img {tuple(img.shape)} and ref {tuple(ref.shape)} differ")
        H, W = img.shape[-2:]
        m = self.multiple
        if H % m or W % m:
            raise DimensionError(f"flow input {H}x{W} must be divisible by {m} for {self.levels} levels")
        # standardise both images with the reference statistics; without this
        # low-contrast inputs leave the residual predictors nothing to learn from
        mean = ref.mean(dim=(1, 2, 3), keepdim=True)
        std = ref.std(dim=(1, 2, 3), keepdim=True, correction=0) + 1e-3
        img, ref = (img - mean) / std, (ref - mean) / std
        imgs, refs = [img], [ref]
        for _ in range(self.levels - 1):
            imgs.append(F.avg_pool2d(imgs[-1], 2))
            refs.append(F.avg_pool2d(refs[-1], 2))
        flows = [None] * self.levels
        flow = None
        for lvl in reversed(range(self.levels)):
            if flow is None:
                up = img.new_zeros(img.shape[0], 2, *imgs[lvl].shape[-2:])
                warped = imgs[lvl]
            else:
                up = upsample_flow(flow)
                warped = warp(imgs[lvl], up)
            flow = up + self.level_nets[lvl](torch.cat([refs[lvl], warped, up], dim=1))
            flows[lvl] = flow
        return FlowPyramid(flows[0], flows[1], flows[2])

    def estimate_padded(self, img: torch.Tensor, ref: torch.Tensor) -> FlowPyramid:
        """Like :meth:`estimate_pyramid` for any size: replicate-pads to the
        required multiple and crops the flows back (level k to ceil(H/2^k))."""
        H, W = img.shape[-2:]
        m = self.multiple
        ph, pw = (-H) % m, (-W) % m
        if ph == 0 and pw == 0:
            return self.estimate_pyramid(img, ref)
        pad = (0, pw, 0, ph)
        pyr = self.estimate_pyramid(F.pad(img, pad, mode="replicate"), F.pad(ref, pad, mode="replicate"))
        return FlowPyramid(*[
            f[..., : math.ceil(H / 2 ** k), : math.ceil(W / 2 ** k)] for k, f in enumerate(pyr)
        ])


def zero_pyramid(like: torch.Tensor) -> FlowPyramid:
    """All-zero flows for a (B, C, H, W) full-resolution input."""
    B, _, H, W = like.shape
    return FlowPyramid(*[
        like.new_zeros(B, 2, math.ceil(H / 2 ** k), math.ceil(W / 2 ** k)) for k in range(3)
    ])


def pool_flow(flow: torch.Tensor, factor: int) -> torch.Tensor:
    """Downsample a flow by average pooling, rescaling the displacements."""
    if factor == 1:
        return flow
    return F.avg_pool2d(flow, factor, ceil_mode=True) / factor


def endpoint_error(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(pred - target, dim=-3).mean()
