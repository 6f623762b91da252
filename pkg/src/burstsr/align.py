"""Flow-guided deformable alignment.

Offset layout follows the DCNv2 convention: for deformable group ``g`` and
kernel tap ``k`` (row-major over the 3x3 window) channel ``2*(g*K + k)`` holds
the vertical and ``2*(g*K + k) + 1`` the horizontal displacement in pixels.
Masks have one channel per (group, tap).
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DimensionError
from .flow import FlowPyramid, warp
from .sampling import bilinear_sample, pixel_grid

KERNEL_TAPS = 9


class OffsetField(NamedTuple):
    offsets: torch.Tensor  # (B, 2*G*K, H, W)
    masks: torch.Tensor  # (B, G*K, H, W), values in [0, 1]


def deform_conv(x: torch.Tensor, offsets: torch.Tensor, masks: torch.Tensor, weight: torch.Tensor,
                bias: torch.Tensor | None = None, groups: int = 1) -> torch.Tensor:
    """Modulated 3x3 deformable convolution, stride 1, zero padding 1.

    out(o, q) = sum_{g,k} w(o, ., k) * mask(g, k, q) * x_g(q + r_k + offset(g, k, q)) + bias(o)
    """
    B, C_in, H, W = x.shape
    C_out = weight.shape[0]
    if weight.shape[1:] != (C_in, 3, 3):
        raise DimensionError(f"weight {tuple(weight.shape)} does not match {C_in} input channels")
    if groups < 1 or C_in % groups:
        raise ConfigError(f"{C_in} input channels not divisible into {groups} deformable groups")
    K = KERNEL_TAPS
    if offsets.shape != (B, 2 * groups * K, H, W) or masks.shape != (B, groups * K, H, W):
        raise DimensionError(
            f"offsets {tuple(offsets.shape)} / masks {tuple(masks.shape)} do not match input {tuple(x.shape)} "
            f"with {groups} groups"
        )
    G, Cg, L = groups, C_in // groups, H * W
    ys, xs = pixel_grid(H, W, dtype=offsets.dtype, device=offsets.device)
    taps = torch.arange(K, device=offsets.device)
    ky = (taps // 3 - 1).to(offsets.dtype).view(1, 1, K, 1, 1)
    kx = (taps % 3 - 1).to(offsets.dtype).view(1, 1, K, 1, 1)
    off = offsets.view(B, G, K, 2, H, W)
    py = ys + ky + off[:, :, :, 0]
    px = xs + kx + off[:, :, :, 1]
    cols = bilinear_sample(x.reshape(B * G, Cg, H, W), py.reshape(B * G, K * L), px.reshape(B * G, K * L))
    cols = cols.view(B, G, Cg, K, L) * masks.view(B, G, 1, K, L)
    out = torch.matmul(weight.reshape(C_out, C_in * K), cols.reshape(B, C_in * K, L))
    if bias is not None:
        out = out + bias.view(1, C_out, 1)
    return out.view(B, C_out, H, W)


class DeformConv2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, groups: int = 1):
        super().__init__()
        if in_channels % groups:
            raise ConfigError(f"{in_channels} channels not divisible into {groups} deformable groups")
        self.groups = groups
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))

    def forward(self, x, offsets, masks):
        return deform_conv(x, offsets, masks, self.weight, self.bias, self.groups)


def flow_to_offsets(flow: torch.Tensor, taps: int) -> torch.Tensor:
    """Replicate a (B, 2, H, W) flow to every (group, tap) offset slot."""
    B, _, H, W = flow.shape
    yx = torch.stack([flow[:, 1], flow[:, 0]], dim=1)
    return yx.unsqueeze(1).expand(B, taps, 2, H, W).reshape(B, 2 * taps, H, W)


def modulation(logits: torch.Tensor) -> torch.Tensor:
    """Saturating sigmoid 2*sigmoid(z) capped at 1; a zero logit gives a unit mask."""
    return torch.clamp(2 * torch.sigmoid(logits), max=1.0)


class OffsetHead(nn.Module):
    """Two 3x3 convolutions predicting residual offsets and mask logits."""

    def __init__(self, in_channels: int, hidden: int, groups: int):
        super().__init__()
        self.taps = groups * KERNEL_TAPS
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 3 * self.taps, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        out = self.conv2(F.leaky_relu(self.conv1(x), 0.1))
        return out[:, : 2 * self.taps], out[:, 2 * self.taps:]


class FlowGuidedDCN(nn.Module):
    """One alignment level: warp by flow, predict residual offsets, deform.

    ``warp_target`` selects which feature the flow pre-warps: ``"current"``
    (the frame being aligned) or ``"reference"``.
    """

    def __init__(self, channels: int, groups: int = 1, extra_channels: int = 0,
                 warp_target: str = "current"):
        super().__init__()
        if warp_target not in ("current", "reference"):
            raise ConfigError(f"warp_target must be 'current' or 'reference', got {warp_target!r}")
        self.groups = groups
        self.warp_target = warp_target
        self.offset_head = OffsetHead(2 * channels + extra_channels, channels, groups)
        self.dcn = DeformConv2d(channels, channels, groups)

    def forward(self, feat, feat_ref, flow, extra=None):
        if not (feat.shape == feat_ref.shape and flow.shape[-2:] == feat.shape[-2:]):
            raise DimensionError(
                f"feature {tuple(feat.shape)}, reference {tuple(feat_ref.shape)} and flow {tuple(flow.shape)} disagree"
            )
        warped = warp(feat if self.warp_target == "current" else feat_ref, flow)
        head_in = [warped, feat_ref] + ([extra] if extra is not None else [])
        residual, logits = self.offset_head(torch.cat(head_in, dim=1))
        offsets = flow_to_offsets(flow, self.groups * KERNEL_TAPS) + residual
        limit = max(feat.shape[-2:]) / 2
        offsets = offsets.clamp(-limit, limit)
        masks = modulation(logits)
        return self.dcn(feat, offsets, masks), OffsetField(offsets, masks)


def _upsample_to(x, size, scale_values=1.0):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False) * scale_values


class PyramidAlign(nn.Module):
    """Coarse-to-fine FG-DCN over three levels (or a single full-resolution level).

    At the two finer levels the offset head also sees the previous level's
    offsets (upsampled, values doubled) and aligned feature (upsampled).
    """

    def __init__(self, channels: int, groups: int = 1, levels: int = 3, warp_target: str = "current"):
        super().__init__()
        if levels not in (1, 3):
            raise ConfigError(f"pyramid alignment supports 1 or 3 levels, got {levels}")
        self.levels = levels
        extra = 2 * groups * KERNEL_TAPS + channels
        self.level_modules = nn.ModuleList([
            FlowGuidedDCN(channels, groups, extra if (lvl < levels - 1) else 0, warp_target)
            for lvl in range(levels)
        ])

    def forward(self, feats, ref_feats, flows: FlowPyramid, return_offsets: bool = False):
        if len(feats) < self.levels or len(ref_feats) < self.levels:
            raise DimensionError(f"need {self.levels} pyramid levels of features")
        for lvl in range(self.levels):
            if feats[lvl].shape[-2:] != flows[lvl].shape[-2:]:
                raise DimensionError(
                    f"level {lvl + 1}: feature {tuple(feats[lvl].shape)} vs flow {tuple(flows[lvl].shape)}"
                )
        aligned, field, extra = None, None, None
        fields = []
        for lvl in reversed(range(self.levels)):
            if aligned is not None:
                size = feats[lvl].shape[-2:]
                extra = torch.cat([_upsample_to(field.offsets, size, 2.0), _upsample_to(aligned, size)], dim=1)
            aligned, field = self.level_modules[lvl](feats[lvl], ref_feats[lvl], flows[lvl], extra)
            fields.append(field)
        if return_offsets:
            return aligned, fields[::-1]
        return aligned


class ResidualBlock(nn.Module):
    """conv - LeakyReLU - conv with identity skip."""

    def __init__(self, channels: int, zero_init: bool = False):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        if zero_init:
            nn.init.zeros_(self.conv2.weight)
            nn.init.zeros_(self.conv2.bias)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class FeatureEnhance(nn.Module):
    """Shared residual stack applied to every frame's feature independently."""

    def __init__(self, channels: int, blocks: int = 3):
        super().__init__()
        self.body = nn.Sequential(*[ResidualBlock(channels, zero_init=True) for _ in range(blocks)])

    def forward(self, feats):
        if isinstance(feats, (list, tuple)):
            return [self.body(f) for f in feats]
        return self.body(feats)
