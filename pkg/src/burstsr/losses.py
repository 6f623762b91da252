"""Training objectives and fidelity metrics.

Images are (B, 3, H, W) or (3, H, W) tensors in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .errors import DimensionError
from .flow import warp, warp_valid_mask

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

Aligner = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def _batched(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() == 3:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if a.dim() != 4:
        raise DimensionError(f"expected (B, C, H, W) or (C, H, W) images, got {tuple(a.shape)}")
    return a, b


@dataclass
class LossReport:
    total: torch.Tensor
    components: dict = field(default_factory=dict)
    per_sample: torch.Tensor | None = None
    warning: str | None = None

    @property
    def fell_back(self) -> bool:
        return self.warning is not None


def l1_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    sr, hr = _batched(sr, hr)
    return (sr - hr).abs().mean()


def per_sample_l1(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    sr, hr = _batched(sr, hr)
    return (sr - hr).abs().flatten(1).mean(1)


def l1_report(sr: torch.Tensor, hr: torch.Tensor) -> LossReport:
    per = per_sample_l1(sr, hr)
    total = per.mean()
    return LossReport(total, {"l1": total.detach()}, per.detach())


def zero_aligner(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    return sr.new_zeros(sr.shape[0], 2, *sr.shape[-2:])


def constant_aligner(dx: float, dy: float) -> Aligner:
    """Aligner that returns the same known displacement everywhere."""

    def align(sr, hr):
        flow = sr.new_zeros(sr.shape[0], 2, *sr.shape[-2:])
        flow[:, 0] = dx
        flow[:, 1] = dy
        return flow

    return align


def flownet_aligner(flownet) -> Aligner:
    """Use a trained :class:`~burstsr.flow.FlowNet` to register hr onto sr.

    The flow is estimated without gradient, as the aligner only resamples
    the target.
    """

    def align(sr, hr):
        with torch.no_grad():
            return flownet.estimate_padded(hr.clamp(0, 1), sr.clamp(0, 1)).f1

    return align


def aligned_l1_loss(sr: torch.Tensor, hr: torch.Tensor, aligner: Aligner) -> LossReport:
    """L1 after warping ``hr`` onto ``sr`` with the aligner's flow.

    Only pixels whose source location lies inside ``hr`` enter the mean. If the
    aligner raises or returns an unusable flow the plain L1 is returned with
    ``warning`` set.
    """
    sr, hr = _batched(sr, hr)
    B, C, H, W = sr.shape
    try:
        flow = aligner(sr, hr)
        if flow.shape != (B, 2, H, W):
            raise DimensionError(f"aligner returned flow of shape {tuple(flow.shape)}")
        if not torch.isfinite(flow).all():
            raise ValueError("aligner returned non-finite flow")
    except Exception as exc:  # noqa: BLE001 - any aligner failure degrades to plain L1
        report = l1_report(sr, hr)
        report.warning = f"aligner failed ({exc}); used plain l1"
        return report
    flow = flow.detach().to(hr.dtype)
    valid = warp_valid_mask(flow).to(sr.dtype)
    diff = (sr - warp(hr, flow)).abs() * valid
    counts = valid.flatten(1).sum(1) * C
    if (counts == 0).any():
        report = l1_report(sr, hr)
        report.warning = "aligner flow leaves no valid pixels; used plain l1"
        return report
    per = diff.flatten(1).sum(1) / counts
    total = diff.sum() / counts.sum()
    return LossReport(total, {"aligned_l1": total.detach(), "l1": l1_loss(sr, hr).detach()}, per.detach())


def mse(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Per-image mean squared error, shape (B,)."""
    sr, hr = _batched(sr, hr)
    return ((sr.double() - hr.double()) ** 2).flatten(1).mean(1)


def psnr(sr: torch.Tensor, hr: torch.Tensor, max_val: float = 1.0, cap: float = PSNR_CAP) -> torch.Tensor:
    """Per-image PSNR in dB (B,); ``cap`` where the images are identical."""
    err = mse(sr, hr)
    val = 10 * torch.log10(max_val ** 2 / err.clamp(min=1e-300))
    return torch.where(err == 0, torch.full_like(val, cap), val.clamp(max=cap))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_map(sr: torch.Tensor, hr: torch.Tensor, max_val: float = 1.0) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows of the channel-mean image, (B, H-10, W-10)."""
    sr, hr = _batched(sr, hr)
    H, W = sr.shape[-2:]
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise DimensionError(f"image {H}x{W} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = sr.double().mean(1, keepdim=True)
    y = hr.double().mean(1, keepdim=True)
    k = gaussian_window(dtype=torch.float64).to(x.device).view(1, 1, SSIM_WINDOW, SSIM_WINDOW)
    mx, my = F.conv2d(x, k), F.conv2d(y, k)
    sxx = F.conv2d(x * x, k) - mx * mx
    syy = F.conv2d(y * y, k) - my * my
    sxy = F.conv2d(x * y, k) - mx * my
    c1, c2 = (SSIM_K1 * max_val) ** 2, (SSIM_K2 * max_val) ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).squeeze(1)


def ssim(sr: torch.Tensor, hr: torch.Tensor, max_val: float = 1.0) -> torch.Tensor:
    """Per-image mean SSIM (B,). Identical inputs give exactly 1."""
    return ssim_map(sr, hr, max_val).flatten(1).mean(1)


@dataclass
class MetricReport:
    ids: list
    psnr: list
    ssim: list

    @property
    def mean_psnr(self) -> float:
        return float(sum(self.psnr) / len(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(sum(self.ssim) / len(self.ssim)) if self.ssim else math.nan

    def extend(self, ids, psnr_vals, ssim_vals) -> None:
        self.ids.extend(ids)
        self.psnr.extend(float(v) for v in psnr_vals)
        self.ssim.extend(float(v) for v in ssim_vals)


def evaluate_pair(sr: torch.Tensor, hr: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return psnr(sr, hr), ssim(sr, hr)
