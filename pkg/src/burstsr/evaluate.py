"""Running a model over stored bursts and writing metric reports.

Outputs are clamped to [0, 1] and quantized to 16 bits before scoring, so
the numbers match what ``infer`` writes to disk. Metrics are computed on the
model's linear RGB output; no display post-processing is applied.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .dataset import BurstDataset, quantize16, read_png16
from .errors import InputError
from .losses import MetricReport, psnr, ssim
from .model import baseline_upsample


def quantize_output(sr: torch.Tensor) -> torch.Tensor:
    """Round to the 16-bit grid that the PNG writer uses."""
    return torch.from_numpy(quantize16(sr).astype("float64") / 65535.0)


@torch.no_grad()
def super_resolve(model, frames: torch.Tensor) -> torch.Tensor:
    """(N, 4, h, w) burst -> (3, 2hs, 2ws) float64 on the 16-bit grid."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        out = model(frames.unsqueeze(0).to(dtype))[0]
    finally:
        model.train(was_training)
    return quantize_output(out)


def evaluate_dataset(model, dataset: BurstDataset, burst_size: int | None = None) -> MetricReport:
    report = MetricReport([], [], [])
    for item in dataset.items:
        frames = item.frames if burst_size is None else item.frames[:burst_size]
        if burst_size is not None and frames.shape[0] < burst_size:
            raise InputError(f"{item.sample_id} has {item.frames.shape[0]} frames, model needs {burst_size}")
        sr = super_resolve(model, frames)
        hr = item.hr.double()
        report.extend([item.sample_id], psnr(sr, hr), ssim(sr, hr))
    return report


def format_report(report: MetricReport, footer: dict | None = None) -> str:
    lines = ["# metrics on linear RGB model output quantized to 16 bits", "id psnr ssim"]
    for sid, p, s in zip(report.ids, report.psnr, report.ssim):
        lines.append(f"{sid} {p!r} {s!r}")
    fields = {"mean_psnr": repr(report.mean_psnr), "mean_ssim": repr(report.mean_ssim), "count": len(report.ids)}
    fields.update(footer or {})
    lines.append("# " + " ".join(f"{k}={v}" for k, v in fields.items()))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> tuple[MetricReport, dict]:
    report, footer = MetricReport([], [], []), {}
    for line in text.splitlines():
        if line.startswith("#"):
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    footer[k] = v
            continue
        parts = line.split()
        if parts == ["id", "psnr", "ssim"] or not parts:
            continue
        if len(parts) != 3:
            raise InputError(f"malformed report row: {line!r}")
        report.extend([parts[0]], [float(parts[1])], [float(parts[2])])
    return report, footer


def write_report(path: Path, report: MetricReport, footer: dict | None = None) -> str:
    text = format_report(report, footer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return text


def baseline_report(dataset: BurstDataset, scale: int, dtype=torch.float32) -> MetricReport:
    """Scores of the naive demosaic + bilinear upsampling baseline, computed in ``dtype``."""
    report = MetricReport([], [], [])
    for item in dataset.items:
        sr = quantize_output(baseline_upsample(item.frames[:1].to(dtype), scale)[0])
        hr = item.hr.double()
        report.extend([item.sample_id], psnr(sr, hr), ssim(sr, hr))
    return report


def psnr_of_files(sr_png: Path, hr_png: Path) -> float:
    return float(psnr(read_png16(sr_png), read_png16(hr_png))[0])
