"""Static training curves and a PSNR-vs-parameters scatter.

Every figure is accompanied by ``plot_data.json`` listing the plotted
coordinates, so the numbers behind a picture can be checked.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InputError  # noqa: E402
from .evaluate import parse_report  # noqa: E402

_FIELD = re.compile(r"(\w+)=(\S+)")


def parse_log(text: str) -> tuple[list[tuple[int, float]], list[tuple[int, float]]]:
    """(step, loss) and (step, val_psnr) series from a training log."""
    losses, psnrs = [], []
    for line in text.splitlines():
        kv = dict(_FIELD.findall(line))
        if "step" not in kv:
            continue
        try:
            step = int(kv["step"])
            if "loss" in kv:
                losses.append((step, float(kv["loss"])))
            if "val_psnr" in kv:
                psnrs.append((step, float(kv["val_psnr"])))
        except ValueError:
            continue
    return losses, psnrs


def _line_plot(points, ylabel, path, logy=False):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in points], [p[1] for p in points], lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_training(log_path: Path, out_dir: Path, reports: list[Path] | None = None) -> dict:
    log_path, out_dir = Path(log_path), Path(out_dir)
    if not log_path.is_file():
        raise InputError(f"log {log_path} does not exist")
    losses, psnrs = parse_log(log_path.read_text())
    if not losses and not psnrs:
        raise InputError(f"log {log_path} has no step=... entries")
    out_dir.mkdir(parents=True, exist_ok=True)
    sidecar: dict = {"files": []}
    if losses:
        _line_plot(losses, "L1 loss", out_dir / "loss.png", logy=all(v > 0 for _, v in losses))
        sidecar["files"].append("loss.png")
        sidecar["loss"] = {"steps": [s for s, _ in losses], "values": [v for _, v in losses]}
    if psnrs:
        _line_plot(psnrs, "validation PSNR (dB)", out_dir / "psnr.png")
        sidecar["files"].append("psnr.png")
        sidecar["psnr"] = {"steps": [s for s, _ in psnrs], "values": [v for _, v in psnrs], "final": psnrs[-1][1]}
    if reports:
        points = []
        for rp in reports:
            report, footer = parse_report(Path(rp).read_text())
            if "parameters" not in footer:
                raise InputError(f"report {rp} lacks a parameters= footer entry")
            points.append({"report": str(rp), "parameters": int(footer["parameters"]), "psnr": report.mean_psnr})
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.scatter([p["parameters"] / 1e6 for p in points], [p["psnr"] for p in points])
        ax.set_xlabel("parameters (M)")
        ax.set_ylabel("mean PSNR (dB)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out_dir / "psnr_vs_params.png", dpi=100)
        plt.close(fig)
        sidecar["files"].append("psnr_vs_params.png")
        sidecar["scatter"] = points
    (out_dir / "plot_data.json").write_text(json.dumps(sidecar, indent=1))
    return sidecar
