"""Grouped bilinear sampling with zero padding, the hot kernel behind both
flow warping and deformable convolution.

Two interchangeable backends compute the same thing:

``compiled``
    The Cython extension ``burstsr._sampling`` (forward and hand-written
    backward, OpenMP over sampling sets).
``torch``
    Vectorised ``torch.gather`` implementation; autograd derives the backward.

The compiled backend is used when the extension imports, unless the
``BURSTSR_BACKEND`` environment variable says otherwise. Both backends sum
the four bilinear corners in the same order, so their forward outputs agree
bit for bit.
"""

from __future__ import annotations

import logging
import os
from contextlib import contextmanager

import torch

log = logging.getLogger(__name__)

try:
    from . import _sampling as _ext
except ImportError:  # pragma: no cover - depends on the build
    _ext = None

BACKENDS = ("compiled", "torch")


def _initial_backend() -> str:
    requested = os.environ.get("BURSTSR_BACKEND", "").strip().lower()
    if requested == "torch":
        return "torch"
    if requested == "compiled" and _ext is None:
        log.warning("BURSTSR_BACKEND=compiled but the extension is not built; using torch")
    return "compiled" if _ext is not None else "torch"


_backend = _initial_backend()


def compiled_available() -> bool:
    return _ext is not None


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown sampling backend {name!r}; choose from {BACKENDS}")
    if name == "compiled" and _ext is None:
        raise RuntimeError("compiled sampling extension is not available")
    _backend = name


@contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _sample_torch(x: torch.Tensor, pos_y: torch.Tensor, pos_x: torch.Tensor) -> torch.Tensor:
    S, C, H, W = x.shape
    P = pos_y.shape[1]
    flat = x.reshape(S, C, H * W)
    y0 = torch.floor(pos_y)
    x0 = torch.floor(pos_x)
    fy = pos_y - y0
    fx = pos_x - x0
    y0 = y0.long()
    x0 = x0.long()
    out = x.new_zeros(S, C, P)
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).unsqueeze(1).expand(S, C, P)
        vals = torch.gather(flat, 2, idx)
        out = out + torch.where(valid.unsqueeze(1), w.unsqueeze(1) * vals, out.new_zeros(()))
    return out


class _CompiledSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, pos_y, pos_x):
        S, C, H, W = x.shape
        xs = x.detach().contiguous()
        py = pos_y.detach().contiguous()
        px = pos_x.detach().contiguous()
        out = torch.empty(S, C, py.shape[1], dtype=x.dtype)
        _ext.sample_forward(xs.view(S, C, H * W).numpy(), py.numpy(), px.numpy(), out.numpy(), H, W)
        ctx.save_for_backward(xs, py, px)
        return out

    @staticmethod
    def backward(ctx, grad_out):
        xs, py, px = ctx.saved_tensors
        S, C, H, W = xs.shape
        need_x = ctx.needs_input_grad[0]
        need_pos = ctx.needs_input_grad[1] or ctx.needs_input_grad[2]
        grad_x = torch.zeros_like(xs)
        grad_y = torch.zeros_like(py)
        grad_px = torch.zeros_like(px)
        _ext.sample_backward(
            xs.view(S, C, H * W).numpy(), py.numpy(), px.numpy(),
            grad_out.detach().contiguous().numpy(),
            grad_x.view(S, C, H * W).numpy(), grad_y.numpy(), grad_px.numpy(),
            H, W, need_x, need_pos,
        )
        return (
            grad_x if need_x else None,
            grad_y if ctx.needs_input_grad[1] else None,
            grad_px if ctx.needs_input_grad[2] else None,
        )


def bilinear_sample(x: torch.Tensor, pos_y: torch.Tensor, pos_x: torch.Tensor,
                    backend: str | None = None) -> torch.Tensor:
    """Sample ``x`` (S, C, H, W) at pixel positions (S, P); returns (S, C, P).

    Corner pixels outside the image contribute zero, so sampling is linear
    in ``x`` and exact at integer positions.
    """
    if x.dim() != 4 or pos_y.dim() != 2 or pos_y.shape != pos_x.shape or pos_y.shape[0] != x.shape[0]:
        raise ValueError(
            f"bilinear_sample expects x (S,C,H,W) and positions (S,P); got {tuple(x.shape)}, "
            f"{tuple(pos_y.shape)}, {tuple(pos_x.shape)}"
        )
    backend = backend or _backend
    dtype = torch.promote_types(x.dtype, pos_y.dtype)
    x, pos_y, pos_x = x.to(dtype), pos_y.to(dtype), pos_x.to(dtype)
    if backend == "compiled" and x.device.type == "cpu" and dtype in (torch.float32, torch.float64):
        return _CompiledSample.apply(x, pos_y, pos_x)
    return _sample_torch(x, pos_y, pos_x)


def pixel_grid(H: int, W: int, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Integer pixel coordinates (rows, cols), each of shape (H, W)."""
    ys = torch.arange(H, dtype=dtype, device=device)
    xs = torch.arange(W, dtype=dtype, device=device)
    return torch.meshgrid(ys, xs, indexing="ij")


__all__ = [
    "BACKENDS",
    "bilinear_sample",
    "compiled_available",
    "get_backend",
    "pixel_grid",
    "set_backend",
    "use_backend",
]
