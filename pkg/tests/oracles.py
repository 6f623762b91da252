"""Brute-force reference implementations used as test oracles.

They are written as literal loops over pixels so that they share no code
with the vectorised implementations under test.
"""

from __future__ import annotations

import math

import numpy as np
import torch


def bilinear_at(img: np.ndarray, y: float, x: float) -> float:
    """Bilinear sample of a 2-D array at (y, x) with zero outside."""
    H, W = img.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for dy in (0, 1):
        for dx in (0, 1):
            yy, xx = y0 + dy, x0 + dx
            wy = 1 - abs(y - yy)
            wx = 1 - abs(x - xx)
            if 0 <= yy < H and 0 <= xx < W:
                total += wy * wx * float(img[yy, xx])
    return total


def warp_oracle(x: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """x (C, H, W), flow (2, H, W): out(c, i, j) = x(c, i + fy, j + fx)."""
    C, H, W = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for c in range(C):
        for i in range(H):
            for j in range(W):
                out[c, i, j] = bilinear_at(x[c], i + flow[1, i, j], j + flow[0, i, j])
    return out


def conv3x3_oracle(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded stride-1 3x3 convolution (cross-correlation), x (C_in, H, W)."""
    C_in, H, W = x.shape
    C_out = w.shape[0]
    out = np.zeros((C_out, H, W))
    for o in range(C_out):
        for i in range(H):
            for j in range(W):
                acc = 0.0 if b is None else float(b[o])
                for c in range(C_in):
                    for ki in range(3):
                        for kj in range(3):
                            yy, xx = i + ki - 1, j + kj - 1
                            if 0 <= yy < H and 0 <= xx < W:
                                acc += w[o, c, ki, kj] * x[c, yy, xx]
                out[o, i, j] = acc
    return out


def deform_conv_oracle(x, offsets, masks, w, b, groups):
    """Per-pixel modulated deformable convolution, single image."""
    C_in, H, W = x.shape
    C_out = w.shape[0]
    cg = C_in // groups
    out = np.zeros((C_out, H, W))
    for o in range(C_out):
        for i in range(H):
            for j in range(W):
                acc = float(b[o]) if b is not None else 0.0
                for c in range(C_in):
                    g = c // cg
                    for k in range(9):
                        ki, kj = divmod(k, 3)
                        dy = offsets[2 * (g * 9 + k), i, j]
                        dx = offsets[2 * (g * 9 + k) + 1, i, j]
                        m = masks[g * 9 + k, i, j]
                        acc += w[o, c, ki, kj] * m * bilinear_at(x[c], i + ki - 1 + dy, j + kj - 1 + dx)
                out[o, i, j] = acc
    return out


def mosaic_oracle(rgb: np.ndarray) -> np.ndarray:
    _, H, W = rgb.shape
    m = np.zeros((1, H, W))
    for i in range(H):
        for j in range(W):
            if i % 2 == 0 and j % 2 == 0:
                m[0, i, j] = rgb[0, i, j]
            elif i % 2 == 1 and j % 2 == 1:
                m[0, i, j] = rgb[2, i, j]
            else:
                m[0, i, j] = rgb[1, i, j]
    return m


def psnr_oracle(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    flat_a, flat_b = a.ravel(), b.ravel()
    se = 0.0
    for u, v in zip(flat_a, flat_b):
        se += (float(u) - float(v)) ** 2
    mse = se / flat_a.size
    return 10 * math.log10(max_val ** 2 / mse)


def ssim_oracle(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5,
                k1: float = 0.01, k2: float = 0.03, max_val: float = 1.0) -> float:
    """Mean SSIM over every valid window, computed window by window."""
    x = a.mean(axis=0)
    y = b.mean(axis=0)
    r = [i - (size - 1) / 2 for i in range(size)]
    g1 = [math.exp(-(t * t) / (2 * sigma * sigma)) for t in r]
    s = sum(g1)
    g1 = [v / s for v in g1]
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    H, W = x.shape
    vals = []
    for i in range(H - size + 1):
        for j in range(W - size + 1):
            mx = my = 0.0
            for u in range(size):
                for v in range(size):
                    wgt = g1[u] * g1[v]
                    mx += wgt * x[i + u, j + v]
                    my += wgt * y[i + u, j + v]
            vx = vy = cxy = 0.0
            for u in range(size):
                for v in range(size):
                    wgt = g1[u] * g1[v]
                    dx, dy = x[i + u, j + v] - mx, y[i + u, j + v] - my
                    vx += wgt * dx * dx
                    vy += wgt * dy * dy
                    cxy += wgt * dx * dy
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def numerical_grad(fn, tensor: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Central differences of scalar ``fn()`` with respect to every entry of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(fn())
        flat[i] = orig - eps
        fm = float(fn())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    scale = max(float(numeric.norm()), float(analytic.norm()), 1e-12)
    return float((analytic - numeric).norm()) / scale


def check_gradient(fn, inputs: list[torch.Tensor], eps: float = 1e-4) -> list[float]:
    """Relative error between autograd and central differences for each input."""
    for t in inputs:
        t.grad = None
        t.requires_grad_(True)
    fn().backward()
    analytic = [t.grad.detach().clone() for t in inputs]
    errs = []
    with torch.no_grad():
        for t, a in zip(inputs, analytic):
            errs.append(relative_error(a, numerical_grad(fn, t, eps)))
    return errs
