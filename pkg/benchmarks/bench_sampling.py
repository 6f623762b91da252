"""Compare the compiled and torch bilinear-sampling backends.

Times forward and forward+backward for the two call patterns used by the
model: a flow warp and a 3x3 deformable convolution. Run with

    python3 benchmarks/bench_sampling.py [--repeat 20]
"""

from __future__ import annotations

import argparse
import timeit

import torch

from burstsr.align import deform_conv
from burstsr.flow import warp
from burstsr.sampling import compiled_available, use_backend


def cases(dtype):
    g = torch.Generator().manual_seed(0)
    x = torch.rand(8, 32, 32, 32, generator=g, dtype=dtype)
    flow = torch.randn(8, 2, 32, 32, generator=g, dtype=dtype) * 2
    off = torch.randn(8, 18, 32, 32, generator=g, dtype=dtype)
    mask = torch.rand(8, 9, 32, 32, generator=g, dtype=dtype)
    w = torch.randn(32, 32, 3, 3, generator=g, dtype=dtype) * 0.05
    return {
        "warp 8x32x32x32": lambda: warp(x, flow),
        "deform_conv 8x32x32x32": lambda: deform_conv(x, off, mask, w),
    }, (x, flow, off, mask, w)


def time_call(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--double", action="store_true")
    args = ap.parse_args()
    if not compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    dtype = torch.float64 if args.double else torch.float32
    fns, tensors = cases(dtype)
    print(f"{'case':28s} {'backend':9s} {'fwd ms':>9s} {'fwd+bwd ms':>11s}")
    for name, fn in fns.items():
        for backend in ("compiled", "torch"):
            with use_backend(backend):
                fwd = time_call(fn, args.repeat)

                def fwd_bwd():
                    for t in tensors:
                        t.requires_grad_(True)
                        t.grad = None
                    fn().sum().backward()

                both = time_call(fwd_bwd, args.repeat)
                for t in tensors:
                    t.requires_grad_(False)
            print(f"{name:28s} {backend:9s} {fwd:9.2f} {both:11.2f}")


if __name__ == "__main__":
    main()
