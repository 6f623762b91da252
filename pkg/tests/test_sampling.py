import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from burstsr.sampling import (bilinear_sample, compiled_available, get_backend, pixel_grid, set_backend,
                              use_backend)
from oracles import bilinear_at

needs_ext = pytest.mark.skipif(not compiled_available(), reason="compiled extension not built")
BACKENDS = ["torch", pytest.param("compiled", marks=needs_ext)]


@pytest.mark.parametrize("backend", BACKENDS)
def test_matches_pointwise_oracle(backend):
    x = torch.rand(2, 3, 5, 6, dtype=torch.float64)
    py = torch.rand(2, 40, dtype=torch.float64) * 8 - 1.5
    px = torch.rand(2, 40, dtype=torch.float64) * 9 - 1.5
    out = bilinear_sample(x, py, px, backend=backend)
    for s in range(2):
        for c in range(3):
            for p in range(40):
                ref = bilinear_at(x[s, c].numpy(), py[s, p].item(), px[s, p].item())
                assert out[s, c, p].item() == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_integer_positions_are_exact(backend):
    x = torch.rand(1, 2, 4, 5)
    ys, xs = pixel_grid(4, 5)
    out = bilinear_sample(x, ys.reshape(1, -1), xs.reshape(1, -1), backend=backend)
    assert torch.equal(out.view(1, 2, 4, 5), x)


@needs_ext
@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_backends_bit_identical_forward(dtype):
    x = torch.randn(3, 4, 7, 9, dtype=dtype)
    py = torch.rand(3, 100, dtype=dtype) * 10 - 2
    px = torch.rand(3, 100, dtype=dtype) * 12 - 2
    a = bilinear_sample(x, py, px, backend="compiled")
    b = bilinear_sample(x, py, px, backend="torch")
    assert torch.equal(a, b)


@needs_ext
def test_backends_agree_on_gradients():
    x = torch.randn(2, 3, 6, 6, dtype=torch.float64)
    py = torch.rand(2, 50, dtype=torch.float64) * 8 - 1
    px = torch.rand(2, 50, dtype=torch.float64) * 8 - 1
    g = torch.randn(2, 3, 50, dtype=torch.float64)
    grads = []
    for backend in ("compiled", "torch"):
        ins = [t.clone().requires_grad_(True) for t in (x, py, px)]
        (bilinear_sample(*ins, backend=backend) * g).sum().backward()
        grads.append([t.grad for t in ins])
    for a, b in zip(*grads):
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
def test_gradcheck(backend):
    x = torch.randn(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    # keep positions away from integers, where bilinear sampling has kinks
    base = torch.randint(-1, 4, (2, 1, 12)).double()
    frac = torch.rand(2, 1, 12, dtype=torch.float64) * 0.6 + 0.2
    pos = (base + frac).requires_grad_(True)
    assert torch.autograd.gradcheck(lambda a, p: bilinear_sample(a, p[0], p[1], backend=backend), (x, pos))


def test_rejects_bad_shapes():
    with pytest.raises(ValueError):
        bilinear_sample(torch.rand(2, 3, 4, 4), torch.rand(3, 5), torch.rand(3, 5))
    with pytest.raises(ValueError):
        bilinear_sample(torch.rand(2, 3, 4, 4), torch.rand(2, 5), torch.rand(2, 6))


def test_backend_switching():
    before = get_backend()
    with use_backend("torch"):
        assert get_backend() == "torch"
    assert get_backend() == before
    with pytest.raises(ValueError):
        set_backend("cuda-magic")


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2 ** 16))
def test_linear_in_input(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    y = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    py = torch.rand(1, 30, generator=g, dtype=torch.float64) * 7 - 1
    px = torch.rand(1, 30, generator=g, dtype=torch.float64) * 7 - 1
    lhs = bilinear_sample(a * x + b * y, py, px)
    rhs = a * bilinear_sample(x, py, px) + b * bilinear_sample(y, py, px)
    assert torch.allclose(lhs, rhs, atol=1e-10)


def test_far_outside_reads_zero():
    x = torch.rand(1, 1, 3, 3)
    out = bilinear_sample(x, torch.tensor([[-5.0, 10.0]]), torch.tensor([[0.5, 0.5]]))
    assert torch.equal(out, torch.zeros(1, 1, 2))
    assert np.isfinite(out.numpy()).all()
