import cmath
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ugnn import tensor_core as tc
from ugnn.verification import finite_difference_gradient, relative_error


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT by the defining double sum."""
    H, W = x.shape
    out = np.zeros((H, W), dtype=complex)
    for u in range(H):
        for v in range(W):
            acc = 0j
            for i in range(H):
                for j in range(W):
                    acc += x[i, j] * cmath.exp(-2j * math.pi * (u * i / H + v * j / W))
            out[u, v] = acc / math.sqrt(H * W)
    return out


def triple_loop_matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


@pytest.mark.parametrize("shape", [(4, 4), (8, 8), (3, 5), (6, 7)])
def test_fft2_matches_naive_dft(shape):
    x = tc.randn(*shape, seed=3)
    ref = naive_dft2(x.numpy())
    got = tc.fft2(x).numpy()
    assert np.abs(got - ref).max() <= 1e-9


def test_fft_roundtrip():
    x = tc.randn(2, 3, 16, 12, seed=1)
    back = tc.ifft2(tc.fft2(x))
    assert float((back - x).norm() / x.norm()) <= 1e-10


def test_fft_needs_two_axes():
    with pytest.raises(tc.ShapeError):
        tc.fft2(torch.zeros(4))


def test_matmul_matches_triple_loop():
    a = tc.randn(5, 7, seed=2)
    b = tc.randn(7, 3, seed=4)
    ref = torch.tensor(triple_loop_matmul(a.tolist(), b.tolist()), dtype=torch.float64)
    assert float((tc.matmul(a, b) - ref).abs().max()) <= 1e-12


def test_matmul_shape_errors():
    with pytest.raises(tc.ShapeError):
        tc.matmul(torch.zeros(2, 3), torch.zeros(2, 3))
    with pytest.raises(tc.ShapeError):
        tc.matmul(torch.zeros(3), torch.zeros(3, 3))


def test_check_same_shape():
    tc.check_same_shape(torch.zeros(2, 2), torch.tensor(1.0))
    with pytest.raises(tc.ShapeError):
        tc.check_same_shape(torch.zeros(2, 2), torch.zeros(2, 3))


def test_gradient_constant_and_linear():
    x = torch.randn(4, dtype=torch.float64, requires_grad=True)
    assert torch.equal(tc.gradient(torch.tensor(3.0, dtype=torch.float64), x), torch.zeros(4, dtype=torch.float64))
    w = torch.tensor([1.0, -2.0, 0.5, 4.0], dtype=torch.float64)
    assert torch.allclose(tc.gradient(w @ x, x), w, atol=0)


def test_gradient_errors():
    x = torch.randn(3, dtype=torch.float64)
    with pytest.raises(ValueError):
        tc.gradient((x ** 2).sum(), x)
    xg = x.clone().requires_grad_(True)
    with pytest.raises(tc.ShapeError):
        tc.gradient(xg * 2, xg)


def test_gradient_composite_matches_fd():
    x0 = tc.randn(3, 4, seed=7)

    def f(x):
        return (torch.sin(x @ x.T).sum() + torch.tanh(x).pow(3).sum()
                + tc.fft2(x).abs().pow(2).sum() * 0.1)

    x = x0.clone().requires_grad_(True)
    ad = tc.gradient(f(x), x)
    fd = finite_difference_gradient(f, x0)
    assert relative_error(ad, fd) <= 1e-4


def test_seeded_generator_is_deterministic():
    assert torch.equal(tc.randn(5, seed=11), tc.randn(5, seed=11))
    assert not torch.equal(tc.randn(5, seed=11), tc.randn(5, seed=12))


def test_resolve_dtype():
    assert tc.resolve_dtype("f32") is torch.float32
    assert tc.resolve_dtype(torch.float64) is torch.float64
    with pytest.raises(ValueError):
        tc.resolve_dtype("f16")
    with pytest.raises(ValueError):
        tc.resolve_dtype(torch.int32)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 10_000))
def test_parseval(h, w, seed):
    x = tc.randn(h, w, seed=seed)
    assert math.isclose(float(tc.fft2(x).abs().pow(2).sum()), float(x.pow(2).sum()), rel_tol=1e-10)
