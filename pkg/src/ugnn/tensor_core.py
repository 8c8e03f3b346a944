"""Thin tensor layer over torch.

Everything numeric in the package runs on dense row-major torch tensors. This
module pins down the small contract the rest of the code relies on: explicit
shape checks (no broadcasting beyond scalars), a unitary 2D FFT pair,
reverse-mode gradients, and seeded generators.
"""
from __future__ import annotations

import torch

DTYPES = {"f32": torch.float32, "f64": torch.float64}
DEFAULT_DTYPE = torch.float64


class ShapeError(ValueError):
    pass


def resolve_dtype(dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        if dtype not in DTYPES.values():
            raise ValueError(f"unsupported dtype {dtype}")
        return dtype
    try:
        return DTYPES[dtype]
    except KeyError:
        raise ValueError(f"unsupported dtype {dtype!r}, expected one of {sorted(DTYPES)}") from None


def as_tensor(data, dtype=DEFAULT_DTYPE) -> torch.Tensor:
    """Copy ``data`` into a contiguous real tensor of the requested precision."""
    t = torch.as_tensor(data, dtype=resolve_dtype(dtype))
    return t.contiguous()


def generator(seed: int) -> torch.Generator:
    # torch's CPU generator is a Mersenne Twister; fixed seed gives identical streams.
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def randn(*shape, seed: int | None = None, gen: torch.Generator | None = None,
          dtype=DEFAULT_DTYPE) -> torch.Tensor:
    if gen is None:
        gen = generator(0 if seed is None else seed)
    return torch.randn(*shape, generator=gen, dtype=resolve_dtype(dtype))


def check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.dim() > 0 and b.dim() > 0 and a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects matrices, got {a.dim()}-d and {b.dim()}-d")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def fft2(x: torch.Tensor) -> torch.Tensor:
    """Unitary 2D DFT over the last two axes."""
    if x.dim() < 2:
        raise ShapeError("fft2 needs at least two axes")
    return torch.fft.fft2(x, norm="ortho")


def ifft2(spectrum: torch.Tensor, real: bool = True) -> torch.Tensor:
    """Inverse of :func:`fft2`; drops the (round-off) imaginary part when ``real``."""
    y = torch.fft.ifft2(spectrum, norm="ortho")
    return y.real if real else y


def gradient(output: torch.Tensor, wrt: torch.Tensor, create_graph: bool = False) -> torch.Tensor:
    """Reverse-accumulated gradient of a scalar ``output`` with respect to ``wrt``."""
    if output.numel() != 1:
        raise ShapeError("gradient needs a scalar output")
    if not wrt.requires_grad:
        raise ValueError("wrt is detached from the graph (requires_grad=False)")
    if output.grad_fn is None and not output.requires_grad:
        return torch.zeros_like(wrt)
    (g,) = torch.autograd.grad(output.reshape(()), wrt, create_graph=create_graph,
                               retain_graph=True, allow_unused=True)
    return torch.zeros_like(wrt) if g is None else g
