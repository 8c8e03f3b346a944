"""Gradient-norm-preserving (GNP) layers.

Every layer here has a Jacobian ``J`` with ``J J^T = I`` wherever it is
differentiable: row-orthonormal fully connected layers (Björck), orthogonal
circular convolutions (Cayley transform in the Fourier domain), the Abs /
MaxMin / OPLU activations, PixelUnshuffle and non-overlapping max pooling.

Layers with a parameterization (``OrthoLinear``, ``CayleyConv``) recompute the
projected weight on every forward pass until :meth:`freeze` is called; after
that the projected weight is cached and reused.
"""
from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F

from . import tensor_core as tc

BJORCK_TRAIN_ITERS = 20
BJORCK_FREEZE_ITERS = 100
POWER_ITERS = 5
ACTIVATIONS = ("abs", "maxmin", "oplu")


class RankDeficientError(ValueError):
    pass


def power_iteration(U: torch.Tensor, iters: int = POWER_ITERS) -> torch.Tensor:
    """Estimate of the largest singular value of ``U`` (differentiable)."""
    g = tc.generator(0)
    v = torch.randn(U.shape[1], generator=g, dtype=U.dtype)
    v = v / v.norm()
    for _ in range(iters):
        u = U @ v
        un = u.norm()
        if float(un.detach()) == 0.0:
            return un
        v = U.T @ (u / un)
        vn = v.norm()
        if float(vn.detach()) == 0.0:
            return vn
        v = v / vn
    return (U @ v).norm()


def orthogonality_residual(W: torch.Tensor) -> float:
    eye = torch.eye(W.shape[0], dtype=W.dtype)
    return float((W @ W.T - eye).abs().max())


def bjorck_project(U: torch.Tensor, iters: int = BJORCK_TRAIN_ITERS,
                   tol: float | None = None) -> torch.Tensor:
    """Row-orthonormalize ``U`` (shape ``m x n``, ``m <= n``) by Björck iterations.

    ``U`` is first divided by a power-iteration estimate of its spectral norm,
    then ``W <- W + 0.5 (I - W W^T) W`` is applied ``iters`` times (stopping
    early once ``||W W^T - I||_max <= tol``).  Differentiable in ``U``.
    """
    m, n = U.shape
    if m > n:
        raise ValueError(f"row-orthogonal projection needs rows <= cols, got {m}x{n}")
    if tol is None:
        tol = 8 * torch.finfo(U.dtype).eps
    sigma = power_iteration(U)
    if not float(sigma.detach()) > 0.0:
        raise RankDeficientError("cannot orthogonalize a zero matrix")
    W = U / sigma
    eye = torch.eye(m, dtype=U.dtype)
    for _ in range(iters):
        gram = W @ W.T
        with torch.no_grad():
            if float((gram - eye).abs().max()) <= tol:
                break
        W = W + 0.5 * (eye - gram) @ W
    with torch.no_grad():
        res = orthogonality_residual(W)
    if not math.isfinite(res) or res > 0.5:
        raise RankDeficientError(f"Björck iteration did not converge (residual {res:.3g}); "
                                 "matrix is numerically rank deficient")
    return W


class OrthoLinear(nn.Module):
    """Fully connected layer with a row-orthonormal weight (``out <= in``)."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 dtype=torch.float64, gen: torch.Generator | None = None,
                 train_iters: int = BJORCK_TRAIN_ITERS, freeze_iters: int = BJORCK_FREEZE_ITERS):
        super().__init__()
        if out_features > in_features:
            raise ValueError(f"GNP linear layer cannot increase dimension ({in_features} -> {out_features})")
        self.in_features = in_features
        self.out_features = out_features
        self.train_iters = train_iters
        self.freeze_iters = freeze_iters
        w = torch.randn(out_features, in_features, generator=gen, dtype=dtype) / math.sqrt(in_features)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=dtype)) if bias else None
        self._frozen: torch.Tensor | None = None

    def project(self, freeze: bool = False) -> torch.Tensor:
        return bjorck_project(self.weight, iters=self.freeze_iters if freeze else self.train_iters)

    def freeze(self) -> None:
        with torch.no_grad():
            self._frozen = self.project(freeze=True).detach()

    def unfreeze(self) -> None:
        self._frozen = None

    @property
    def frozen(self) -> bool:
        return self._frozen is not None

    def effective_weight(self) -> torch.Tensor:
        return self._frozen if self._frozen is not None else self.project()

    def forward(self, x):
        return F.linear(x, self.effective_weight(), self.bias)

    def extra_repr(self):
        return f"{self.in_features} -> {self.out_features}"


def _circular_kernel(V: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Wrap a ``C x C x k x k`` kernel onto an ``H x W`` torus, centered at the origin."""
    k1, k2 = V.shape[-2:]
    c1, c2 = k1 // 2, k2 // 2
    out = V.new_zeros(V.shape[0], V.shape[1], H, W)
    for a in range(k1):
        for b in range(k2):
            i, j = (a - c1) % H, (b - c2) % W
            out[:, :, i, j] = out[:, :, i, j] + V[:, :, a, b]
    return out


def _solve_tol(dtype: torch.dtype) -> float:
    return 1e-8 if dtype == torch.float64 else 1e-3


def cayley_build(V: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Per-frequency unitary matrices of an orthogonal circular convolution.

    The kernel is wrapped onto the ``H x W`` torus and transformed, giving a
    ``C x C`` matrix ``V[f]`` per frequency ``f``; with ``A = V[f] - V[f]^H``
    the returned field is ``(I + A)^{-1} (I - A)``.  Only the non-redundant
    half spectrum of a real signal is kept: shape ``(H, W//2 + 1, C, C)``.
    """
    if V.dim() != 4 or V.shape[0] != V.shape[1]:
        raise ValueError(f"Cayley kernel must be C x C x k x k, got {tuple(V.shape)}")
    if H < 1 or W < 1:
        raise ValueError("spatial extents must be positive")
    C = V.shape[0]
    spec = torch.fft.rfft2(_circular_kernel(V, H, W))  # C x C x H x W'
    spec = spec.permute(2, 3, 0, 1)
    A = spec - spec.conj().transpose(-1, -2)
    eye = torch.eye(C, dtype=A.dtype)
    lhs, rhs = eye + A, eye - A
    Q = torch.linalg.solve(lhs, rhs)
    with torch.no_grad():
        resid = float((lhs @ Q - rhs).abs().max())
        scale = max(1.0, float(lhs.abs().max()))
    if not resid <= _solve_tol(V.dtype) * scale:
        raise FloatingPointError(f"Cayley solve residual {resid:.3g} too large")
    return Q


def cayley_apply(field: torch.Tensor, x: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Apply a per-frequency unitary field to ``x`` of shape ``(B, C, H, W)`` or ``(C, H, W)``."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    H, W = x.shape[-2:]
    if field.shape[:2] != (H, W // 2 + 1) or field.shape[-1] != x.shape[1]:
        raise ValueError(f"input {tuple(x.shape[1:])} does not match Cayley field "
                         f"for {field.shape[-1]} channels at {field.shape[0]}x{2 * (field.shape[1] - 1)}")
    xf = torch.fft.rfft2(x)
    yf = torch.einsum("hwoi,bihw->bohw", field, xf)
    y = torch.fft.irfft2(yf, s=(H, W))
    if bias is not None:
        y = y + bias.view(1, -1, 1, 1)
    return y.squeeze(0) if squeeze else y


class CayleyConv(nn.Module):
    """Orthogonal ``C -> C`` circular convolution bound to a fixed spatial size."""

    def __init__(self, channels: int, kernel_size: int, height: int, width: int | None = None,
                 bias: bool = True, dtype=torch.float64, gen: torch.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.kernel_size = kernel_size
        self.height = height
        self.width = height if width is None else width
        fan_in = channels * kernel_size * kernel_size
        v = torch.randn(channels, channels, kernel_size, kernel_size, generator=gen, dtype=dtype)
        self.weight = nn.Parameter(v / math.sqrt(fan_in))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=dtype)) if bias else None
        self._frozen: torch.Tensor | None = None

    def project(self, freeze: bool = False) -> torch.Tensor:
        return cayley_build(self.weight, self.height, self.width)

    def freeze(self) -> None:
        with torch.no_grad():
            self._frozen = self.project(freeze=True).detach()

    def unfreeze(self) -> None:
        self._frozen = None

    @property
    def frozen(self) -> bool:
        return self._frozen is not None

    def effective_weight(self) -> torch.Tensor:
        return self._frozen if self._frozen is not None else self.project()

    def forward(self, x):
        return cayley_apply(self.effective_weight(), x, self.bias)

    def extra_repr(self):
        return f"{self.channels}ch, k={self.kernel_size}, {self.height}x{self.width}"


def _split_pairs_check(n: int, kind: str) -> None:
    if n % 2:
        raise ValueError(f"{kind} needs an even feature count, got {n}")


def act_abs(x: torch.Tensor) -> torch.Tensor:
    # slope +1 at 0 so the Jacobian stays orthogonal on the whole domain
    sign = torch.where(x >= 0, 1.0, -1.0).to(x.dtype).detach()
    return x * sign


def _sort_pair(a: torch.Tensor, b: torch.Tensor):
    first = a >= b
    return torch.where(first, a, b), torch.where(first, b, a)


def act_maxmin(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Sort the two halves of the feature axis elementwise: ``(a, b) -> (max, min)``."""
    _split_pairs_check(x.shape[dim], "MaxMin")
    a, b = x.chunk(2, dim=dim)
    hi, lo = _sort_pair(a, b)
    return torch.cat([hi, lo], dim=dim)


def act_oplu(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Sort adjacent disjoint pairs ``(x_{2i}, x_{2i+1}) -> (max, min)``."""
    n = x.shape[dim]
    _split_pairs_check(n, "OPLU")
    dim = dim % x.dim()
    shape = x.shape[:dim] + (n // 2, 2) + x.shape[dim + 1:]
    xp = x.reshape(shape)
    a, b = xp.select(dim + 1, 0), xp.select(dim + 1, 1)
    hi, lo = _sort_pair(a, b)
    return torch.stack([hi, lo], dim=dim + 1).reshape(x.shape)


_ACT_FUNCS = {"abs": act_abs, "maxmin": act_maxmin, "oplu": act_oplu}


class GnpActivation(nn.Module):
    def __init__(self, kind: str = "maxmin"):
        super().__init__()
        kind = kind.lower()
        if kind not in _ACT_FUNCS:
            raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATIONS}")
        self.kind = kind

    def forward(self, x):
        if self.kind == "abs":
            return act_abs(x)
        return _ACT_FUNCS[self.kind](x, dim=1)

    def extra_repr(self):
        return self.kind


def activation_for(kind: str, channels: int) -> GnpActivation:
    """Pairwise activations are undefined on odd widths; those fall back to Abs."""
    return GnpActivation("abs" if channels % 2 else kind)


def _check_divisible(x: torch.Tensor, r1: int, r2: int, what: str) -> None:
    H, W = x.shape[-2:]
    if H % r1 or W % r2:
        raise ValueError(f"{what}: spatial extents {H}x{W} not divisible by {r1}x{r2}")


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """``C x rH x rW -> r^2 C x H x W`` by pure rearrangement of entries."""
    if r < 1:
        raise ValueError("downscale factor must be >= 1")
    _check_divisible(x, r, r, "pixel_unshuffle")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    if x.shape[-3] % (r * r):
        raise ValueError(f"pixel_shuffle: channels {x.shape[-3]} not divisible by {r * r}")
    return F.pixel_shuffle(x, r)


class PixelUnshuffle(nn.Module):
    def __init__(self, factor: int = 2):
        super().__init__()
        if factor < 2:
            raise ValueError("downscale factor must be >= 2")
        self.factor = factor

    def forward(self, x):
        return pixel_unshuffle(x, self.factor)

    def extra_repr(self):
        return f"r={self.factor}"


def gnp_maxpool(x: torch.Tensor, k) -> torch.Tensor:
    """Max over disjoint ``k1 x k2`` windows (stride = window, no padding).

    The gradient goes to the first maximal entry of each window.
    """
    k1, k2 = (k, k) if isinstance(k, int) else k
    _check_divisible(x, k1, k2, "gnp_maxpool")
    if k1 == 1 and k2 == 1:
        return x
    *lead, H, W = x.shape
    win = x.reshape(*lead, H // k1, k1, W // k2, k2).transpose(-3, -2)
    win = win.reshape(*lead, H // k1, W // k2, k1 * k2)
    idx = win.argmax(dim=-1, keepdim=True)
    return win.gather(-1, idx).squeeze(-1)


class GnpMaxPool(nn.Module):
    def __init__(self, kernel):
        super().__init__()
        self.kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)

    def forward(self, x):
        return gnp_maxpool(x, self.kernel)

    def extra_repr(self):
        return f"k={self.kernel}"


def freeze_all(module: nn.Module) -> None:
    for m in module.modules():
        if m is not module and hasattr(m, "freeze") and hasattr(m, "project"):
            m.freeze()


def unfreeze_all(module: nn.Module) -> None:
    for m in module.modules():
        if m is not module and hasattr(m, "unfreeze") and hasattr(m, "project"):
            m.unfreeze()
