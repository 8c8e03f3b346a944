"""Unitary pair difference (UPD) output heads.

A linear head ``g(x) = W x + b`` is UPD when every difference of two rows of
``W`` has unit Euclidean norm, which makes each logit difference ``g_h - g_k``
unit-gradient.  Two parameterizations are provided:

* :class:`UpdBounded` -- ``W = Q / sqrt(2)`` with ``Q`` row-orthonormal.
* :class:`UpdUnbounded` -- ``W`` is obtained from a free matrix ``U`` by a few
  L-BFGS steps on the pair loss :func:`psi`.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import torch
from torch import nn

from .layers import bjorck_project

# L-BFGS defaults
MEMORY = 10
ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 20
# one "step" is one optimizer step call made of up to this many iterations
INNER_ITERS = 20
UPD_STEPS = 3


class LineSearchWarning(RuntimeWarning):
    pass


@lru_cache(maxsize=None)
def _difference_matrix(n_classes: int) -> tuple:
    if n_classes == 2:
        return ((1, -1),)
    upper = tuple((1,) + tuple(-1 if j == i else 0 for j in range(n_classes - 1))
                  for i in range(n_classes - 1))
    lower = tuple((0,) + row for row in _difference_matrix(n_classes - 1))
    return upper + lower


def difference_matrix(n_classes: int, dtype=torch.float64) -> torch.Tensor:
    """Matrix ``A`` with ``C(C-1)/2`` rows such that ``A @ U`` stacks ``U_h - U_k``, ``h < k``.

    Built by the block recursion ``A(2) = [1, -1]``,
    ``A(k) = [[1, -I], [0, A(k-1)]]``, so rows come out in lexicographic
    order of the pair ``(h, k)``.
    """
    if n_classes < 2:
        raise ValueError(f"difference matrix needs at least 2 classes, got {n_classes}")
    return torch.tensor(_difference_matrix(int(n_classes)), dtype=dtype)


def pair_differences(U: torch.Tensor) -> torch.Tensor:
    return difference_matrix(U.shape[0], dtype=U.dtype) @ U


def psi(U: torch.Tensor) -> torch.Tensor:
    """Sum over pairs ``h < k`` of ``(||U_h - U_k||^2 - 1)^2``."""
    if U.dim() != 2 or U.shape[0] < 2:
        raise ValueError("psi expects a matrix with at least two rows")
    sq = pair_differences(U).pow(2).sum(dim=1)
    return (sq - 1).pow(2).sum()


def pair_norms(W: torch.Tensor) -> torch.Tensor:
    return pair_differences(W).norm(dim=1)


@dataclass
class LbfgsResult:
    x: torch.Tensor
    value: float
    n_iter: int
    n_steps: int
    line_search_failed: bool = False
    values: list = field(default_factory=list)  # objective after each accepted iteration


def _default_grad_tol(dtype: torch.dtype) -> float:
    return 1e3 * torch.finfo(dtype).eps


def lbfgs_minimize(objective: Callable[[torch.Tensor], torch.Tensor], x0: torch.Tensor,
                   steps: int, memory: int = MEMORY, inner_iters: int = INNER_ITERS,
                   differentiable: bool = False, grad_tol: float | None = None) -> LbfgsResult:
    """Two-loop-recursion L-BFGS with a backtracking Armijo line search.

    ``steps`` optimizer steps are taken, each of at most ``inner_iters``
    iterations; the curvature memory persists across steps.  With
    ``differentiable=True`` the returned point stays on the autograd graph of
    ``x0`` (the iterations are unrolled), otherwise it is detached.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if grad_tol is None:
        grad_tol = _default_grad_tol(x0.dtype)

    def evaluate(x):
        if differentiable:
            if not x.requires_grad:
                x = x.detach().requires_grad_(True)
            f = objective(x)
            (g,) = torch.autograd.grad(f, x, create_graph=True)
            return x, f, g
        with torch.enable_grad():
            xl = x.detach().requires_grad_(True)
            f = objective(xl)
            (g,) = torch.autograd.grad(f, xl)
        return x.detach(), f.detach(), g.detach()

    def check_finite(f, g):
        if not bool(torch.isfinite(f)) or not bool(torch.isfinite(g).all()):
            raise FloatingPointError("non-finite objective or gradient in L-BFGS")

    x = x0 if differentiable else x0.detach()
    x, f, g = evaluate(x)
    check_finite(f, g)
    s_hist: list[torch.Tensor] = []
    y_hist: list[torch.Tensor] = []
    n_iter = 0
    values = [float(f.detach())]
    failed = False
    done = False
    for step in range(steps):
        for _ in range(inner_iters):
            if float(g.detach().abs().max()) <= grad_tol:
                done = True
                break
            # two-loop recursion
            q = -g
            alphas = []
            for s, y in zip(reversed(s_hist), reversed(y_hist)):
                rho = 1.0 / (y * s).sum()
                a = rho * (s * q).sum()
                alphas.append((a, rho))
                q = q - a * y
            if s_hist:
                s, y = s_hist[-1], y_hist[-1]
                q = q * ((s * y).sum() / (y * y).sum())
            for (s, y), (a, rho) in zip(zip(s_hist, y_hist), reversed(alphas)):
                b = rho * (y * q).sum()
                q = q + s * (a - b)
            d = q
            slope = float((g * d).sum().detach())
            if slope >= 0:
                # memory produced an ascent direction; restart from steepest descent
                s_hist.clear()
                y_hist.clear()
                d = -g
                slope = float((g * d).sum().detach())
            if s_hist:
                t0 = 1.0
            else:
                # the first step length depends on the gradient, so keep it on the graph
                gsum = g.abs().sum()
                t0 = 1.0 / gsum if float(gsum.detach()) > 1.0 else 1.0
            t0f = float(t0.detach()) if torch.is_tensor(t0) else t0
            t = 1.0
            f0 = float(f.detach())
            accepted = False
            for _ in range(MAX_BACKTRACKS):
                x_new = x + (t * t0) * d
                with torch.no_grad():
                    f_trial = float(objective(x_new.detach()))
                if math.isfinite(f_trial) and f_trial <= f0 + ARMIJO_C1 * t * t0f * slope:
                    accepted = True
                    break
                t *= BACKTRACK
            if not accepted:
                failed = True
                done = True
                break
            x_new, f_new, g_new = evaluate(x_new)
            check_finite(f_new, g_new)
            s_vec = x_new - x
            y_vec = g_new - g
            if float((s_vec * y_vec).sum().detach()) > 1e-10 * float((y_vec * y_vec).sum().detach()):
                s_hist.append(s_vec)
                y_hist.append(y_vec)
                if len(s_hist) > memory:
                    s_hist.pop(0)
                    y_hist.pop(0)
            x, f, g = x_new, f_new, g_new
            values.append(float(f.detach()))
            n_iter += 1
        if done:
            break
    return LbfgsResult(x=x, value=float(f.detach()), n_iter=n_iter, n_steps=step + 1,
                       line_search_failed=failed, values=values)


def upd_project(U: torch.Tensor, steps: int = UPD_STEPS, differentiable: bool = True,
                inner_iters: int = INNER_ITERS) -> torch.Tensor:
    """Map ``U`` to a nearby UPD matrix by minimizing :func:`psi` from ``U``."""
    res = lbfgs_minimize(psi, U, steps=steps, inner_iters=inner_iters,
                         differentiable=differentiable and U.requires_grad and torch.is_grad_enabled())
    if res.line_search_failed and res.value > 1e-8:
        warnings.warn(f"UPD projection line search stalled at psi={res.value:.3e}",
                      LineSearchWarning, stacklevel=2)
    return res.x


class UpdHead(nn.Module):
    """Common parts of the two UPD heads: raw weight, bias, cached projection."""

    kind = "upd"

    def __init__(self, in_features: int, n_classes: int, dtype=torch.float64,
                 gen: torch.Generator | None = None):
        super().__init__()
        if n_classes < 2:
            raise ValueError("a UPD head needs at least two classes")
        self.in_features = in_features
        self.n_classes = n_classes
        w = torch.randn(n_classes, in_features, generator=gen, dtype=dtype) / math.sqrt(in_features)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(n_classes, dtype=dtype))
        self._frozen: torch.Tensor | None = None

    def project(self, freeze: bool = False) -> torch.Tensor:
        raise NotImplementedError

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

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return nn.functional.linear(x, self.effective_weight(), self.bias)

    def extra_repr(self) -> str:
        return f"{self.in_features} -> {self.n_classes}"


class UpdBounded(UpdHead):
    """``W = Q / sqrt(2)`` with ``Q`` the Björck projection of the raw weight."""

    kind = "updB"

    def __init__(self, in_features, n_classes, dtype=torch.float64, gen=None,
                 train_iters: int = 20, freeze_iters: int = 100):
        if n_classes > in_features:
            raise ValueError("bounded UPD needs n_classes <= in_features")
        super().__init__(in_features, n_classes, dtype=dtype, gen=gen)
        self.train_iters = train_iters
        self.freeze_iters = freeze_iters

    def project(self, freeze=False):
        iters = self.freeze_iters if freeze else self.train_iters
        return bjorck_project(self.weight, iters=iters) / math.sqrt(2.0)


class UpdUnbounded(UpdHead):
    """``W = UPD(U)``: L-BFGS on the pair loss started at the raw weight.

    ``straight_through`` replaces the unrolled backward pass by the identity,
    which is cheaper when the class count is large.
    """

    kind = "updU"

    def __init__(self, in_features, n_classes, dtype=torch.float64, gen=None,
                 steps: int = UPD_STEPS, straight_through: bool = False):
        super().__init__(in_features, n_classes, dtype=dtype, gen=gen)
        self.steps = steps
        self.straight_through = straight_through

    def project(self, freeze=False):
        if self.straight_through and not freeze:
            w = upd_project(self.weight.detach(), steps=self.steps, differentiable=False)
            return self.weight + (w - self.weight).detach()
        return upd_project(self.weight, steps=self.steps, differentiable=not freeze)
