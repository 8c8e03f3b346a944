"""Independent checks for the gradient properties and for the certified radius.

* explicit Jacobians assembled one backward pass per output component, used to
  audit ``J J^T = I`` layer by layer;
* gradient-norm audits of every pairwise logit difference;
* central finite differences (never autograd) as the reference for gradients;
* two minimal-adversarial-perturbation oracles (penalty method, 2D ray scan)
  used to measure how tight the margin is as a lower bound.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from . import tensor_core as tc
from .model import margin, predict
from .upd import pair_norms

MAX_JACOBIAN_OUTPUTS = 4096


def explicit_jacobian(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                      max_outputs: int = MAX_JACOBIAN_OUTPUTS) -> torch.Tensor:
    """Jacobian of ``fn`` at the unbatched input ``x`` as an ``(n_out, n_in)`` matrix.

    Row ``r`` is the gradient of output component ``r``, obtained by
    backpropagating the ``r``-th basis vector.
    """
    xg = x.detach().clone().requires_grad_(True)
    y = fn(xg).reshape(-1)
    n_out = y.numel()
    if n_out > max_outputs:
        raise ValueError(f"explicit Jacobian with {n_out} outputs exceeds the guard of {max_outputs}")
    rows = []
    for r in range(n_out):
        e = torch.zeros_like(y)
        e[r] = 1.0
        (g,) = torch.autograd.grad(y, xg, grad_outputs=e, retain_graph=True, allow_unused=True)
        rows.append(torch.zeros_like(xg).reshape(-1) if g is None else g.reshape(-1))
    return torch.stack(rows)


def batched(layer: nn.Module) -> Callable[[torch.Tensor], torch.Tensor]:
    """Adapt a batch-first layer to the unbatched calling convention of :func:`explicit_jacobian`."""
    return lambda z: layer(z.unsqueeze(0)).squeeze(0)


def gnp_deviation(J: torch.Tensor) -> float:
    eye = torch.eye(J.shape[0], dtype=J.dtype)
    return float((J @ J.T - eye).abs().max())


@dataclass
class GnpReport:
    max_deviation: float
    trials: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_deviation <= self.tol


def layer_jacobian(layer: nn.Module, x: torch.Tensor, chunk: int = 256,
                   max_outputs: int = MAX_JACOBIAN_OUTPUTS) -> torch.Tensor:
    """Jacobian of a batch-first ``layer`` at the unbatched input ``x``.

    ``chunk`` copies of ``x`` go through one forward pass and each copy
    backpropagates a different basis vector, so wide layers need few passes.
    Layers act on samples independently, hence the copies do not interact.
    """
    with torch.no_grad():
        n_out = layer(x.unsqueeze(0)).numel()
    if n_out > max_outputs:
        raise ValueError(f"explicit Jacobian with {n_out} outputs exceeds the guard of {max_outputs}")
    rows = []
    for start in range(0, n_out, chunk):
        k = min(chunk, n_out - start)
        xr = x.detach().unsqueeze(0).repeat(k, *([1] * x.dim())).requires_grad_(True)
        y = layer(xr).reshape(k, -1)
        e = torch.zeros_like(y)
        e[torch.arange(k), torch.arange(start, start + k)] = 1.0
        (g,) = torch.autograd.grad(y, xr, grad_outputs=e, allow_unused=True)
        rows.append(torch.zeros(k, x.numel(), dtype=x.dtype) if g is None else g.reshape(k, -1))
    return torch.cat(rows)


def check_gnp(layer: nn.Module, input_shape: Sequence[int], trials: int = 3, seed: int = 0,
              dtype=torch.float64, tol: float = 1e-6) -> GnpReport:
    """Largest ``||J J^T - I||_max`` over random Gaussian inputs of the given (unbatched) shape."""
    gen = tc.generator(seed)
    worst = 0.0
    for _ in range(trials):
        x = torch.randn(*input_shape, generator=gen, dtype=dtype)
        worst = max(worst, gnp_deviation(layer_jacobian(layer, x)))
    return GnpReport(max_deviation=worst, trials=trials, tol=tol)


def gnp_layers(model: nn.Module) -> list[tuple[str, nn.Module, tuple]]:
    """Every GNP layer of ``model`` with the unbatched input shape it sees."""
    from .layers import GnpActivation, GnpMaxPool, PixelUnshuffle
    from .layers import CayleyConv, OrthoLinear

    kinds = (CayleyConv, OrthoLinear, GnpActivation, GnpMaxPool, PixelUnshuffle)
    shapes, hooks = {}, []

    def recorder(name):
        def hook(mod, inp, out):
            shapes.setdefault(name, tuple(inp[0].shape[1:]))
        return hook

    for name, mod in model.named_modules():
        if isinstance(mod, kinds):
            hooks.append(mod.register_forward_hook(recorder(name)))
    try:
        with torch.no_grad():
            model(torch.zeros(1, *model.input_shape, dtype=model.dtype))
    finally:
        for h in hooks:
            h.remove()
    return [(name, mod, shapes[name]) for name, mod in model.named_modules() if name in shapes]


class ReLULayer(nn.Module):
    """Negative control: ReLU is not gradient norm preserving."""

    def forward(self, x):
        return torch.relu(x)


def finite_difference_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                               h: float = 1e-5, coords: Sequence[int] | None = None) -> torch.Tensor:
    """Central differences of a scalar function; only ``coords`` (flat indices) if given."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    out = torch.zeros(len(idx), dtype=x.dtype)
    with torch.no_grad():
        for n, i in enumerate(idx):
            old = float(flat[i])
            flat[i] = old + h
            fp = float(fn(x))
            flat[i] = old - h
            fm = float(fn(x))
            flat[i] = old
            out[n] = (fp - fm) / (2 * h)
    return out if coords is not None else out.reshape(x.shape)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(b.norm()), float(a.norm()), 1e-12)
    return float((a - b).norm()) / denom


def logit_jacobians(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Gradients of every logit at every sample: shape ``(B, C, n_in)``."""
    xg = x.detach().clone().requires_grad_(True)
    logits = model(xg)
    C = logits.shape[1]
    grads = []
    for i in range(C):
        (g,) = torch.autograd.grad(logits[:, i].sum(), xg, retain_graph=i < C - 1)
        grads.append(g.reshape(x.shape[0], -1))
    return torch.stack(grads, dim=1)


@dataclass
class GradCheckReport:
    n_samples: int
    pairs: list
    stats: dict  # (i, j) -> dict(min, max, mean)
    hist_counts: np.ndarray
    hist_edges: np.ndarray
    worst_fd_deviation: float | None = None
    norms: np.ndarray | None = field(default=None, repr=False)

    @property
    def min(self) -> float:
        return min(s["min"] for s in self.stats.values())

    @property
    def max(self) -> float:
        return max(s["max"] for s in self.stats.values())

    def max_deviation(self) -> float:
        return max(abs(self.max - 1.0), abs(self.min - 1.0))

    def within(self, tol: float) -> bool:
        return self.max_deviation() <= tol


def sample_inputs(shape, n: int, distribution: str = "gaussian", seed: int = 0,
                  dtype=torch.float64) -> torch.Tensor:
    gen = tc.generator(seed)
    if distribution == "gaussian":
        return torch.randn(n, *shape, generator=gen, dtype=dtype)
    if distribution == "uniform":
        return torch.rand(n, *shape, generator=gen, dtype=dtype)
    raise ValueError(f"unknown input distribution {distribution!r}")


def check_unitary_gradient(model: nn.Module, n_samples: int = 512, distribution: str = "gaussian",
                           seed: int = 0, batch_size: int = 128, bins: int = 50,
                           inputs: torch.Tensor | None = None, fd_probes: int = 0) -> GradCheckReport:
    """Norm of ``grad(f_i - f_j)`` for every pair ``i < j`` at sampled inputs.

    ``fd_probes`` > 0 additionally compares a few directional derivatives with
    central differences along random unit directions.
    """
    dtype = model.dtype
    if inputs is None:
        inputs = sample_inputs(model.input_shape, n_samples, distribution, seed, dtype)
    n_samples = inputs.shape[0]
    C = model.n_classes
    pairs = list(itertools.combinations(range(C), 2))
    norms = np.zeros((n_samples, len(pairs)))
    for start in range(0, n_samples, batch_size):
        xb = inputs[start:start + batch_size]
        J = logit_jacobians(model, xb)
        for p, (i, j) in enumerate(pairs):
            norms[start:start + xb.shape[0], p] = (J[:, i] - J[:, j]).norm(dim=1).numpy()
    stats = {pair: dict(min=float(norms[:, p].min()), max=float(norms[:, p].max()),
                        mean=float(norms[:, p].mean())) for p, pair in enumerate(pairs)}
    lo, hi = min(norms.min(), 1.0) - 1e-12, max(norms.max(), 1.0) + 1e-12
    counts, edges = np.histogram(norms.ravel(), bins=bins, range=(lo, hi))
    worst_fd = None
    if fd_probes:
        worst_fd = _directional_fd_check(model, inputs[:fd_probes], pairs, seed)
    return GradCheckReport(n_samples=n_samples, pairs=pairs, stats=stats, hist_counts=counts,
                           hist_edges=edges, worst_fd_deviation=worst_fd, norms=norms)


def _directional_fd_check(model, xs, pairs, seed, h=1e-5) -> float:
    gen = tc.generator(seed + 1)
    worst = 0.0
    J = logit_jacobians(model, xs)
    for b in range(xs.shape[0]):
        v = torch.randn(xs[b].shape, generator=gen, dtype=xs.dtype)
        v = v / v.norm()
        with torch.no_grad():
            fp = model((xs[b] + h * v).unsqueeze(0))[0]
            fm = model((xs[b] - h * v).unsqueeze(0))[0]
        for i, j in pairs:
            fd = float((fp[i] - fp[j]) - (fm[i] - fm[j])) / (2 * h)
            ad = float(((J[b, i] - J[b, j]) * v.reshape(-1)).sum())
            worst = max(worst, abs(fd - ad))
    return worst


def lipschitz_ratios(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """``|(f_i - f_j)(x) - (f_i - f_j)(y)| / ||x - y||`` for every sample pair and class pair."""
    with torch.no_grad():
        fx, fy = model(x), model(y)
    d = (x - y).reshape(x.shape[0], -1).norm(dim=1)
    ratios = []
    for i, j in itertools.combinations(range(fx.shape[1]), 2):
        ratios.append(((fx[:, i] - fx[:, j]) - (fy[:, i] - fy[:, j])).abs() / d)
    return torch.stack(ratios, dim=1)


def upd_audit(head) -> float:
    """``max | ||W_h - W_k|| - 1 |`` over the head's (effective) weight."""
    with torch.no_grad():
        return float((pair_norms(head.effective_weight()) - 1).abs().max())


# --------------------------------------------------------------------------
# minimal adversarial perturbation oracles


@dataclass
class MapEstimate:
    distance: float
    point: torch.Tensor | None
    pair: tuple
    converged: bool
    method: str
    residual: float = math.nan
    resolution: float | None = None


PENALTY_C0 = 1.0
PENALTY_GROWTH = 10.0
PENALTY_ROUNDS = 5
PENALTY_INNER = 200
PENALTY_LR = 0.5
PENALTY_MOMENTUM = 0.9
PENALTY_RESTARTS = 4
RESIDUAL_TOL = 1e-3
OVERSHOOT = 1e-4


def _pair_value_and_grad(model, p, l, j):
    pg = p.detach().clone().requires_grad_(True)
    logits = model(pg)
    rows = torch.arange(p.shape[0])
    g = logits[rows, l] - logits[rows, j]
    (grad,) = torch.autograd.grad(g.sum(), pg)
    return g.detach(), grad


def _penalty_run(model, x, l, j, box, c0, rounds, inner, lr, momentum, snap_steps, start=None):
    shape = (-1,) + (1,) * (x.dim() - 1)
    p = (x if start is None else start).detach().clone()
    c = c0
    for _ in range(rounds):
        eta = lr / (1.0 + c)
        vel = torch.zeros_like(p)
        for _ in range(inner):
            g, grad = _pair_value_and_grad(model, p, l, j)
            total = 2 * (p - x) + 2 * c * g.view(shape) * grad
            vel = momentum * vel - eta * total
            p = p + vel
            if box:
                p = p.clamp(0.0, 1.0)
        c *= PENALTY_GROWTH
    # Newton steps along the pair gradient put the point on the boundary
    for _ in range(snap_steps):
        g, grad = _pair_value_and_grad(model, p, l, j)
        gn2 = grad.reshape(p.shape[0], -1).pow(2).sum(dim=1).clamp_min(1e-30)
        p = p - (g / gn2).view(shape) * grad
        if box:
            p = p.clamp(0.0, 1.0)
    g, grad = _pair_value_and_grad(model, p, l, j)
    gn = grad.reshape(p.shape[0], -1).norm(dim=1).clamp_min(1e-30)
    over = p - OVERSHOOT * (grad / gn.view(shape))
    if box:
        over = over.clamp(0.0, 1.0)
    flipped = predict(model, over) != l
    return p.detach(), g.abs(), flipped


def map_oracle_penalty(model: nn.Module, x: torch.Tensor, box: bool = False, c0: float = PENALTY_C0,
                       rounds: int = PENALTY_ROUNDS, inner_steps: int = PENALTY_INNER,
                       lr: float = PENALTY_LR, momentum: float = PENALTY_MOMENTUM,
                       residual_tol: float = RESIDUAL_TOL, snap_steps: int = 3,
                       restarts: int = PENALTY_RESTARTS, seed: int = 0):
    """Boundary distance by a quadratic penalty method, one run per competing class.

    For every ``j != l`` the penalized objective
    ``||p - x||^2 + c (f_l(p) - f_j(p))^2`` is minimized by heavy-ball gradient
    descent while ``c`` grows tenfold per round; the closest point whose
    residual is below ``residual_tol`` and whose overshoot flips the label wins.
    Besides the run started at ``x``, ``restarts`` runs start from random points
    at distance ``margin`` from ``x`` (no boundary lies closer), which gets the
    search out of valleys where the logit gap dips towards 0 without crossing.
    Accepts a batch ``(B, ...)`` and returns a list, or a single sample.
    """
    single = x.dim() == len(model.input_shape)
    xb = x.unsqueeze(0) if single else x
    xb = xb.detach()
    with torch.no_grad():
        logits = model(xb)
    l, _, m = margin(logits)
    B, C = logits.shape
    best_d = torch.full((B,), math.inf, dtype=torch.float64)
    best_p = xb.clone()
    best_j = torch.full((B,), -1, dtype=torch.long)
    best_r = torch.full((B,), math.nan, dtype=torch.float64)
    gen = tc.generator(seed)
    shape = (-1,) + (1,) * (xb.dim() - 1)
    starts = [None]
    for _ in range(restarts):
        u = torch.randn(xb.shape, generator=gen, dtype=xb.dtype)
        u = u / u.reshape(B, -1).norm(dim=1).view(shape)
        s = xb + m.view(shape) * u
        starts.append(s.clamp(0.0, 1.0) if box else s)
    for j in range(C):
        active = l != j
        if not bool(active.any()):
            continue
        idx = active.nonzero().flatten()
        jj = torch.full((idx.numel(),), j, dtype=torch.long)
        for start in starts:
            p, resid, flipped = _penalty_run(model, xb[idx], l[idx], jj, box, c0, rounds,
                                             inner_steps, lr, momentum, snap_steps,
                                             start=None if start is None else start[idx])
            d = (p - xb[idx]).reshape(idx.numel(), -1).norm(dim=1).double()
            ok = (resid <= residual_tol) & flipped
            better = ok & (d < best_d[idx])
            sel = idx[better]
            best_d[sel] = d[better]
            best_p[sel] = p[better]
            best_j[sel] = j
            best_r[sel] = resid[better].double()
    out = []
    for b in range(B):
        conv = math.isfinite(float(best_d[b]))
        out.append(MapEstimate(distance=float(best_d[b]), point=best_p[b] if conv else None,
                               pair=(int(l[b]), int(best_j[b])), converged=conv,
                               method="penalty", residual=float(best_r[b])))
    return out[0] if single else out


def _first_crossing(model, x, label, dirs, radius, n_radial, bisect_tol):
    """Smallest radius along each direction where the predicted label changes (inf if none)."""
    D = dirs.shape[0]
    rs = torch.linspace(0.0, radius, n_radial + 1, dtype=x.dtype)[1:]
    found = torch.full((D,), math.inf, dtype=x.dtype)
    lo = torch.zeros(D, dtype=x.dtype)
    hi = torch.zeros(D, dtype=x.dtype)
    chunk = max(1, 200_000 // D)
    done = torch.zeros(D, dtype=torch.bool)
    prev = torch.zeros(D, dtype=x.dtype)
    for start in range(0, n_radial, chunk):
        r = rs[start:start + chunk]
        pts = x.view(1, 1, -1) + r.view(1, -1, 1) * dirs.view(D, 1, -1)
        lab = predict(model, pts.reshape(-1, x.numel())).view(D, -1)
        change = lab != label
        any_change = change.any(dim=1) & ~done
        first = change.to(torch.int8).argmax(dim=1)
        for d in any_change.nonzero().flatten().tolist():
            k = int(first[d])
            hi[d] = r[k]
            lo[d] = r[k - 1] if k > 0 else prev[d]
        done |= any_change
        prev = torch.where(done, prev, r[-1].expand(D))
        if bool(done.all()):
            break
    sel = done.nonzero().flatten()
    if sel.numel():
        a, b = lo[sel].clone(), hi[sel].clone()
        dsel = dirs[sel]
        while float((b - a).max()) > bisect_tol:
            mid = 0.5 * (a + b)
            lab = predict(model, x.view(1, -1) + mid.view(-1, 1) * dsel)
            flip = lab != label
            b = torch.where(flip, mid, b)
            a = torch.where(flip, a, mid)
        found[sel] = b
    return found


def map_oracle_grid2d(model: nn.Module, x: torch.Tensor, n_dirs: int = 720, radius: float = 10.0,
                      n_radial: int = 2000, bisect_tol: float = 1e-5,
                      refine_iters: int = 40) -> MapEstimate:
    """Brute-force boundary distance for 2-input models by scanning rays.

    Each of ``n_dirs`` rays is scanned out to ``radius`` for the first label
    change, which is then bisected to ``bisect_tol``; the best direction is
    refined by golden-section search within one angular cell.  Every returned
    point is a genuine label change, so the distance never undercuts the true
    boundary distance by more than ``bisect_tol``.
    """
    x = x.detach().reshape(-1)
    if x.numel() != 2:
        raise ValueError("grid2d oracle needs 2-dimensional inputs")
    label = int(predict(model, x.view(1, -1))[0])
    theta = torch.arange(n_dirs, dtype=x.dtype) * (2 * math.pi / n_dirs)

    def dirs_of(t):
        return torch.stack([torch.cos(t), torch.sin(t)], dim=1)

    r = _first_crossing(model, x, label, dirs_of(theta), radius, n_radial, bisect_tol)
    if not bool(torch.isfinite(r).any()):
        return MapEstimate(distance=math.inf, point=None, pair=(label, -1), converged=False,
                           method="grid2d", resolution=2 * math.pi / n_dirs)
    k = int(r.argmin())
    best_t, best_r = float(theta[k]), float(r[k])
    cell = 2 * math.pi / n_dirs

    def radius_at(t):
        tt = torch.tensor([t], dtype=x.dtype)
        return float(_first_crossing(model, x, label, dirs_of(tt), min(radius, 2 * best_r + 1e-9),
                                     n_radial, bisect_tol)[0])

    a, b = best_t - cell, best_t + cell
    gr = (math.sqrt(5) - 1) / 2
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = radius_at(c), radius_at(d)
    for _ in range(refine_iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = radius_at(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = radius_at(d)
    for t, rr in ((c, fc), (d, fd)):
        if rr < best_r:
            best_t, best_r = t, rr
    point = x + best_r * dirs_of(torch.tensor([best_t], dtype=x.dtype))[0]
    with torch.no_grad():
        logits = model(point.view(1, -1))[0]
    j = int(torch.cat([logits[:label], torch.tensor([-math.inf], dtype=logits.dtype),
                       logits[label + 1:]]).argmax())
    resid = float((logits[label] - logits[j]).abs())
    return MapEstimate(distance=best_r, point=point, pair=(label, j), converged=True,
                       method="grid2d", residual=resid, resolution=cell)


def run_oracle(model, X, method: str = "penalty", box: bool = False, **kwargs) -> list[MapEstimate]:
    if method == "penalty":
        return map_oracle_penalty(model, X, box=box, **kwargs)
    if method == "grid2d":
        if box:
            raise ValueError("the grid2d oracle does not support box constraints")
        return [map_oracle_grid2d(model, X[i], **kwargs) for i in range(X.shape[0])]
    raise ValueError(f"unknown oracle method {method!r}")


@dataclass
class LbMapReport:
    rows: list  # dicts: sample_id, margin, map, ratio, converged, correct
    mean: float
    std: float
    count: int

    def ratios(self) -> np.ndarray:
        return np.array([r["ratio"] for r in self.rows if r["used"]])


def lb_map_report(model: nn.Module, X: torch.Tensor, y: torch.Tensor, method: str = "penalty",
                  box: bool = False, estimates: list | None = None, **kwargs) -> LbMapReport:
    """Ratio of the certified margin to the oracle boundary distance, per sample.

    Statistics use only samples that are correctly classified and for which the
    oracle converged (the ``#N`` count).
    """
    with torch.no_grad():
        logits = model(X)
    pred, _, m = margin(logits)
    if estimates is None:
        estimates = run_oracle(model, X, method=method, box=box, **kwargs)
    rows = []
    for i, est in enumerate(estimates):
        correct = int(pred[i]) == int(y[i])
        ratio = float(m[i]) / est.distance if est.converged and est.distance > 0 else math.nan
        rows.append(dict(sample_id=i, margin=float(m[i]), map=est.distance, ratio=ratio,
                         converged=est.converged, correct=correct,
                         used=correct and est.converged and math.isfinite(ratio)))
    used = np.array([r["ratio"] for r in rows if r["used"]])
    if used.size == 0:
        raise ValueError("no correctly classified sample with a converged oracle estimate")
    return LbMapReport(rows=rows, mean=float(used.mean()), std=float(used.std()), count=int(used.size))


def robustness_curve(model: nn.Module, X: torch.Tensor, y: torch.Tensor, eps_list) -> list[dict]:
    """Fraction of samples correctly classified with margin at least ``eps``, for each ``eps``."""
    with torch.no_grad():
        logits = model(X)
    pred, _, m = margin(logits)
    correct = pred == y
    rows = []
    for eps in eps_list:
        eps = float(eps)
        if eps <= 0:
            # eps = 0 is plain accuracy
            ok = correct
        else:
            ok = correct & (m >= eps)
        rows.append(dict(eps=eps, certified_accuracy=float(ok.double().mean())))
    return rows


def lower_bound_recall(margins, maps, eps: float) -> float:
    """Among samples the bound fails to certify at ``eps``, the share that are truly not robust."""
    margins, maps = np.asarray(margins), np.asarray(maps)
    rejected = margins <= eps
    if not rejected.any():
        return math.nan
    return float((rejected & (maps <= eps)).sum() / rejected.sum())


@dataclass
class VerifyResult:
    rows: list  # dicts: check, name, value, tol, ok

    @property
    def ok(self) -> bool:
        return all(r["ok"] for r in self.rows)


# tolerances per precision: (layer J J^T, pair gradient norm, UPD pair norm)
VERIFY_TOLS = {torch.float64: (1e-6, 1e-5, 1e-4), torch.float32: (1e-4, 1e-3, 1e-3)}


def verify_model(model: nn.Module, n_samples: int = 64, seed: int = 0, trials: int = 1,
                 tols: tuple | None = None) -> VerifyResult:
    """Layer GNP checks, the unitary-gradient audit and the UPD audit in one report."""
    gnp_tol, grad_tol, upd_tol = tols or VERIFY_TOLS.get(model.dtype, VERIFY_TOLS[torch.float32])
    rows = []

    def add(check, name, value, tol):
        rows.append(dict(check=check, name=name, value=float(value), tol=tol,
                         ok=bool(math.isfinite(value) and value <= tol)))

    for name, layer, shape in gnp_layers(model):
        rep = check_gnp(layer, shape, trials=trials, seed=seed, dtype=model.dtype, tol=gnp_tol)
        add("gnp", name, rep.max_deviation, gnp_tol)
    if model.n_classes >= 2:
        grad = check_unitary_gradient(model, n_samples=n_samples, seed=seed)
        add("unitary_gradient", "model", grad.max_deviation(), grad_tol)
    head = getattr(model, "head", None)
    if head is not None:
        add("upd", "head", upd_audit(head), upd_tol)
    return VerifyResult(rows)
