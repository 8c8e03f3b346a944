"""Training loop: multi-margin loss, Adam with a step schedule, image augmentation.

Parameterized weights (Björck, Cayley, UPD) are re-projected on every forward
pass, so gradients flow through the projections; at the end the model is
frozen with the high-iteration projections and its invariants re-checked.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, asdict

import torch
import torch.nn.functional as F

from . import tensor_core as tc
from .data import CIFAR_MEAN, CIFAR_STD, normalize
from .model import margin
from .upd import pair_norms

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    milestones: list = field(default_factory=list)
    lr_decay: float = 0.5
    batch_size: int = 128
    margin: float = 0.5
    crop: bool = False
    crop_pad: int = 4
    flip: bool = False
    normalize: bool = False
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD
    seed: int = 0
    precision: str = "f64"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ms = list(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(not 0 < m <= self.epochs for m in ms):
            raise ValueError(f"milestones must be strictly increasing within (0, {self.epochs}]")
        tc.resolve_dtype(self.precision)

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 0-based ``epoch``."""
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.lr_decay ** k


def multi_margin_loss(logits: torch.Tensor, y, m: float) -> torch.Tensor:
    """Mean over samples of ``(1/C) sum_{j != y} max(0, m - (f_y - f_j))``."""
    single = logits.dim() == 1
    z = logits.unsqueeze(0) if single else logits
    y = torch.as_tensor(y).reshape(-1)
    C = z.shape[1]
    if bool((y < 0).any()) or bool((y >= C).any()):
        raise ValueError(f"label out of range [0, {C})")
    fy = z.gather(1, y.view(-1, 1))
    hinge = torch.relu(m - (fy - z))
    hinge = hinge.scatter(1, y.view(-1, 1), 0.0)
    return hinge.sum(dim=1).mean() / C


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=ADAM_BETAS, eps: float = ADAM_EPS) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params`` (name -> tensor)."""
    for name, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter {name!r} {tuple(p.shape)}")
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


def augment(xb: torch.Tensor, gen: torch.Generator, crop: bool, flip: bool, pad: int = 4) -> torch.Tensor:
    """Random crop after reflective padding, and random horizontal flip (image batches)."""
    if xb.dim() != 4 or not (crop or flip):
        return xb
    B, _, H, W = xb.shape
    out = xb
    if crop:
        padded = F.pad(xb, (pad, pad, pad, pad), mode="reflect")
        offs = torch.randint(0, 2 * pad + 1, (B, 2), generator=gen)
        out = torch.stack([padded[b, :, i:i + H, j:j + W]
                           for b, (i, j) in enumerate(offs.tolist())])
    if flip:
        mask = torch.rand(B, generator=gen) < 0.5
        out = torch.where(mask.view(B, 1, 1, 1), out.flip(-1), out)
    return out


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class History:
    epochs: list = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def record(self, **row):
        self.epochs.append(row)

    @property
    def losses(self):
        return [r["loss"] for r in self.epochs]


def _prepare(X, config: TrainConfig):
    if config.normalize:
        return normalize(X, config.mean, config.std)
    return X


def evaluate(model, X, y, config: TrainConfig | None = None, batch_size: int = 512) -> dict:
    """Accuracy and mean margin (in model input units) on a dataset."""
    correct, total_margin = 0, 0.0
    with torch.no_grad():
        for s in range(0, X.shape[0], batch_size):
            xb = X[s:s + batch_size].to(model.dtype)
            if config is not None:
                xb = _prepare(xb, config)
            top, _, m = margin(model(xb))
            correct += int((top == y[s:s + batch_size]).sum())
            total_margin += float(m.sum())
    n = max(X.shape[0], 1)
    return dict(accuracy=correct / n, mean_margin=total_margin / n)


def train(model, X: torch.Tensor, y: torch.Tensor, config: TrainConfig, freeze: bool = True,
          callback=None) -> History:
    """Fit ``model`` in place; returns the per-epoch history."""
    config.validate()
    dtype = tc.resolve_dtype(config.precision)
    if model.dtype != dtype:
        model.to(dtype)
    X = X.to(dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    model.check_input(X[:1])
    model.unfreeze()
    model.train()
    gen = tc.generator(config.seed)
    params = dict(model.named_parameters())
    state = AdamState()
    history = History()
    n = X.shape[0]
    for epoch in range(config.epochs):
        good = copy.deepcopy(model.state_dict())
        good_state = copy.deepcopy(state)
        lr = config.lr_at(epoch)
        perm = torch.randperm(n, generator=gen)
        tot_loss = 0.0
        correct = 0
        tot_margin = 0.0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            xb = augment(X[idx], gen, config.crop, config.flip, config.crop_pad)
            xb = _prepare(xb, config)
            logits = model(xb)
            loss = multi_margin_loss(logits, y[idx], config.margin)
            if not math.isfinite(float(loss.detach())):
                model.load_state_dict(good)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}; parameters restored "
                                       "to the start of the epoch")
            grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
            try:
                adam_step(params, dict(zip(params, grads)), state, lr)
            except FloatingPointError as exc:
                model.load_state_dict(good)
                state = good_state
                raise TrainingDiverged(str(exc)) from exc
            with torch.no_grad():
                top, _, m = margin(logits)
                correct += int((top == y[idx]).sum())
                tot_margin += float(m.sum())
                tot_loss += float(loss.detach()) * idx.numel()
        row = dict(epoch=epoch + 1, lr=lr, loss=tot_loss / n, accuracy=correct / n,
                   mean_margin=tot_margin / n)
        history.record(**row)
        logger.info("epoch %d loss %.4f acc %.3f margin %.4f", row["epoch"], row["loss"],
                    row["accuracy"], row["mean_margin"])
        if callback is not None:
            callback(row)
    model.eval()
    if freeze:
        model.freeze()
        history.final = dict(upd_deviation=upd_deviation(model))
    return history


def upd_deviation(model) -> float:
    head = getattr(model, "head", None)
    if head is None:
        return 0.0
    with torch.no_grad():
        return float((pair_norms(head.effective_weight()) - 1).abs().max())


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
