"""Unitary-gradient networks and the certification read-outs built on them.

All models map a batch of inputs to logits ``f(x)`` of shape ``(B, C)`` and
are built so that every pairwise difference ``f_i - f_j`` has unit gradient
almost everywhere.  The top-two margin is then a certified radius.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from . import tensor_core as tc
from .layers import (ACTIVATIONS, CayleyConv, GnpMaxPool, OrthoLinear, PixelUnshuffle,
                     activation_for, freeze_all, unfreeze_all)
from .upd import UpdBounded, UpdUnbounded

HEADS = ("updB", "updU")
DEPTH = 5


def make_head(kind: str, in_features: int, n_classes: int, dtype, gen):
    if kind == "updB":
        return UpdBounded(in_features, n_classes, dtype=dtype, gen=gen)
    if kind == "updU":
        return UpdUnbounded(in_features, n_classes, dtype=dtype, gen=gen)
    raise ValueError(f"unknown head {kind!r}; choose from {HEADS}")


class SdcModel(nn.Module):
    """Base class: holds the metadata needed to rebuild the model from a checkpoint."""

    kind = "base"

    def __init__(self, config: dict):
        super().__init__()
        self.config = dict(config)

    @property
    def n_classes(self) -> int:
        return int(self.config["n_classes"])

    @property
    def input_shape(self) -> tuple:
        raise NotImplementedError

    @property
    def dtype(self) -> torch.dtype:
        p = next(self.parameters(), None)
        return p.dtype if p is not None else tc.resolve_dtype(self.config.get("dtype", "f64"))

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        shape = tuple(self.input_shape)
        if tuple(x.shape[1:]) != shape:
            raise ValueError(f"input extents {tuple(x.shape[1:])} do not match model input {shape}")
        return x

    def freeze(self) -> "SdcModel":
        freeze_all(self)
        return self

    def unfreeze(self) -> "SdcModel":
        unfreeze_all(self)
        return self

    @property
    def frozen(self) -> bool:
        flags = [m.frozen for m in self.modules() if m is not self and hasattr(m, "project")]
        return all(flags)


@dataclass
class UgnnConfig:
    input_size: int = 32
    in_channels: int = 3
    n_classes: int = 10
    activation: str = "maxmin"
    head: str = "updB"
    depth: int = DEPTH
    kernel_size: int = 3
    normalize: bool = False
    dtype: str = "f64"
    seed: int = 0

    def validate(self) -> None:
        step = 2 ** self.depth
        if self.input_size < step or self.input_size % step:
            raise ValueError(f"input_size must be a positive multiple of {step}, got {self.input_size}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"in_channels must be 1 or 3, got {self.in_channels}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        tc.resolve_dtype(self.dtype)


class ConvBlock(nn.Sequential):
    """Two orthogonal convolutions with activations, then PixelUnshuffle(2).

    The last block of the network pools to ``2 x 2`` before the unshuffle.
    """

    def __init__(self, channels, size, activation, kernel_size, dtype, gen, last=False):
        layers = [
            CayleyConv(channels, kernel_size, size, dtype=dtype, gen=gen),
            activation_for(activation, channels),
            CayleyConv(channels, kernel_size, size, dtype=dtype, gen=gen),
            activation_for(activation, channels),
        ]
        if last:
            layers.append(GnpMaxPool(size // 2))
        layers.append(PixelUnshuffle(2))
        super().__init__(*layers)


class UgnnModel(SdcModel):
    """Convolutional UGNN: 5 GNP conv blocks, two GNP fully connected layers, UPD head."""

    kind = "ugnn"

    def __init__(self, config: UgnnConfig):
        config.validate()
        super().__init__(asdict(config))
        dtype = tc.resolve_dtype(config.dtype)
        gen = tc.generator(config.seed)
        blocks = []
        ch, size = config.in_channels, config.input_size
        for i in range(config.depth):
            last = i == config.depth - 1
            blocks.append(ConvBlock(ch, size, config.activation, config.kernel_size, dtype, gen, last=last))
            ch *= 4
            size = 1 if last else size // 2
        self.features = nn.Sequential(*blocks)
        n_feat = config.in_channels * 4 ** config.depth
        self.fc = nn.Sequential(
            OrthoLinear(n_feat, 1024, dtype=dtype, gen=gen), activation_for(config.activation, 1024),
            OrthoLinear(1024, 512, dtype=dtype, gen=gen), activation_for(config.activation, 512),
        )
        self.head = make_head(config.head, 512, config.n_classes, dtype, gen)

    @property
    def input_shape(self):
        c = self.config
        return (c["in_channels"], c["input_size"], c["input_size"])

    def forward(self, x):
        x = self.check_input(x)
        z = self.features(x).flatten(1)
        return self.head(self.fc(z))


def build(config: UgnnConfig | None = None, **kwargs) -> UgnnModel:
    if config is None:
        config = UgnnConfig(**kwargs)
    return UgnnModel(config)


class MlpModel(SdcModel):
    """Fully connected UGNN: OrthoLinear + GNP activation layers, then a UPD head.

    ``dims = [n]`` gives a bare UPD head on the raw input, an affine model whose
    margins are exact boundary distances.
    """

    kind = "mlp"

    def __init__(self, dims, n_classes=2, activation="maxmin", head="updB", dtype="f64", seed=0):
        dims = [int(d) for d in dims]
        if not dims or min(dims) < 1:
            raise ValueError("dims must be a non-empty list of positive widths")
        for a, b in zip(dims, dims[1:]):
            if b > a:
                raise ValueError(f"width increase {a} -> {b} is not gradient norm preserving")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        super().__init__(dict(dims=dims, n_classes=n_classes, activation=activation,
                              head=head, dtype=dtype, seed=seed))
        tdtype = tc.resolve_dtype(dtype)
        gen = tc.generator(seed)
        layers = []
        for a, b in zip(dims, dims[1:]):
            layers += [OrthoLinear(a, b, dtype=tdtype, gen=gen), activation_for(activation, b)]
        self.body = nn.Sequential(*layers)
        self.head = make_head(head, dims[-1], n_classes, tdtype, gen)

    @property
    def input_shape(self):
        return (self.config["dims"][0],)

    def forward(self, x):
        x = self.check_input(x)
        return self.head(self.body(x))


def build_mlp(dims, n_classes=2, activation="maxmin", head="updB", dtype="f64", seed=0) -> MlpModel:
    return MlpModel(dims, n_classes=n_classes, activation=activation, head=head, dtype=dtype, seed=seed)


class RingModel(SdcModel):
    """Two logits ``(0, ||x|| - 1)``: class 1 outside the unit sphere, class 0 inside.

    The logit difference is the exact signed distance to the unit sphere.
    """

    kind = "ring"

    def __init__(self, dim: int = 2, radius: float = 1.0, dtype="f64"):
        super().__init__(dict(dim=dim, radius=radius, dtype=dtype))

    @property
    def n_classes(self) -> int:
        return 2

    @property
    def input_shape(self):
        return (self.config["dim"],)

    @property
    def dtype(self):
        return tc.resolve_dtype(self.config["dtype"])

    def forward(self, x):
        x = self.check_input(x)
        d = x.norm(dim=1) - self.config["radius"]
        return torch.stack([torch.zeros_like(d), d], dim=1)


MODEL_KINDS = {"ugnn": UgnnModel, "mlp": MlpModel, "ring": RingModel}


def model_from_config(kind: str, config: dict) -> SdcModel:
    if kind == "ugnn":
        return UgnnModel(UgnnConfig(**config))
    if kind == "mlp":
        return MlpModel(**config)
    if kind == "ring":
        return RingModel(**config)
    raise ValueError(f"unknown model kind {kind!r}")


def margin(logits: torch.Tensor):
    """Top class ``l``, runner-up ``s`` and margin ``f_l - f_s`` (lowest index wins ties).

    Works on a single logit vector (returns python scalars) or on a batch.
    """
    single = logits.dim() == 1
    z = logits.unsqueeze(0) if single else logits
    if z.shape[1] < 2:
        raise ValueError("margin needs at least two logits")
    z = z.detach()
    top = z.argmax(dim=1)
    masked = z.clone()
    masked[torch.arange(z.shape[0]), top] = -math.inf
    runner = masked.argmax(dim=1)
    rows = torch.arange(z.shape[0])
    m = z[rows, top] - z[rows, runner]
    if single:
        return int(top[0]), int(runner[0]), float(m[0])
    return top, runner, m


def predict(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(x).argmax(dim=1)


@dataclass
class CertificationReport:
    label: int
    runner_up: int
    margin: float
    radius: float
    eps: float
    robust: bool
    adversarial: torch.Tensor | None = field(default=None, repr=False)
    adversarial_gap: float | None = None


def is_robust(m: float, eps: float) -> bool:
    # a zero margin (tie) certifies nothing, not even eps = 0
    return m > 0.0 and m >= eps


def certify(model: nn.Module, x: torch.Tensor, eps: float = 0.0,
            with_adversarial: bool = False) -> list[CertificationReport]:
    """Certify each row of ``x`` at radius ``eps`` from a single forward pass."""
    with torch.no_grad():
        logits = model(x)
    top, runner, m = margin(logits)
    adv = gaps = None
    if with_adversarial:
        adv, gaps = closest_adversarial(model, x, strict=False)
    reports = []
    for i in range(x.shape[0]):
        mi = float(m[i])
        reports.append(CertificationReport(
            label=int(top[i]), runner_up=int(runner[i]), margin=mi, radius=mi, eps=float(eps),
            robust=is_robust(mi, eps),
            adversarial=None if adv is None else adv[i],
            adversarial_gap=None if gaps is None else float(gaps[i])))
    return reports


class UndefinedDirectionError(ValueError):
    pass


def _pool_ties(model: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Per-sample flag: some max-pool window has a tied maximum."""
    flags = torch.zeros(x.shape[0], dtype=torch.bool)
    hooks = []

    def hook(mod, inp, out):
        (z,) = inp
        k1, k2 = mod.kernel
        if k1 * k2 == 1:
            return
        B, C, H, W = z.shape
        win = z.reshape(B, C, H // k1, k1, W // k2, k2).transpose(3, 4).reshape(B, -1, k1 * k2)
        top2 = win.topk(2, dim=-1).values
        flags.logical_or_((top2[..., 0] == top2[..., 1]).any(dim=1))

    for mod in model.modules():
        if isinstance(mod, GnpMaxPool):
            hooks.append(mod.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in hooks:
            h.remove()
    return flags


def pair_gradient(model: nn.Module, x: torch.Tensor, i: torch.Tensor, j: torch.Tensor) -> torch.Tensor:
    """Per-sample gradient of ``f_i - f_j`` at each row of ``x``."""
    xg = x.detach().clone().requires_grad_(True)
    logits = model(xg)
    rows = torch.arange(x.shape[0])
    diff = logits[rows, i] - logits[rows, j]
    return tc.gradient(diff.sum(), xg)


def closest_adversarial(model: nn.Module, x: torch.Tensor, strict: bool = True):
    """Candidate ``x - M grad(f_l - f_s)(x)`` and its residual gap ``|f_l - f_s|`` there.

    With ``strict`` a tie among the top two logits or inside a pooling window
    raises :class:`UndefinedDirectionError`; otherwise those rows get NaN.
    """
    single = x.dim() == len(getattr(model, "input_shape", x.shape[1:]))
    if single:
        x = x.unsqueeze(0)
    with torch.no_grad():
        logits = model(x)
    top, runner, m = margin(logits)
    bad = (m == 0) | _pool_ties(model, x)
    if strict and bool(bad.any()):
        raise UndefinedDirectionError(
            f"gradient direction undefined at {int(bad.sum())} sample(s) (tie in top-2 or pooling)")
    g = pair_gradient(model, x, top, runner)
    shape = (-1,) + (1,) * (x.dim() - 1)
    x_adv = (x - m.view(shape) * g).detach()
    with torch.no_grad():
        la = model(x_adv)
    rows = torch.arange(x.shape[0])
    gap = (la[rows, top] - la[rows, runner]).abs()
    if bad.any():
        x_adv[bad] = float("nan")
        gap[bad] = float("nan")
    if single:
        return x_adv[0], float(gap[0])
    return x_adv, gap
