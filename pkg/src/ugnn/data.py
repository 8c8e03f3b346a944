"""Datasets: the CIFAR-10 binary format and seeded 2D toy generators."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
# per-channel statistics of the CIFAR-10 training set (Std.Norm regime)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

KINDS = ("cifar10", "blobs2d", "ring2d", "moons2d")


@dataclass
class Dataset:
    X: torch.Tensor
    y: torch.Tensor
    name: str = ""
    params: dict = field(default_factory=dict)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self) else 0

    def subset(self, n: int | None) -> "Dataset":
        if n is None or n >= len(self):
            return self
        return Dataset(self.X[:n], self.y[:n], self.name, dict(self.params, limit=n))


class CifarFormatError(ValueError):
    pass


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """Decode one CIFAR-10 binary batch: ``(uint8 images N x 3 x 32 x 32, labels)``."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise CifarFormatError(f"{path}: {raw.size} bytes is not a whole number of "
                               f"{CIFAR_RECORD}-byte records (truncated file?)")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise CifarFormatError(f"{path}: label byte {int(labels.max())} outside [0, 9]")
    images = rec[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return images, labels


def load_cifar10(path, split: str = "train", dtype="f64", limit: int | None = None) -> Dataset:
    """Load CIFAR-10 from a single batch file or a directory of the standard batch files.

    Pixels are scaled to ``[0, 1]``.
    """
    path = Path(path)
    if path.is_dir():
        names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
        files = [path / n for n in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 files: {', '.join(missing)}")
    elif path.exists():
        files = [path]
    else:
        raise FileNotFoundError(f"no CIFAR-10 data at {path}")
    imgs, labs = zip(*(read_cifar10_file(f) for f in files))
    images = np.concatenate(imgs)
    labels = np.concatenate(labs)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    X = torch.from_numpy(images.astype(np.float64) / 255.0).to(tc.resolve_dtype(dtype))
    return Dataset(X, torch.from_numpy(labels), "cifar10", dict(path=str(path), split=split))


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, 3, 32, 32)`` and labels in the CIFAR-10 binary layout."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    rec.tofile(path)


def _check_counts(n: int, n_classes: int = 2) -> None:
    if n < 2:
        raise ValueError(f"need at least 2 samples, got {n}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")


def gen_blobs2d(n: int = 1000, separation: float = 4.0, sigma: float = 1.0, n_classes: int = 2,
                seed: int = 0, dtype="f64") -> Dataset:
    """Isotropic Gaussian blobs whose neighbouring centers are ``separation * sigma`` apart."""
    _check_counts(n, n_classes)
    if sigma <= 0 or separation < 0:
        raise ValueError("sigma must be positive and separation non-negative")
    rng = np.random.default_rng(seed)
    if n_classes == 2:
        centers = np.array([[-0.5, 0.0], [0.5, 0.0]]) * separation * sigma
    else:
        # regular polygon with side separation * sigma
        R = separation * sigma / (2 * math.sin(math.pi / n_classes))
        ang = 2 * math.pi * np.arange(n_classes) / n_classes
        centers = R * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    y = np.arange(n) % n_classes
    rng.shuffle(y)
    X = centers[y] + sigma * rng.standard_normal((n, 2))
    return Dataset(torch.tensor(X, dtype=tc.resolve_dtype(dtype)), torch.from_numpy(y),
                   "blobs2d", dict(n=n, separation=separation, sigma=sigma, n_classes=n_classes, seed=seed))


def gen_ring2d(n: int = 1000, radius: float = 1.0, extent: float = 2.0, noise: float = 0.0,
               seed: int = 0, dtype="f64") -> Dataset:
    """Points uniform in the disc of radius ``extent``; label 1 outside the circle of ``radius``."""
    _check_counts(n)
    if not 0 < radius < extent:
        raise ValueError("need 0 < radius < extent")
    rng = np.random.default_rng(seed)
    r = extent * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0, 2 * math.pi, size=n)
    X = np.stack([r * np.cos(t), r * np.sin(t)], axis=1)
    y = (r > radius).astype(np.int64)
    if noise:
        X = X + noise * rng.standard_normal(X.shape)
    return Dataset(torch.tensor(X, dtype=tc.resolve_dtype(dtype)), torch.from_numpy(y),
                   "ring2d", dict(n=n, radius=radius, extent=extent, noise=noise, seed=seed))


def gen_moons2d(n: int = 1000, noise: float = 0.1, seed: int = 0, dtype="f64") -> Dataset:
    from sklearn.datasets import make_moons

    _check_counts(n)
    X, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    return Dataset(torch.tensor(X, dtype=tc.resolve_dtype(dtype)), torch.from_numpy(y.astype(np.int64)),
                   "moons2d", dict(n=n, noise=noise, seed=seed))


def normalize(X: torch.Tensor, mean=CIFAR_MEAN, std=CIFAR_STD) -> torch.Tensor:
    m = torch.tensor(mean, dtype=X.dtype).view(1, -1, 1, 1)
    s = torch.tensor(std, dtype=X.dtype).view(1, -1, 1, 1)
    return (X - m) / s


def _parse_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def parse_data_spec(spec: str) -> tuple[str, dict]:
    """``"kind:key=value,key=value"`` -> ``(kind, params)``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    params = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"malformed dataset parameter {item!r} (expected key=value)")
        params[key.strip()] = _parse_value(val.strip())
    return kind, params


def load_dataset(spec: str, dtype="f64") -> Dataset:
    kind, params = parse_data_spec(spec)
    if kind == "cifar10":
        if "path" not in params:
            params["path"] = os.environ.get("UGNN_CIFAR10_DIR", "")
            if not params["path"]:
                raise ValueError("cifar10 needs path=<dir or file> (or UGNN_CIFAR10_DIR)")
        return load_cifar10(params.pop("path"), dtype=dtype, **params)
    gens = {"blobs2d": gen_blobs2d, "ring2d": gen_ring2d, "moons2d": gen_moons2d}
    try:
        return gens[kind](dtype=dtype, **params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {kind}: {exc}") from None
