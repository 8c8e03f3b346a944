"""Command-line interface: ``ugnn <subcommand> ...``.

Every CSV is written with the ``csv`` module and ``repr`` floats, so output is
locale independent.  Thread count defaults to ``$UGNN_THREADS`` when set.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
import torch

from . import tensor_core as tc
from .checkpoint import CheckpointError, _design_constants, load_checkpoint, save_checkpoint
from .data import Dataset, load_dataset, normalize
from .model import HEADS, MODEL_KINDS, certify, margin, model_from_config
from .layers import ACTIVATIONS
from .training import TrainConfig, TrainingDiverged, config_dict, evaluate, train
from .verification import lb_map_report, robustness_curve, run_oracle, verify_model

THREADS_ENV = "UGNN_THREADS"
logger = logging.getLogger("ugnn")


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline="", encoding="utf-8"), True


def write_csv(path, header: list, rows) -> None:
    fh, close = _open_out(path)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    finally:
        if close:
            fh.close()


def parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_eps_range(text: str) -> list[float]:
    """``start:stop:num`` (inclusive linspace) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise CliError(f"--eps-range expects start:stop:num, got {text!r}")
        try:
            lo, hi, num = float(parts[0]), float(parts[1]), int(parts[2])
        except ValueError:
            raise CliError(f"--eps-range expects start:stop:num, got {text!r}") from None
        if num < 1 or hi < lo:
            raise CliError("--eps-range needs num >= 1 and stop >= start")
        return [float(v) for v in np.linspace(lo, hi, num)]
    return sorted(parse_floats(text))


def _coerce(text: str, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, (list, tuple)):
        vals = [v.strip() for v in text.split(",") if v.strip()]
        items = [float(v) if ("." in v or "e" in v.lower()) else int(v) for v in vals]
        return type(like)(items) if isinstance(like, tuple) else items
    return text


def _model_value(text: str):
    if "," in text:
        return [int(v) for v in text.split(",") if v.strip()]
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def read_run_config(path) -> tuple[dict, TrainConfig, str | None]:
    """Parse an INI-style key = value file with ``[model]`` and ``[train]`` sections.

    A manifest written by ``train`` is itself a valid config file.
    """
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path, encoding="utf-8"):
        raise CliError(f"cannot read config file {path}")
    defaults = TrainConfig()
    kw = {}
    names = {f.name for f in fields(TrainConfig)}
    if cp.has_section("train"):
        for key, text in cp.items("train"):
            if key not in names:
                raise CliError(f"unknown train field {key!r} in {path}")
            try:
                kw[key] = _coerce(text, getattr(defaults, key))
            except ValueError as exc:
                raise CliError(f"bad value for train field {key!r}: {exc}") from None
    model = {}
    if cp.has_section("model"):
        model = {k: _model_value(v) for k, v in cp.items("model")}
    data = cp.get("data", "spec", fallback=None)
    return model, TrainConfig(**kw), data


def write_manifest(path, model_meta: dict, config: TrainConfig, data_spec: str, result: dict) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["model"] = {"kind": model_meta["kind"],
                   **{k: _manifest_value(v) for k, v in model_meta["config"].items()}}
    cp["train"] = {k: _manifest_value(v) for k, v in config_dict(config).items()}
    cp["data"] = {"spec": data_spec}
    cp["design"] = {k: _manifest_value(v) for k, v in _design_constants().items()}
    # choices not fixed by the method description, recorded for the reader
    cp["design"]["crop_padding_mode"] = "reflect"
    cp["design"]["adam_betas"] = "0.9,0.999"
    cp["design"]["adam_eps"] = "1e-08"
    cp["result"] = {k: _manifest_value(v) for k, v in result.items()}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# ugnn run manifest\n")
        cp.write(fh)


def _manifest_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return _fmt(v)


def _load(args):
    try:
        model, meta = load_checkpoint(args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {args.ckpt}") from None
    return model, meta


def _dataset(args, model, meta) -> Dataset:
    ds = load_dataset(args.data, dtype=_dtype_name(model.dtype))
    if getattr(args, "limit", None):
        ds = ds.subset(args.limit)
    X = ds.X
    norm = meta.get("normalization")
    if norm:
        X = normalize(X, norm["mean"], norm["std"])
    try:
        model.check_input(X[:1])
    except ValueError as exc:
        raise CliError(f"--data: {exc}") from None
    return Dataset(X, ds.y, ds.name, ds.params)


def _dtype_name(dtype) -> str:
    return {v: k for k, v in tc.DTYPES.items()}[dtype]


def _batched_logits(model, X, batch=512):
    with torch.no_grad():
        return torch.cat([model(X[s:s + batch]) for s in range(0, X.shape[0], batch)])


# --------------------------------------------------------------------------
# subcommands


def cmd_build(args) -> int:
    if args.kind == "ugnn":
        config = dict(input_size=args.input_size, in_channels=args.in_channels, n_classes=args.n_classes,
                      activation=args.activation, head=args.head, dtype=args.dtype, seed=args.seed)
    elif args.kind == "mlp":
        if not args.dims:
            raise CliError("--dims is required for --kind mlp")
        config = dict(dims=[int(d) for d in args.dims.split(",")], n_classes=args.n_classes,
                      activation=args.activation, head=args.head, dtype=args.dtype, seed=args.seed)
    else:
        config = dict(dim=args.dim, radius=args.radius, dtype=args.dtype)
    model = model_from_config(args.kind, config)
    if not args.no_freeze:
        model.freeze()
    save_checkpoint(model, args.out)
    print(f"wrote {args.out} ({args.kind}, {sum(p.numel() for p in model.parameters())} parameters)")
    return 0


def cmd_train(args) -> int:
    model_cfg, config, data_spec = read_run_config(args.config)
    data_spec = args.data or data_spec
    if not data_spec:
        raise CliError("no dataset: pass --data or set [data] spec in the config")
    if args.seed is not None:
        config.seed = args.seed
    try:
        config.validate()
    except ValueError as exc:
        raise CliError(f"config: {exc}") from None
    if args.init:
        model, _ = load_checkpoint(args.init, dtype=config.precision)
    else:
        kind = model_cfg.pop("kind", "mlp")
        model_cfg.setdefault("dtype", config.precision)
        model_cfg.setdefault("seed", config.seed)
        if kind not in MODEL_KINDS:
            raise CliError(f"[model] kind must be one of {sorted(MODEL_KINDS)}")
        try:
            model = model_from_config(kind, model_cfg)
        except TypeError as exc:
            raise CliError(f"[model]: {exc}") from None
    ds = load_dataset(data_spec, dtype=config.precision)
    try:
        model.check_input(ds.X[:1])
    except ValueError as exc:
        raise CliError(f"--data: {exc}") from None
    extra = {}
    if config.normalize:
        extra["normalization"] = dict(mean=list(config.mean), std=list(config.std))
    out = Path(args.out)
    status = 0
    try:
        history = train(model, ds.X, ds.y, config)
    except TrainingDiverged as exc:
        logger.error("%s", exc)
        history = None
        status = 3
    rows = history.epochs if history else []
    result = dict(rows[-1]) if rows else {}
    if history is not None:
        result.update(history.final)
    result["status"] = "ok" if status == 0 else "diverged"
    extra.update(train=config_dict(config), data=data_spec, history=result)
    save_checkpoint(model, out, extra=extra)
    write_manifest(str(out) + ".manifest", dict(kind=model.kind, config=model.config),
                   config, data_spec, result)
    write_csv(str(out) + ".history.csv", ["epoch", "lr", "loss", "accuracy", "mean_margin"],
              ([r["epoch"], r["lr"], r["loss"], r["accuracy"], r["mean_margin"]] for r in rows))
    if rows:
        print(f"epochs={len(rows)} loss={rows[-1]['loss']:.6g} accuracy={rows[-1]['accuracy']:.4f} "
              f"mean_margin={rows[-1]['mean_margin']:.6g}")
    print(f"wrote {out}")
    return status


def cmd_eval(args) -> int:
    model, meta = _load(args)
    ds = _dataset(args, model, meta)
    res = evaluate(model, ds.X, ds.y)
    print(f"n={len(ds)} accuracy={res['accuracy']!r} mean_margin={res['mean_margin']!r}")
    return 0


def cmd_certify(args) -> int:
    model, meta = _load(args)
    ds = _dataset(args, model, meta)
    eps_list = parse_floats(args.eps)
    if any(e < 0 for e in eps_list):
        raise CliError("--eps values must be non-negative")
    reports = []
    for s in range(0, len(ds), 512):
        reports += certify(model, ds.X[s:s + 512])
    header = ["sample_id", "label", "pred", "runner_up", "margin", "radius"] + [f"robust@{e!r}" for e in eps_list]
    rows = []
    for i, r in enumerate(reports):
        correct = r.label == int(ds.y[i])
        rows.append([i, int(ds.y[i]), r.label, r.runner_up, r.margin, r.radius]
                    + [int(correct and r.margin > 0 and r.margin >= e) for e in eps_list])
    write_csv(args.out, header, rows)
    return 0


def cmd_verify(args) -> int:
    model, _ = _load(args)
    res = verify_model(model, n_samples=args.samples, seed=args.seed, trials=args.trials)
    for r in res.rows:
        flag = "ok" if r["ok"] else "VIOLATION"
        print(f"{r['check']:<17} {r['name']:<16} {r['value']:.3e} (tol {r['tol']:.0e}) {flag}")
    print("verify: all invariants hold" if res.ok else "verify: invariant violation")
    return 0 if res.ok else 1


def cmd_oracle(args) -> int:
    model, meta = _load(args)
    ds = _dataset(args, model, meta)
    kw = {}
    if args.method == "penalty":
        kw = dict(restarts=args.restarts, seed=args.seed)
    elif len(model.input_shape) != 1 or model.input_shape[0] != 2:
        raise CliError("--method grid2d needs a model with 2 inputs")
    try:
        est = run_oracle(model, ds.X, method=args.method, box=args.box, **kw)
        rep = lb_map_report(model, ds.X, ds.y, estimates=est)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_csv(args.out, ["sample_id", "margin", "map", "ratio", "converged"],
              ([r["sample_id"], r["margin"], r["map"], r["ratio"], int(r["converged"])] for r in rep.rows))
    print(f"LB/MAP mean={rep.mean:.4f} std={rep.std:.4f} N={rep.count}", file=sys.stderr)
    return 0


def cmd_curve(args) -> int:
    model, meta = _load(args)
    ds = _dataset(args, model, meta)
    eps = parse_eps_range(args.eps_range)
    if eps and eps[0] < 0:
        raise CliError("--eps-range values must be non-negative")
    rows = []
    for s in range(0, len(ds), 4096):
        part = robustness_curve(model, ds.X[s:s + 4096], ds.y[s:s + 4096], eps)
        rows.append([r["certified_accuracy"] * min(4096, len(ds) - s) for r in part])
    totals = np.sum(rows, axis=0) / len(ds)
    write_csv(args.out, ["eps", "certified_accuracy"], zip(eps, (float(t) for t in totals)))
    return 0


def cmd_contour(args) -> int:
    model, _ = _load(args)
    if tuple(model.input_shape) != (2,):
        raise CliError(f"contour needs a model with 2 inputs, checkpoint has input {tuple(model.input_shape)}")
    bounds = parse_floats(args.range)
    if len(bounds) != 2 or not bounds[1] > bounds[0] or args.grid < 2:
        raise CliError("--range needs lo,hi with hi > lo and --grid >= 2")
    lo, hi = bounds
    ticks = torch.linspace(lo, hi, args.grid, dtype=model.dtype)
    gx, gy = torch.meshgrid(ticks, ticks, indexing="xy")
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=1)
    top, _, m = margin(_batched_logits(model, pts))
    write_csv(args.out, ["x", "y", "margin", "pred"],
              ([float(p[0]), float(p[1]), float(mi), int(t)] for p, mi, t in zip(pts, m, top)))
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ugnn", description="Unitary-gradient signed distance classifiers.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"torch intra-op threads (default: ${THREADS_ENV} or torch default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def seed(sp, default=0):
        sp.add_argument("--seed", type=int, default=default)

    def ckpt_data(sp, data=True):
        sp.add_argument("--ckpt", required=True)
        if data:
            sp.add_argument("--data", required=True, help="dataset spec, e.g. blobs2d:n=500,seed=1")
            sp.add_argument("--limit", type=int, default=None, help="use only the first N samples")

    sp = sub.add_parser("build", help="build a freshly projected model and save it")
    sp.add_argument("--kind", choices=sorted(MODEL_KINDS), default="ugnn")
    sp.add_argument("--dims", help="mlp widths, e.g. 2,2,2")
    sp.add_argument("--n-classes", type=int, default=10)
    sp.add_argument("--activation", choices=ACTIVATIONS, default="maxmin")
    sp.add_argument("--head", choices=HEADS, default="updB")
    sp.add_argument("--input-size", type=int, default=32)
    sp.add_argument("--in-channels", type=int, default=3)
    sp.add_argument("--dim", type=int, default=2, help="ring input dimension")
    sp.add_argument("--radius", type=float, default=1.0, help="ring radius")
    sp.add_argument("--dtype", choices=sorted(tc.DTYPES), default="f64")
    sp.add_argument("--no-freeze", action="store_true")
    sp.add_argument("--out", required=True)
    seed(sp)
    sp.set_defaults(func=cmd_build)

    sp = sub.add_parser("train", help="train a model from a key = value config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", default=None)
    sp.add_argument("--init", default=None, help="start from this checkpoint instead of [model]")
    sp.add_argument("--out", required=True)
    seed(sp, default=None)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy and mean margin")
    ckpt_data(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("certify", help="per-sample certified radii")
    ckpt_data(sp)
    sp.add_argument("--eps", default="0", help="comma-separated radii")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("verify", help="check GNP, unitary-gradient and UPD invariants")
    ckpt_data(sp, data=False)
    sp.add_argument("--samples", type=int, default=64)
    sp.add_argument("--trials", type=int, default=1)
    seed(sp)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("oracle", help="boundary distance oracle and LB/MAP report")
    ckpt_data(sp)
    sp.add_argument("--method", choices=("penalty", "grid2d"), default="penalty")
    sp.add_argument("--box", action="store_true", help="constrain the search to [0, 1]")
    sp.add_argument("--restarts", type=int, default=4)
    sp.add_argument("--out", default="-")
    seed(sp)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("curve", help="certified accuracy as a function of eps")
    ckpt_data(sp)
    sp.add_argument("--eps-range", default="0:1:11", help="start:stop:num or a comma-separated list")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("contour", help="margin and prediction on a 2D grid")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--grid", type=int, default=101)
    sp.add_argument("--range", default="-3,3")
    sp.add_argument("--out", default="-")
    sp.set_defaults(func=cmd_contour)
    return p


def _set_threads(n) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return
        try:
            n = int(env)
        except ValueError:
            raise CliError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if n < 1:
        raise CliError("thread count must be >= 1")
    torch.set_num_threads(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        if getattr(args, "seed", None) is not None:
            torch.manual_seed(args.seed)
        return args.func(args)
    except (CliError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"ugnn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
