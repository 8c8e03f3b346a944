"""Acceptance criteria, one test each.

Every test appends a ``[criterion N] PASS/FAIL ...`` line that is printed in
the terminal summary, then asserts on the same condition.
"""
import math
import os
import time

import torch

import conftest
from ugnn import layers as L
from ugnn import tensor_core as tc
from ugnn.data import gen_blobs2d, load_cifar10
from ugnn.model import RingModel, build, build_mlp, closest_adversarial, margin
from ugnn.training import TrainConfig, evaluate, train
from ugnn.upd import UpdBounded, UpdUnbounded, lbfgs_minimize, pair_norms, psi, upd_project
from ugnn.verification import (ReLULayer, check_gnp, check_unitary_gradient, finite_difference_gradient,
                               lb_map_report, map_oracle_grid2d, map_oracle_penalty, relative_error,
                               robustness_curve, verify_model)


def report(n, ok, detail):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_01_unitary_gradient():
    t0 = time.perf_counter()
    devs = {}
    for dt in ("f32", "f64"):
        model = build(n_classes=5, dtype=dt, seed=0).freeze()
        rep = check_unitary_gradient(model, n_samples=512, distribution="gaussian", seed=0)
        assert len(rep.pairs) == 10
        devs[dt] = (rep.min, rep.max)
    elapsed = time.perf_counter() - t0
    ok32 = 0.999 <= devs["f32"][0] and devs["f32"][1] <= 1.001
    ok64 = 1 - 1e-5 <= devs["f64"][0] and devs["f64"][1] <= 1 + 1e-5
    report(1, ok32 and ok64 and elapsed <= 300,
           f"f32 norms in [{devs['f32'][0]:.7f}, {devs['f32'][1]:.7f}], "
           f"f64 in [{devs['f64'][0]:.12f}, {devs['f64'][1]:.12f}], {elapsed:.1f}s")


def test_criterion_02_upd_tightness():
    U0 = tc.randn(10, 512, seed=0)
    spread = {}
    dev3 = None
    for steps in (2, 3, 4):
        W = lbfgs_minimize(psi, U0, steps=steps).x
        norms = pair_norms(W)
        assert norms.numel() == 45
        spread[steps] = float(norms.max() - norms.min())
        if steps == 3:
            dev3 = float((norms - 1).abs().max())
    shrinks = spread[2] > spread[3] >= spread[4] and spread[2] > spread[4]
    report(2, dev3 <= 1e-4 and shrinks,
           f"3 steps max |norm-1|={dev3:.2e}; spread 2/3/4 steps = "
           f"{spread[2]:.2e}/{spread[3]:.2e}/{spread[4]:.2e}")


def test_criterion_03_layer_gnp():
    gen = tc.generator(0)
    ortho = L.OrthoLinear(8, 4, gen=gen)
    ortho.freeze()
    conv = L.CayleyConv(2, 3, 4, gen=gen)
    conv.freeze()
    cases = [("OrthoLinear(8->4)", ortho, (8,)), ("CayleyConv(C=2,4x4)", conv, (2, 4, 4)),
             ("PixelUnshuffle(2)", L.PixelUnshuffle(2), (2, 4, 4)),
             ("GnpMaxPool(2x2)", L.GnpMaxPool((2, 2)), (2, 4, 4))]
    cases += [(f"activation {k}", L.GnpActivation(k), (4, 4, 4)) for k in L.ACTIVATIONS]
    worst = {name: check_gnp(layer, shape, trials=3).max_deviation for name, layer, shape in cases}
    relu = check_gnp(ReLULayer(), (16,), trials=3).max_deviation
    ok = max(worst.values()) <= 1e-6 and relu > 0.1
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(3, ok, f"{detail}; ReLU control={relu:.2f}")


_oracle_cache = {}


def toy_oracles(model, data):
    if not _oracle_cache:
        X, y = data.X, data.y
        t0 = time.perf_counter()
        pen = map_oracle_penalty(model, X)
        t1 = time.perf_counter()
        grid = [map_oracle_grid2d(model, X[i]) for i in range(X.shape[0])]
        t2 = time.perf_counter()
        _oracle_cache.update(
            penalty=lb_map_report(model, X, y, estimates=pen), grid2d=lb_map_report(model, X, y, estimates=grid),
            estimates=dict(penalty=pen, grid2d=grid), seconds=dict(penalty=t1 - t0, grid2d=t2 - t1))
    return _oracle_cache


def test_criterion_04_certification_soundness(blobs_model, blobs_test):
    res = toy_oracles(blobs_model, blobs_test)
    with torch.no_grad():
        _, _, m = margin(blobs_model(blobs_test.X))
    parts, ok = [], True
    for method in ("penalty", "grid2d"):
        ratios = [float(mi) / e.distance for mi, e in zip(m, res["estimates"][method])
                  if e.converged and e.distance > 0]
        worst = max(ratios)
        ok &= worst <= 1 + 1e-3
        parts.append(f"{method}: {len(ratios)} converged, max ratio={worst:.6f}, "
                     f"{res['seconds'][method]:.0f}s")
    total = sum(res["seconds"].values())
    ok &= total <= 600
    report(4, ok, "; ".join(parts) + f"; total {total:.0f}s")


def test_criterion_05_lb_map_tightness(blobs_model, blobs_test):
    res = toy_oracles(blobs_model, blobs_test)
    pen, grid = res["penalty"], res["grid2d"]
    report(5, pen.mean >= 0.80 and grid.mean >= 0.80,
           f"LB/MAP penalty {pen.mean:.3f}±{pen.std:.3f} (N={pen.count}), "
           f"grid2d {grid.mean:.3f}±{grid.std:.3f} (N={grid.count})")


def test_criterion_06_affine_is_exact():
    worst_gap, worst_res = 0.0, 0.0
    for model in (build_mlp([2], n_classes=2, head="updB", seed=0).freeze(),
                  build_mlp([6], n_classes=4, head="updU", seed=1).freeze()):
        X = tc.randn(20, model.input_shape[0], seed=3)
        with torch.no_grad():
            _, _, m = margin(model(X))
        for est, mi in zip(map_oracle_penalty(model, X), m):
            assert est.converged
            worst_gap = max(worst_gap, abs(est.distance - float(mi)))
        _, gap = closest_adversarial(model, X)
        worst_res = max(worst_res, float(gap.max()))
    report(6, worst_gap <= 1e-4 and worst_res <= 1e-6,
           f"max |margin - MAP|={worst_gap:.1e}, max boundary residual={worst_res:.1e}")


def test_criterion_07_ring_oracles():
    x = torch.tensor([2.0, 0.0], dtype=torch.float64)
    target = torch.tensor([1.0, 0.0], dtype=torch.float64)
    parts, ok = [], True
    for name, est in (("penalty", map_oracle_penalty(RingModel(), x)), ("grid2d", map_oracle_grid2d(RingModel(), x))):
        off = float((est.point - target).norm())
        ok &= est.converged and abs(est.distance - 1.0) <= 1e-3 and off <= 1e-2
        parts.append(f"{name} d={est.distance:.6f} |p*-(1,0)|={off:.1e}")
    report(7, ok, ", ".join(parts))


def _fd_worst(fn, shape, gen, points=20):
    worst = 0.0
    for _ in range(points):
        z0 = torch.randn(*shape, generator=gen, dtype=torch.float64)
        z = z0.clone().requires_grad_(True)
        worst = max(worst, relative_error(tc.gradient(fn(z), z), finite_difference_gradient(fn, z0)))
    return worst


def test_criterion_08_gradients_match_fd():
    gen = tc.generator(8)

    def probed(out_fn, probe_shape):
        probe = torch.randn(*probe_shape, generator=gen, dtype=torch.float64)
        return lambda z: (out_fn(z) * probe).sum()

    ortho = L.OrthoLinear(8, 4, gen=gen)
    conv = L.CayleyConv(2, 3, 4, gen=gen)
    x8 = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    x_img = torch.randn(1, 2, 4, 4, generator=gen, dtype=torch.float64)
    h8 = torch.randn(1, 8, generator=gen, dtype=torch.float64)
    checks = {
        "OrthoLinear input": (probed(lambda z: ortho(z.unsqueeze(0)), (1, 4)), (8,)),
        "OrthoLinear weight (Bjorck)": (probed(
            lambda U: torch.nn.functional.linear(x8, L.bjorck_project(U, tol=0.0)), (1, 4)), (4, 8)),
        "CayleyConv input": (probed(lambda z: conv(z.unsqueeze(0)), (1, 2, 4, 4)), (2, 4, 4)),
        "CayleyConv weight (Cayley)": (probed(
            lambda V: L.cayley_apply(L.cayley_build(0.5 * V, 4, 4), x_img), (1, 2, 4, 4)), (2, 2, 3, 3)),
        "PixelUnshuffle": (probed(lambda z: L.pixel_unshuffle(z.unsqueeze(0), 2), (1, 8, 2, 2)), (2, 4, 4)),
        "GnpMaxPool": (probed(lambda z: L.gnp_maxpool(z.unsqueeze(0), 2), (1, 2, 2, 2)), (2, 4, 4)),
        "updB weight (Bjorck)": (probed(
            lambda U: torch.nn.functional.linear(h8, L.bjorck_project(U, tol=0.0) / math.sqrt(2)), (1, 3)), (3, 8)),
        "updU weight (L-BFGS)": (probed(
            lambda U: torch.nn.functional.linear(h8, upd_project(U)),
            (1, 3)), (3, 8)),
    }
    for kind in L.ACTIVATIONS:
        act = L.GnpActivation(kind)
        checks[f"activation {kind}"] = (probed(lambda z, a=act: a(z.unsqueeze(0)), (1, 4, 4, 4)), (4, 4, 4))
    head_b, head_u = UpdBounded(8, 3, gen=gen), UpdUnbounded(8, 3, gen=gen)
    checks["updB input"] = (probed(lambda z: head_b(z.unsqueeze(0)), (1, 3)), (8,))
    checks["updU input"] = (probed(lambda z: head_u(z.unsqueeze(0)), (1, 3)), (8,))
    worst = {name: _fd_worst(fn, shape, gen) for name, (fn, shape) in checks.items()}
    name, value = max(worst.items(), key=lambda kv: kv[1])
    report(8, value <= 1e-4, f"{len(worst)} layer/parameter checks x 20 points, worst {name} rel err={value:.1e}")


def _cifar_part():
    """Desk-scale CIFAR-10 run; returns (ok, detail)."""
    root = os.environ.get("UGNN_CIFAR10_DIR", "")
    if not root:
        return False, "cifar10: no data (set UGNN_CIFAR10_DIR to the binary distribution)"
    try:
        train_set = load_cifar10(root, split="train", dtype="f32", limit=5000)
        test_set = load_cifar10(root, split="test", dtype="f32")
    except (FileNotFoundError, ValueError) as exc:
        return False, f"cifar10: {exc}"
    cfg = TrainConfig(epochs=20, batch_size=128, lr=1e-3, crop=True, flip=True, normalize=True,
                      precision="f32")
    model = build(n_classes=10, dtype="f32", seed=0)
    t0 = time.perf_counter()
    train(model, train_set.X, train_set.y, cfg)
    acc = evaluate(model, test_set.X, test_set.y, cfg)["accuracy"]
    verified = verify_model(model, n_samples=64).ok
    return acc >= 0.40 and verified, (f"cifar10 test accuracy={acc:.3f}, verify {'ok' if verified else 'failed'}, "
                                      f"{time.perf_counter() - t0:.0f}s")


def test_criterion_09_training_smoke():
    train_set, test_set = gen_blobs2d(1000, seed=0), gen_blobs2d(1000, seed=1)
    model = build_mlp([2, 2, 2], n_classes=2, activation="maxmin", head="updB")
    t0 = time.perf_counter()
    train(model, train_set.X, train_set.y, TrainConfig(epochs=50, batch_size=64, margin=0.5, lr=1e-2))
    elapsed = time.perf_counter() - t0
    acc = evaluate(model, test_set.X, test_set.y)["accuracy"]
    blobs_ok = acc >= 0.95 and elapsed <= 120
    cifar_ok, cifar_detail = _cifar_part()
    report(9, blobs_ok and cifar_ok, f"blobs2d test accuracy={acc:.3f} in {elapsed:.1f}s; {cifar_detail}")


def test_criterion_10_curve_and_perturbation_probe(blobs_model, blobs_test):
    X, y = blobs_test.X, blobs_test.y
    eps_list = [0.0, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0]
    curve = [r["certified_accuracy"] for r in robustness_curve(blobs_model, X, y, eps_list)]
    monotone = all(b <= a for a, b in zip(curve, curve[1:]))
    plain = evaluate(blobs_model, X, y)["accuracy"]
    gen = tc.generator(10)
    with torch.no_grad():
        top, _, m = margin(blobs_model(X))
    probed = flips = 0
    for eps in eps_list[1:]:
        idx = torch.nonzero((top == y) & (m >= eps)).flatten()
        for i in idx.tolist():
            d = torch.randn(100, 2, generator=gen, dtype=X.dtype)
            d = 0.99 * eps * d / d.norm(dim=1, keepdim=True)
            with torch.no_grad():
                pred = blobs_model(X[i] + d).argmax(dim=1)
            probed += 1
            flips += int((pred != top[i]).any())
    ok = monotone and curve[0] == plain and flips == 0 and probed > 0
    report(10, ok, f"curve {[round(c, 3) for c in curve]} at eps {eps_list}, accuracy={plain:.3f}, "
                   f"{probed} certified points x 100 perturbations, {flips} label changes")
