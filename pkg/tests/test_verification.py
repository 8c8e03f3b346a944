import math

import numpy as np
import pytest
import torch
from torch import nn

from ugnn import tensor_core as tc
from ugnn.model import RingModel, build_mlp, margin
from ugnn.verification import (check_unitary_gradient, explicit_jacobian, lb_map_report,
                               lower_bound_recall, map_oracle_grid2d, map_oracle_penalty,
                               robustness_curve, run_oracle, upd_audit, verify_model)


class FreeMlp(nn.Module):
    """Unconstrained network used as a negative control."""

    n_classes = 3
    input_shape = (4,)
    dtype = torch.float64

    def __init__(self):
        super().__init__()
        g = tc.generator(0)
        self.net = nn.Sequential(nn.Linear(4, 8), nn.ReLU(), nn.Linear(8, 3)).double()
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * 2)

    def forward(self, x):
        return self.net(x)


def affine(seed=0):
    return build_mlp([2], n_classes=2, seed=seed).freeze()


def test_explicit_jacobian_identity():
    J = explicit_jacobian(lambda z: z, tc.randn(5, seed=0))
    assert torch.equal(J, torch.eye(5, dtype=torch.float64))


def test_unitary_gradient_report_affine():
    rep = check_unitary_gradient(affine(), n_samples=64, fd_probes=4)
    assert rep.within(1e-7)
    assert int(rep.hist_counts.sum()) == 64 * len(rep.pairs)
    assert rep.worst_fd_deviation <= 1e-6


def test_unitary_gradient_negative_control():
    rep = check_unitary_gradient(FreeMlp(), n_samples=64)
    assert rep.max_deviation() > 0.1


def test_penalty_oracle_affine():
    model = affine(1)
    X = tc.randn(10, 2, seed=3)
    _, _, m = margin(model(X))
    est = map_oracle_penalty(model, X)
    for e, mi in zip(est, m):
        assert e.converged and abs(e.distance - float(mi)) <= 1e-4


def test_grid_oracle_affine():
    model = affine(2)
    X = tc.randn(4, 2, seed=4)
    _, _, m = margin(model(X))
    for i in range(4):
        e = map_oracle_grid2d(model, X[i])
        assert e.converged and abs(e.distance - float(m[i])) <= 1e-3


@pytest.mark.parametrize("oracle", ["penalty", "grid2d"])
def test_ring_oracle(oracle):
    x = torch.tensor([2.0, 0.0], dtype=torch.float64)
    est = map_oracle_penalty(RingModel(), x) if oracle == "penalty" else map_oracle_grid2d(RingModel(), x)
    assert est.converged
    assert abs(est.distance - 1.0) <= 1e-3
    assert float((est.point - torch.tensor([1.0, 0.0], dtype=torch.float64)).norm()) <= 1e-2


def test_penalty_box_constraint():
    model = affine(5)
    X = torch.rand(6, 2, generator=tc.generator(0), dtype=torch.float64)
    for e in map_oracle_penalty(model, X, box=True):
        if e.converged:
            assert float(e.point.min()) >= 0.0 and float(e.point.max()) <= 1.0


def test_grid_oracle_needs_2d():
    with pytest.raises(ValueError):
        map_oracle_grid2d(build_mlp([3], n_classes=2), torch.zeros(3, dtype=torch.float64))
    with pytest.raises(ValueError):
        run_oracle(affine(), tc.randn(2, 2, seed=0), method="grid2d", box=True)


def test_lb_map_report_affine():
    model = affine(6)
    X = tc.randn(30, 2, seed=7)
    y = model(X).argmax(dim=1)
    rep = lb_map_report(model, X, y)
    assert rep.count == 30
    assert abs(rep.mean - 1.0) <= 1e-4 and rep.std <= 1e-4


def test_lb_map_report_empty():
    model = affine(6)
    X = tc.randn(5, 2, seed=7)
    y = 1 - model(X).argmax(dim=1)
    with pytest.raises(ValueError):
        lb_map_report(model, X, y)


def test_robustness_curve_and_recall():
    model = affine(8)
    X = tc.randn(200, 2, seed=9)
    y = torch.randint(0, 2, (200,), generator=tc.generator(1))
    eps = [0.0, 0.1, 0.5, 1.0, 2.0]
    curve = robustness_curve(model, X, y, eps)
    acc = [r["certified_accuracy"] for r in curve]
    assert acc[0] == float((model(X).argmax(1) == y).double().mean())
    assert all(b <= a for a, b in zip(acc, acc[1:]))
    assert lower_bound_recall([0.1, 0.3, 2.0], [0.1, 0.6, 2.0], 0.5) == 0.5
    assert math.isnan(lower_bound_recall([1.0], [1.0], 0.5))


def test_oracles_agree_and_are_sound_on_trained_toy(blobs_model, blobs_test):
    X, y = blobs_test.X[:60], blobs_test.y[:60]
    pen = map_oracle_penalty(blobs_model, X)
    grid = [map_oracle_grid2d(blobs_model, X[i]) for i in range(60)]
    _, _, m = margin(blobs_model(X))
    for p, g, mi in zip(pen, grid, m):
        assert g.distance >= float(mi) - 1e-6
        if p.converged:
            assert p.distance >= float(mi) * (1 - 1e-3)
            assert abs(p.distance - g.distance) <= 0.02 * g.distance


def test_verify_model_flags_broken_head():
    model = build_mlp([4, 4], n_classes=3).freeze()
    assert verify_model(model, n_samples=16).ok
    with torch.no_grad():
        model.head._frozen = model.head._frozen * 1.5
    res = verify_model(model, n_samples=16)
    assert not res.ok
    assert upd_audit(model.head) > 0.4
