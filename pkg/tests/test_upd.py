import itertools
import math

import pytest
import torch

from ugnn import tensor_core as tc
from ugnn.layers import bjorck_project
from ugnn.upd import (UpdBounded, UpdUnbounded, difference_matrix, lbfgs_minimize, pair_differences,
                      pair_norms, psi, upd_project)
from ugnn.verification import finite_difference_gradient, relative_error


def brute_pairs(U):
    return torch.stack([U[h] - U[k] for h, k in itertools.combinations(range(U.shape[0]), 2)])


def test_difference_matrix_c2_c3():
    assert difference_matrix(2).tolist() == [[1.0, -1.0]]
    assert difference_matrix(3).tolist() == [[1, -1, 0], [1, 0, -1], [0, 1, -1]]


@pytest.mark.parametrize("C", [2, 3, 5, 10])
def test_difference_matrix_structure(C):
    A = difference_matrix(C)
    assert A.shape == (C * (C - 1) // 2, C)
    assert torch.equal((A == 1).sum(dim=1), torch.ones(A.shape[0], dtype=torch.long))
    assert torch.equal((A == -1).sum(dim=1), torch.ones(A.shape[0], dtype=torch.long))
    U = tc.randn(C, 4, seed=C)
    assert torch.allclose(pair_differences(U), brute_pairs(U), atol=0)


def test_difference_matrix_needs_two_classes():
    with pytest.raises(ValueError):
        difference_matrix(1)


def test_psi_examples():
    assert float(psi(torch.zeros(3, 4, dtype=torch.float64))) == 3.0
    simplex = torch.eye(4, dtype=torch.float64) / math.sqrt(2)
    assert float(psi(simplex)) <= 1e-30
    Q = bjorck_project(tc.randn(5, 9, seed=0), iters=100)
    assert float(psi(Q / math.sqrt(2))) <= 1e-24


def test_psi_gradient_matches_fd():
    U0 = tc.randn(4, 6, seed=3)
    U = U0.clone().requires_grad_(True)
    assert relative_error(tc.gradient(psi(U), U), finite_difference_gradient(psi, U0)) <= 1e-4


def test_lbfgs_quadratic():
    c = torch.tensor([1.0, -2.0, 3.0, 0.5], dtype=torch.float64)
    res = lbfgs_minimize(lambda x: 0.5 * (x - c).pow(2).sum(), torch.zeros(4, dtype=torch.float64), steps=5)
    assert float((res.x - c).abs().max()) <= 1e-8


def rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def test_lbfgs_rosenbrock_monotone():
    res = lbfgs_minimize(rosenbrock, torch.tensor([-1.2, 1.0], dtype=torch.float64), steps=5)
    vals = res.values
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-6


def test_lbfgs_stationary_start():
    x0 = torch.tensor([1.0, 1.0], dtype=torch.float64)
    res = lbfgs_minimize(rosenbrock, x0, steps=3)
    assert torch.equal(res.x, x0) and res.n_iter == 0


def test_lbfgs_non_finite():
    with pytest.raises(FloatingPointError):
        lbfgs_minimize(lambda x: (x.log()).sum(), torch.tensor([-1.0], dtype=torch.float64), steps=1)


def test_upd_project_10x512():
    U = tc.randn(10, 512, seed=0)
    W = upd_project(U, steps=3, differentiable=False)
    assert float((pair_norms(W) - 1).abs().max()) <= 1e-4


def test_upd_project_spread_shrinks_with_steps():
    U = tc.randn(10, 512, seed=1) * 0.05
    spreads = []
    for steps in (1, 2, 3, 4):
        n = pair_norms(upd_project(U, steps=steps, inner_iters=2, differentiable=False))
        spreads.append(float(n.max() - n.min()))
    assert all(b < a for a, b in zip(spreads, spreads[1:]))


def test_upd_project_fixed_point_and_idempotent():
    W0 = torch.eye(3, 6, dtype=torch.float64) / math.sqrt(2)
    assert torch.equal(upd_project(W0, differentiable=False), W0)
    W = upd_project(tc.randn(6, 64, seed=2), differentiable=False)
    assert float((upd_project(W, differentiable=False) - W).abs().max()) <= 1e-8


def test_upd_project_gradient_matches_fd():
    U0 = tc.randn(3, 5, seed=8)
    probe = tc.randn(3, 5, seed=9)

    def f(U):
        return (upd_project(U, steps=1, inner_iters=3) * probe).sum()

    U = U0.clone().requires_grad_(True)
    assert relative_error(tc.gradient(f(U), U), finite_difference_gradient(f, U0)) <= 1e-4


def test_bounded_head_structure():
    head = UpdBounded(16, 6, gen=tc.generator(0))
    head.freeze()
    W = head.effective_weight()
    assert float((W.norm(dim=1) - 1 / math.sqrt(2)).abs().max()) <= 1e-6
    assert float((pair_norms(W) - 1).abs().max()) <= 1e-6
    with pytest.raises(ValueError):
        UpdBounded(3, 4)


def test_unbounded_head_structure():
    head = UpdUnbounded(64, 12, gen=tc.generator(0))
    head.freeze()
    assert float((pair_norms(head.effective_weight()) - 1).abs().max()) <= 1e-4


def test_unbounded_head_straight_through_gradient_flows():
    head = UpdUnbounded(8, 3, gen=tc.generator(0), straight_through=True)
    x = tc.randn(4, 8, seed=1)
    head(x).sum().backward()
    assert head.weight.grad is not None and bool(torch.isfinite(head.weight.grad).all())
