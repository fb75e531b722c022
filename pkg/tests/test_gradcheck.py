import numpy as np
import pytest

from mdsvit import tensor as T
from mdsvit.gradcheck import away_from_zero, format_table, grad_check, registry, run_case, run_suite


def test_linear_function_is_near_exact():
    rep = grad_check(lambda a, b: (a * 3.0 + b).sum(), [(3, 4), (3, 4)], op_name="affine")
    assert rep.passed and rep.max_relative_error < 1e-10


def test_relu_away_from_kink():
    rep = grad_check(lambda a: T.relu(a).sum(), [(5, 5)], sampler=away_from_zero(0.1), op_name="relu")
    assert rep.passed and rep.n_skipped == 0


def test_kink_guard_skips_points_on_the_kink():
    # |a| sampled at exactly 0: the one-sided slopes are +1 and -1
    zeros = lambda rng, shape: np.zeros(shape)
    rep = grad_check(lambda a: T.maximum(a, -a).sum(), [(4,)], sampler=zeros, kink_guard=True)
    assert rep.n_skipped == 4 and rep.n_checked == 0
    unguarded = grad_check(lambda a: T.maximum(a, -a).sum(), [(4,)], sampler=zeros)
    assert unguarded.n_checked == 4


def test_sigmoid_chain():
    rep = grad_check(lambda a: T.sigmoid(T.sigmoid(a) * 2.0).sum(), [(3, 3)], op_name="chain")
    assert rep.passed


def test_wrong_gradient_is_reported_not_raised():
    with T.inject_backward_fault("tanh", 1.01):
        rep = grad_check(lambda a: T.tanh(a).sum(), [(4,)], op_name="tanh")
    assert not rep.passed and rep.max_relative_error > 1e-4


def test_crash_is_a_failure():
    def broken(a):
        raise RuntimeError("boom")

    rep = grad_check(broken, [(2,)], op_name="broken")
    assert not rep.passed and "boom" in rep.op_name


@pytest.mark.parametrize("op", ["mul", "softmax", "conv2d", "layer_norm"])
def test_fault_injection_names_the_op(op):
    with T.inject_backward_fault(op, 1.05):
        reports = run_suite([op])
    assert [r.op_name for r in reports if not r.passed] == [op]


def test_registry_covers_every_differentiable_op():
    names = {c.name for c in registry()}
    ops = {
        "add", "sub", "mul", "div", "neg", "pow", "reciprocal", "exp", "log", "sqrt", "tanh", "relu",
        "sigmoid", "gelu", "minimum", "maximum", "matmul", "linear", "sum", "mean", "max", "min",
        "softmax", "reshape", "transpose", "broadcast_to", "getitem", "concat", "pad", "roll",
        "conv2d", "resize_bilinear", "batch_norm", "layer_norm", "astype",
    }
    assert ops <= names, ops - names
    assert {"loss_cc", "loss_sim", "loss_kl", "combined_loss"} <= names
    assert len(names) == len(registry())


def test_table_has_one_row_per_case():
    reports = [run_case(c) for c in registry()[:3]]
    table = format_table(reports)
    assert len(table.splitlines()) == 5
    assert all(r.op_name in table for r in reports)


PRIMITIVES = [c for c in registry() if c.kind == "primitive"]


@pytest.mark.parametrize("case", PRIMITIVES, ids=[c.name for c in PRIMITIVES])
def test_primitive_gradients(case):
    rep = run_case(case)
    assert rep.passed, rep
    assert rep.max_relative_error < 1e-4
    assert np.isfinite(rep.max_relative_error)
