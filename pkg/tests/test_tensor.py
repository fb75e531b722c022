import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mdsvit import tensor as T
from mdsvit.exceptions import AxisError, RankError, ShapeError
from mdsvit.gradcheck import grad_check, positive
from mdsvit.tensor import Tensor

from oracles import bilinear_loops, conv2d_loops, matmul_loops


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


# -- create ---------------------------------------------------------------

def test_create_zeros():
    t = T.create([2, 3], "zeros")
    assert t.shape == (2, 3)
    assert np.array_equal(t.data, np.zeros((2, 3)))
    assert t.is_leaf and t.grad is None


def test_create_explicit_scalar_like():
    t = T.create([1], "explicit", data=[5.0])
    assert t.shape == (1,)
    assert t.item() == 5.0


def test_create_normal_is_seed_deterministic():
    a = T.create([4, 4], "normal", mean=0.0, std=0.02, seed=7)
    b = T.create([4, 4], "normal", mean=0.0, std=0.02, seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    assert not np.array_equal(a.data, T.create([4, 4], "normal", std=0.02, seed=8).data)


def test_create_uniform_range():
    t = T.create([50], "uniform", low=-2.0, high=-1.0, seed=0)
    assert t.data.min() >= -2.0 and t.data.max() < -1.0


@pytest.mark.parametrize("shape", [[0], [2, 0], [-1, 3]])
def test_create_rejects_bad_extent(shape):
    with pytest.raises(ShapeError):
        T.create(shape, "zeros")


def test_create_explicit_length_mismatch():
    with pytest.raises(ShapeError, match="length mismatch"):
        T.create([2, 2], "explicit", data=[1.0, 2.0, 3.0])


def test_default_dtype_is_single_precision():
    assert T.create([2], "ones").dtype == np.float32


# -- elementwise -------------------------------------------------------------

def test_add_hand():
    assert np.array_equal(T.add(T.tensor([1, 2]), T.tensor([3, 4])).data, [4, 6])


def test_mul_by_scalar_zero():
    assert np.array_equal(T.mul(T.tensor([2, 3]), 0).data, [0, 0])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.add(T.tensor([1, 2]), T.tensor([1, 2, 3]))


def test_div_by_zero_is_ieee():
    out = T.div(T.tensor([1.0, 0.0, -1.0]), T.tensor([0.0, 0.0, 0.0]))
    assert np.isposinf(out.data[0]) and np.isnan(out.data[1]) and np.isneginf(out.data[2])


def test_grad_of_sum_mul_is_other_operand(rng):
    b = rng.normal(size=(3, 4))
    a = leaf(rng.normal(size=(3, 4)))
    T.mul(a, Tensor(b)).sum().backward()
    assert np.allclose(a.grad, b, rtol=0, atol=1e-15)
    rep = grad_check(lambda x, y: T.mul(x, y).sum(), [(3, 4), (3, 4)], 1e-4, seed=0)
    assert rep.passed, rep


def test_scalar_tensor_operand_gets_summed_grad():
    a = leaf([1.0, 2.0, 3.0])
    s = leaf(2.0)
    (a * s).sum().backward()
    assert s.grad == pytest.approx(6.0)
    assert np.allclose(a.grad, 2.0)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    m = rng.normal(size=(3, 4))
    assert np.array_equal((T.tensor(np.eye(3), np.float64) @ Tensor(m)).data, m)


def test_matmul_hand():
    out = T.tensor([[1, 2], [3, 4]]) @ T.tensor([[5], [6]])
    assert np.array_equal(out.data, [[17], [39]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - matmul_loops(a, b))) < 1e-12
    probe = Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda x, y: (T.matmul(x, y) * probe).sum(), [(5, 4), (4, 3)], 1e-4, seed=3).passed


def test_matmul_batched_matches_per_slice(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        assert np.allclose(out[i], matmul_loops(a[i], b[i]), atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(T.zeros((2, 3)), T.zeros((4, 2)))


# -- reductions ---------------------------------------------------------------

def test_sum_all():
    assert T.tensor([1, 2, 3]).sum().item() == 6


def test_mean_of_constant():
    assert np.allclose(T.create([3, 5], "explicit", data=[2.5] * 15).mean().item(), 2.5)


def test_sum_axis0_matches_column_loop(rng):
    a = rng.normal(size=(3, 4))
    out = Tensor(a).sum(axis=0).data
    expect = [a[0, j] + a[1, j] + a[2, j] for j in range(4)]
    assert np.array_equal(out, expect)


def test_invalid_axis():
    with pytest.raises(AxisError):
        T.zeros((2, 3)).sum(axis=2)


def test_max_routes_gradient_to_first_extremum():
    a = leaf([1.0, 3.0, 3.0, 2.0])
    a.max().backward()
    assert np.array_equal(a.grad, [0, 1, 0, 0])
    b = leaf([[2.0, 1.0], [1.0, 1.0]])
    b.min(axis=1).sum().backward()
    assert np.array_equal(b.grad, [[0, 1], [1, 0]])


# -- softmax -----------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(T.softmax(T.zeros((3,)), 0).data, 1 / 3)


def test_softmax_large_values_no_overflow():
    out = T.softmax(T.tensor([1000.0, 0.0]), 0).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_jacobian_finite_differences():
    rep = grad_check(lambda a: (T.softmax(a, 0) * Tensor(np.arange(1.0, 7.0))).sum(), [(6,)], 1e-4, seed=5)
    assert rep.passed, rep


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(a):
    out = T.softmax(Tensor(a.astype(np.float32)), axis=-1).data
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(out >= 0)


# -- backward --------------------------------------------------------------

def test_backward_sum_gives_ones():
    w = leaf([0.0, 0.0, 0.0])
    w.sum().backward()
    assert np.array_equal(w.grad, [1, 1, 1])


def test_backward_square():
    w = leaf([2.0, -1.0])
    (w * w).sum().backward()
    assert np.array_equal(w.grad, [4, -2])


def test_backward_accumulates_until_zeroed():
    w = leaf([1.0, 2.0])
    (w * 3.0).sum().backward()
    (w * 3.0).sum().backward()
    assert np.array_equal(w.grad, [6, 6])
    T.zero_grads([w])
    assert w.grad is None


def test_backward_needs_scalar():
    with pytest.raises(RankError):
        leaf([1.0, 2.0]).backward()


def test_composite_conv_bn_relu_matches_finite_differences():
    def build(x, w, g, b):
        y = T.conv2d(x, w, None, 1, 1)
        c = y.shape[1]
        z, _, _ = T.batch_norm(y, g, b, np.zeros(c), np.ones(c), 1e-5, True)
        return (T.relu(z) * Tensor(np.linspace(-1, 1, z.size).reshape(z.shape))).sum()

    rep = grad_check(build, [(2, 2, 4, 4), (3, 2, 3, 3), (3,), (3,)], 1e-4, seed=2, kink_guard=True)
    assert rep.passed, rep


def test_backward_is_reproducible(rng):
    x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    grads = []
    for _ in range(2):
        wt = Tensor(w.copy(), requires_grad=True)
        T.conv2d(Tensor(x), wt, None, 1, 1).sigmoid().sum().backward()
        grads.append(wt.grad)
    assert grads[0].tobytes() == grads[1].tobytes()


def test_ops_do_not_mutate_inputs(rng):
    a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    ta, tw = Tensor(a.copy(), requires_grad=True), Tensor(w.copy(), requires_grad=True)
    out = T.softmax(T.conv2d(ta, tw, None, 1, 1), axis=-1)
    out = T.layer_norm(out, T.ones((4,)), T.zeros((4,)), 1e-5)
    T.resize_bilinear(out, (5, 7)).sum().backward()
    assert np.array_equal(ta.data, a) and np.array_equal(tw.data, w)


def test_no_grad_builds_no_graph():
    w = leaf([1.0])
    with T.no_grad():
        y = w * 2.0
    assert y.is_leaf and not y.requires_grad


def test_forward_determinism(rng):
    x = rng.normal(size=(1, 3, 8, 8)).astype(np.float32)
    w = rng.normal(size=(2, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


# -- shape / image ops --------------------------------------------------------

def test_conv2d_matches_loops(rng):
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
        assert np.allclose(got, conv2d_loops(x, w, b, stride, pad), atol=1e-12)


def test_resize_bilinear_matches_loops(rng):
    img = rng.normal(size=(4, 6))
    for oh, ow in ((8, 12), (2, 3), (5, 7)):
        got = T.resize_bilinear(Tensor(img[None, None]), (oh, ow)).data[0, 0]
        assert np.allclose(got, bilinear_loops(img, oh, ow), atol=1e-12)


def test_pad_roll_concat_getitem(rng):
    a = rng.normal(size=(2, 3))
    assert np.array_equal(T.pad(Tensor(a), [(1, 0), (0, 2)]).data, np.pad(a, [(1, 0), (0, 2)]))
    assert np.array_equal(T.roll(Tensor(a), (1,), (1,)).data, np.roll(a, 1, axis=1))
    assert np.array_equal(T.concat([Tensor(a), Tensor(a)], 0).data, np.concatenate([a, a]))
    assert np.array_equal(Tensor(a)[:, [2, 0]].data, a[:, [2, 0]])


def test_getitem_repeated_index_accumulates():
    a = leaf([1.0, 2.0, 3.0])
    a[[0, 0, 2]].sum().backward()
    assert np.array_equal(a.grad, [2, 0, 1])


def test_sigmoid_strictly_inside_unit_interval():
    out = T.sigmoid(T.tensor([-200.0, 0.0, 200.0])).data
    assert np.all(out > 0) and np.all(out < 1)
    assert out[1] == 0.5


def test_fault_injection_is_detected():
    with T.inject_backward_fault("exp", 1.05):
        rep = grad_check(lambda a: T.exp(a).sum(), [(3,)], 1e-4, seed=0)
    assert not rep.passed
    assert grad_check(lambda a: T.exp(a).sum(), [(3,)], 1e-4, seed=0).passed


@given(st.integers(1, 9), st.integers(1, 9))
def test_conv3x3_same_padding_keeps_size(h, w):
    out = T.conv2d(T.ones((1, 1, h, w)), T.ones((2, 1, 3, 3)), None, 1, 1)
    assert out.shape == (1, 2, h, w)


@given(hnp.arrays(np.float64, (2, 3), elements=st.floats(0.1, 5)))
def test_log_exp_roundtrip_grad(a):
    t = Tensor(a, requires_grad=True)
    T.log(T.exp(t)).sum().backward()
    assert np.allclose(t.grad, 1.0)


@pytest.mark.parametrize("seed", range(10))
def test_primitives_pass_gradcheck_on_ten_seeds(seed):
    cases = [
        (lambda a, b: (T.div(a, b) * 1.3).sum(), [(3, 4), (3, 4)], positive()),
        (lambda a: T.gelu(a).sum(), [(5,)], None),
        (lambda a: T.sqrt(a).sum(), [(5,)], positive()),
    ]
    for build, shapes, sampler in cases:
        kw = {"sampler": sampler} if sampler else {}
        assert grad_check(build, shapes, 1e-4, seed=seed, **kw).passed
