"""Autodiff core: values, gradients against central differences, tape semantics, optimizers."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eadlab import tensor as T
from eadlab.tensor import Tensor

N_INSTANCES = 20
SMOOTH_TOL = 1e-4
KINKED_TOL = 1e-3


def _rng(i):
    return np.random.default_rng([7, i])


def _away_from(x, points, gap=1e-3):
    """Nudge entries off non-differentiable points so central differences stay on one side."""
    x = x.copy()
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, 2 * gap, -2 * gap)
    return x


def _weighted(fn):
    """Scalar test loss sum(w * fn(...)) with fixed random weights, so gradients differ per entry."""

    def loss(*args):
        out = fn(*args)
        w = np.random.default_rng(99).normal(size=out.shape)
        return T.tsum(T.mul(out, w))

    return loss


SMOOTH_UNARY = {
    "tanh": (T.tanh, lambda r, s: r.normal(size=s)),
    "sigmoid": (T.sigmoid, lambda r, s: r.normal(size=s) * 3),
    "exp": (T.exp, lambda r, s: r.normal(size=s)),
    "log": (T.log, lambda r, s: r.uniform(0.2, 3.0, size=s)),
    "sin": (T.sin, lambda r, s: r.normal(size=s) * 2),
    "cos": (T.cos, lambda r, s: r.normal(size=s) * 2),
    "square": (T.square, lambda r, s: r.normal(size=s)),
    "neg": (T.neg, lambda r, s: r.normal(size=s)),
}


class TestValues:
    def test_matmul_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)

    def test_matmul_hand_computed(self):
        assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_matmul_shape_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_tanh_origin(self):
        assert T.tanh(0.0).data == 0.0

    def test_clamp01_saturates_with_zero_gradient(self):
        x = T.parameter(np.array([1.7, 0.4, -0.2]))
        with T.Tape():
            y = T.clamp01(x)
            T.backward(T.tsum(y))
        np.testing.assert_array_equal(y.data, [1.0, 0.4, 0.0])
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_log_domain(self):
        with pytest.raises(T.DomainError):
            T.log(np.array([1.0, 0.0]))

    def test_division_by_zero(self):
        with pytest.raises(T.DomainError):
            T.div(1.0, np.array([0.0]))

    def test_non_finite_rejected(self):
        with pytest.raises(T.NonFiniteError):
            Tensor([1.0, np.nan])
        with pytest.raises(T.NonFiniteError):
            T.exp(np.array([1000.0]))

    def test_broadcast_restricted(self):
        with pytest.raises(T.DimensionError):
            T.add(np.ones((2, 3)), np.ones(3))
        np.testing.assert_array_equal(T.add(np.ones((2, 3)), 2.0).data, np.full((2, 3), 3.0))
        np.testing.assert_array_equal(T.expand(np.arange(3.0), (2, 3)).data, [[0, 1, 2], [0, 1, 2]])

    def test_cross_entropy_uniform(self):
        loss = T.softmax_cross_entropy(np.zeros((4, 8)), [0, 3, 5, 7])
        assert abs(float(loss.data) - math.log(8)) < 1e-12

    def test_cross_entropy_saturated(self):
        logits = np.zeros((2, 5))
        logits[[0, 1], [2, 4]] = 1e6
        assert float(T.softmax_cross_entropy(logits, [2, 4]).data) <= 1e-6

    def test_cross_entropy_bad_label(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(np.zeros((2, 3)), [0, 3])

    def test_cross_entropy_gradient_formula(self):
        rng = _rng(0)
        z, y = rng.normal(size=(3, 5)), np.array([1, 0, 4])
        x = T.parameter(z)
        with T.Tape():
            T.backward(T.softmax_cross_entropy(x, y))
        expected = (T.softmax(z) - np.eye(5)[y]) / 3
        np.testing.assert_allclose(x.grad, expected, atol=1e-15)

    def test_bilinear_nodes(self):
        img = _rng(1).uniform(size=(4, 5, 3))
        rows, cols = np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij")
        out = T.bilinear_sample(img, np.stack([rows, cols], axis=-1))
        np.testing.assert_array_equal(out.data, img)

    def test_bilinear_centre_of_four(self):
        img = np.array([[0.0, 1.0], [2.0, 3.0]])[..., None]
        out = T.bilinear_sample(img, np.array([[[0.5, 0.5]]]))
        assert out.data.item() == 1.5

    def test_bilinear_out_of_bounds_is_zero(self):
        img = np.ones((3, 3, 2))
        out = T.bilinear_sample(img, np.array([[[-5.0, 1.0], [1.0, 7.0]]]))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_bilinear_matches_loop_oracle(self):
        rng = _rng(2)
        img = rng.uniform(size=(5, 6, 2))
        crd = rng.uniform(-2, 7, size=(6, 4, 2))
        h, w, _ = img.shape

        def texel(i, j):
            return img[i, j] if 0 <= i < h and 0 <= j < w else np.zeros(2)

        expected = np.zeros((6, 4, 2))
        for idx in np.ndindex(6, 4):
            r, q = crd[idx]
            r0, q0 = math.floor(r), math.floor(q)
            a, b = r - r0, q - q0
            expected[idx] = ((1 - a) * (1 - b) * texel(r0, q0) + (1 - a) * b * texel(r0, q0 + 1)
                             + a * (1 - b) * texel(r0 + 1, q0) + a * b * texel(r0 + 1, q0 + 1))
        np.testing.assert_allclose(T.bilinear_sample(img, crd).data, expected, atol=1e-14)

    def test_bilinear_owner_indexing(self):
        rng = _rng(3)
        imgs = rng.uniform(size=(2, 4, 4, 3))
        crd = rng.uniform(0, 3, size=(3, 2, 2, 2))
        owner = np.array([1, 0, 1])
        direct = T.bilinear_sample(imgs[owner], crd).data
        np.testing.assert_array_equal(T.bilinear_sample(imgs, crd, owner).data, direct)


class TestGradients:
    @pytest.mark.parametrize("name", sorted(SMOOTH_UNARY))
    def test_smooth_unary(self, name):
        fn, draw = SMOOTH_UNARY[name]
        for i in range(N_INSTANCES):
            x = draw(_rng(i), (4, 4))
            assert T.gradcheck(_weighted(fn), [x]) <= SMOOTH_TOL

    @pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
    def test_smooth_binary(self, name):
        fn = getattr(T, name)
        for i in range(N_INSTANCES):
            r = _rng(i)
            a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
            if name == "div":
                b = np.sign(b) * (np.abs(b) + 0.5)
            assert T.gradcheck(_weighted(fn), [a, b]) <= SMOOTH_TOL

    def test_scalar_broadcast(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            assert T.gradcheck(_weighted(T.mul), [r.normal(size=(3, 2)), r.normal(size=())]) <= SMOOTH_TOL

    def test_relu(self):
        for i in range(N_INSTANCES):
            x = _away_from(_rng(i).normal(size=(4, 4)), [0.0])
            assert T.gradcheck(_weighted(T.relu), [x]) <= KINKED_TOL

    def test_clamp01(self):
        for i in range(N_INSTANCES):
            x = _away_from(_rng(i).uniform(-0.5, 1.5, size=(4, 4)), [0.0, 1.0])
            assert T.gradcheck(_weighted(T.clamp01), [x]) <= KINKED_TOL

    def test_clip_and_where(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            x = _away_from(r.normal(size=(3, 3)), [-0.3, 0.4])
            mask = r.uniform(size=(3, 3)) < 0.5
            assert T.gradcheck(_weighted(lambda a: T.clip(a, -0.3, 0.4)), [x]) <= KINKED_TOL
            assert T.gradcheck(_weighted(lambda a, b: T.where(mask, a, b)), [x, r.normal(size=(3, 3))]) <= SMOOTH_TOL

    def test_matmul(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            assert T.gradcheck(_weighted(T.matmul), [r.normal(size=(5, 7)), r.normal(size=(7, 3))]) <= SMOOTH_TOL

    def test_reductions_and_shapes(self):
        for i in range(N_INSTANCES):
            x = _rng(i).normal(size=(3, 4))
            assert T.gradcheck(_weighted(lambda a: T.tsum(a, axis=1)), [x]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda a: T.mean(a, axis=0)), [x]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda a: T.reshape(a, (2, 6))), [x]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda a: T.expand(T.tsum(a, axis=0), (2, 4))), [x]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda a: a[[0, 2, 2], 1:3]), [x]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda a: T.scatter(a, [4, 0, 2], 5)), [x]) <= SMOOTH_TOL

    def test_concat_stack(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            a, b = r.normal(size=(2, 3)), r.normal(size=(2, 3))
            assert T.gradcheck(_weighted(lambda u, v: T.concat([u, v], axis=1)), [a, b]) <= SMOOTH_TOL
            assert T.gradcheck(_weighted(lambda u, v: T.stack([u, v], axis=-1)), [a, b]) <= SMOOTH_TOL

    def test_cross_entropy(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            labels = r.integers(0, 5, size=3)
            assert T.gradcheck(lambda z: T.softmax_cross_entropy(z, labels), [r.normal(size=(3, 5))]) <= SMOOTH_TOL

    def test_bilinear_image_and_coords(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            img = r.uniform(size=(4, 5, 2))
            crd = r.uniform(-1.5, 5.5, size=(3, 3, 2))
            crd = crd.copy()
            crd[..., 0] = _away_from(crd[..., 0], np.arange(-2, 7))
            crd[..., 1] = _away_from(crd[..., 1], np.arange(-2, 7))
            assert T.gradcheck(_weighted(T.bilinear_sample), [img, crd]) <= KINKED_TOL

    def test_bilinear_batched_owner(self):
        for i in range(N_INSTANCES):
            r = _rng(i)
            imgs = r.uniform(size=(2, 3, 3, 2))
            crd = r.uniform(0.05, 1.95, size=(3, 2, 2, 2))
            owner = np.array([1, 1, 0])
            assert T.gradcheck(_weighted(lambda a, b: T.bilinear_sample(a, b, owner)), [imgs, crd]) <= KINKED_TOL


class TestTape:
    def test_backward_requires_scalar(self):
        x = T.parameter(np.ones(3))
        with T.Tape():
            y = T.mul(x, 2.0)
            with pytest.raises(T.TapeError):
                T.backward(y)

    def test_tape_frozen_after_backward(self):
        x = T.parameter(np.ones(3))
        with T.Tape() as tape:
            loss = T.tsum(T.square(x))
            T.backward(loss)
            assert tape.frozen
            with pytest.raises(T.TapeError):
                T.backward(loss)

    def test_every_parameter_gets_grad(self):
        a, b = T.parameter(np.ones(2)), T.parameter(np.ones(2))
        with T.Tape():
            T.backward(T.tsum(T.mul(a, b)))
        assert a.grad is not None and b.grad is not None

    def test_linearity(self):
        r = _rng(5)
        xa = r.normal(size=(3, 3))

        def grad_of(build):
            x = T.parameter(xa)
            with T.Tape():
                T.backward(build(x))
            return x.grad

        f = lambda x: T.tsum(T.tanh(x))
        g = lambda x: T.tsum(T.square(T.sin(x)))
        np.testing.assert_allclose(grad_of(lambda x: T.add(f(x), g(x))), grad_of(f) + grad_of(g), atol=1e-14)

    def test_untaped_ops_record_nothing(self):
        x = T.parameter(np.ones(2))
        with T.Tape() as tape:
            with T.no_tape():
                T.tanh(x)
            T.tanh(np.ones(2))
        assert len(tape) == 0

    def test_foreign_tape_tensor_is_constant(self):
        x = T.parameter(np.full(2, 0.5))
        with T.Tape():
            carried = T.tanh(x)
        with T.Tape():
            loss = T.tsum(T.mul(carried, x))
            T.backward(loss)
        np.testing.assert_allclose(x.grad, np.tanh(0.5))

    def test_determinism(self):
        r = _rng(6)
        x = r.normal(size=(4, 4))
        a = T.tanh(T.matmul(x, x)).data
        b = T.tanh(T.matmul(x, x)).data
        assert a.tobytes() == b.tobytes()


class TestOptimizers:
    def test_sgd_single_step(self):
        p = T.parameter(np.zeros(1))
        T.optimizer_step([p], [np.ones(1)], T.SGD([p], 0.1))
        np.testing.assert_array_equal(p.data, [-0.1])

    def test_adam_zero_grad(self):
        p = T.parameter(np.array([1.25, -3.0]))
        T.optimizer_step([p], [np.zeros(2)], T.Adam([p], 0.1))
        np.testing.assert_array_equal(p.data, [1.25, -3.0])

    def test_adam_quadratic(self):
        w = T.parameter(np.zeros(1))
        opt = T.Adam([w], 0.05)
        for _ in range(500):
            w.zero_grad()
            with T.Tape():
                T.backward(T.tsum(T.square(T.sub(w, 3.0))))
            T.optimizer_step([w], [w.grad], opt)
        assert abs(w.data[0] - 3.0) <= 0.05

    def test_misaligned(self):
        p = T.parameter(np.zeros(1))
        with pytest.raises(T.DimensionError):
            T.optimizer_step([p], [], T.SGD([p], 0.1))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.floats(-10, 10))
def test_softmax_shift_invariance(z, c):
    np.testing.assert_allclose(T.softmax(z + c), T.softmax(z), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5,), elements=st.floats(-3, 3)))
def test_clamp01_range(x):
    y = T.clamp01(x).data
    assert np.all((0 <= y) & (y <= 1))
