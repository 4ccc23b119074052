"""Tape engine checks: op-level finite differences, determinism, constants."""

import numpy as np
import pytest

from panocc import autodiff as ad


def _leafs(tape, *arrays):
    return [tape.leaf(a, requires_grad=True) for a in arrays]


class TestBasics:
    def test_identity_grad_is_one(self):
        tape = ad.Tape()
        x = tape.leaf(np.array(3.0), requires_grad=True)
        ad.backward(tape, ad.mul(x, 1.0))
        np.testing.assert_allclose(x.grad, 1.0)

    def test_sum_of_squares(self):
        tape = ad.Tape()
        xv = np.array([1.0, -2.0, 3.0])
        x = tape.leaf(xv, requires_grad=True)
        loss = ad.sum(x * x)
        ad.backward(tape, loss)
        np.testing.assert_allclose(x.grad, 2 * xv)

    def test_constant_leaf_gets_no_grad(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3), requires_grad=True)
        c = tape.leaf(np.full(3, 2.0), requires_grad=False)
        ad.backward(tape, ad.sum(x * c))
        np.testing.assert_allclose(x.grad, 2.0)
        assert c.grad is None

    def test_ndarray_operand_stays_constant(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(4), requires_grad=True)
        y = np.arange(4.0) * x  # ndarray.__mul__ defers to Variable.__rmul__
        assert isinstance(y, ad.Variable)
        ad.backward(tape, ad.sum(y))
        np.testing.assert_allclose(x.grad, np.arange(4.0))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.leaf(np.ones(3), requires_grad=True)
        with pytest.raises(ad.AutodiffError):
            ad.backward(tape, x * 2.0)

    def test_detached_loss_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        x = t1.leaf(np.array(1.0), requires_grad=True)
        loss = x * 2.0
        with pytest.raises(ad.AutodiffError):
            ad.backward(t2, loss)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(7)
            tape = ad.Tape()
            x = tape.leaf(rng.normal(size=(5, 5)), requires_grad=True)
            w = tape.leaf(rng.normal(size=(5, 3)), requires_grad=True)
            loss = ad.sum(ad.tanh(ad.matmul(x, w)))
            ad.backward(tape, loss)
            return x.grad.copy(), w.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


class TestGradCheckPerOp:
    """Every registered op passes the central-difference check on random
    small shapes."""

    def test_linear_fn_tight(self):
        a = np.random.default_rng(0).normal(size=(4, 3))
        err = ad.grad_check(lambda x: ad.sum(x * 3.0 + 1.0), [a])
        assert err < 1e-10

    @pytest.mark.parametrize("name,fn", [
        ("add", lambda x, y: ad.sum(ad.add(x, y) ** 2)),
        ("sub", lambda x, y: ad.sum(ad.sub(x, y) ** 2)),
        ("mul", lambda x, y: ad.sum(ad.mul(x, y))),
        ("div", lambda x, y: ad.sum(ad.div(x, ad.add(y * y, 1.0)))),
        ("matmul", lambda x, y: ad.sum(ad.matmul(x, ad.moveaxis(y, 0, 1)))),
    ])
    def test_binary_ops(self, name, fn):
        rng = np.random.default_rng(hash(name) % 2**31)
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(3, 4))
        assert ad.grad_check(fn, [x, y]) < 1e-4

    @pytest.mark.parametrize("name,fn", [
        ("exp", lambda x: ad.sum(ad.exp(x))),
        ("log", lambda x: ad.sum(ad.log(ad.add(ad.mul(x, x), 1.0)))),
        ("sqrt", lambda x: ad.sum(ad.sqrt(ad.add(ad.mul(x, x), 0.5)))),
        ("tanh", lambda x: ad.sum(ad.tanh(x))),
        ("sigmoid", lambda x: ad.sum(ad.sigmoid(x))),
        ("elu", lambda x: ad.sum(ad.elu(x))),
        ("power", lambda x: ad.sum(ad.power(ad.add(ad.mul(x, x), 1.0), 1.5))),
        ("softmax", lambda x: ad.sum(ad.mul(ad.softmax(x, axis=-1), np.arange(4.0)))),
        ("reduce0", lambda x: ad.sum(ad.sum(x, axis=0) ** 2)),
        ("mean", lambda x: ad.sum(ad.mean(x, axis=1) ** 2)),
        ("reshape", lambda x: ad.sum(ad.reshape(x, (12,)) ** 2)),
        ("moveaxis", lambda x: ad.sum(ad.moveaxis(x, 0, 1) ** 2)),
        ("pad", lambda x: ad.sum(ad.pad(x, ((1, 2), (0, 1))) ** 2)),
        ("getitem", lambda x: ad.sum(x[1:, :2] ** 2)),
    ])
    def test_unary_ops(self, name, fn):
        rng = np.random.default_rng(abs(hash(name)) % 2**31)
        x = rng.normal(size=(3, 4))
        assert ad.grad_check(fn, [x]) < 1e-4

    def test_broadcasting_grad(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=(4,))
        assert ad.grad_check(lambda a, c: ad.sum((a + c) * (a * c)), [x, b]) < 1e-4

    def test_take_with_repeated_indices(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 5))
        idx = np.array([0, 3, 3, 1, 0, 3])
        assert ad.grad_check(lambda a: ad.sum(ad.take(a, idx, axis=1) ** 2), [x]) < 1e-4

    def test_concatenate(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3))
        y = rng.normal(size=(2, 2))
        assert ad.grad_check(
            lambda a, b: ad.sum(ad.concatenate([a, b], axis=1) ** 2), [x, y]) < 1e-4

    def test_batched_matmul(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 4))
        y = rng.normal(size=(2, 4, 3))
        assert ad.grad_check(lambda a, b: ad.sum(ad.matmul(a, b)), [x, y]) < 1e-4

    def test_softmax_cross_entropy(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(5, 3))
        onehot = np.eye(3)[rng.integers(0, 3, size=5)]

        def fn(z):
            p = ad.softmax(z, axis=-1)
            return ad.mean(ad.sum(-onehot * ad.log(p + 1e-12), axis=-1))

        assert ad.grad_check(fn, [logits]) < 1e-6


class TestConv3d:
    @pytest.mark.parametrize("stride,dilation,padding", [
        (1, 1, 0), (1, 1, 1), (2, 1, 1), (1, 2, 2), ((2, 1, 1), 1, (1, 0, 1)),
    ])
    def test_grad(self, stride, dilation, padding):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 2, 5, 4, 3))
        w = rng.normal(size=(3, 2, 3, 3, 3)) * 0.3
        b = rng.normal(size=(3,))

        def fn(xx, ww, bb):
            return ad.sum(ad.conv3d(xx, ww, bb, stride=stride,
                                    dilation=dilation, padding=padding) ** 2)

        assert ad.grad_check(fn, [x, w, b], sample=12) < 1e-4

    def test_identity_kernel(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(1, 3, 4, 4, 2))
        w = np.zeros((3, 3, 1, 1, 1))
        w[np.arange(3), np.arange(3), 0, 0, 0] = 1.0
        out = ad.conv3d(x, w)
        np.testing.assert_allclose(out, x)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 2, 4, 4, 3))
        w = rng.normal(size=(2, 2, 3, 3, 3))
        out = ad.conv3d(x, w, padding=1)
        # dumb quadruple loop oracle
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
        expect = np.zeros_like(out)
        for o in range(2):
            for i in range(4):
                for j in range(4):
                    for k in range(3):
                        patch = xp[0, :, i:i + 3, j:j + 3, k:k + 3]
                        expect[0, o, i, j, k] = np.sum(patch * w[o])
        np.testing.assert_allclose(out, expect, atol=1e-12)
