import math

import numpy as np
import pytest

from mfdistill import autodiff as ad
from mfdistill.binio import FormatError
from mfdistill.gradcheck import check_gradient, primitive_checks


class TestForwardValues:
    def test_softmax_symmetry(self):
        out = ad.softmax(ad.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = ad.softmax(ad.Tensor(rng.normal(size=(7, 9)) * 10), axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)

    def test_smooth_l1_quadratic_branch(self):
        v = ad.smooth_l1(ad.Tensor([0.5]), ad.Tensor([0.0]), beta=1.0)
        assert v.data[0] == pytest.approx(0.125)

    def test_smooth_l1_linear_branch(self):
        v = ad.smooth_l1(ad.Tensor([2.0]), ad.Tensor([0.0]), beta=1.0)
        assert v.data[0] == pytest.approx(1.5)

    def test_conv2d_matches_naive_loops(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        for stride in (1, 2):
            got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b), stride=stride).data
            pad = 1
            xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
            h_out = (5 + 2 * pad - 3) // stride + 1
            ref = np.zeros((3, h_out, h_out))
            for co in range(3):
                for y in range(h_out):
                    for xx in range(h_out):
                        acc = b[co]
                        for ci in range(2):
                            for ky in range(3):
                                for kx in range(3):
                                    acc += w[co, ci, ky, kx] * xp[ci, stride * y + ky, stride * xx + kx]
                        ref[co, y, xx] = acc
            np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)

    def test_deconv_doubles_spatial(self):
        x = ad.Tensor(np.random.default_rng(0).normal(size=(2, 4, 4)))
        w = ad.Tensor(np.random.default_rng(1).normal(size=(2, 3, 3, 3)))
        out = ad.deconv2d(x, w)
        assert out.shape == (3, 8, 8)

    def test_shape_errors_are_structured(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((2, 3))))
        with pytest.raises(ad.ShapeError, match="conv2d"):
            ad.conv2d(ad.Tensor(np.zeros((2, 4, 4))), ad.Tensor(np.zeros((3, 5, 3, 3))))


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.parameter(np.arange(6.0).reshape(2, 3))
        ad.backward(ad.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_mse_self_is_zero_grad(self):
        x = ad.parameter(np.arange(4.0))
        ad.backward(ad.mse_loss(x, x))
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        x = ad.parameter(np.zeros(3))
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(x + x)

    def test_double_backward_rejected(self):
        x = ad.parameter(np.ones(3))
        loss = ad.sum_(x * x)
        ad.backward(loss)
        with pytest.raises(ad.AutodiffError, match="already ran"):
            ad.backward(loss)

    def test_gradient_accumulates_over_reuse(self):
        x = ad.parameter(np.array([2.0]))
        y = x * x  # used twice below
        loss = ad.sum_(y + y)
        ad.backward(loss)
        assert x.grad[0] == pytest.approx(8.0)

    def test_frozen_inputs_record_no_edges(self):
        x = ad.Tensor(np.ones((2, 2)))  # requires_grad False
        out = ad.relu(x * x)
        assert out._edges == ()
        assert not out.requires_grad

    def test_composite_attention_like_graph(self):
        rng = np.random.default_rng(5)
        f = ad.parameter(rng.normal(size=(4, 6)))
        wq = ad.parameter(rng.normal(size=(6, 3)) * 0.5)
        wk = ad.parameter(rng.normal(size=(6, 3)) * 0.5)
        wv = ad.parameter(rng.normal(size=(6, 6)) * 0.5)

        def loss():
            q = ad.matmul(f, wq)
            k = ad.matmul(f, wk)
            v = ad.matmul(f, wv)
            att = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1 / math.sqrt(3)), axis=1)
            o = ad.add(ad.matmul(att, v), f)
            return ad.mse_loss(o, ad.Tensor(np.ones((4, 6))))

        res = check_gradient("attention_ffn", loss, [f, wq, wk, wv])
        assert res.passed, res


def test_all_primitive_gradients():
    results = primitive_checks(seed=1)
    bad = [r for r in results if not r.passed]
    assert not bad, f"failed: {bad}"


class TestOptimizer:
    def test_cosine_endpoints(self):
        assert ad.cosine_lr(0, 100, 0.5) == pytest.approx(0.5)
        assert ad.cosine_lr(100, 100, 0.5) == pytest.approx(0.0, abs=1e-12)
        assert ad.cosine_lr(50, 100, 0.5) == pytest.approx(0.25)

    def test_sgd_momentum(self):
        p = ad.parameter(np.array([1.0]))
        vel = ad.sgd_step([p], [np.array([1.0])], lr=0.1, momentum=0.9)
        assert p.data[0] == pytest.approx(0.9)
        ad.sgd_step([p], [np.array([1.0])], lr=0.1, momentum=0.9, velocities=vel)
        # velocity = 0.9*1 + 1 = 1.9 -> p = 0.9 - 0.19
        assert p.data[0] == pytest.approx(0.71)

    def test_sgd_class_matches_functional(self):
        p1 = ad.parameter(np.array([1.0, 2.0]))
        p2 = ad.parameter(np.array([1.0, 2.0]))
        opt = ad.SGD({"p": p1}, momentum=0.9)
        vel = None
        for i in range(3):
            g = np.array([0.5, -1.0]) * (i + 1)
            p1.grad = g.copy()
            opt.step(0.05)
            vel = ad.sgd_step([p2], [g], 0.05, 0.9, vel)
        np.testing.assert_allclose(p1.data, p2.data, atol=1e-15)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        params = {
            "enc.w0": ad.parameter(rng.normal(size=(4, 5))),
            "enc.b0": ad.parameter(rng.normal(size=5)),
            "scalarish": ad.parameter(rng.normal(size=(1,))),
        }
        path = tmp_path / "model.smfw"
        ad.save_checkpoint(path, params)
        loaded = ad.load_checkpoint(path)
        assert set(loaded) == set(params)
        for k in params:
            np.testing.assert_array_equal(loaded[k], params[k].data)

    def test_round_trip_bytes_stable(self, tmp_path):
        params = {"w": ad.parameter(np.arange(6.0).reshape(2, 3))}
        p1, p2 = tmp_path / "a.smfw", tmp_path / "b.smfw"
        ad.save_checkpoint(p1, params)
        ad.save_checkpoint(p2, ad.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncation_always_structured(self, tmp_path):
        params = {"w": ad.parameter(np.arange(6.0).reshape(2, 3)),
                  "b": ad.parameter(np.zeros(2))}
        path = tmp_path / "model.smfw"
        ad.save_checkpoint(path, params)
        blob = path.read_bytes()
        for cut in range(len(blob)):
            trunc = tmp_path / "trunc.smfw"
            trunc.write_bytes(blob[:cut])
            with pytest.raises(FormatError):
                ad.load_checkpoint(trunc)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.smfw"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            ad.load_checkpoint(path)
