import gc
import math
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triflow import tensors as T
from triflow.tensors import ShapeError, Tensor, UnsupportedError


def loop_conv(x, k, stride, pad):
    """Nested-loop cross-correlation reference."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad : pad + h, pad : pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + b] * k[oc, ci, a, b]
                out[oc, i, j] = acc
    return out


def numeric_grad(f, x, eps=1e-3):
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f()
        x[idx] = orig - eps
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((3, 5, 7)).astype(np.float32)
        k = np.zeros((3, 3, 1, 1), np.float32)
        for c in range(3):
            k[c, c] = 1
        out = T.conv2d(Tensor(x), Tensor(k))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_on_constant(self):
        out = T.conv2d(Tensor(np.full((1, 6, 6), 2.5)), Tensor(np.ones((1, 1, 3, 3))))
        assert out.shape == (1, 4, 4)
        np.testing.assert_allclose(out.data, 22.5, rtol=1e-6)

    def test_strided_padded_matches_loop(self, rng):
        x = rng.standard_normal((2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out = T.conv2d(Tensor(x), Tensor(k), stride=2, padding=1)
        assert out.shape == (3, 3, 3)
        np.testing.assert_allclose(out.data, loop_conv(x, k, 2, 1), rtol=1e-5, atol=1e-5)

    @pytest.mark.parametrize("shape,k,stride,pad", [((1, 4, 6), 2, 1, 0), ((2, 7, 5), 3, 3, 2), ((3, 8, 8), 7, 2, 3)])
    def test_output_size_formula(self, rng, shape, k, stride, pad):
        x = Tensor(rng.standard_normal(shape))
        kern = Tensor(rng.standard_normal((4, shape[0], k, k)))
        out = T.conv2d(x, kern, stride=stride, padding=pad)
        expect = [(n + 2 * pad - k) // stride + 1 for n in shape[1:]]
        assert list(out.shape[1:]) == expect

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_bad_stride(self):
        with pytest.raises(UnsupportedError):
            T.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 3, 9, 9))
        k = Tensor(rng.standard_normal((4, 3, 3, 3)))
        a, b = 1.7, -0.6
        lhs = T.conv2d(Tensor(a * x + b * y), k, padding=1).data
        rhs = a * T.conv2d(Tensor(x), k, padding=1).data + b * T.conv2d(Tensor(y), k, padding=1).data
        assert np.abs(lhs - rhs).max() / np.abs(rhs).max() < 1e-5

    def test_gradients(self, rng):
        with T.precision(np.float64):
            x = Tensor(rng.standard_normal((2, 5, 6)), requires_grad=True)
            k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
            b = Tensor(rng.standard_normal(3), requires_grad=True)
            proj = rng.standard_normal((3, 3, 3))

            def f():
                return float((T.conv2d(x, k, b, stride=2, padding=1).data * proj).sum())

            out = T.conv2d(x, k, b, stride=2, padding=1)
            T.sum(T.mul(out, proj)).backward()
            for p in (x, k, b):
                np.testing.assert_allclose(p.grad, numeric_grad(f, p.data, 1e-6), rtol=1e-6, atol=1e-8)


class TestAvgPool:
    def test_constant(self):
        out = T.avg_pool2d(Tensor(np.full((2, 6, 4), 3.0)))
        assert out.shape == (2, 3, 2)
        assert np.all(out.data == 3.0)

    def test_block_mean(self):
        assert T.avg_pool2d(Tensor([[1.0, 2.0], [3.0, 4.0]])).data.item() == 2.5

    def test_odd_replicates_edge(self):
        x = np.arange(9, dtype=np.float64).reshape(3, 3)
        out = T.avg_pool2d(Tensor(x)).data
        xp = np.pad(x, ((0, 1), (0, 1)), mode="edge")
        ref = np.array([[xp[i : i + 2, j : j + 2].mean() for j in (0, 2)] for i in (0, 2)])
        np.testing.assert_allclose(out, ref, rtol=1e-7)

    def test_commutes_with_scalar(self, rng):
        x = rng.standard_normal((3, 5, 7)).astype(np.float32)
        a = np.float32(4.0)
        assert np.array_equal(T.avg_pool2d(Tensor(x * a)).data, T.avg_pool2d(Tensor(x)).data * a)

    def test_window_other_than_two(self):
        with pytest.raises(UnsupportedError):
            T.avg_pool2d(Tensor(np.zeros((4, 4))), window=3)

    def test_gradient_odd(self, rng):
        with T.precision(np.float64):
            x = Tensor(rng.standard_normal((2, 3, 5)), requires_grad=True)
            proj = rng.standard_normal((2, 2, 3))
            T.sum(T.mul(T.avg_pool2d(x), proj)).backward()
            f = lambda: float((T.avg_pool2d(Tensor(x.data)).data * proj).sum())  # noqa: E731
            np.testing.assert_allclose(x.grad, numeric_grad(f, x.data, 1e-6), atol=1e-8)


class TestBilinear:
    def test_integer_coords_exact(self, rng):
        x = rng.standard_normal((2, 4, 5)).astype(np.float32)
        ys, xs = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
        coords = Tensor(np.stack([xs, ys]).astype(np.float32))
        assert np.array_equal(T.bilinear_sample(Tensor(x), coords).data, x)

    def test_midpoint(self):
        x = Tensor(np.array([[[2.0, 6.0]]]))
        out = T.bilinear_sample(x, Tensor(np.array([[[0.5]], [[0.0]]])))
        assert out.data.item() == 4.0

    def test_outside_is_zero(self):
        x = Tensor(np.ones((1, 3, 3)))
        out = T.bilinear_sample(x, Tensor(np.array([[[-2.5]], [[0.0]]])))
        assert out.data.item() == 0.0

    def test_partial_outside_blends_with_zero(self):
        x = Tensor(np.full((1, 2, 2), 8.0))
        out = T.bilinear_sample(x, Tensor(np.array([[[-0.25]], [[0.0]]])))
        assert out.data.item() == pytest.approx(6.0)

    def test_gradients(self, rng):
        with T.precision(np.float64):
            vol = Tensor(rng.standard_normal((3, 4, 5)), requires_grad=True)
            pts = Tensor(rng.uniform(-1.5, 5.5, size=(3, 6, 2)), requires_grad=True)
            proj = rng.standard_normal((3, 6))
            T.sum(T.mul(T.sample_rows(vol, pts), proj)).backward()
            f = lambda: float((T.sample_rows(Tensor(vol.data), Tensor(pts.data)).data * proj).sum())  # noqa: E731
            np.testing.assert_allclose(vol.grad, numeric_grad(f, vol.data, 1e-6), atol=1e-7)
            np.testing.assert_allclose(pts.grad, numeric_grad(f, pts.data, 1e-6), atol=1e-5)


class TestSoftmax:
    def test_uniform(self):
        out = T.softmax(Tensor(np.zeros(7)), axis=0)
        np.testing.assert_allclose(out.data, 1 / 7, rtol=1e-6)

    def test_shift_invariance(self, rng):
        # quantised logits so that adding the shift is exact in float32
        x = (np.round(rng.standard_normal((4, 6)) * 1024) / 1024).astype(np.float32)
        a = T.softmax(Tensor(x), axis=0).data
        b = T.softmax(Tensor(x + np.float32(64.0)), axis=0).data
        assert np.abs(a - b).max() < 1e-6
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-6)

    def test_high_precision_oracle(self):
        with T.precision(np.float64):
            out = T.softmax(Tensor([0.0, 10.0]), axis=0).data
        mpmath.mp.dps = 40
        ref = [mpmath.mpf(1) / (1 + mpmath.e**10), mpmath.e**10 / (1 + mpmath.e**10)]
        for a, b in zip(out, ref):
            assert abs(a - float(b)) < 1e-9

    def test_large_logits_stay_finite(self):
        out = T.softmax(Tensor([1e4, 0.0, -1e4]), axis=0)
        assert T.is_finite(out)


class TestActivations:
    def test_ranges(self, rng):
        x = Tensor(rng.standard_normal(100) * 50)
        assert np.all(T.relu(x).data >= 0)
        s = T.sigmoid(x).data
        assert np.all((s >= 0) & (s <= 1))
        t = T.tanh(x).data
        assert np.all(np.abs(t) <= 1)

    def test_sigmoid_extremes_finite(self):
        assert T.is_finite(T.sigmoid(Tensor([-1e4, 1e4])))


class TestTape:
    def test_shared_subexpression_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.mul(x, x)
        T.add(y, x).backward()
        assert x.grad.item() == pytest.approx(7.0)

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, 2.0)
        assert y._backward is None

    def test_fancy_getitem_gradient(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        T.sum(T.getitem(x, np.array([0, 0, 3]))).backward()
        assert x.grad.tolist() == [2.0, 0.0, 0.0, 1.0]

    @pytest.mark.parametrize("axis", [0, 1])
    def test_concat_split_roundtrip(self, rng, axis):
        a, b = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))
        c = T.concat([a, b], axis=axis)
        x, y = T.split(c, [a.shape[axis], b.shape[axis]], axis=axis)
        assert np.array_equal(x.data, a.data) and np.array_equal(y.data, b.data)

    def test_unfold_gradient(self, rng):
        with T.precision(np.float64):
            x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
            proj = rng.standard_normal((2, 9, 3, 4))
            T.sum(T.mul(T.unfold3x3(x), proj)).backward()
            f = lambda: float((T.unfold3x3(Tensor(x.data)).data * proj).sum())  # noqa: E731
            np.testing.assert_allclose(x.grad, numeric_grad(f, x.data, 1e-6), atol=1e-7)


class TestThreadState:
    def test_interleaved_no_grad_does_not_leak(self):
        # A enters, B enters, A exits, B exits: a shared flag would end up disabled
        b_in, a_out = threading.Event(), threading.Event()

        def a():
            with T.no_grad():
                b_in.wait()
            a_out.set()

        def b():
            with T.no_grad():
                b_in.set()
                a_out.wait()

        threads = [threading.Thread(target=f) for f in (a, b)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        x = Tensor(np.ones(2), requires_grad=True)
        assert T.mul(x, 2.0).requires_grad

    def test_precision_is_per_thread(self):
        seen = []
        inside, done = threading.Event(), threading.Event()

        def worker():
            with T.precision(np.float64):
                inside.set()
                done.wait()

        t = threading.Thread(target=worker)
        t.start()
        inside.wait()
        seen.append(T.compute_dtype())
        done.set()
        t.join()
        assert seen == [np.float32]


class TestAllocationCounter:
    def test_tagged_live_bytes(self):
        before = T.ALLOC.live_by_tag["test-tag"]
        t = Tensor(np.zeros((10, 10)), tag="test-tag")
        assert T.ALLOC.live_by_tag["test-tag"] - before == 400
        del t
        gc.collect()
        assert T.ALLOC.live_by_tag["test-tag"] == before

    def test_peak_tracks_maximum(self):
        T.ALLOC.reset_peak()
        base = T.ALLOC.live
        a = Tensor(np.zeros(1000))
        del a
        gc.collect()
        assert T.ALLOC.peak - base >= 4000
        assert T.ALLOC.live == base


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), c=st.floats(-100, 100, allow_nan=False))
def test_pool_constant_property(h, w, c):
    out = T.avg_pool2d(Tensor(np.full((h, w), c)))
    assert out.shape == (math.ceil(h / 2), math.ceil(w / 2))
    np.testing.assert_allclose(out.data, np.float32(c), rtol=1e-6)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), shift=st.floats(-50, 50, allow_nan=False), seed=st.integers(0, 2**16))
def test_softmax_sums_to_one(n, shift, seed):
    x = np.random.default_rng(seed).standard_normal(n) + shift
    out = T.softmax(Tensor(x), axis=0).data
    assert abs(out.sum() - 1) < 1e-6
