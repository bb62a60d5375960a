"""Autodiff engine tests: forward oracles, gradient checks, optimizer math."""

import math

import numpy as np
import pytest

import scalcodec.tensor as T
from scalcodec.errors import ContractError


# ---------------------------------------------------------------------------
# independent oracles (no im2col, no scipy)


def conv_oracle(x, kernel, bias, stride, padding, mask=None):
    k = kernel if mask is None else kernel * mask
    n, ci, h, w = x.shape
    co, _, ks, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - ks) // stride + 1
    ow = (w + 2 * padding - ks) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride : i * stride + ks,
                               j * stride : j * stride + ks]
                    out[b, o, i, j] = np.sum(patch.astype(np.float64) * k[o]) + bias[o]
    return out


def tconv_oracle(x, kernel, bias, stride, padding):
    n, ci, h, w = x.shape
    co, _, ks, _ = kernel.shape
    oh, ow = h * stride, w * stride
    buf = np.zeros((n, co, oh + 2 * padding, ow + 2 * padding), dtype=np.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                for o in range(co):
                    contrib = np.sum(
                        kernel[o].astype(np.float64) * x[b, :, i, j, None, None], axis=0
                    )
                    buf[b, o, i * stride : i * stride + ks,
                        j * stride : j * stride + ks] += contrib
    out = buf[:, :, padding : padding + oh, padding : padding + ow]
    return out + bias[None, :, None, None]


def phi(x):
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def make_spec(kernel, bias, stride, padding, mask=None, requires_grad=True):
    kp = T.Array4(kernel, requires_grad=requires_grad)
    bp = T.Array4(bias.reshape(1, -1, 1, 1), requires_grad=requires_grad)
    return T.ConvSpec(kernel=kp, bias=bp, stride=stride, padding=padding, mask=mask)


def fd_grad(loss_fn, leaf, indices, step=1e-3):
    """Central finite difference using the step actually realized in float32."""
    grads = []
    flat = leaf.data.reshape(-1)
    for idx in indices:
        orig = flat[idx]
        flat[idx] = np.float32(orig + step)
        hi_x = float(flat[idx])
        hi = loss_fn()
        flat[idx] = np.float32(orig - step)
        lo_x = float(flat[idx])
        lo = loss_fn()
        flat[idx] = orig
        grads.append((hi - lo) / (hi_x - lo_x))
    return np.array(grads)


def check_grads(build_loss, leaves, rng, samples=6, rtol=1e-2, atol=2e-4):
    loss = build_loss()
    loss.backward()
    analytic = {id(l): l.grad.copy() for l in leaves}
    for leaf in leaves:
        n = leaf.data.size
        idx = rng.choice(n, size=min(samples, n), replace=False)
        fd = fd_grad(lambda: build_loss().item(), leaf, idx)
        got = analytic[id(leaf)].reshape(-1)[idx]
        np.testing.assert_allclose(got, fd, rtol=rtol, atol=atol)


# ---------------------------------------------------------------------------
# forward semantics


class TestConvForward:
    def test_ones_kernel_ramp(self):
        # 3x3 ramp, all-ones 3x3 kernel, stride 1, pad 1: hand-computed sums
        x = T.Array4(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
        spec = make_spec(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32), 1, 1)
        out = T.conv2d(x, spec)
        expect = np.array([[12, 21, 16], [27, 45, 33], [24, 39, 28]], np.float32)
        np.testing.assert_array_equal(out.data[0, 0], expect)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
        kern = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        bias = rng.standard_normal(4).astype(np.float32)
        spec = make_spec(kern, bias, stride=2, padding=1)
        out = T.conv2d(T.Array4(x), spec)
        oracle = conv_oracle(x, kern, bias, 2, 1)
        np.testing.assert_allclose(out.data, oracle, rtol=1e-5, atol=1e-5)

    def test_masked_taps_do_not_contribute(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        kern = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        bias = np.zeros(2, np.float32)
        mask = (rng.random((2, 2, 3, 3)) > 0.5).astype(np.float32)
        spec = make_spec(kern, bias, 1, 1, mask=mask)
        out = T.conv2d(T.Array4(x), spec)
        oracle = conv_oracle(x, kern, bias, 1, 1, mask=mask)
        np.testing.assert_allclose(out.data, oracle, rtol=1e-5, atol=1e-5)

    def test_rejects_channel_mismatch(self):
        spec = make_spec(np.ones((1, 2, 3, 3), np.float32), np.zeros(1, np.float32), 1, 1)
        with pytest.raises(ContractError):
            T.conv2d(T.Array4(np.zeros((1, 3, 4, 4), np.float32)), spec)

    def test_rejects_non_tiling_stride(self):
        spec = make_spec(np.ones((1, 1, 4, 4), np.float32), np.zeros(1, np.float32), 2, 1)
        with pytest.raises(ContractError):
            T.conv2d(T.Array4(np.zeros((1, 1, 5, 5), np.float32)), spec)


class TestTransposedConvForward:
    def test_ones_upsample(self):
        # 2x2 ones through an all-ones 4x4 kernel at stride 2, pad 1:
        # overlap counts give [[1,2,2,1],[2,4,4,2],[2,4,4,2],[1,2,2,1]]
        x = T.Array4(np.ones((1, 1, 2, 2), np.float32))
        spec = make_spec(np.ones((1, 1, 4, 4), np.float32), np.zeros(1, np.float32), 2, 1)
        out = T.conv2d_transpose(x, spec)
        expect = np.array(
            [[1, 2, 2, 1], [2, 4, 4, 2], [2, 4, 4, 2], [1, 2, 2, 1]], np.float32
        )
        np.testing.assert_array_equal(out.data[0, 0], expect)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
        kern = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        bias = rng.standard_normal(2).astype(np.float32)
        spec = make_spec(kern, bias, stride=2, padding=1)
        out = T.conv2d_transpose(T.Array4(x), spec)
        oracle = tconv_oracle(x, kern, bias, 2, 1)
        np.testing.assert_allclose(out.data, oracle, rtol=1e-5, atol=1e-5)
        assert out.data.shape == (2, 2, 8, 10)

    def test_rejects_bad_geometry(self):
        spec = make_spec(np.ones((1, 1, 4, 4), np.float32), np.zeros(1, np.float32), 2, 0)
        with pytest.raises(ContractError):
            T.conv2d_transpose(T.Array4(np.zeros((1, 1, 2, 2), np.float32)), spec)


class TestElementwiseForward:
    def test_leaky_relu_values(self):
        x = T.Array4(np.array([-2.0, -0.5, 0.0, 3.0], np.float32).reshape(1, 1, 1, 4))
        out = T.leaky_relu(x)
        np.testing.assert_allclose(
            out.data.reshape(-1), [-0.02, -0.005, 0.0, 3.0], rtol=1e-6
        )

    def test_softplus_at_zero_is_ln2(self):
        x = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        assert T.softplus(x).item() == pytest.approx(math.log(2.0), rel=1e-6)

    def test_clamp_min(self):
        x = T.Array4(np.array([0.05, 0.2], np.float32).reshape(1, 1, 1, 2))
        out = T.clamp_min(x, 0.11)
        np.testing.assert_allclose(out.data.reshape(-1), [0.11, 0.2], rtol=1e-6)

    def test_gather_and_concat_roundtrip(self):
        rng = np.random.default_rng(0)
        x = T.Array4(rng.standard_normal((2, 6, 3, 3)).astype(np.float32))
        a = T.gather_channels(x, [0, 2, 4])
        b = T.gather_channels(x, [1, 3, 5])
        back = T.concat_channels([a, b])
        perm = x.data[:, [0, 2, 4, 1, 3, 5]]
        np.testing.assert_array_equal(back.data, perm)


class TestGaussianBits:
    def test_unit_interval_around_mean(self):
        # frozen oracle: -log2(phi(0.5) - phi(-0.5)) via math.erf
        expect = -math.log2(phi(0.5) - phi(-0.5))
        y = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        m = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        s = T.Array4(np.ones((1, 1, 1, 1), np.float32))
        got = T.gaussian_interval_bits(y, m, s).item()
        assert got == pytest.approx(expect, abs=1e-6)
        assert got == pytest.approx(1.3849425, abs=1e-3)

    def test_scale_floor_costs_microbits(self):
        expect = -math.log2(phi(0.5 / 0.11) - phi(-0.5 / 0.11))
        y = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        m = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        s = T.Array4(np.full((1, 1, 1, 1), 0.11, np.float32))
        got = T.gaussian_interval_bits(y, m, s).item()
        assert got == pytest.approx(expect, rel=1e-4)
        assert got < 1e-5

    def test_probability_floor_caps_bits(self):
        # value far in the tail: floored probability 2^-16 gives exactly 16 bits
        y = T.Array4(np.full((1, 1, 1, 1), 50.0, np.float32))
        m = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        s = T.Array4(np.full((1, 1, 1, 1), 0.2, np.float32))
        assert T.gaussian_interval_bits(y, m, s).item() == pytest.approx(16.0)

    def test_rejects_nonpositive_scale(self):
        z = T.Array4(np.zeros((1, 1, 1, 1), np.float32))
        with pytest.raises(ContractError):
            T.gaussian_interval_bits(z, z, z)


class TestLossForward:
    def test_rmse_known_value(self):
        a = T.Array4(np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(1, 1, 2, 2))
        b = T.Array4(np.zeros((1, 1, 2, 2), np.float32))
        expect = math.sqrt((1 + 4 + 9 + 16) / 4)
        assert T.rmse_loss(a, b).item() == pytest.approx(expect, rel=1e-6)

    def test_cross_entropy_uniform_logits(self):
        logits = T.Array4(np.zeros((1, 5, 2, 2), np.float32))
        targets = np.zeros((1, 2, 2), np.int64)
        assert T.cross_entropy_loss(logits, targets).item() == pytest.approx(
            math.log(5.0), rel=1e-6
        )

    def test_cross_entropy_rejects_bad_labels(self):
        logits = T.Array4(np.zeros((1, 3, 1, 1), np.float32))
        with pytest.raises(ContractError):
            T.cross_entropy_loss(logits, np.array([[[3]]]))


# ---------------------------------------------------------------------------
# gradients


class TestGradients:
    def setup_method(self):
        self.rng = np.random.default_rng(20)

    def _weight(self, shape):
        return T.Array4(self.rng.standard_normal(shape).astype(np.float32))

    def test_conv_gradients(self):
        rng = self.rng
        x = T.Array4(rng.standard_normal((1, 2, 7, 7)).astype(np.float32) * 0.5,
                     requires_grad=True)
        spec = make_spec(
            rng.standard_normal((3, 2, 3, 3)).astype(np.float32) * 0.3,
            rng.standard_normal(3).astype(np.float32) * 0.1,
            stride=2, padding=1,
        )
        w = self._weight((1, 3, 4, 4))

        def build():
            return T.sum_all(T.mul(T.conv2d(x, spec), w))

        check_grads(build, [x, spec.kernel, spec.bias], rng)

    def test_masked_conv_gradient_is_zero_at_masked_taps(self):
        rng = self.rng
        mask = np.zeros((2, 2, 3, 3), np.float32)
        mask[:, :, :2, :] = 1.0
        x = T.Array4(rng.standard_normal((1, 2, 4, 4)).astype(np.float32),
                     requires_grad=True)
        spec = make_spec(
            rng.standard_normal((2, 2, 3, 3)).astype(np.float32),
            np.zeros(2, np.float32), 1, 1, mask=mask,
        )
        loss = T.sum_all(T.conv2d(x, spec))
        loss.backward()
        assert np.all(spec.kernel.grad[mask == 0] == 0.0)
        assert np.any(spec.kernel.grad[mask == 1] != 0.0)

    def test_transposed_conv_gradients(self):
        rng = self.rng
        x = T.Array4(rng.standard_normal((1, 3, 3, 3)).astype(np.float32) * 0.5,
                     requires_grad=True)
        spec = make_spec(
            rng.standard_normal((2, 3, 4, 4)).astype(np.float32) * 0.3,
            rng.standard_normal(2).astype(np.float32) * 0.1,
            stride=2, padding=1,
        )
        w = self._weight((1, 2, 6, 6))

        def build():
            return T.sum_all(T.mul(T.conv2d_transpose(x, spec), w))

        check_grads(build, [x, spec.kernel, spec.bias], rng)

    def test_elementwise_gradients(self):
        rng = self.rng
        x = T.Array4(rng.standard_normal((1, 4, 3, 3)).astype(np.float32),
                     requires_grad=True)
        gain = T.Array4(np.ones((1, 4, 1, 1), np.float32) * 1.5, requires_grad=True)
        w = self._weight((1, 4, 3, 3))

        def build():
            h = T.leaky_relu(x)
            h = T.channel_gain(h, gain)
            h = T.softplus(h)
            return T.sum_all(T.mul(h, w))

        check_grads(build, [x, gain], rng)

    def test_gather_concat_gradients(self):
        rng = self.rng
        x = T.Array4(rng.standard_normal((1, 6, 2, 2)).astype(np.float32),
                     requires_grad=True)
        w = self._weight((1, 4, 2, 2))

        def build():
            a = T.gather_channels(x, [5, 0])
            b = T.gather_channels(x, [2, 2])  # repeated index: grads add
            return T.sum_all(T.mul(T.concat_channels([a, b]), w))

        check_grads(build, [x], rng)

    def test_rmse_gradients(self):
        rng = self.rng
        a = T.Array4(rng.standard_normal((1, 2, 4, 4)).astype(np.float32),
                     requires_grad=True)
        b = T.Array4(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))

        def build():
            return T.rmse_loss(a, b)

        check_grads(build, [a], rng)

    def test_cross_entropy_gradients(self):
        rng = self.rng
        logits = T.Array4(rng.standard_normal((2, 4, 3, 3)).astype(np.float32),
                          requires_grad=True)
        targets = rng.integers(0, 4, size=(2, 3, 3))

        def build():
            return T.cross_entropy_loss(logits, targets)

        check_grads(build, [logits], rng)

    def test_gaussian_bits_gradients(self):
        rng = self.rng
        y = T.Array4(rng.standard_normal((1, 2, 3, 3)).astype(np.float32),
                     requires_grad=True)
        m = T.Array4(rng.standard_normal((1, 2, 3, 3)).astype(np.float32) * 0.5,
                     requires_grad=True)
        raw = T.Array4(rng.standard_normal((1, 2, 3, 3)).astype(np.float32),
                       requires_grad=True)

        def build():
            s = T.clamp_min(T.softplus(raw), 0.11)
            return T.sum_all(T.gaussian_interval_bits(y, m, s))

        check_grads(build, [y, m, raw], rng)

    def test_backward_requires_scalar(self):
        x = T.Array4(np.zeros((1, 1, 2, 2), np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            T.leaky_relu(x).backward()

    def test_no_grad_suppresses_tape(self):
        x = T.Array4(np.ones((1, 1, 1, 1), np.float32), requires_grad=True)
        with T.no_grad():
            out = T.scale(x, 2.0)
        assert out._backward is None and not out.requires_grad


# ---------------------------------------------------------------------------
# parameters and Adam


def adam_oracle(x0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar reference Adam in float64."""
    x, m, v = float(x0), 0.0, 0.0
    path = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x -= lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(x)
    return path


class TestParamStoreAndAdam:
    def test_duplicate_name_rejected(self):
        store = T.ParamStore()
        store.add("w", np.zeros((1, 1, 1, 1), np.float32))
        with pytest.raises(ContractError):
            store.add("w", np.zeros((1, 1, 1, 1), np.float32))

    def test_missing_gradient_named_in_error(self):
        store = T.ParamStore()
        a = store.add("layer.kernel", np.ones((1, 1, 1, 1), np.float32))
        store.add("layer.bias", np.ones((1, 1, 1, 1), np.float32))
        a.grad = np.ones((1, 1, 1, 1), np.float32)
        with pytest.raises(ContractError, match="layer.bias"):
            T.adam_step(store, 1e-4)

    def test_single_step_matches_scalar_oracle(self):
        store = T.ParamStore()
        p = store.add("w", np.full((1, 1, 1, 1), 0.7, np.float32))
        p.grad = np.full((1, 1, 1, 1), 0.5, np.float32)
        T.adam_step(store, 1e-2)
        expect = adam_oracle(0.7, [0.5], 1e-2)[0]
        assert float(p.data.reshape(())) == pytest.approx(expect, rel=1e-5)
        assert p.grad is None and store.step_count == 1

    def test_two_steps_match_scalar_oracle(self):
        store = T.ParamStore()
        p = store.add("w", np.full((1, 1, 1, 1), -0.3, np.float32))
        seen = []
        for g in (0.25, 0.25):
            p.grad = np.full((1, 1, 1, 1), g, np.float32)
            T.adam_step(store, 5e-3)
            seen.append(float(p.data.reshape(())))
        np.testing.assert_allclose(seen, adam_oracle(-0.3, [0.25, 0.25], 5e-3), rtol=1e-5)

    def test_gradient_clipping_norm(self):
        store = T.ParamStore()
        p = store.add("w", np.zeros((1, 1, 1, 2), np.float32))
        p.grad = np.array([[[[3.0, 4.0]]]], np.float32)
        norm = T.clip_gradients(store, 2.5)
        assert norm == pytest.approx(5.0)
        assert T.global_grad_norm(store) == pytest.approx(2.5, rel=1e-6)

    def test_load_arrays_shape_conflict(self):
        store = T.ParamStore()
        store.add("w", np.zeros((1, 2, 1, 1), np.float32))
        with pytest.raises(ContractError, match="shape mismatch"):
            store.load_arrays({"w": np.zeros((1, 3, 1, 1), np.float32)})

    def test_load_arrays_reports_partial_match(self):
        store = T.ParamStore()
        store.add("a", np.zeros((1, 1, 1, 1), np.float32))
        store.add("b", np.zeros((1, 1, 1, 1), np.float32))
        matched, missing, extra = store.load_arrays(
            {"a": np.ones((1, 1, 1, 1), np.float32), "c": np.zeros((1, 1, 1, 1))},
            strict=False,
        )
        assert matched == ["a"] and missing == ["b"] and extra == ["c"]
        assert float(store.get("a").data.reshape(())) == 1.0
