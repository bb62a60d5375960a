"""Reverse-mode autodiff over 4-D float32 arrays.

Everything in the codec is an (n, c, h, w) tensor; scalars are (1, 1, 1, 1).
Ops build a tape of closures; Array4.backward() runs it in reverse topological
order. numpy supplies the raw kernels (matmul, einsum); every gradient rule is
defined here and checked against finite differences in the tests.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ContractError

LN2 = math.log(2.0)
PROB_FLOOR = 2.0 ** -16
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Array4:
    """A 4-D float32 tensor node on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ContractError(f"Array4 requires rank 4, got rank {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() requires a scalar node")
        return float(self.data.reshape(()))

    def detach(self):
        return Array4(self.data.copy())

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            self.grad += g

    def backward(self):
        if self.data.size != 1:
            raise ContractError("backward() requires a scalar loss node")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones((1, 1, 1, 1), dtype=np.float32)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        tag = self.name or "array4"
        return f"Array4({tag}, shape={self.data.shape}, grad={self.requires_grad})"


def _node(data, parents, backward):
    out = Array4(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ContractError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    _same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), backward)


def sub(a, b):
    _same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _node(a.data - b.data, (a, b), backward)


def mul(a, b):
    _same_shape(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), backward)


def scale(a, s):
    s = float(s)

    def backward(g):
        a._accumulate(g * np.float32(s))

    return _node(a.data * np.float32(s), (a,), backward)


def add_scalar(a, s):
    def backward(g):
        a._accumulate(g)

    return _node(a.data + np.float32(s), (a,), backward)


def leaky_relu(a, slope=0.01):
    pos = a.data > 0
    out_data = np.where(pos, a.data, a.data * np.float32(slope))

    def backward(g):
        a._accumulate(np.where(pos, g, g * np.float32(slope)))

    return _node(out_data, (a,), backward)


def softplus(a):
    x = a.data.astype(np.float64)
    out_data = np.logaddexp(0.0, x).astype(np.float32)
    sig = ndtr_free_sigmoid(x)

    def backward(g):
        a._accumulate((g.astype(np.float64) * sig).astype(np.float32))

    return _node(out_data, (a,), backward)


def ndtr_free_sigmoid(x):
    # stable logistic in float64; helper for softplus' derivative
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clamp_min(a, floor):
    floor = np.float32(floor)
    keep = a.data > floor

    def backward(g):
        a._accumulate(np.where(keep, g, np.float32(0.0)))

    return _node(np.maximum(a.data, floor), (a,), backward)


def concat_channels(parts):
    if not parts:
        raise ContractError("concat_channels: empty input")
    out_data = np.concatenate([p.data for p in parts], axis=1)
    spans = []
    start = 0
    for p in parts:
        spans.append((start, start + p.data.shape[1]))
        start += p.data.shape[1]

    def backward(g):
        for p, (lo, hi) in zip(parts, spans):
            if p.requires_grad:
                p._accumulate(g[:, lo:hi])

    return _node(out_data, tuple(parts), backward)


def gather_channels(a, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("gather_channels: indices must be a non-empty 1-D list")
    if idx.min() < 0 or idx.max() >= a.data.shape[1]:
        raise ContractError("gather_channels: index out of range")

    def backward(g):
        acc = np.zeros_like(a.data)
        np.add.at(acc, (slice(None), idx), g)
        a._accumulate(acc)

    return _node(a.data[:, idx], (a,), backward)


def channel_gain(a, gain):
    if gain.data.shape != (1, a.data.shape[1], 1, 1):
        raise ContractError(
            f"channel_gain: gain shape {gain.data.shape} does not match "
            f"(1, {a.data.shape[1]}, 1, 1)"
        )

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * gain.data)
        if gain.requires_grad:
            gain._accumulate(np.sum(g * a.data, axis=(0, 2, 3), keepdims=True))

    return _node(a.data * gain.data, (a, gain), backward)


def sum_all(a):
    total = np.float32(a.data.sum(dtype=np.float64))

    def backward(g):
        a._accumulate(np.broadcast_to(g.reshape(()), a.data.shape))

    return _node(np.full((1, 1, 1, 1), total, dtype=np.float32), (a,), backward)


def mean_all(a):
    return scale(sum_all(a), 1.0 / a.data.size)


# ---------------------------------------------------------------------------
# fused losses


def rmse_loss(a, b):
    """Root-mean-square error between two equal-shape tensors (scalar node)."""
    _same_shape(a, b, "rmse_loss")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    n = diff.size
    root = math.sqrt(float(np.mean(diff * diff)))

    def backward(g):
        if root == 0.0:
            return
        common = (g.reshape(()).astype(np.float64) / (n * root)) * diff
        common32 = common.astype(np.float32)
        if a.requires_grad:
            a._accumulate(common32)
        if b.requires_grad:
            b._accumulate(-common32)

    return _node(np.full((1, 1, 1, 1), root, dtype=np.float32), (a, b), backward)


def cross_entropy_loss(logits, targets):
    """Mean softmax cross-entropy; targets is an (n, h, w) integer map."""
    t = np.asarray(targets)
    n, classes, h, w = logits.data.shape
    if t.shape != (n, h, w):
        raise ContractError(f"cross_entropy_loss: targets shape {t.shape} != {(n, h, w)}")
    if t.min() < 0 or t.max() >= classes:
        raise ContractError("cross_entropy_loss: target label out of range")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    probs = ez / denom
    ni, hi, wi = np.ogrid[:n, :h, :w]
    picked = probs[ni, t, hi, wi]
    count = n * h * w
    loss = float(-np.log(picked).sum() / count)

    def backward(g):
        gg = g.reshape(()).astype(np.float64) / count
        dz = probs.copy()
        dz[ni, t, hi, wi] -= 1.0
        logits._accumulate((dz * gg).astype(np.float32))

    return _node(np.full((1, 1, 1, 1), loss, dtype=np.float32), (logits,), backward)


def gaussian_interval_bits(values, means, scales):
    """Per-element code length, in bits, of the unit interval around each value
    under N(mean, scale^2), floored at 2^-16. Computed in float64 internally."""
    _same_shape(values, means, "gaussian_interval_bits")
    _same_shape(values, scales, "gaussian_interval_bits")
    if scales.data.min() <= 0:
        raise ContractError("gaussian_interval_bits: scales must be positive")
    y = values.data.astype(np.float64)
    m = means.data.astype(np.float64)
    s = scales.data.astype(np.float64)
    u_hi = (y - m + 0.5) / s
    u_lo = (y - m - 0.5) / s
    p = ndtr(u_hi) - ndtr(u_lo)
    live = p > PROB_FLOOR
    pf = np.maximum(p, PROB_FLOOR)
    bits = -np.log2(pf)

    def backward(g):
        pdf_hi = _INV_SQRT_2PI * np.exp(-0.5 * u_hi * u_hi)
        pdf_lo = _INV_SQRT_2PI * np.exp(-0.5 * u_lo * u_lo)
        coeff = np.where(live, -1.0 / (pf * LN2), 0.0) * g.astype(np.float64)
        dp_dy = (pdf_hi - pdf_lo) / s
        if values.requires_grad:
            values._accumulate((coeff * dp_dy).astype(np.float32))
        if means.requires_grad:
            means._accumulate((-coeff * dp_dy).astype(np.float32))
        if scales.requires_grad:
            dp_ds = -(pdf_hi * u_hi - pdf_lo * u_lo) / s
            scales._accumulate((coeff * dp_ds).astype(np.float32))

    return _node(bits.astype(np.float32), (values, means, scales), backward)


# ---------------------------------------------------------------------------
# convolutions


@dataclass
class ConvSpec:
    """One convolution layer: kernel (out, in, k, k), bias (1, out, 1, 1),
    integer stride/padding, optional binary tap mask matching the kernel."""

    kernel: Array4
    bias: Array4
    stride: int
    padding: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        ko, ki, kh, kw = self.kernel.data.shape
        if kh != kw:
            raise ContractError("ConvSpec: kernel must be square")
        if self.bias.data.shape != (1, ko, 1, 1):
            raise ContractError(
                f"ConvSpec: bias shape {self.bias.data.shape} != (1, {ko}, 1, 1)"
            )
        if self.stride < 1 or self.padding < 0:
            raise ContractError("ConvSpec: stride must be >= 1 and padding >= 0")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=np.float32)
            if self.mask.shape != self.kernel.data.shape:
                raise ContractError("ConvSpec: mask shape must match kernel shape")
            vals = np.unique(self.mask)
            if not np.all(np.isin(vals, [0.0, 1.0])):
                raise ContractError("ConvSpec: mask entries must be 0 or 1")

    @property
    def out_channels(self):
        return self.kernel.data.shape[0]

    @property
    def in_channels(self):
        return self.kernel.data.shape[1]

    @property
    def kernel_size(self):
        return self.kernel.data.shape[2]


def _im2col(padded, k, stride, oh, ow):
    n, c = padded.shape[:2]
    cols = np.empty((n, c, k, k, oh, ow), dtype=padded.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = padded[:, :, u : u + stride * oh : stride,
                                      v : v + stride * ow : stride]
    return cols

def _col2im(cols, h, w, stride, padding):
    n, c, k, _, oh, ow = cols.shape
    buf = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            buf[:, :, u : u + stride * oh : stride,
                v : v + stride * ow : stride] += cols[:, :, u, v]
    if padding:
        return buf[:, :, padding:-padding, padding:-padding]
    return buf


def _pad_hw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d(x, spec):
    """Strided 2-D convolution with optional kernel tap mask."""
    n, c, h, w = x.data.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    if c != spec.in_channels:
        raise ContractError(f"conv2d: input has {c} channels, kernel expects {spec.in_channels}")
    if (h + 2 * p - k) < 0 or (w + 2 * p - k) < 0:
        raise ContractError("conv2d: kernel larger than padded input")
    if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
        raise ContractError("conv2d: stride does not tile the padded input exactly")
    oh = (h + 2 * p - k) // s + 1
    ow = (w + 2 * p - k) // s + 1
    keff = spec.kernel.data if spec.mask is None else spec.kernel.data * spec.mask
    cols = _im2col(_pad_hw(x.data, p), k, s, oh, ow)
    cols_m = cols.reshape(n, c * k * k, oh * ow)
    km = keff.reshape(spec.out_channels, c * k * k)
    out_data = np.matmul(km, cols_m).reshape(n, spec.out_channels, oh, ow)
    out_data = out_data + spec.bias.data

    def backward(g):
        gm = g.reshape(n, spec.out_channels, oh * ow)
        if spec.kernel.requires_grad:
            dk = np.matmul(gm, cols_m.transpose(0, 2, 1)).sum(axis=0)
            dk = dk.reshape(keff.shape)
            if spec.mask is not None:
                dk = dk * spec.mask
            spec.kernel._accumulate(dk)
        if spec.bias.requires_grad:
            spec.bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        if x.requires_grad:
            dcols = np.matmul(km.T, gm).reshape(n, c, k, k, oh, ow)
            x._accumulate(_col2im(dcols, h, w, s, p))

    return _node(out_data, (x, spec.kernel, spec.bias), backward)


def conv2d_transpose(x, spec):
    """Strided transposed convolution; output is exactly stride times the input
    size, which forces kernel - stride = 2 * padding."""
    n, c, h, w = x.data.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    if c != spec.in_channels:
        raise ContractError(
            f"conv2d_transpose: input has {c} channels, kernel expects {spec.in_channels}"
        )
    if k - s != 2 * p:
        raise ContractError("conv2d_transpose: requires kernel - stride == 2 * padding")
    oh, ow = h * s, w * s
    keff = spec.kernel.data if spec.mask is None else spec.kernel.data * spec.mask
    # kernel (out, in, k, k) -> (out*k*k, in); scatter columns into the output
    kt = keff.transpose(0, 2, 3, 1).reshape(spec.out_channels * k * k, c)
    xm = x.data.reshape(n, c, h * w)
    cols = np.matmul(kt, xm).reshape(n, spec.out_channels, k, k, h, w)
    out_data = _col2im(cols, oh, ow, s, p) + spec.bias.data

    def backward(g):
        dcols = _im2col(_pad_hw(g, p), k, s, h, w)
        dcols_m = dcols.reshape(n, spec.out_channels * k * k, h * w)
        if spec.kernel.requires_grad:
            dk = np.matmul(dcols_m, xm.transpose(0, 2, 1)).sum(axis=0)
            dk = dk.reshape(spec.out_channels, k, k, c).transpose(0, 3, 1, 2)
            if spec.mask is not None:
                dk = dk * spec.mask
            spec.kernel._accumulate(np.ascontiguousarray(dk))
        if spec.bias.requires_grad:
            spec.bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(1, -1, 1, 1))
        if x.requires_grad:
            x._accumulate(np.matmul(kt.T, dcols_m).reshape(n, c, h, w))

    return _node(out_data, (x, spec.kernel, spec.bias), backward)


# ---------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class _AdamSlot:
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Named trainable parameters plus their Adam moment buffers."""

    def __init__(self):
        self._params: dict[str, Array4] = {}
        self._slots: dict[str, _AdamSlot] = {}
        self.step_count = 0

    def add(self, name, data, requires_grad=True):
        if name in self._params:
            raise ContractError(f"parameter '{name}' already registered")
        arr = Array4(data, requires_grad=requires_grad, name=name)
        self._params[name] = arr
        return arr

    def get(self, name):
        if name not in self._params:
            raise ContractError(f"unknown parameter '{name}'")
        return self._params[name]

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def zero_grads(self):
        for p in self._params.values():
            p.grad = None

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays, strict=True):
        """Copy matching arrays in; returns (matched, missing, extra) name lists.
        Shape conflicts on a matching name are always an error."""
        matched, missing, extra = [], [], []
        for name, p in self._params.items():
            if name in arrays:
                src = np.asarray(arrays[name], dtype=np.float32)
                if src.shape != p.data.shape:
                    raise ContractError(
                        f"parameter '{name}' shape mismatch: "
                        f"checkpoint {src.shape} vs model {p.data.shape}"
                    )
                p.data[...] = src
                matched.append(name)
            else:
                missing.append(name)
        for name in arrays:
            if name not in self._params:
                extra.append(name)
        if strict and (missing or extra):
            raise ContractError(
                f"checkpoint does not match model: missing={missing} extra={extra}"
            )
        return matched, missing, extra


def global_grad_norm(store):
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            g = p.grad.astype(np.float64)
            total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_gradients(store, max_norm):
    """Global-norm gradient clipping; returns the pre-clip norm."""
    norm = global_grad_norm(store)
    if norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for _, p in store.items():
            if p.grad is not None:
                p.grad *= factor
    return norm


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over every parameter in the store; clears gradients."""
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"parameter '{name}' has no gradient")
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.items():
        slot = store._slots.get(name)
        if slot is None:
            slot = _AdamSlot(np.zeros_like(p.data), np.zeros_like(p.data))
            store._slots[name] = slot
        g = p.grad
        slot.m += (1.0 - beta1) * (g - slot.m)
        slot.v += (1.0 - beta2) * (g * g - slot.v)
        m_hat = slot.m / bc1
        v_hat = slot.v / bc2
        p.data -= np.float32(lr) * m_hat / (np.sqrt(v_hat) + np.float32(eps))
        p.grad = None


# ---------------------------------------------------------------------------
# layer construction


def init_conv(store, name, out_channels, in_channels, kernel_size, stride,
              padding, rng, mask=None):
    """Register a conv layer's kernel and bias. Kernels draw from
    uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases start at zero."""
    fan_in = in_channels * kernel_size * kernel_size
    bound = 1.0 / math.sqrt(fan_in)
    kval = rng.uniform(-bound, bound,
                       size=(out_channels, in_channels, kernel_size, kernel_size))
    kernel = store.add(f"{name}.kernel", kval.astype(np.float32))
    bias = store.add(f"{name}.bias", np.zeros((1, out_channels, 1, 1), dtype=np.float32))
    return ConvSpec(kernel=kernel, bias=bias, stride=stride, padding=padding, mask=mask)


def init_gain(store, name, channels):
    """Per-channel multiplicative gain, initialized to 1."""
    return store.add(name, np.ones((1, channels, 1, 1), dtype=np.float32))
