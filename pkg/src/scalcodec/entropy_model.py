"""Grouped autoregressive entropy model.

Latent channels are split into fixed-size groups coded group-major: every
raster position of group g is coded before any position of group g+1. Masked
convolutions enforce that the Gaussian parameters predicted for a position
depend only on already-decoded data: earlier groups anywhere in space, the
same group at raster-earlier positions, and (when present) a conditioning
tensor that is free side information for the decoder. Conditioning channels
ride along as the last channel span of every layer; they may feed the coded
groups' features but never absorb anything from them, so the decoder can
evaluate the conditioning branch before decoding a single symbol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError

SIGMA_MIN = 0.11
SCALE_BIAS_INIT = 2.0


@dataclass(frozen=True)
class GroupLayout:
    """How a latent's channels map to coding groups plus an optional
    conditioning span appended after the coded channels."""

    group_size: int
    num_groups: int
    conditional_channels: int = 0

    def __post_init__(self):
        if self.group_size < 1 or self.num_groups < 1:
            raise ContractError("GroupLayout: group_size and num_groups must be >= 1")
        if self.conditional_channels < 0:
            raise ContractError("GroupLayout: conditional_channels must be >= 0")

    @property
    def coded_channels(self):
        return self.group_size * self.num_groups

    @property
    def total_channels(self):
        return self.coded_channels + self.conditional_channels

    def group_slice(self, group, multiplier=1):
        span = self.group_size * multiplier
        return slice(group * span, (group + 1) * span)


@dataclass(frozen=True)
class EntropyNetConfig:
    num_blocks: int = 5
    kernel_size: int = 3
    expansion_factor: int = 2
    group_size: int = 16
    channel_multiple: int = 1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ContractError("EntropyNetConfig: num_blocks must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ContractError("EntropyNetConfig: kernel_size must be odd and >= 1")
        if self.expansion_factor < 1:
            raise ContractError("EntropyNetConfig: expansion_factor must be >= 1")
        if self.group_size < 1 or self.channel_multiple < 1:
            raise ContractError("EntropyNetConfig: group sizes must be >= 1")
        if self.group_size % self.channel_multiple:
            raise ContractError(
                "EntropyNetConfig: group_size must be a multiple of channel_multiple"
            )


def _group_ids(layout, channels, include_conditional):
    """Per-channel group id; -1 marks conditioning channels. Channel counts must
    be an integer multiple of the layout's channel unit."""
    units = layout.total_channels if include_conditional else layout.coded_channels
    if channels % units:
        raise ContractError(
            f"channel count {channels} is not a multiple of the layout unit {units}"
        )
    mult = channels // units
    ids = np.empty(channels, dtype=np.int64)
    coded = layout.coded_channels * mult
    for g in range(layout.num_groups):
        ids[g * layout.group_size * mult : (g + 1) * layout.group_size * mult] = g
    if include_conditional:
        ids[coded:] = -1
    return ids, mult


def build_group_mask(layout, kernel_size, in_channels, out_channels,
                     first_layer, out_has_conditional=True):
    """Binary tap mask of shape (out, in, k, k).

    Visibility rules, for output channel of coded group g:
      earlier groups        -> every spatial tap
      same group            -> raster-earlier taps; the center tap too, except
                               in the first layer (which must break the direct
                               path from a value to its own prediction)
      later groups          -> nothing
      conditioning channels -> every spatial tap
    Conditioning outputs see only conditioning inputs (every tap), so the
    branch never consumes coded data.
    """
    if kernel_size % 2 == 0:
        raise ContractError("build_group_mask: kernel size must be odd")
    in_ids, _ = _group_ids(layout, in_channels, layout.conditional_channels > 0)
    out_ids, _ = _group_ids(
        layout, out_channels,
        out_has_conditional and layout.conditional_channels > 0,
    )
    k = kernel_size
    c = k // 2
    full = np.ones((k, k), dtype=np.float32)
    earlier = np.zeros((k, k), dtype=np.float32)
    earlier[:c, :] = 1.0
    earlier[c, :c] = 1.0
    same = earlier.copy()
    if not first_layer:
        same[c, c] = 1.0

    o_ids = out_ids[:, None]
    i_ids = in_ids[None, :]
    mask = np.zeros((out_channels, in_channels, k, k), dtype=np.float32)
    both_coded = (o_ids >= 0) & (i_ids >= 0)
    mask[both_coded & (i_ids < o_ids)] = full
    mask[both_coded & (i_ids == o_ids)] = same
    mask[(o_ids >= 0) & (i_ids == -1)] = full
    mask[(o_ids == -1) & (i_ids == -1)] = full
    return mask


def _masked_conv(store, name, layout, in_channels, out_channels, kernel_size,
                 first_layer, rng, out_has_conditional=True):
    mask = build_group_mask(layout, kernel_size, in_channels, out_channels,
                            first_layer, out_has_conditional)
    return T.init_conv(store, name, out_channels, in_channels, kernel_size,
                       stride=1, padding=kernel_size // 2, rng=rng, mask=mask)


class EntropyModel:
    """Predicts per-element Gaussian (mean, scale) for a grouped latent.

    Stacked residual blocks of three masked convolutions (widen, transform,
    narrow) feed a masked 1x1 head that emits mean and raw-scale channels per
    coded channel. Residual skips connect block boundaries only (blocks 2..B,
    through a learnable per-channel gain); a skip around block 1 would reinsert
    the unmasked input past the first layer's causality break.
    """

    def __init__(self, store, prefix, channels, config, rng,
                 conditional_channels=0):
        if channels % config.group_size:
            raise ContractError(
                f"latent channels {channels} not divisible by group size "
                f"{config.group_size}"
            )
        self.channels = channels
        self.config = config
        self.layout = GroupLayout(
            group_size=config.group_size,
            num_groups=channels // config.group_size,
            conditional_channels=conditional_channels,
        )
        total = self.layout.total_channels
        wide = total * config.expansion_factor
        k = config.kernel_size
        self.blocks = []
        self.skip_gains = []
        for b in range(config.num_blocks):
            base = f"{prefix}.block{b}"
            convs = (
                _masked_conv(store, f"{base}.widen", self.layout, total, wide, k,
                             first_layer=(b == 0), rng=rng),
                _masked_conv(store, f"{base}.transform", self.layout, wide, wide, k,
                             first_layer=False, rng=rng),
                _masked_conv(store, f"{base}.narrow", self.layout, wide, total, k,
                             first_layer=False, rng=rng),
            )
            self.blocks.append(convs)
            if b >= 1:
                self.skip_gains.append(T.init_gain(store, f"{base}.skip_gain", total))
        self.head = _masked_conv(store, f"{prefix}.head", self.layout, total,
                                 2 * channels, 1, first_layer=False, rng=rng,
                                 out_has_conditional=False)
        # head group g occupies 2*group_size channels: means first, scales after
        gs = config.group_size
        mean_idx, scale_idx = [], []
        for g in range(self.layout.num_groups):
            start = 2 * gs * g
            mean_idx.extend(range(start, start + gs))
            scale_idx.extend(range(start + gs, start + 2 * gs))
        self._mean_idx = np.array(mean_idx, dtype=np.int64)
        self._scale_idx = np.array(scale_idx, dtype=np.int64)
        # start the predicted scales wide (sigma ~ 2, not softplus(0) ~ 0.69):
        # early in training the latent magnitudes grow fast, and a narrow init
        # pins most interval probabilities at the 2^-16 floor where the rate
        # term has no gradient, so the scales never learn to track the latent
        store.get(f"{prefix}.head.bias").data[0, self._scale_idx, 0, 0] = SCALE_BIAS_INIT

    @property
    def conditional_channels(self):
        return self.layout.conditional_channels

    def predict(self, latent, conditional=None):
        """Graph-mode forward: returns (means, scales) Array4 nodes, scales
        already softplus-mapped and floored at SIGMA_MIN."""
        if (conditional is None) != (self.conditional_channels == 0):
            raise ContractError("conditional tensor presence must match the model")
        if latent.data.shape[1] != self.channels:
            raise ContractError(
                f"latent has {latent.data.shape[1]} channels, model expects "
                f"{self.channels}"
            )
        if conditional is not None:
            if conditional.data.shape[1] != self.conditional_channels:
                raise ContractError("conditioning channel count mismatch")
            if conditional.data.shape[2:] != latent.data.shape[2:]:
                raise ContractError("conditioning spatial size mismatch")
            h = T.concat_channels([latent, conditional])
        else:
            h = latent
        for b, (widen, transform, narrow) in enumerate(self.blocks):
            y = T.leaky_relu(T.conv2d(h, widen))
            y = T.leaky_relu(T.conv2d(y, transform))
            y = T.conv2d(y, narrow)
            if b >= 1:
                h = T.add(y, T.channel_gain(h, self.skip_gains[b - 1]))
            else:
                h = y
        raw = T.conv2d(h, self.head)
        means = T.gather_channels(raw, self._mean_idx)
        scales = T.clamp_min(T.softplus(T.gather_channels(raw, self._scale_idx)),
                             SIGMA_MIN)
        return means, scales

    def predict_arrays(self, latent, conditional=None):
        """numpy fast path used by the sequential scan: latent (c, h, w) or
        (1, c, h, w) ndarray in, (means, scales) float32 (c, h, w) out."""
        lt = np.asarray(latent, dtype=np.float32)
        if lt.ndim == 3:
            lt = lt[None]
        cond = None
        if conditional is not None:
            cond = np.asarray(conditional, dtype=np.float32)
            if cond.ndim == 3:
                cond = cond[None]
            cond = T.Array4(cond)
        with T.no_grad():
            means, scales = self.predict(T.Array4(lt), cond)
        return means.data[0], scales.data[0]

    def estimate_bits(self, values, means, scales):
        """Total code length estimate (scalar node) for `values` under the
        predicted Gaussians."""
        return T.sum_all(T.gaussian_interval_bits(values, means, scales))


def interval_bits_arrays(values, means, scales):
    """numpy mirror of the differentiable per-element code length: bits of the
    unit interval around each value under N(mean, scale^2), floored at 2^-16."""
    from scipy.special import ndtr

    y = np.asarray(values, dtype=np.float64)
    m = np.asarray(means, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)
    p = ndtr((y - m + 0.5) / s) - ndtr((y - m - 0.5) / s)
    return -np.log2(np.maximum(p, 2.0 ** -16))


def add_uniform_noise(latent, rng):
    """Training-time quantization proxy: adds U(-1/2, 1/2) noise per element."""
    noise = rng.uniform(-0.5, 0.5, size=latent.data.shape).astype(np.float32)
    return T.add(latent, T.Array4(noise))


def quantize(values, means):
    """Hard quantization residual: round(values - means), as float32."""
    return np.rint(np.asarray(values, dtype=np.float32)
                   - np.asarray(means, dtype=np.float32)).astype(np.float32)


def sequential_scan(model, spatial_shape, step_fn, conditional=None):
    """Group-major raster scan shared by the encoder and the decoder.

    For each group g and raster position (y, x) the model is evaluated on the
    partially filled reconstruction; step_fn receives the group's channel
    slice and its predicted (means, scales) at that position and returns the
    dequantized values to write back. Returns the final reconstruction
    (c, h, w). Masking guarantees a later teacher-forced pass on the result
    reproduces every prediction bit-exactly.
    """
    h, w = spatial_shape
    y_hat = np.zeros((model.channels, h, w), dtype=np.float32)
    gs = model.config.group_size
    for g in range(model.layout.num_groups):
        sl = slice(g * gs, (g + 1) * gs)
        for yy in range(h):
            for xx in range(w):
                means, scales = model.predict_arrays(y_hat, conditional)
                y_hat[sl, yy, xx] = step_fn(g, sl, yy, xx,
                                            means[sl, yy, xx], scales[sl, yy, xx])
    return y_hat


def quantize_scan(model, latent, conditional=None, bound_fn=None):
    """Encoder-side scan: quantizes `latent` (c, h, w) against the model's
    sequential predictions. Returns (symbols int32, y_hat, means, scales) with
    the parameter tensors teacher-forced-consistent with y_hat. bound_fn maps a
    scale array to the coder's symbol bound; symbols are clamped inside it so
    encoder and decoder reconstructions stay identical."""
    lt = np.asarray(latent, dtype=np.float32)
    symbols = np.zeros_like(lt, dtype=np.int32)
    means_out = np.zeros_like(lt)
    scales_out = np.zeros_like(lt)

    def step(g, sl, yy, xx, means, scales):
        q = np.rint(lt[sl, yy, xx] - means).astype(np.int64)
        if bound_fn is not None:
            bound = bound_fn(scales)
            q = np.clip(q, -bound, bound)
        symbols[sl, yy, xx] = q
        means_out[sl, yy, xx] = means
        scales_out[sl, yy, xx] = scales
        return q.astype(np.float32) + means

    y_hat = sequential_scan(model, lt.shape[1:], step, conditional)
    return symbols, y_hat, means_out, scales_out


def dequantize_scan(model, spatial_shape, symbol_fn, conditional=None):
    """Decoder-side scan: symbol_fn(means, scales) returns the int symbols for
    one group at one position (already entropy-decoded). Returns (symbols,
    y_hat)."""
    h, w = spatial_shape
    symbols = np.zeros((model.channels, h, w), dtype=np.int32)

    def step(g, sl, yy, xx, means, scales):
        q = np.asarray(symbol_fn(means, scales), dtype=np.int64)
        symbols[sl, yy, xx] = q
        return q.astype(np.float32) + means

    y_hat = sequential_scan(model, spatial_shape, step, conditional)
    return symbols, y_hat
