"""Coding pipelines: a learned base layer serving a dense vision task, plus an
enhancement layer that codes the input image one of three ways.

conditional  - the enhancement latent is entropy-coded with a conditioning
               tensor derived from the decoded base latent as free side info
residual     - the base latent predicts the image; the enhancement transform
               codes the prediction residual and adds the prediction back
standalone   - the enhancement transform codes the image with no base at all

All transforms downsample or upsample by a factor of 16 (four stride-2
stages), so image sides must be multiples of 16.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import entropy_model as em
from . import range_coder as rc
from . import tensor as T
from .errors import ContractError, StreamError

ANALYSIS_WIDTHS = (24, 48, 192)
SYNTHESIS_WIDTHS = (192, 48, 24)
SPATIAL_FACTOR = 16

MODE_CONDITIONAL = "conditional"
MODE_RESIDUAL = "residual"
MODE_STANDALONE = "standalone"
ENHANCEMENT_MODES = (MODE_CONDITIONAL, MODE_RESIDUAL, MODE_STANDALONE)

_MODE_TO_KIND = {
    MODE_CONDITIONAL: rc.LAYER_CONDITIONAL,
    MODE_RESIDUAL: rc.LAYER_RESIDUAL,
    MODE_STANDALONE: rc.LAYER_STANDALONE,
}
_KIND_TO_MODE = {v: k for k, v in _MODE_TO_KIND.items()}


@dataclass(frozen=True)
class PipelineConfig:
    base_channels: int = 32
    enh_channels: int = 256
    image_channels: int = 3
    palette_size: int = 8
    lambda_base: float = 0.02
    lambda_enh: float = 0.02
    beta: float = 0.1
    entropy: em.EntropyNetConfig = field(default_factory=em.EntropyNetConfig)

    def __post_init__(self):
        for name in ("base_channels", "enh_channels", "image_channels"):
            if getattr(self, name) < 1:
                raise ContractError(f"PipelineConfig: {name} must be >= 1")
        if self.palette_size < 2 or self.palette_size % 2:
            raise ContractError("PipelineConfig: palette_size must be even and >= 2")
        if self.lambda_base < 0 or self.lambda_enh < 0 or self.beta < 0:
            raise ContractError("PipelineConfig: loss weights must be >= 0")
        for name in ("base_channels", "enh_channels"):
            if getattr(self, name) % self.entropy.group_size:
                raise ContractError(
                    f"PipelineConfig: {name} must be a multiple of the entropy "
                    f"group size"
                )

    @staticmethod
    def tiny():
        """Small profile for fast runs: narrow enhancement latent, shallow
        entropy net. The channel schedule of the transforms is unchanged."""
        return PipelineConfig(
            enh_channels=64,
            entropy=em.EntropyNetConfig(num_blocks=3, group_size=16),
        )

    def with_lambdas(self, lambda_base=None, lambda_enh=None):
        kw = {}
        if lambda_base is not None:
            kw["lambda_base"] = lambda_base
        if lambda_enh is not None:
            kw["lambda_enh"] = lambda_enh
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# transform stacks


def _build_analysis(store, prefix, in_channels, out_channels, rng):
    convs = []
    prev = in_channels
    for i, width in enumerate(ANALYSIS_WIDTHS + (out_channels,)):
        convs.append(T.init_conv(store, f"{prefix}.down{i}", width, prev, 4, 2, 1, rng))
        prev = width
    return convs


def _build_synthesis(store, prefix, in_channels, out_channels, rng):
    convs = []
    prev = in_channels
    for i, width in enumerate(SYNTHESIS_WIDTHS + (out_channels,)):
        convs.append(T.init_conv(store, f"{prefix}.up{i}", width, prev, 4, 2, 1, rng))
        prev = width
    return convs


def _run_analysis(convs, x):
    h = x
    for i, spec in enumerate(convs):
        h = T.conv2d(h, spec)
        if i + 1 < len(convs):
            h = T.leaky_relu(h)
    return h


def _run_synthesis(convs, x):
    h = x
    for i, spec in enumerate(convs):
        h = T.conv2d_transpose(h, spec)
        if i + 1 < len(convs):
            h = T.leaky_relu(h)
    return h


def _build_cond_transform(store, prefix, in_channels, out_channels, rng):
    """Four residual blocks at latent resolution; the first half keeps the
    base width, the second half moves to the enhancement width. Blocks whose
    channel count changes get a 1x1 projection on the skip path."""
    blocks = []
    plan = [(in_channels, in_channels), (in_channels, in_channels),
            (in_channels, out_channels), (out_channels, out_channels)]
    for i, (ci, co) in enumerate(plan):
        base = f"{prefix}.block{i}"
        wide = 2 * co
        convs = (
            T.init_conv(store, f"{base}.conv0", wide, ci, 3, 1, 1, rng),
            T.init_conv(store, f"{base}.conv1", wide, wide, 3, 1, 1, rng),
            T.init_conv(store, f"{base}.conv2", co, wide, 3, 1, 1, rng),
        )
        proj = None
        if ci != co:
            proj = T.init_conv(store, f"{base}.project", co, ci, 1, 1, 0, rng)
        blocks.append((convs, proj))
    return blocks


def _run_cond_transform(blocks, x):
    h = x
    for convs, proj in blocks:
        y = T.leaky_relu(T.conv2d(h, convs[0]))
        y = T.leaky_relu(T.conv2d(y, convs[1]))
        y = T.conv2d(y, convs[2])
        skip = h if proj is None else T.conv2d(h, proj)
        h = T.add(y, skip)
    return h


def _batched(images):
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ContractError(f"expected (n, c, h, w) or (c, h, w), got {arr.shape}")
    return arr


def _check_image_dims(h, w):
    if h % SPATIAL_FACTOR or w % SPATIAL_FACTOR or h == 0 or w == 0:
        raise ContractError(
            f"image sides must be positive multiples of {SPATIAL_FACTOR}, "
            f"got {h}x{w}"
        )


# ---------------------------------------------------------------------------
# loss report


@dataclass(frozen=True)
class LossReport:
    total: float
    terms: dict


def _rate_node(model, values, conditional, pixel_count):
    """Rate estimate in bpp for one latent batch."""
    means, scales = model.predict(values, conditional)
    bits = model.estimate_bits(values, means, scales)
    return T.scale(bits, 1.0 / pixel_count)


# ---------------------------------------------------------------------------
# base pipeline


class BasePipeline:
    """Analysis transform to the base latent, a dense task head, an auxiliary
    image predictor (kept useful through the beta loss term so the latent can
    also serve reconstruction), and the latent's entropy model."""

    def __init__(self, config, seed=0):
        self.config = config
        self.store = T.ParamStore()
        rng = np.random.default_rng(seed)
        cb = config.base_channels
        self.analysis = _build_analysis(self.store, "analysis",
                                        config.image_channels, cb, rng)
        self.task_head = _build_synthesis(self.store, "task_head", cb,
                                          config.palette_size, rng)
        self.aux_predictor = _build_synthesis(self.store, "aux_predictor", cb,
                                              config.image_channels, rng)
        self.entropy = em.EntropyModel(self.store, "entropy", cb,
                                       config.entropy, rng)

    def loss_on_batch(self, images, targets, rng=None):
        """Training loss: task cross-entropy + lambda_base * rate +
        beta * predictor RMSE. rng=None evaluates noise-free."""
        x = T.Array4(_batched(images))
        n, _, h, w = x.data.shape
        latent = _run_analysis(self.analysis, x)
        values = em.add_uniform_noise(latent, rng) if rng is not None else latent
        rate = _rate_node(self.entropy, values, None, n * h * w)
        logits = _run_synthesis(self.task_head, values)
        aux = _run_synthesis(self.aux_predictor, values)
        task = T.cross_entropy_loss(logits, targets)
        aux_d = T.rmse_loss(aux, x)
        total = T.add(task, T.add(T.scale(rate, self.config.lambda_base),
                                  T.scale(aux_d, self.config.beta)))
        report = LossReport(total.item(), {
            "task": task.item(),
            "rate_bpp": rate.item(),
            "aux_rmse": aux_d.item(),
        })
        return total, report

    # numpy inference paths

    def latent_arrays(self, image):
        x = _batched(image)
        _check_image_dims(x.shape[2], x.shape[3])
        with T.no_grad():
            out = _run_analysis(self.analysis, T.Array4(x))
        return out.data[0]

    def task_logits_arrays(self, latent):
        with T.no_grad():
            out = _run_synthesis(self.task_head, T.Array4(_batched(latent)))
        return out.data[0]

    def predictor_arrays(self, latent):
        with T.no_grad():
            out = _run_synthesis(self.aux_predictor, T.Array4(_batched(latent)))
        return out.data[0]

    def quantized_latent(self, image):
        """Deterministic decoder-visible base latent: sequential scan with the
        coder's clamping applied."""
        symbols, y_hat, _, _ = em.quantize_scan(
            self.entropy, self.latent_arrays(image), bound_fn=rc.symbol_bound
        )
        return symbols, y_hat


# ---------------------------------------------------------------------------
# enhancement pipeline


class EnhancementPipeline:
    """Image coder on top of a frozen base. The mode picks how the base latent
    is exploited: conditioning tensor for the entropy model, image-space
    prediction subtracted before coding, or not at all."""

    def __init__(self, config, mode, seed=0, base=None):
        if mode not in ENHANCEMENT_MODES:
            raise ContractError(f"unknown enhancement mode '{mode}'")
        self.config = config
        self.mode = mode
        self.store = T.ParamStore()
        rng = np.random.default_rng(seed)
        ce = config.enh_channels
        cx = config.image_channels
        self.analysis = _build_analysis(self.store, "enh_analysis", cx, ce, rng)
        self.synthesis = _build_synthesis(self.store, "enh_synthesis", ce, cx, rng)
        cond_channels = 0
        self.cond_transform = None
        self.predictor = None
        if mode == MODE_CONDITIONAL:
            self.cond_transform = _build_cond_transform(
                self.store, "cond_transform", config.base_channels, ce, rng
            )
            cond_channels = ce
        elif mode == MODE_RESIDUAL:
            self.predictor = _build_synthesis(self.store, "predictor",
                                              config.base_channels, cx, rng)
            if base is not None:
                # start from the base's auxiliary predictor: same architecture,
                # already trained to predict the image from the base latent
                aux = {
                    name.replace("aux_predictor.", "predictor."): arr
                    for name, arr in base.store.state_arrays().items()
                    if name.startswith("aux_predictor.")
                }
                self.store.load_arrays(aux, strict=False)
        self.entropy = em.EntropyModel(self.store, "enh_entropy", ce,
                                       config.entropy, rng,
                                       conditional_channels=cond_channels)

    def needs_base(self):
        return self.mode != MODE_STANDALONE

    def loss_on_batch(self, images, base_latents=None, rng=None):
        """Training loss: reconstruction RMSE + lambda_enh * rate. The base
        latent batch must already be the decoder-visible (dequantized) one and
        carries no gradient."""
        x = T.Array4(_batched(images))
        n, _, h, w = x.data.shape
        pixels = n * h * w
        if self.needs_base():
            if base_latents is None:
                raise ContractError(f"mode '{self.mode}' requires base latents")
            yb = T.Array4(_batched(base_latents))
        elif base_latents is not None:
            raise ContractError("standalone mode takes no base latents")

        if self.mode == MODE_CONDITIONAL:
            cond = _run_cond_transform(self.cond_transform, yb)
            latent = _run_analysis(self.analysis, x)
            values = em.add_uniform_noise(latent, rng) if rng is not None else latent
            rate = _rate_node(self.entropy, values, cond, pixels)
            recon = _run_synthesis(self.synthesis, values)
        elif self.mode == MODE_RESIDUAL:
            prediction = _run_synthesis(self.predictor, yb)
            residual = T.sub(x, prediction)
            latent = _run_analysis(self.analysis, residual)
            values = em.add_uniform_noise(latent, rng) if rng is not None else latent
            rate = _rate_node(self.entropy, values, None, pixels)
            recon = T.add(_run_synthesis(self.synthesis, values), prediction)
        else:
            latent = _run_analysis(self.analysis, x)
            values = em.add_uniform_noise(latent, rng) if rng is not None else latent
            rate = _rate_node(self.entropy, values, None, pixels)
            recon = _run_synthesis(self.synthesis, values)

        distortion = T.rmse_loss(recon, x)
        total = T.add(distortion, T.scale(rate, self.config.lambda_enh))
        report = LossReport(total.item(), {
            "rmse": distortion.item(),
            "rate_bpp": rate.item(),
        })
        return total, report

    # numpy inference paths

    def latent_arrays(self, image_like):
        x = _batched(image_like)
        with T.no_grad():
            out = _run_analysis(self.analysis, T.Array4(x))
        return out.data[0]

    def synthesis_arrays(self, latent):
        with T.no_grad():
            out = _run_synthesis(self.synthesis, T.Array4(_batched(latent)))
        return out.data[0]

    def conditioning_arrays(self, base_latent):
        if self.mode != MODE_CONDITIONAL:
            raise ContractError("conditioning tensor only exists in conditional mode")
        with T.no_grad():
            out = _run_cond_transform(self.cond_transform,
                                      T.Array4(_batched(base_latent)))
        return out.data[0]

    def prediction_arrays(self, base_latent):
        if self.mode != MODE_RESIDUAL:
            raise ContractError("image prediction only exists in residual mode")
        with T.no_grad():
            out = _run_synthesis(self.predictor, T.Array4(_batched(base_latent)))
        return out.data[0]


def quantized_base_latents(base, images):
    """Decoder-visible base latents for a stack of images; used to train and
    evaluate enhancement pipelines against what the decoder will actually see."""
    stack = []
    for image in _batched(images):
        _, y_hat = base.quantized_latent(image)
        stack.append(y_hat)
    return np.stack(stack)


# ---------------------------------------------------------------------------
# whole-image coding


@dataclass(frozen=True)
class LayerStats:
    kind: int
    payload_bits: int
    estimated_bits: float
    latent_shape: tuple


@dataclass(frozen=True)
class DecodeResult:
    labels: np.ndarray | None
    logits: np.ndarray | None
    reconstruction: np.ndarray | None
    base_latent: np.ndarray | None
    enh_latent: np.ndarray | None


def _scan_flatten(arr, group_size):
    c, h, w = arr.shape
    parts = []
    for g in range(c // group_size):
        parts.append(arr[g * group_size : (g + 1) * group_size]
                     .transpose(1, 2, 0).reshape(-1))
    return np.concatenate(parts)


def _encode_latent(model, latent, conditional=None):
    symbols, y_hat, means, scales = em.quantize_scan(
        model, latent, conditional, bound_fn=rc.symbol_bound
    )
    gs = model.config.group_size
    payload = rc.encode_symbols(_scan_flatten(symbols, gs),
                                _scan_flatten(scales, gs))
    estimate = float(np.sum(em.interval_bits_arrays(y_hat, means, scales)))
    return payload, symbols, y_hat, estimate


def _decode_latent(model, payload, spatial, conditional=None):
    dec = rc.RangeDecoder(payload)

    def symbol_fn(means, scales):
        return [rc.decode_one(dec, float(s)) for s in scales.tolist()]

    return em.dequantize_scan(model, spatial, symbol_fn, conditional)


def encode_scalable(image, base=None, enh=None):
    """Encodes one image into a layered stream. With a base pipeline the first
    layer codes the base latent; an enhancement pipeline appends its layer.
    A standalone enhancement encodes without any base layer. Returns
    (stream bytes, [LayerStats])."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3:
        raise ContractError(f"image must be (c, h, w), got shape {img.shape}")
    _check_image_dims(img.shape[1], img.shape[2])
    if enh is not None and enh.needs_base() and base is None:
        raise ContractError(f"mode '{enh.mode}' requires a base pipeline")
    if base is None and enh is None:
        raise ContractError("nothing to encode: no pipelines given")

    layers = []
    stats = []
    yb_hat = None
    if base is not None:
        yb = base.latent_arrays(img)
        payload, _, yb_hat, estimate = _encode_latent(base.entropy, yb)
        layers.append(rc.LayerRecord(rc.LAYER_BASE, yb.shape[0], yb.shape[1],
                                     yb.shape[2], payload))
        stats.append(LayerStats(rc.LAYER_BASE, len(payload) * 8, estimate,
                                yb.shape))

    if enh is not None:
        if enh.mode == MODE_CONDITIONAL:
            cond = enh.conditioning_arrays(yb_hat)
            ye = enh.latent_arrays(img)
            payload, _, _, estimate = _encode_latent(enh.entropy, ye, cond)
        elif enh.mode == MODE_RESIDUAL:
            prediction = enh.prediction_arrays(yb_hat)
            ye = enh.latent_arrays(img - prediction)
            payload, _, _, estimate = _encode_latent(enh.entropy, ye)
        else:
            ye = enh.latent_arrays(img)
            payload, _, _, estimate = _encode_latent(enh.entropy, ye)
        kind = _MODE_TO_KIND[enh.mode]
        layers.append(rc.LayerRecord(kind, ye.shape[0], ye.shape[1], ye.shape[2],
                                     payload))
        stats.append(LayerStats(kind, len(payload) * 8, estimate, ye.shape))

    return rc.pack_bitstream(layers), stats


def decode_scalable(stream, base=None, enh=None):
    """Decodes a layered stream produced by encode_scalable. Base layers need
    the base pipeline; enhancement layers need a pipeline of the matching mode."""
    layers = rc.unpack_bitstream(stream)
    labels = logits = recon = yb_hat = ye_hat = None
    pos = 0
    if layers[0].kind == rc.LAYER_BASE:
        if base is None:
            raise ContractError("stream has a base layer but no base pipeline given")
        rec = layers[0]
        _, yb_hat = _decode_latent(base.entropy, rec.payload,
                                   (rec.height, rec.width))
        logits = base.task_logits_arrays(yb_hat)
        labels = np.argmax(logits, axis=0).astype(np.int64)
        pos = 1
    if pos < len(layers):
        rec = layers[pos]
        mode = _KIND_TO_MODE.get(rec.kind)
        if mode is None:
            raise StreamError(f"layer {pos} is not an enhancement layer")
        if enh is None or enh.mode != mode:
            raise ContractError(
                f"stream carries a '{mode}' layer; matching pipeline not given"
            )
        if enh.needs_base() and yb_hat is None:
            raise StreamError(f"'{mode}' layer without a preceding base layer")
        spatial = (rec.height, rec.width)
        if mode == MODE_CONDITIONAL:
            cond = enh.conditioning_arrays(yb_hat)
            _, ye_hat = _decode_latent(enh.entropy, rec.payload, spatial, cond)
            recon = enh.synthesis_arrays(ye_hat)
        elif mode == MODE_RESIDUAL:
            prediction = enh.prediction_arrays(yb_hat)
            _, ye_hat = _decode_latent(enh.entropy, rec.payload, spatial)
            recon = enh.synthesis_arrays(ye_hat) + prediction
        else:
            _, ye_hat = _decode_latent(enh.entropy, rec.payload, spatial)
            recon = enh.synthesis_arrays(ye_hat)
        if pos + 1 < len(layers):
            raise StreamError("more than one enhancement layer")
    return DecodeResult(labels=labels, logits=logits, reconstruction=recon,
                        base_latent=yb_hat, enh_latent=ye_hat)


def measure_rd(images, enh, base=None):
    """Evaluates actual coded rate and reconstruction quality over a stack of
    images. Returns a dict with per-pixel rates (base layer, enhancement layer)
    and pooled RMSE of the reconstruction."""
    stack = _batched(images)
    total_pixels = 0
    base_bits = 0
    enh_bits = 0
    sq_err = 0.0
    for img in stack:
        stream, stats = encode_scalable(
            img, base=base if enh.needs_base() else None, enh=enh
        )
        result = decode_scalable(stream, base=base if enh.needs_base() else None,
                                 enh=enh)
        h, w = img.shape[1], img.shape[2]
        total_pixels += h * w
        for st in stats:
            if st.kind == rc.LAYER_BASE:
                base_bits += st.payload_bits
            else:
                enh_bits += st.payload_bits
        diff = result.reconstruction.astype(np.float64) - img.astype(np.float64)
        sq_err += float(np.sum(diff * diff))
    rmse = float(np.sqrt(sq_err / (total_pixels * stack.shape[1])))
    return {
        "base_bpp": base_bits / total_pixels,
        "enh_bpp": enh_bits / total_pixels,
        "rmse": rmse,
    }
