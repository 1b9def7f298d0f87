"""Encoder-decoder segmentation network, training loop, and mask metrics.

Three encoder levels (base_width, then doubling), a bottleneck at 8x base
width, and mirrored decoder levels joined by channel-concatenated skips.
Upsampling is nearest-neighbor followed by a 3x3 conv. The head is a 1x1
conv + sigmoid producing a per-pixel foreground probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .data import ImageSample, derive_rng
from .imaging import (BinaryMask, RasterImage, gaussian_blur, morph, normalize01,
                      resize_bilinear, resize_mask, to_grayscale)
from .optim import AdamState, adam_step, binary_cross_entropy_pixelwise
from .tensor import (LayerParams, Tensor, conv2d_backward, conv2d_forward,
                     conv2d_forward_cols, conv_params,
                     maxpool2_backward, maxpool2_forward, relu, relu_backward, sigmoid,
                     upsample2_backward, upsample2_forward)

UNET_MAGIC = "PAPUNET1"
ENCODER_LEVELS = 3


@dataclass(frozen=True)
class SegMetrics:
    dice: float
    iou: float


@dataclass(frozen=True)
class UNetTrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-3
    input_size: int = 128
    blur_sigma: float | None = 1.0
    threshold: float = 0.5
    max_train_samples: int | None = None  # evenly strided cap, CPU budget knob


class UNetModel:
    def __init__(self, base_width: int = 16, in_channels: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if base_width < 1:
            raise ValueError(f"base_width must be positive, got {base_width}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base_width = base_width
        self.in_channels = in_channels
        widths = [base_width << level for level in range(ENCODER_LEVELS)]
        bottleneck_width = base_width << ENCODER_LEVELS

        self.enc: list[tuple[LayerParams, LayerParams]] = []
        c_in = in_channels
        for w in widths:
            self.enc.append((conv_params(c_in, w, 3, rng, dtype), conv_params(w, w, 3, rng, dtype)))
            c_in = w
        self.bottleneck = (conv_params(widths[-1], bottleneck_width, 3, rng, dtype),
                           conv_params(bottleneck_width, bottleneck_width, 3, rng, dtype))
        self.dec: list[tuple[LayerParams, LayerParams, LayerParams]] = []
        cur = bottleneck_width
        for w in reversed(widths):
            self.dec.append((conv_params(cur, w, 3, rng, dtype),      # post-upsample conv
                             conv_params(2 * w, w, 3, rng, dtype),    # after skip concat
                             conv_params(w, w, 3, rng, dtype)))
            cur = w
        self.head = conv_params(cur, 1, 1, rng, dtype)

    def params(self) -> list[LayerParams]:
        out = []
        for a, b in self.enc:
            out.extend((a, b))
        out.extend(self.bottleneck)
        for a, b, c in self.dec:
            out.extend((a, b, c))
        out.append(self.head)
        return out


def _double_conv_forward(x, pa, pb):
    za, cols_a = conv2d_forward_cols(x, pa, 1, 1)
    aa = relu(za)
    zb, cols_b = conv2d_forward_cols(aa, pb, 1, 1)
    return (x, za, aa, zb, cols_a, cols_b), relu(zb)


def _double_conv_backward(cache, pa, pb, grad_out, need_input_grad=True):
    x, za, aa, zb, cols_a, cols_b = cache
    gzb = relu_backward(zb, grad_out)
    gaa = conv2d_backward(aa, pb, gzb, 1, 1, cols=cols_b)
    gza = relu_backward(za, gaa)
    return conv2d_backward(x, pa, gza, 1, 1, cols=cols_a, need_input_grad=need_input_grad)


def _forward(model: UNetModel, x: Tensor):
    if x.ndim != 4 or x.shape[1] != model.in_channels:
        raise ValueError(
            f"expected input shaped (B, {model.in_channels}, H, W), got {x.shape}")
    stride = 1 << ENCODER_LEVELS
    if x.shape[2] % stride or x.shape[3] % stride or x.shape[2] < stride or x.shape[3] < stride:
        raise ValueError(
            f"spatial extents must be positive multiples of {stride}, got {x.shape}")
    cache: dict = {"enc": [], "pool": [], "dec": []}
    cur = x
    skips = []
    for pa, pb in model.enc:
        dc_cache, act = _double_conv_forward(cur, pa, pb)
        cache["enc"].append(dc_cache)
        skips.append(act)
        cur, idx = maxpool2_forward(act)
        cache["pool"].append((idx, act.shape))
    bc_cache, cur = _double_conv_forward(cur, *model.bottleneck)
    cache["bott"] = bc_cache
    for (up_conv, ca, cb), skip in zip(model.dec, reversed(skips)):
        up = upsample2_forward(cur)
        zu, cols_u = conv2d_forward_cols(up, up_conv, 1, 1)
        au = relu(zu)
        cat = np.concatenate([au, skip], axis=1)
        dc_cache, cur = _double_conv_forward(cat, ca, cb)
        cache["dec"].append((up, zu, au.shape[1], dc_cache, cols_u))
    cache["head_in"] = cur
    logits = conv2d_forward(cur, model.head, 1, 0)
    probs = sigmoid(logits)
    cache["probs"] = probs
    return probs, cache


def _backward(model: UNetModel, cache, grad_probs: Tensor,
              need_input_grad: bool = False) -> Tensor | None:
    probs = cache["probs"]
    grad_logits = grad_probs * probs * (1.0 - probs)
    grad = conv2d_backward(cache["head_in"], model.head, grad_logits, 1, 0)
    skip_grads = []
    for (up_conv, ca, cb), (up, zu, n_dec_ch, dc_cache, cols_u) in zip(reversed(model.dec),
                                                                       reversed(cache["dec"])):
        grad_cat = _double_conv_backward(dc_cache, ca, cb, grad)
        gau = grad_cat[:, :n_dec_ch]
        skip_grads.append(grad_cat[:, n_dec_ch:])
        gzu = relu_backward(zu, gau)
        gup = conv2d_backward(up, up_conv, gzu, 1, 1, cols=cols_u)
        grad = upsample2_backward(gup)
    grad = _double_conv_backward(cache["bott"], *model.bottleneck, grad)
    # skip_grads arrived shallowest-decoder-first (encoder levels 0,1,2);
    # the encoder backward walks levels 2,1,0, so reverse them
    for level, ((pa, pb), (idx, shape), gskip, dc_cache) in enumerate(zip(
            reversed(model.enc), reversed(cache["pool"]), reversed(skip_grads),
            reversed(cache["enc"]))):
        grad_act = maxpool2_backward(idx, grad, shape) + gskip
        is_first_layer = level == len(model.enc) - 1
        grad = _double_conv_backward(dc_cache, pa, pb, grad_act,
                                     need_input_grad=need_input_grad or not is_first_layer)
    return grad


def unet_forward(model: UNetModel, image: Tensor) -> Tensor:
    """Probability map in (0,1), same spatial shape as the input."""
    probs, _ = _forward(model, image)
    return probs


def prepare_input(image: RasterImage, input_size: int = 128,
                  blur_sigma: float | None = None) -> Tensor:
    """Grayscale -> resize -> optional blur -> [0,1] tensor (1,1,S,S)."""
    gray = to_grayscale(image)
    gray = resize_bilinear(gray, input_size, input_size)
    if blur_sigma:
        gray = gaussian_blur(gray, blur_sigma)
    return normalize01(gray)


def prepare_target(mask: BinaryMask, input_size: int = 128) -> Tensor:
    """Truth mask resized and mapped to {0,1} float32, shaped (1,1,S,S)."""
    resized = resize_mask(mask, input_size, input_size)
    return (resized.values[None, None, :, :] == 255).astype(np.float32)


def binarize(prob_map: Tensor, threshold: float = 0.5) -> BinaryMask:
    """Probability map -> {0,255} mask at the given threshold."""
    arr = np.asarray(prob_map)
    arr = arr.reshape(arr.shape[-2:]) if arr.ndim in (3, 4) else arr
    if arr.ndim != 2:
        raise ValueError(f"cannot binarize map of shape {prob_map.shape}")
    return BinaryMask(np.where(arr > threshold, 255, 0).astype(np.uint8))


def refine_mask(mask: BinaryMask, radius: int = 1) -> BinaryMask:
    """Classical cleanup pass: morphological open then close."""
    return morph(morph(mask, "open", radius), "close", radius)


def seg_metrics(pred: BinaryMask, truth: BinaryMask) -> SegMetrics:
    """Dice and IoU overlap; the both-empty case counts as perfect (1, 1)."""
    p = pred.values == 255
    t = truth.values == 255
    inter = int(np.logical_and(p, t).sum())
    p_count = int(p.sum())
    t_count = int(t.sum())
    union = p_count + t_count - inter
    if p_count + t_count == 0:
        return SegMetrics(dice=1.0, iou=1.0)
    dice = 2.0 * inter / (p_count + t_count)
    iou = inter / union if union else 1.0
    return SegMetrics(dice=dice, iou=iou)


def unet_train(model: UNetModel, samples: list[ImageSample], cfg: UNetTrainConfig,
               seed: int = 0) -> tuple[UNetModel, list[dict]]:
    """Adam + pixelwise BCE on (image, truth_mask) pairs.

    Logs one {"epoch", "loss", "dice"} entry per epoch, measured on the
    training batches as seen. Deterministic for a fixed seed.
    """
    if not samples:
        raise ValueError("cannot train a segmentation model on an empty sample list")
    missing = [s.id for s in samples if s.truth_mask is None]
    if missing:
        raise ValueError(f"{len(missing)} samples lack truth masks, e.g. {missing[:3]}")

    if cfg.max_train_samples and len(samples) > cfg.max_train_samples:
        ordered = sorted(samples, key=lambda s: s.id)
        stride = max(1, len(ordered) // cfg.max_train_samples)
        samples = ordered[::stride][:cfg.max_train_samples]

    inputs = [prepare_input(s.image, cfg.input_size, cfg.blur_sigma) for s in samples]
    targets = [prepare_target(s.truth_mask, cfg.input_size) for s in samples]
    params = model.params()
    state = AdamState(params, learning_rate=cfg.learning_rate)
    log = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        order = derive_rng(seed, "unet-shuffle", epoch).permutation(n)
        losses = []
        dices = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x = np.concatenate([inputs[i] for i in batch], axis=0)
            t = np.concatenate([targets[i] for i in batch], axis=0)
            probs, cache = _forward(model, x)
            loss, grad_probs = binary_cross_entropy_pixelwise(probs, t)
            for p in params:
                p.zero_grads()
            _backward(model, cache, grad_probs)
            adam_step(params, state)
            losses.append(loss)
            for row in range(x.shape[0]):
                pred = binarize(probs[row], cfg.threshold)
                truth = BinaryMask((t[row, 0] * 255).astype(np.uint8))
                dices.append(seg_metrics(pred, truth).dice)
        log.append({"epoch": epoch,
                    "loss": float(np.mean(losses)),
                    "dice": float(np.mean(dices))})
    return model, log


def predict_mask(model: UNetModel, image: RasterImage, input_size: int = 128,
                 blur_sigma: float | None = 1.0, threshold: float = 0.5,
                 refine: bool = True) -> BinaryMask:
    """Full segmentation chain for one image: prep, forward, binarize, refine."""
    probs = unet_forward(model, prepare_input(image, input_size, blur_sigma))
    mask = binarize(probs, threshold)
    return refine_mask(mask) if refine else mask


def save_unet(model: UNetModel, path) -> None:
    tensors = []
    for p in model.params():
        tensors.extend((p.weights, p.bias))
    checkpoint.save_checkpoint(path, UNET_MAGIC, [model.base_width, model.in_channels], tensors)


def load_unet(path) -> UNetModel:
    config, tensors = checkpoint.load_checkpoint(path, UNET_MAGIC)
    base_width, in_channels = config
    model = UNetModel(base_width=base_width, in_channels=in_channels)
    params = model.params()
    if len(tensors) != 2 * len(params):
        raise ValueError(f"checkpoint holds {len(tensors)} tensors, expected {2 * len(params)}")
    for i, p in enumerate(params):
        w, b = tensors[2 * i], tensors[2 * i + 1]
        if w.shape != p.weights.shape or b.shape != p.bias.shape:
            raise ValueError(f"checkpoint tensor {i} shape {w.shape}/{b.shape} does not match "
                             f"model {p.weights.shape}/{p.bias.shape}")
        p.weights[...] = w
        p.bias[...] = b
    return model
