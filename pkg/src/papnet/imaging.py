"""Image decoding, geometric/intensity preprocessing, and classical mask ops.

All operations are pure and deterministic: they return fresh objects and never
touch their inputs. File decode/encode goes through Pillow (BMP in, PNG out);
every pixel transform below it is implemented here.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601


@dataclass(frozen=True)
class RasterImage:
    """8-bit image, shape (H, W, C) with C of 1 or 3, channel-interleaved."""
    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8 or px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(
                f"RasterImage needs uint8 (H, W, C) pixels with C in {{1, 3}}, "
                f"got dtype {px.dtype}, shape {px.shape}")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass(frozen=True)
class BinaryMask:
    """Single-channel mask whose only values are 0 and 255."""
    values: np.ndarray

    def __post_init__(self):
        v = self.values
        if v.dtype != np.uint8 or v.ndim != 2:
            raise ValueError(f"BinaryMask needs uint8 (H, W) values, got {v.dtype}, {v.shape}")
        if not np.all((v == 0) | (v == 255)):
            raise ValueError("BinaryMask may only contain 0 and 255")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def decode_image(data: bytes) -> RasterImage:
    """Decode BMP/PNG (and whatever else Pillow knows) into a RasterImage."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            if im.mode in ("L", "I;16", "I"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)[..., None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"cannot decode image: {exc}") from exc
    return RasterImage(np.ascontiguousarray(arr))


def encode_png(img: RasterImage) -> bytes:
    arr = img.pixels[..., 0] if img.channels == 1 else img.pixels
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def mask_to_image(mask: BinaryMask) -> RasterImage:
    return RasterImage(mask.values[..., None].copy())


def to_grayscale(img: RasterImage) -> RasterImage:
    """BT.601 luma: round(0.299 R + 0.587 G + 0.114 B), already-gray passthrough."""
    if img.channels == 1:
        return RasterImage(img.pixels.copy())
    r, g, b = LUMA_WEIGHTS
    luma = (r * img.pixels[..., 0].astype(np.float64)
            + g * img.pixels[..., 1]
            + b * img.pixels[..., 2])
    out = np.clip(np.rint(luma), 0, 255).astype(np.uint8)
    return RasterImage(out[..., None])


def _bilinear_axis(src: int, out: int):
    """Half-pixel-center source coordinates for one axis: floor index,
    ceil index, and the ceil-side weight."""
    pos = (np.arange(out, dtype=np.float64) + 0.5) * (src / out) - 0.5
    pos = np.clip(pos, 0.0, src - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear_float(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of a float (H, W) or (H, W, C) array."""
    i0, i1, wi = _bilinear_axis(arr.shape[0], out_h)
    j0, j1, wj = _bilinear_axis(arr.shape[1], out_w)
    wi = wi[:, None] if arr.ndim == 2 else wi[:, None, None]
    wj = wj[None, :] if arr.ndim == 2 else wj[None, :, None]
    top = arr[i0][:, j0] * (1 - wj) + arr[i0][:, j1] * wj
    bot = arr[i1][:, j0] * (1 - wj) + arr[i1][:, j1] * wj
    return top * (1 - wi) + bot * wi


def resize_bilinear(img: RasterImage, out_w: int = 128, out_h: int = 128) -> RasterImage:
    """Bilinear resize with half-pixel-center mapping; identity if sizes match."""
    if out_w <= 0 or out_h <= 0:
        raise ValueError(f"target extents must be positive, got {out_w}x{out_h}")
    if (img.height, img.width) == (out_h, out_w):
        return RasterImage(img.pixels.copy())
    res = resize_bilinear_float(img.pixels.astype(np.float64), out_h, out_w)
    return RasterImage(np.clip(np.rint(res), 0, 255).astype(np.uint8))


def resize_mask(mask: BinaryMask, out_w: int, out_h: int) -> BinaryMask:
    """Resize a mask and re-binarize at 127 so only {0, 255} survive."""
    if (mask.height, mask.width) == (out_h, out_w):
        return BinaryMask(mask.values.copy())
    res = resize_bilinear_float(mask.values.astype(np.float64), out_h, out_w)
    return BinaryMask(np.where(res > 127.0, 255, 0).astype(np.uint8))


def normalize01(img: RasterImage) -> Tensor:
    """Pixels / 255 as a float32 tensor shaped 1 x C x H x W."""
    t = (img.pixels.astype(np.float32) / 255.0).transpose(2, 0, 1)
    return np.ascontiguousarray(t[None, ...])


def rescale255(t: Tensor) -> RasterImage:
    """Inverse of normalize01 on byte-representable values: round(v*255)."""
    arr = t
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"rescale255 expects a single image, got batch {arr.shape}")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"rescale255 expects (1,C,H,W) or (C,H,W), got {t.shape}")
    px = np.clip(np.rint(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    return RasterImage(np.ascontiguousarray(px.transpose(1, 2, 0)))


def gaussian_blur_float(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian on a float (H, W, C) array, radius ceil(3*sigma),
    normalized weights, clamp-to-edge borders. Conserves total intensity on
    interior-supported content."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()

    h, w = arr.shape[:2]
    padded = np.pad(arr, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    arr = sum(kernel[t] * padded[t:t + h] for t in range(kernel.size))
    padded = np.pad(arr, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    return sum(kernel[t] * padded[:, t:t + w] for t in range(kernel.size))


def gaussian_blur(img: RasterImage, sigma: float) -> RasterImage:
    """Separable Gaussian blur; constant images are fixed points."""
    out = gaussian_blur_float(img.pixels.astype(np.float64), sigma)
    return RasterImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def adaptive_threshold(img: RasterImage, block: int, offset_c: float) -> BinaryMask:
    """Pixel -> 255 iff value > (block x block local mean - offset_c).

    The local mean comes from an integral image; windows are clipped at the
    borders, so edge pixels average over the in-bounds part only.
    """
    if img.channels != 1:
        raise ValueError(f"adaptive_threshold needs a grayscale image, got {img.channels} channels")
    if block < 3 or block % 2 == 0:
        raise ValueError(f"block must be an odd int >= 3, got {block}")
    gray = img.pixels[..., 0].astype(np.float64)
    h, w = gray.shape
    r = block // 2

    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    integral[1:, 1:] = gray.cumsum(axis=0).cumsum(axis=1)
    i0 = np.clip(np.arange(h) - r, 0, h)
    i1 = np.clip(np.arange(h) + r + 1, 0, h)
    j0 = np.clip(np.arange(w) - r, 0, w)
    j1 = np.clip(np.arange(w) + r + 1, 0, w)
    area = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    window_sum = (integral[i1[:, None], j1[None, :]] - integral[i0[:, None], j1[None, :]]
                  - integral[i1[:, None], j0[None, :]] + integral[i0[:, None], j0[None, :]])
    mean = window_sum / area
    return BinaryMask(np.where(gray > mean - offset_c, 255, 0).astype(np.uint8))


def _minmax_filter(values: np.ndarray, radius: int, take_max: bool) -> np.ndarray:
    side = 2 * radius + 1
    padded = np.pad(values, radius)  # out of bounds counts as background (0)
    win = np.lib.stride_tricks.sliding_window_view(padded, (side, side))
    return win.max(axis=(2, 3)) if take_max else win.min(axis=(2, 3))


def morph(mask: BinaryMask, op: str, radius: int) -> BinaryMask:
    """Erode/dilate/open/close with a square (2r+1) structuring element."""
    if radius < 1:
        raise ValueError(f"radius must be a positive int, got {radius}")
    if op == "erode":
        out = _minmax_filter(mask.values, radius, take_max=False)
    elif op == "dilate":
        out = _minmax_filter(mask.values, radius, take_max=True)
    elif op == "open":
        return morph(morph(mask, "erode", radius), "dilate", radius)
    elif op == "close":
        return morph(morph(mask, "dilate", radius), "erode", radius)
    else:
        raise ValueError(f"unknown morphological op {op!r}")
    return BinaryMask(np.ascontiguousarray(out))


def apply_mask(original: RasterImage, mask: BinaryMask) -> RasterImage:
    """Keep pixels where the mask is 255, zero everything else."""
    if (original.height, original.width) != (mask.height, mask.width):
        raise ValueError(
            f"image {original.height}x{original.width} and mask "
            f"{mask.height}x{mask.width} extents differ")
    keep = (mask.values == 255)[..., None]
    return RasterImage(np.where(keep, original.pixels, 0).astype(np.uint8))
