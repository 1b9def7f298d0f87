"""Dense tensor layers: conv, pooling, dense, activations, dropout, upsampling.

Values are numpy arrays in BCHW layout (batch, channel, height, width) for
image-shaped data and (batch, features) for dense layers. Storage defaults to
float32; every op preserves the dtype it is given, so the gradient-check
harness can run the identical code paths in float64.

Forward ops are pure (inputs never mutated). Backward ops accumulate into the
owning LayerParams' grad buffers, so call ``zero_grads`` once per optimizer
step cycle.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DEFAULT_DTYPE = np.float32

_allocator_tuned = False


def tune_allocator() -> bool:
    """Ask glibc malloc to keep large buffers on the heap instead of
    mmap/munmap-ing them every training step. Safe no-op elsewhere."""
    global _allocator_tuned
    if _allocator_tuned:
        return True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
        _allocator_tuned = True
    except (OSError, AttributeError):
        return False
    return True


class LayerParams:
    """Trainable weights + bias and their gradient accumulators.

    ``has_grads`` flips to True on the first backward fill after a
    ``zero_grads`` and guards the optimizer against stale-gradient steps.
    """

    def __init__(self, weights: Tensor, bias: Tensor):
        self.weights = np.ascontiguousarray(weights)
        self.bias = np.ascontiguousarray(bias)
        self.weight_grad = np.zeros_like(self.weights)
        self.bias_grad = np.zeros_like(self.bias)
        self.has_grads = False

    def zero_grads(self) -> None:
        self.weight_grad[...] = 0
        self.bias_grad[...] = 0
        self.has_grads = False


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Tensor:
    """He-style uniform init, bound sqrt(6 / fan_in); pairs with ReLU layers."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_params(c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> LayerParams:
    w = he_uniform((c_out, c_in, k, k), c_in * k * k, rng, dtype)
    return LayerParams(w, np.zeros(c_out, dtype=dtype))


def dense_params(f_in: int, f_out: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> LayerParams:
    w = he_uniform((f_in, f_out), f_in, rng, dtype)
    return LayerParams(w, np.zeros(f_out, dtype=dtype))


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator,
                   dtype=DEFAULT_DTYPE) -> Tensor:
    """Glorot/Xavier uniform init for layers that do not feed a ReLU
    (keeps initial softmax logits small)."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_out_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _im2col(x_padded: Tensor, k: int, stride: int) -> Tensor:
    """(B,C,Hp,Wp) -> (B*Ho*Wo, C*K*K) patch matrix; rows batch-major."""
    b, c, hp, wp = x_padded.shape
    win = np.lib.stride_tricks.sliding_window_view(x_padded, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, K, K)
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return np.ascontiguousarray(cols)


def _col2im(dcols: Tensor, b: int, c: int, hp: int, wp: int, ho: int, wo: int,
            k: int, stride: int) -> Tensor:
    """Scatter-add the K*K patch gradients back onto the padded input grid."""
    dxp = np.zeros((b, c, hp, wp), dtype=dcols.dtype)
    d6 = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    for di in range(k):
        for dj in range(k):
            dxp[:, :, di:di + ho * stride:stride, dj:dj + wo * stride:stride] += d6[:, :, :, :, di, dj]
    return dxp


def _pad_input(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate a BCHW input with square kernels, plus per-filter bias.

    Output spatial extent is floor((H + 2*padding - K)/stride) + 1.
    Implemented as im2col + GEMM; numerically equivalent to the direct
    nested-loop form.
    """
    out, _ = conv2d_forward_cols(x, params, stride, padding)
    return out


def conv2d_forward_cols(x: Tensor, params: LayerParams, stride: int = 1,
                        padding: int = 0) -> tuple[Tensor, Tensor]:
    """conv2d_forward that also returns the im2col patch matrix so a following
    backward pass can skip rebuilding it."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects BCHW input, got shape {x.shape}")
    c_out, c_in, k, k2 = params.weights.shape
    if k != k2:
        raise ValueError(f"conv2d kernel must be square, got {params.weights.shape}")
    if x.shape[1] != c_in:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {params.weights.shape}")
    b, _, h, w = x.shape
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(w, k, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d output would be empty: input {x.shape}, kernel {params.weights.shape}")
    cols = _im2col(_pad_input(x, padding), k, stride)
    wmat = params.weights.reshape(c_out, -1)
    out = cols @ wmat.T
    out += params.bias
    return np.ascontiguousarray(out.reshape(b, ho, wo, c_out).transpose(0, 3, 1, 2)), cols


def conv2d_backward(x: Tensor, params: LayerParams, grad_out: Tensor,
                    stride: int = 1, padding: int = 0, cols: Tensor | None = None,
                    need_input_grad: bool = True) -> Tensor | None:
    """Accumulate weight/bias grads and return the input gradient.

    Pass the ``cols`` matrix from conv2d_forward_cols to avoid recomputing it;
    the first layer of a network can set ``need_input_grad=False``.
    """
    c_out, c_in, k, _ = params.weights.shape
    b, _, h, w = x.shape
    ho = _conv_out_extent(h, k, stride, padding)
    wo = _conv_out_extent(w, k, stride, padding)
    if grad_out.shape != (b, c_out, ho, wo):
        raise ValueError(
            f"conv2d upstream gradient shape {grad_out.shape} does not match "
            f"forward output {(b, c_out, ho, wo)}")
    if cols is None:
        cols = _im2col(_pad_input(x, padding), k, stride)
    gcols = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1).reshape(-1, c_out))
    wmat = params.weights.reshape(c_out, -1)

    params.weight_grad += (gcols.T @ cols).reshape(params.weights.shape)
    params.bias_grad += gcols.sum(axis=0, dtype=np.float64).astype(params.bias_grad.dtype)
    params.has_grads = True

    if not need_input_grad:
        return None
    hp, wp = h + 2 * padding, w + 2 * padding
    if stride == 1:
        # accumulate per-offset GEMMs in NHWC to avoid a giant col2im shuffle;
        # the kernel slice must be contiguous or matmul leaves the BLAS path
        dx_nhwc = np.zeros((b, hp, wp, c_in), dtype=gcols.dtype)
        contrib = np.empty((gcols.shape[0], c_in), dtype=gcols.dtype)
        for di in range(k):
            for dj in range(k):
                np.matmul(gcols, np.ascontiguousarray(params.weights[:, :, di, dj]), out=contrib)
                dx_nhwc[:, di:di + ho, dj:dj + wo, :] += contrib.reshape(b, ho, wo, c_in)
        dxp = dx_nhwc.transpose(0, 3, 1, 2)
    else:
        dcols = gcols @ wmat
        dxp = _col2im(dcols, b, c_in, hp, wp, ho, wo, k, stride)
    if padding == 0:
        return np.ascontiguousarray(dxp)
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])


def maxpool2_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    """2x2/stride-2 max pool. Returns (pooled, argmax) where argmax holds the
    winning in-window position (0..3, row-major; first position wins ties)."""
    if x.ndim != 4:
        raise ValueError(f"maxpool2 expects BCHW input, got shape {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {x.shape}")
    nw = x[:, :, 0::2, 0::2]
    ne = x[:, :, 0::2, 1::2]
    sw = x[:, :, 1::2, 0::2]
    se = x[:, :, 1::2, 1::2]
    # >= comparisons keep the first position in row-major order on ties
    top = np.maximum(nw, ne)
    bot = np.maximum(sw, se)
    idx_top = np.where(nw >= ne, np.uint8(0), np.uint8(1))
    idx_bot = np.where(sw >= se, np.uint8(2), np.uint8(3))
    out = np.maximum(top, bot)
    idx = np.where(top >= bot, idx_top, idx_bot)
    return out, idx


def maxpool2_backward(indices: Tensor, grad_out: Tensor, input_shape) -> Tensor:
    """Route each upstream value to its recorded argmax position."""
    b, c, h, w = input_shape
    if grad_out.shape != (b, c, h // 2, w // 2) or indices.shape != grad_out.shape:
        raise ValueError(
            f"maxpool2 backward shapes disagree: grad {grad_out.shape}, "
            f"indices {indices.shape}, input {tuple(input_shape)}")
    dx = np.zeros((b, c, h, w), dtype=grad_out.dtype)
    for pos, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, :, di::2, dj::2] = np.where(indices == pos, grad_out, 0)
    return dx


def dense_forward(x: Tensor, params: LayerParams) -> Tensor:
    """(B,F) @ (F,U) + bias."""
    if x.ndim != 2:
        raise ValueError(f"dense expects a (batch, features) input, got shape {x.shape}")
    if x.shape[1] != params.weights.shape[0]:
        raise ValueError(
            f"dense feature mismatch: input {x.shape} vs weights {params.weights.shape}")
    return x @ params.weights + params.bias


def dense_backward(x: Tensor, params: LayerParams, grad_out: Tensor) -> Tensor:
    """Accumulate dense grads (W += x^T g, b += sum g) and return x gradient."""
    if grad_out.shape != (x.shape[0], params.weights.shape[1]):
        raise ValueError(
            f"dense upstream gradient shape {grad_out.shape} does not match "
            f"output {(x.shape[0], params.weights.shape[1])}")
    params.weight_grad += x.T @ grad_out
    params.bias_grad += grad_out.sum(axis=0, dtype=np.float64).astype(params.bias_grad.dtype)
    params.has_grads = True
    return grad_out @ params.weights.T


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    # gradient at exactly 0 is defined as 0
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


def sigmoid(x: Tensor) -> Tensor:
    """1/(1+exp(-x)) computed piecewise so no exp ever overflows."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: Tensor, grad_out: Tensor) -> Tensor:
    """Chain upstream through sigma' = y(1-y), given the forward output y."""
    return grad_out * y * (1.0 - y)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool) -> tuple[Tensor, Tensor]:
    """Inverted dropout: survivors scaled by 1/(1-rate); inference is identity.

    Returns (output, mask). Backward is upstream * mask.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        mask = np.ones_like(x)
        return x.copy(), mask
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / (1.0 - rate)
    return x * mask, mask


def upsample2_forward(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsample (each pixel becomes a 2x2 block)."""
    if x.ndim != 4:
        raise ValueError(f"upsample2 expects BCHW input, got shape {x.shape}")
    return np.ascontiguousarray(np.repeat(np.repeat(x, 2, axis=2), 2, axis=3))


def upsample2_backward(grad_out: Tensor) -> Tensor:
    """Sum each 2x2 output block back onto its source pixel."""
    b, c, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ValueError(f"upsample2 backward needs even extents, got {grad_out.shape}")
    return grad_out.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)).astype(grad_out.dtype)
