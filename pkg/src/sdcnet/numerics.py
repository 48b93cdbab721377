"""Dense tensor primitives with hand-written forward and backward passes.

Tensors are plain numpy arrays in channels-first layout, ``(C, H, W)`` or
``(N, C, H, W)``.  Every op computes in the dtype of its input, so float32 is
the production precision and float64 inputs give the tight-tolerance test
mode used by the gradient checks.

Internally convolutions work on an (H, W, N, C) layout: the input under every
active kernel tap is gathered into a (tap, pixel, channel) buffer and one GEMM
per tap is accumulated in row-major tap order, so a fixed-thread run always
reduces in the same order.  Dense, dilated, strided and sparse (masked)
convolutions share this path; a sparse kernel simply visits fewer taps.  The
network code in :mod:`sdcnet.arch` stays in that layout end to end and only
the public NCHW entry points transpose.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import NonFiniteError

SAME = "same"
VALID = "valid"


# ---------------------------------------------------------------------------
# Execution mode
# ---------------------------------------------------------------------------

_thread_limit = None


def set_threads(n: int | None):
    """Cap the BLAS thread pool used by the convolution GEMMs (None = library default)."""
    global _thread_limit
    if _thread_limit is not None:
        _thread_limit.unregister()
        _thread_limit = None
    if n is not None:
        if n < 1:
            raise ValueError(f"thread count must be >= 1, got {n}")
        _thread_limit = threadpool_limits(limits=n, user_api="blas")


@contextlib.contextmanager
def deterministic():
    """Serial execution: single BLAS thread, so reductions run in a fixed order."""
    with threadpool_limits(limits=1, user_api="blas"):
        yield


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvParams:
    weights: np.ndarray          # (out_channels, in_channels, k, k)
    bias: np.ndarray             # (out_channels,)
    stride: int = 1
    dilation: int = 1
    padding: str = SAME

    def __post_init__(self):
        w, b = self.weights, self.bias
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ValueError(f"weights must be (out, in, k, k), got shape {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {w.shape[2]}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
        if self.stride < 1 or self.dilation < 1:
            raise ValueError("stride and dilation must be positive")
        if self.padding not in (SAME, VALID):
            raise ValueError(f"padding must be {SAME!r} or {VALID!r}, got {self.padding!r}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.weights.shape[2]

    @property
    def extent(self) -> int:
        """Spatial extent covered by the dilated kernel."""
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def pad(self) -> int:
        return self.dilation * (self.kernel_size - 1) // 2 if self.padding == SAME else 0


@dataclass(frozen=True)
class SparseMask:
    mask: np.ndarray  # bool (k, k)

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", m)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2 != 1:
            raise ValueError(f"mask must be an odd square grid, got shape {m.shape}")
        c = m.shape[0] // 2
        if not m[c, c]:
            raise ValueError("mask center cell must be active")

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    @property
    def nonzero_count(self) -> int:
        return int(self.mask.sum())


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected a (C, H, W) or (N, C, H, W) tensor, got shape {x.shape}")


def to_hwnc(x: np.ndarray) -> np.ndarray:
    """(C, H, W) or (N, C, H, W) -> contiguous (H, W, N, C), the internal conv layout."""
    x4, _ = _as_batch(x)
    return np.ascontiguousarray(x4.transpose(2, 3, 0, 1))


def from_hwnc(xh: np.ndarray, squeeze: bool = False) -> np.ndarray:
    out = np.ascontiguousarray(xh.transpose(2, 3, 0, 1))
    return out[0] if squeeze else out


def _out_extent(n, pad, extent, stride):
    return (n + 2 * pad - extent) // stride + 1


def _check_conv(h, w, c, p: ConvParams):
    if c != p.in_channels:
        raise ValueError(f"input has {c} channels, kernel expects {p.in_channels}")
    ho = _out_extent(h, p.pad, p.extent, p.stride)
    wo = _out_extent(w, p.pad, p.extent, p.stride)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{w} is smaller than the kernel extent {p.extent} "
                         f"under {p.padding} padding")
    return ho, wo


def _tap_index(k, mask):
    if mask is None:
        return np.arange(k * k)
    if mask.size != k:
        raise ValueError(f"mask is {mask.size}x{mask.size} but kernel is {k}x{k}")
    return np.flatnonzero(mask.mask.ravel())


def _tap_offsets(p: ConvParams, taps):
    k, d = p.kernel_size, p.dilation
    return [(int(t) // k * d, int(t) % k * d) for t in taps]


def _tap_weights(p: ConvParams, taps, dtype):
    """Per-tap (C, out) weight slices, shape (T, C, out)."""
    o, c, k = p.out_channels, p.in_channels, p.kernel_size
    w = p.weights.reshape(o, c, k * k)[:, :, taps]
    return np.ascontiguousarray(w.transpose(2, 1, 0), dtype=dtype)


# below this channel count one wide GEMM beats per-tap accumulation
_NARROW = 16


def conv_hwnc(xh: np.ndarray, p: ConvParams, mask: SparseMask | None = None):
    """Convolution on an (H, W, N, C) tensor.  Returns ``(out (Ho, Wo, N, O), cols)``.

    ``cols`` holds the input gathered under every tap, (T, pixels, C); pass it
    back to :func:`conv_hwnc_backward` to skip the gather there.
    """
    h, w, n, c = xh.shape
    ho, wo = _check_conv(h, w, c, p)
    taps = _tap_index(p.kernel_size, mask)
    s, pad = p.stride, p.pad
    xp = np.pad(xh, ((pad, pad), (pad, pad), (0, 0), (0, 0))) if pad else xh
    cols = np.empty((len(taps), ho, wo, n, c), dtype=xh.dtype)
    for t, (y0, x0) in enumerate(_tap_offsets(p, taps)):
        cols[t] = xp[y0:y0 + s * (ho - 1) + 1:s, x0:x0 + s * (wo - 1) + 1:s]
    cols = cols.reshape(len(taps), ho * wo * n, c)
    wt = _tap_weights(p, taps, xh.dtype)
    if c < _NARROW:
        out = cols.transpose(1, 0, 2).reshape(ho * wo * n, len(taps) * c) @ wt.reshape(-1, p.out_channels)
    else:
        # tap-by-tap accumulation in a fixed order; each GEMM reduces over channels
        out = cols[0] @ wt[0]
        for t in range(1, len(taps)):
            out += cols[t] @ wt[t]
    out += p.bias.astype(xh.dtype, copy=False)
    return out.reshape(ho, wo, n, p.out_channels), cols


def conv_hwnc_backward(xh: np.ndarray, p: ConvParams, gh: np.ndarray, mask: SparseMask | None = None,
                       need_input_grad: bool = True, cols: np.ndarray | None = None):
    """Gradients of :func:`conv_hwnc`: ``(grad_input or None, grad_weights, grad_bias)``."""
    h, w, n, c = xh.shape
    ho, wo = _check_conv(h, w, c, p)
    o = p.out_channels
    if gh.shape != (ho, wo, n, o):
        raise ValueError(f"gradient shape {gh.shape} does not match forward output {(ho, wo, n, o)}")
    k, s, pad = p.kernel_size, p.stride, p.pad
    taps = _tap_index(k, mask)
    dtype = xh.dtype

    g2 = np.ascontiguousarray(gh).reshape(ho * wo * n, o)
    grad_bias = g2.sum(axis=0)
    if cols is None:
        cols = conv_hwnc(xh, p, mask)[1]
    gw_taps = np.matmul(cols.transpose(0, 2, 1), g2)          # (T, C, out)
    grad_w = np.zeros((o, c, k * k), dtype=dtype)
    grad_w[:, :, taps] = gw_taps.transpose(2, 1, 0)
    grad_w = grad_w.reshape(o, c, k, k)

    grad_x = None
    if need_input_grad:
        wt = _tap_weights(p, taps, dtype)
        gxp = np.zeros((h + 2 * pad, w + 2 * pad, n, c), dtype=dtype)
        for t, (y0, x0) in enumerate(_tap_offsets(p, taps)):
            gxp[y0:y0 + s * (ho - 1) + 1:s, x0:x0 + s * (wo - 1) + 1:s] += \
                (g2 @ wt[t].T).reshape(ho, wo, n, c)
        grad_x = gxp[pad:pad + h, pad:pad + w] if pad else gxp
    return grad_x, grad_w, grad_bias


def _forward(x, p: ConvParams, mask=None):
    x4, squeeze = _as_batch(x)
    out, _ = conv_hwnc(to_hwnc(x4), p, mask)
    return from_hwnc(out, squeeze)


def _backward(x, p: ConvParams, grad_out, mask=None):
    x4, squeeze = _as_batch(x)
    g4, _ = _as_batch(grad_out)
    n, c, h, w = x4.shape
    ho, wo = _check_conv(h, w, c, p)
    if g4.shape != (n, p.out_channels, ho, wo):
        raise ValueError(f"grad_out shape {g4.shape} does not match forward output "
                         f"{(n, p.out_channels, ho, wo)}")
    gx, gw, gb = conv_hwnc_backward(to_hwnc(x4), p, to_hwnc(g4), mask)
    return from_hwnc(gx, squeeze), gw, gb


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated, strided 2-D convolution (cross-correlation) with zero Same padding or Valid.

    ``out[o, y, x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * in[c, y*s + d*i - pad, x*s + d*j - pad]``
    """
    return _forward(x, p)


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_weights, grad_bias)`` for :func:`conv2d_forward`."""
    return _backward(x, p, grad_out)


def sparse_conv2d_forward(x: np.ndarray, p: ConvParams, m: SparseMask) -> np.ndarray:
    """Convolution with the kernel restricted to the active cells of ``m``.

    Masked-out weights are ignored, so the result equals a dense convolution
    with ``weights * mask``.
    """
    return _forward(x, p, m)


def sparse_conv2d_backward(x: np.ndarray, p: ConvParams, m: SparseMask, grad_out: np.ndarray):
    """Gradients of :func:`sparse_conv2d_forward`; masked-out weight gradients are exactly zero."""
    return _backward(x, p, grad_out, m)


# ---------------------------------------------------------------------------
# Pointwise ops
# ---------------------------------------------------------------------------

def _reject_nan(x):
    # a NaN anywhere poisons the sum; only then pay for the elementwise scan
    if np.isnan(x.sum()) and np.isnan(x).any():
        raise NonFiniteError("NaN in activation input")


def elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    if alpha <= 0:
        raise ValueError(f"ELU alpha must be > 0, got {alpha}")
    _reject_nan(x)
    out = np.minimum(x, 0)
    np.expm1(out, out=out)
    if alpha != 1.0:
        out *= alpha
    out += np.maximum(x, 0)
    return out


def elu_backward(x: np.ndarray, grad: np.ndarray, alpha: float = 1.0, out: np.ndarray | None = None):
    """Gradient of :func:`elu`.  Passing the forward result ``out`` avoids recomputing exp."""
    if alpha <= 0:
        raise ValueError(f"ELU alpha must be > 0, got {alpha}")
    _reject_nan(x)
    if out is None:
        out = elu(x, alpha)
    # alpha * exp(x) == out + alpha on the negative side, where out <= 0;
    # on the positive side out > 0 and min(out, 0) + alpha == alpha
    d = np.minimum(out, 0).astype(grad.dtype, copy=False)
    d += alpha
    if alpha != 1.0:
        d[x > 0] = 1
    d *= grad
    return d


def relu(x: np.ndarray) -> np.ndarray:
    _reject_nan(x)
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return grad * (x > 0)


def concat_channels(parts, axis: int = -3) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to concatenate")
    others = {tuple(np.delete(p.shape, axis % p.ndim)) for p in parts}
    if len(others) != 1:
        raise ValueError(f"parts disagree on batch/spatial extents: {sorted(others)}")
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=axis)


def split_channels_backward(grad: np.ndarray, sizes, axis: int = -3) -> list:
    """Split a channel-concatenated gradient back into per-part pieces."""
    if sum(sizes) != grad.shape[axis]:
        raise ValueError(f"part sizes {list(sizes)} do not sum to {grad.shape[axis]} channels")
    bounds = np.cumsum(sizes)[:-1]
    return np.split(grad, bounds, axis=axis)


def linf_normalize(feat: np.ndarray, eps: float = 1e-8, axis: int = -3) -> np.ndarray:
    """Scale every pixel vector by ``1 / max(max|f|, eps)`` so it lies in [-1, 1]^D."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    scale = np.maximum(np.abs(feat).max(axis=axis, keepdims=True), eps)
    return feat / scale


def linf_normalize_backward(feat: np.ndarray, grad: np.ndarray, eps: float = 1e-8, axis: int = -3):
    axis = axis % feat.ndim
    a = np.abs(feat)
    m = a.max(axis=axis, keepdims=True)
    active = m > eps
    scale = np.where(active, m, eps)
    out = grad / scale
    # the max-magnitude component (first one on ties) also moves the scale
    k = np.expand_dims(np.argmax(a, axis=axis), axis)
    fk = np.take_along_axis(feat, k, axis=axis)
    corr = -(grad * feat).sum(axis=axis, keepdims=True) / (scale * scale) * np.sign(fk)
    corr = np.where(active, corr, 0)
    hit = np.zeros_like(out)
    np.put_along_axis(hit, k, corr, axis=axis)
    return out + hit


def subsample(x: np.ndarray, r: int, phase=(0, 0)) -> np.ndarray:
    """Pick every r-th pixel starting at ``phase`` (no smoothing)."""
    py, px = phase
    if r < 1 or not (0 <= py < r and 0 <= px < r):
        raise ValueError(f"invalid subsampling factor {r} / phase {phase}")
    return x[..., py::r, px::r]


# ---------------------------------------------------------------------------
# Sampling with reflection
# ---------------------------------------------------------------------------

def reflect_index(i, n: int):
    """Mirror integer indices into [0, n) without repeating the edge pixel."""
    i = np.asarray(i)
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i >= n, period - i, i)


def bilinear_sample(img: np.ndarray, y, x) -> np.ndarray:
    """Bilinearly sample a (C, H, W) image at real coordinates on its reflection-padded extension.

    ``y`` and ``x`` may be scalars or broadcastable arrays; the result has
    shape ``(C,) + broadcast_shape``.
    """
    _, h, w = img.shape
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y, x = np.broadcast_arrays(y, x)
    y0 = np.floor(y)
    x0 = np.floor(x)
    fy = (y - y0).astype(img.dtype)
    fx = (x - x0).astype(img.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    ya, yb = reflect_index(y0, h), reflect_index(y0 + 1, h)
    xa, xb = reflect_index(x0, w), reflect_index(x0 + 1, w)
    top = img[:, ya, xa] * (1 - fx) + img[:, ya, xb] * fx
    bot = img[:, yb, xa] * (1 - fx) + img[:, yb, xb] * fx
    return top * (1 - fy) + bot * fy
