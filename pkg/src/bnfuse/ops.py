"""Reference forward/backward kernels for every layer type.

These are the unfused, obviously-correct definitions: one logical memory
pass at a time, direct loops over kernel offsets (no im2col), float64
accumulation for per-channel statistics.  The fused kernels in
``bnfuse.fused`` are checked against compositions of these.

All functions operate on NCHW numpy arrays and preserve the input dtype
(float32 engine path, float64 verification path).  They also accept
:class:`~bnfuse.tensor.Tensor4D` and return the same container kind they
were given.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor4D


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor4D) else np.asarray(x)


def _wrap_like(ref, out: np.ndarray):
    return Tensor4D(out) if isinstance(ref, Tensor4D) else out


# ---------------------------------------------------------------------------
# parameter blocks
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    """2-D convolution parameters; weights are (out_c, in_c, kh, kw)."""

    in_c: int
    out_c: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0
    weights: np.ndarray = None
    bias: np.ndarray = None
    name: str = "conv"

    def __post_init__(self):
        if self.weights is None:
            self.weights = np.zeros((self.out_c, self.in_c, self.kh, self.kw), dtype=np.float32)
        if self.bias is None:
            self.bias = np.zeros(self.out_c, dtype=self.weights.dtype)
        if self.weights.shape != (self.out_c, self.in_c, self.kh, self.kw):
            raise ShapeError(
                f"{self.name}: weights shape {self.weights.shape} inconsistent with "
                f"(out_c={self.out_c}, in_c={self.in_c}, kh={self.kh}, kw={self.kw})"
            )
        if self.stride < 1 or self.pad < 0:
            raise ShapeError(f"{self.name}: stride must be >= 1 and pad >= 0")

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.pad - self.kh) // self.stride + 1
        ow = (w + 2 * self.pad - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: non-positive output dims for input {h}x{w}")
        return oh, ow


@dataclass
class BNParams:
    """Per-channel scale (gamma) and shift (beta) with the usual epsilon."""

    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5
    name: str = "bn"

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma)
        self.beta = np.asarray(self.beta)
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(f"{self.name}: gamma/beta must be equal-length 1-D arrays")
        if not self.eps > 0:
            raise ShapeError(f"{self.name}: eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class ChannelStats:
    """Per-channel accumulated sums and derived mean/variance for a mini-batch.

    ``count`` is the number of elements per channel (n*h*w).  Sums are kept
    in float64 regardless of the tensor dtype; tiny negative variances from
    rounding are clamped to zero at use.
    """

    sum_x: np.ndarray
    sum_x2: np.ndarray
    count: int
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)

    @classmethod
    def from_sums(cls, sum_x: np.ndarray, sum_x2: np.ndarray, count: int) -> "ChannelStats":
        mean = sum_x / count
        var = np.maximum(sum_x2 / count - mean * mean, 0.0)
        return cls(sum_x=sum_x, sum_x2=sum_x2, count=count, mean=mean, var=var)

    def inv_std(self, eps: float) -> np.ndarray:
        return 1.0 / np.sqrt(np.maximum(self.var, 0.0) + eps)

    def slice(self, lo: int, hi: int) -> "ChannelStats":
        return ChannelStats(
            sum_x=self.sum_x[lo:hi],
            sum_x2=self.sum_x2[lo:hi],
            count=self.count,
            mean=self.mean[lo:hi],
            var=self.var[lo:hi],
        )


def concat_stats(parts: list[ChannelStats]) -> ChannelStats:
    """Assemble stats of a channel-concatenated tensor from per-piece stats.

    Channels of the pieces are disjoint, so this is exact concatenation of
    the per-channel vectors (no re-reading of feature maps).
    """
    count = parts[0].count
    if any(p.count != count for p in parts):
        raise ShapeError("all concatenated pieces must share n*h*w")
    return ChannelStats(
        sum_x=np.concatenate([p.sum_x for p in parts]),
        sum_x2=np.concatenate([p.sum_x2 for p in parts]),
        count=count,
        mean=np.concatenate([p.mean for p in parts]),
        var=np.concatenate([p.var for p in parts]),
    )


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_fwd(x, p: ConvParams, out: np.ndarray = None):
    """Direct convolution: y[n,oc] = bias[oc] + sum_{ic,kh,kw} x * w, zero-padded.

    Loops run over kernel offsets only; each offset contributes a shifted
    elementwise product accumulated over input channels.
    """
    xa = _arr(x)
    n, c, h, w = xa.shape
    if c != p.in_c:
        raise ShapeError(f"{p.name}: input has {c} channels, expected {p.in_c}")
    oh, ow = p.out_hw(h, w)
    s, pad = p.stride, p.pad
    xp = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xa
    wts = p.weights.astype(xa.dtype, copy=False)
    if out is None:
        out = np.empty((n, p.out_c, oh, ow), dtype=xa.dtype)
    acc = np.zeros((n, p.out_c, oh, ow), dtype=xa.dtype)
    for kh in range(p.kh):
        for kw in range(p.kw):
            patch = xp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s]
            acc += np.einsum("nihw,oi->nohw", patch, wts[:, :, kh, kw], optimize=True)
    if np.any(p.bias):
        acc += p.bias.astype(xa.dtype).reshape(1, -1, 1, 1)
    out[...] = acc
    return _wrap_like(x, out)


def conv2d_bwd(x, dy, p: ConvParams):
    """Exact adjoints of conv2d_fwd: (dx, dw, dbias).

    dx is the transposed convolution of dy with the weights; dw correlates
    the input with dy; dbias sums dy over (n, h, w).
    """
    xa, dya = _arr(x), _arr(dy)
    n, c, h, w = xa.shape
    oh, ow = p.out_hw(h, w)
    if dya.shape != (n, p.out_c, oh, ow):
        raise ShapeError(f"{p.name}: dy shape {dya.shape} != expected {(n, p.out_c, oh, ow)}")
    s, pad = p.stride, p.pad
    xp = np.pad(xa, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xa
    wts = p.weights.astype(xa.dtype, copy=False)

    dxp = np.zeros_like(xp)
    dw = np.zeros_like(wts)
    for kh in range(p.kh):
        for kw in range(p.kw):
            patch = xp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s]
            dw[:, :, kh, kw] = np.einsum("nihw,nohw->oi", patch, dya, optimize=True)
            dxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += np.einsum(
                "nohw,oi->nihw", dya, wts[:, :, kh, kw], optimize=True
            )
    dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    dbias = dya.sum(axis=(0, 2, 3), dtype=np.float64).astype(xa.dtype)
    return _wrap_like(x, np.ascontiguousarray(dx)), dw.astype(p.weights.dtype), dbias


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


def bn_stats_twopass(x) -> ChannelStats:
    """Mean then variance in two full passes (population variance, divisor n*h*w).

    The raw sums ride along with the mean pass so the E(X^2)-E(X)^2 identity
    can be cross-checked against the two-pass variance.
    """
    xa = _arr(x).astype(np.float64, copy=False)
    n, c, h, w = xa.shape
    count = n * h * w
    # pass 1: sums and mean
    sum_x = xa.sum(axis=(0, 2, 3))
    sum_x2 = (xa * xa).sum(axis=(0, 2, 3))
    mean = sum_x / count
    # pass 2: centered variance
    centered = xa - mean.reshape(1, c, 1, 1)
    var = (centered * centered).sum(axis=(0, 2, 3)) / count
    return ChannelStats(sum_x=sum_x, sum_x2=sum_x2, count=count, mean=mean, var=var)


def bn_stats_onepass(x) -> ChannelStats:
    """Single-pass statistics via V(X) = E(X^2) - E(X)^2, float64 accumulation."""
    xa = _arr(x).astype(np.float64, copy=False)
    n, c, h, w = xa.shape
    sum_x = xa.sum(axis=(0, 2, 3))
    sum_x2 = (xa * xa).sum(axis=(0, 2, 3))
    return ChannelStats.from_sums(sum_x, sum_x2, n * h * w)


def bn_fwd(x, stats: ChannelStats, p: BNParams, out: np.ndarray = None):
    """y = gamma * (x - mean) / sqrt(var + eps) + beta, per channel."""
    xa = _arr(x)
    c = xa.shape[1]
    if stats.mean.shape[0] != c or p.channels != c:
        raise ShapeError(f"{p.name}: stats/params for {stats.mean.shape[0]}/{p.channels} channels, input has {c}")
    inv = stats.inv_std(p.eps)
    mean = stats.mean.astype(xa.dtype).reshape(1, c, 1, 1)
    scale = (p.gamma * inv).astype(xa.dtype).reshape(1, c, 1, 1)
    beta = p.beta.astype(xa.dtype).reshape(1, c, 1, 1)
    if out is None:
        out = np.empty_like(xa)
    np.multiply(xa - mean, scale, out=out)
    out += beta
    return _wrap_like(x, out)


def bn_bwd(x, dy, stats: ChannelStats, p: BNParams):
    """Standard training-mode BN adjoint through mean and variance.

    Two logical passes: one sweep of (dy, x) for dgamma/dbeta, a second for
    dx = (gamma/std) * (dy - dbeta/m - xhat * dgamma/m), m = n*h*w.
    """
    xa, dya = _arr(x), _arr(dy)
    if xa.shape != dya.shape:
        raise ShapeError(f"{p.name}: dy shape {dya.shape} != x shape {xa.shape}")
    c = xa.shape[1]
    m = stats.count
    inv = stats.inv_std(p.eps)
    mean = stats.mean.astype(xa.dtype).reshape(1, c, 1, 1)
    inv_t = inv.astype(xa.dtype).reshape(1, c, 1, 1)
    # pass 1: parameter gradients
    xhat = (xa - mean) * inv_t
    dbeta = dya.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dya * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    # pass 2: input gradient
    k1 = (dbeta / m).astype(xa.dtype).reshape(1, c, 1, 1)
    k2 = (dgamma / m).astype(xa.dtype).reshape(1, c, 1, 1)
    g = (p.gamma * inv).astype(xa.dtype).reshape(1, c, 1, 1)
    dx = g * (dya - k1 - xhat * k2)
    return _wrap_like(x, dx), dgamma.astype(xa.dtype), dbeta.astype(xa.dtype)


def bn_dx_from_sums(x, dy, stats: ChannelStats, p: BNParams, dgamma, dbeta, out: np.ndarray = None):
    """The dx half of bn_bwd given already-accumulated dgamma/dbeta (sub-BN1' work)."""
    xa, dya = _arr(x), _arr(dy)
    c = xa.shape[1]
    m = stats.count
    inv = stats.inv_std(p.eps)
    mean = stats.mean.astype(xa.dtype).reshape(1, c, 1, 1)
    inv_t = inv.astype(xa.dtype).reshape(1, c, 1, 1)
    k1 = (np.asarray(dbeta, dtype=np.float64) / m).astype(xa.dtype).reshape(1, c, 1, 1)
    k2 = (np.asarray(dgamma, dtype=np.float64) / m).astype(xa.dtype).reshape(1, c, 1, 1)
    g = (p.gamma * inv).astype(xa.dtype).reshape(1, c, 1, 1)
    if out is None:
        out = np.empty_like(xa)
    xhat = (xa - mean) * inv_t
    np.multiply(g, dya - k1 - xhat * k2, out=out)
    return out


# ---------------------------------------------------------------------------
# relu
# ---------------------------------------------------------------------------


def relu_fwd(x, out: np.ndarray = None):
    xa = _arr(x)
    if out is None:
        out = np.empty_like(xa)
    np.maximum(xa, 0, out=out)
    return _wrap_like(x, out)


def relu_bwd(x, dy):
    """dx = dy where x > 0, else 0 (subgradient at 0 taken as 0)."""
    xa, dya = _arr(x), _arr(dy)
    if xa.shape != dya.shape:
        raise ShapeError(f"relu_bwd: shape mismatch {xa.shape} vs {dya.shape}")
    return _wrap_like(x, np.where(xa > 0, dya, xa.dtype.type(0)))


# ---------------------------------------------------------------------------
# concat / split
# ---------------------------------------------------------------------------


class ChannelConcatView:
    """Zero-copy channel concatenation over separately stored pieces.

    Read semantics match the physical concatenation; ``materialize`` makes
    the copy explicit when a consumer needs one dense array.
    """

    def __init__(self, pieces: list[np.ndarray]):
        base = pieces[0].shape
        for piece in pieces[1:]:
            if piece.shape[0] != base[0] or piece.shape[2:] != base[2:]:
                raise ShapeError("concat pieces must share n, h, w")
        self.pieces = pieces
        self.offsets = np.cumsum([0] + [piece.shape[1] for piece in pieces])

    @property
    def shape(self):
        n, _, h, w = self.pieces[0].shape
        return (n, int(self.offsets[-1]), h, w)

    @property
    def dtype(self):
        return self.pieces[0].dtype

    def gather(self, c_lo: int, c_hi: int) -> np.ndarray:
        """Assemble channels [c_lo, c_hi) into one array (on-chip tile read)."""
        cols = []
        for i, piece in enumerate(self.pieces):
            lo, hi = int(self.offsets[i]), int(self.offsets[i + 1])
            a, b = max(c_lo, lo), min(c_hi, hi)
            if a < b:
                cols.append(piece[:, a - lo : b - lo])
        return cols[0] if len(cols) == 1 else np.concatenate(cols, axis=1)

    def materialize(self) -> np.ndarray:
        return np.concatenate(self.pieces, axis=1)

    def __array__(self, dtype=None):
        out = self.materialize()
        return out.astype(dtype) if dtype is not None else out


def concat_fwd(xs: list, physical: bool = True):
    """Channel concatenation; physical copies data, otherwise a zero-copy view."""
    pieces = [_arr(x) for x in xs]
    view = ChannelConcatView(pieces)  # validates shapes
    if physical:
        out = view.materialize()
        return _wrap_like(xs[0], out)
    return view


def concat_bwd(dy, channel_sizes: list[int]):
    """Slice the output gradient back into per-input views (no copies)."""
    dya = _arr(dy)
    grads, off = [], 0
    for c in channel_sizes:
        grads.append(dya[:, off : off + c])
        off += c
    if off != dya.shape[1]:
        raise ShapeError(f"concat_bwd: channel sizes {channel_sizes} != {dya.shape[1]} channels")
    return grads


def split_fwd(x, fanout: int):
    """Hand the same tensor to each consumer (pointer passing, no copy)."""
    if fanout < 2:
        raise ShapeError(f"split fanout must be >= 2, got {fanout}")
    return [x] * fanout


def split_bwd(dys: list):
    """Elementwise sum of all incoming fan-out gradients."""
    arrs = [_arr(d) for d in dys]
    base = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != base:
            raise ShapeError(f"split_bwd: mismatched gradient shapes {base} vs {a.shape}")
    out = arrs[0].copy()
    for a in arrs[1:]:
        out += a
    return _wrap_like(dys[0], out)


# ---------------------------------------------------------------------------
# elementwise sum / average pooling
# ---------------------------------------------------------------------------


def ews_fwd(a, b):
    aa, ba = _arr(a), _arr(b)
    if aa.shape != ba.shape:
        raise ShapeError(f"ews_fwd: shape mismatch {aa.shape} vs {ba.shape}")
    return _wrap_like(a, aa + ba)


def ews_bwd(dy):
    """Both input gradients equal dy."""
    return dy, dy


def avgpool_fwd(x, k: int, stride: int = None, out: np.ndarray = None):
    """Non-overlapping k x k window mean (stride must equal k)."""
    stride = k if stride is None else stride
    if stride != k:
        raise ShapeError(f"avgpool windows must be non-overlapping (stride {stride} != k {k})")
    xa = _arr(x)
    n, c, h, w = xa.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"avgpool: window {k} larger than input {h}x{w}")
    win = xa[:, :, : oh * k, : ow * k].reshape(n, c, oh, k, ow, k)
    res = win.mean(axis=(3, 5), dtype=xa.dtype)
    if out is None:
        return _wrap_like(x, res)
    out[...] = res
    return _wrap_like(x, out)


def avgpool_bwd(dy, in_shape: tuple, k: int):
    """Spread each dy element uniformly (dy / k^2) over its window."""
    dya = _arr(dy)
    n, c, h, w = in_shape
    oh, ow = dya.shape[2], dya.shape[3]
    dx = np.zeros(in_shape, dtype=dya.dtype)
    spread = np.repeat(np.repeat(dya, k, axis=2), k, axis=3) / (k * k)
    dx[:, :, : oh * k, : ow * k] = spread
    return _wrap_like(dy, dx)
