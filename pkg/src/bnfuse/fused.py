"""Executable kernels for the fused node kinds.

Forward kernels process per-(sample-range, output-channel-range) tiles
sized to a configurable on-chip budget, so one kernel invocation really is
a single pass over each distinct tensor: statistics accumulate while the
convolution output is written, normalization and clipping happen while the
next convolution reads its input.  Statistics use float64 partial sums per
tile, merged in fixed tile order.

Backward kernels keep the two-pass structure of a convolution backward
(gradient pass, weight pass) with the normalization and clipping algebra
applied inline.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ShapeError, StateError
from .ops import BNParams, ChannelStats, ConvParams, bn_dx_from_sums

DEFAULT_BUDGET = 256 * 1024  # bytes per worker of on-chip tile storage


def _run_tiles(tiles, work, workers: int):
    """Execute one tile task per grid cell; partial results keyed by tile
    index so the merge order is fixed no matter how many workers ran."""
    if workers <= 1 or len(tiles) <= 1:
        return [work(t) for t in tiles]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, tiles))


def _conv_core(x: np.ndarray, w: np.ndarray, bias: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Direct convolution over raw arrays (weights may be an oc-slice)."""
    n, c, h, ww = x.shape
    oc = w.shape[0]
    oh = (h + 2 * pad - w.shape[2]) // stride + 1
    ow = (ww + 2 * pad - w.shape[3]) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    acc = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    for kh in range(w.shape[2]):
        for kw in range(w.shape[3]):
            patch = xp[:, :, kh : kh + stride * oh : stride, kw : kw + stride * ow : stride]
            acc += np.einsum("nihw,oi->nohw", patch, w[:, :, kh, kw].astype(x.dtype), optimize=True)
    if np.any(bias):
        acc += bias.astype(x.dtype).reshape(1, -1, 1, 1)
    return acc


def plan_tiles(x_shape, conv: ConvParams, itemsize: int, budget: int):
    """Partition the (sample, output-channel) grid into budget-sized tiles.

    Prefers keeping all output channels together (so normalization work per
    input tile happens once) and blocks over samples; splits channels only
    when a single sample's tile exceeds the budget.
    """
    n, c, h, w = x_shape
    oh, ow = conv.out_hw(h, w)
    in_bytes = c * h * w * itemsize
    out_bytes_per_oc = oh * ow * itemsize
    w_bytes_per_oc = conv.in_c * conv.kh * conv.kw * itemsize

    oc_blk = conv.out_c
    while oc_blk > 1 and in_bytes + oc_blk * (out_bytes_per_oc + w_bytes_per_oc) > budget:
        oc_blk = (oc_blk + 1) // 2
    per_sample = in_bytes + oc_blk * (out_bytes_per_oc + w_bytes_per_oc)
    n_blk = max(1, min(n, budget // per_sample if per_sample <= budget else 1))

    tiles = []
    for n0 in range(0, n, n_blk):
        for oc0 in range(0, conv.out_c, oc_blk):
            tiles.append((slice(n0, min(n0 + n_blk, n)), slice(oc0, min(oc0 + oc_blk, conv.out_c))))
    return tiles


def fused_conv_stats_fwd(x: np.ndarray, conv: ConvParams, out: np.ndarray,
                         budget: int = DEFAULT_BUDGET, workers: int = 1) -> ChannelStats:
    """Convolution with per-channel sum/sum-of-squares accumulated during the
    output write: x is read once, out written once, statistics ride along."""
    if x.shape[1] != conv.in_c:
        raise ShapeError(f"{conv.name}: input has {x.shape[1]} channels, expected {conv.in_c}")
    tiles = plan_tiles(x.shape, conv, x.itemsize, budget)

    def work(tile):
        ns, ocs = tile
        res = _conv_core(x[ns], conv.weights[ocs], conv.bias[ocs], conv.stride, conv.pad)
        out[ns, ocs] = res
        t64 = res.astype(np.float64, copy=False)
        return ocs, t64.sum(axis=(0, 2, 3)), (t64 * t64).sum(axis=(0, 2, 3))

    sum_x = np.zeros(conv.out_c, dtype=np.float64)
    sum_x2 = np.zeros(conv.out_c, dtype=np.float64)
    for ocs, s1, s2 in _run_tiles(tiles, work, workers):  # fixed tile order
        sum_x[ocs] += s1
        sum_x2[ocs] += s2
    n = x.shape[0]
    return ChannelStats.from_sums(sum_x, sum_x2, n * out.shape[2] * out.shape[3])


def fused_norm_relu_conv_fwd(x: np.ndarray, stats: ChannelStats, bn: BNParams, conv: ConvParams,
                             out: np.ndarray, saved_out: np.ndarray,
                             budget: int = DEFAULT_BUDGET, workers: int = 1,
                             emit_stats: bool = False) -> ChannelStats | None:
    """Normalize, clip, and convolve in one pass over x.

    The post-ReLU normalized tensor is materialized once into ``saved_out``
    (it is re-read by the backward pass); optionally the convolution
    output's statistics accumulate during its write.  Tiles sharing a
    sample range form one task: the normalized tile is built once and all
    its output-channel blocks convolve against it.
    """
    if stats is None:
        raise StateError(f"{conv.name}: no statistics available for normalization input")
    c = x.shape[1]
    if stats.mean.shape[0] != c or bn.channels != c:
        raise ShapeError(f"{conv.name}: stats/bn cover {stats.mean.shape[0]}/{bn.channels} channels, input has {c}")
    inv = stats.inv_std(bn.eps)
    mean = stats.mean.astype(x.dtype).reshape(1, c, 1, 1)
    scale = (bn.gamma * inv).astype(x.dtype).reshape(1, c, 1, 1)
    beta = bn.beta.astype(x.dtype).reshape(1, c, 1, 1)

    groups: dict[tuple, list[slice]] = {}
    for ns, ocs in plan_tiles(x.shape, conv, x.itemsize, budget):
        groups.setdefault((ns.start, ns.stop), []).append(ocs)
    tasks = sorted(groups.items())

    def work(task):
        (n0, n1), oc_slices = task
        ns = slice(n0, n1)
        xn = (x[ns] - mean) * scale + beta
        np.maximum(xn, 0, out=xn)
        saved_out[ns] = xn
        partials = []
        for ocs in oc_slices:
            tile = _conv_core(xn, conv.weights[ocs], conv.bias[ocs], conv.stride, conv.pad)
            out[ns, ocs] = tile
            if emit_stats:
                t64 = tile.astype(np.float64, copy=False)
                partials.append((ocs, t64.sum(axis=(0, 2, 3)), (t64 * t64).sum(axis=(0, 2, 3))))
        return partials

    results = _run_tiles(tasks, work, workers)
    if emit_stats:
        sum_y = np.zeros(conv.out_c, dtype=np.float64)
        sum_y2 = np.zeros(conv.out_c, dtype=np.float64)
        for partials in results:  # fixed task order
            for ocs, s1, s2 in partials:
                sum_y[ocs] += s1
                sum_y2[ocs] += s2
        return ChannelStats.from_sums(sum_y, sum_y2, x.shape[0] * out.shape[2] * out.shape[3])
    return None


def fused_nrc_bwd(x: np.ndarray, saved_postrelu: np.ndarray, stats: ChannelStats,
                  bn: BNParams, conv: ConvParams, dy: np.ndarray):
    """Backward of the normalize-relu-conv kernel.

    Gradient pass: the convolution's input gradient is masked by the saved
    post-ReLU tensor while dgamma/dbeta accumulate in the same sweep (the
    split-off scale/shift gradient position).  Weight pass: correlate the
    saved post-ReLU tensor with dy.  Returns (dt1, dw, dbias, dgamma,
    dbeta) where dt1 is the gradient at the normalized-tensor position.
    """
    if saved_postrelu is None:
        raise StateError(f"{conv.name}: missing saved post-relu tensor for backward")
    n, c, h, w = x.shape
    oh, ow = conv.out_hw(h, w)
    if dy.shape != (n, conv.out_c, oh, ow):
        raise ShapeError(f"{conv.name}: dy shape {dy.shape} != {(n, conv.out_c, oh, ow)}")
    s, pad = conv.stride, conv.pad
    wts = conv.weights.astype(x.dtype, copy=False)

    # gradient pass: transposed convolution, clipped inline, sums ride along
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for kh in range(conv.kh):
        for kw in range(conv.kw):
            dxp[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s] += np.einsum(
                "nohw,oi->nihw", dy, wts[:, :, kh, kw], optimize=True
            )
    dt1 = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
    np.multiply(dt1, saved_postrelu > 0, out=dt1)
    dbeta = dt1.sum(axis=(0, 2, 3), dtype=np.float64)
    inv = stats.inv_std(bn.eps)
    xhat = (x - stats.mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.astype(x.dtype).reshape(1, c, 1, 1)
    dgamma = (dt1 * xhat).sum(axis=(0, 2, 3), dtype=np.float64)

    # weight pass
    saved_p = (
        np.pad(saved_postrelu, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else saved_postrelu
    )
    dw = np.zeros_like(wts)
    for kh in range(conv.kh):
        for kw in range(conv.kw):
            patch = saved_p[:, :, kh : kh + s * oh : s, kw : kw + s * ow : s]
            dw[:, :, kh, kw] = np.einsum("nihw,nohw->oi", patch, dy, optimize=True)
    dbias = dy.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)
    return np.ascontiguousarray(dt1), dw.astype(conv.weights.dtype), dbias, dgamma, dbeta


def fused_conv_stats_bwd(x: np.ndarray, saved_in: np.ndarray, conv: ConvParams,
                         dt1: np.ndarray, dgamma, dbeta, stats: ChannelStats,
                         bn_gamma: np.ndarray, bn_eps: float, clip_input: bool = False):
    """Backward of the conv+stats kernel when the output gradient arrives as
    a deferred normalized-position gradient: the pre-normalization input
    gradient is derived inline from (dt1, dgamma, dbeta) against this
    kernel's own forward output x, then the ordinary convolution adjoints
    run.  Returns (dx, dw, dbias)."""
    from .ops import conv2d_bwd  # adjoints shared with the reference path

    bn = BNParams(gamma=bn_gamma, beta=np.zeros_like(bn_gamma), eps=bn_eps)
    dy = bn_dx_from_sums(x, dt1, stats, bn, dgamma, dbeta)
    xe = np.maximum(saved_in, 0) if clip_input else saved_in
    dx, dw, dbias = conv2d_bwd(xe, dy, conv)
    if clip_input:
        dx = np.where(saved_in > 0, dx, saved_in.dtype.type(0))
    return dx, dw, dbias


def fused_split_bwd_bn_dx(branch_grads: list, resolve) -> np.ndarray:
    """Split backward with the boundary BN dx transform folded into the
    gradient sum: each fan-in gradient is resolved (deferred packages get
    the dx transform applied inline during this read) and accumulated."""
    total = None
    for gv in branch_grads:
        arr = resolve(gv)
        total = arr.copy() if total is None else total + arr
    return total
