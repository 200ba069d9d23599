"""Topological forward/backward execution of layer graphs.

The executor keeps every activation for the backward pass, allocates
shared per-block buffers when concatenation runs in view mode (producers
write their channel range in place, so Concat is pure bookkeeping), and
lets fused backward kernels hand a *deferred* batch-norm gradient up the
graph: the package holds the gradient at the normalized position plus the
accumulated per-channel sums, and whichever node next reads that gradient
materializes the input gradient inline.  A standalone FissionSubBN1 node
materializes it as its own memory pass instead.

Each kernel records the full-tensor read/write passes it schedules on the
context ledger; the traffic model's analytic counts are derived separately
and cross-checked against these in tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fused
from . import graph as G
from . import ops
from .errors import ShapeError, StateError
from .ops import BNParams, ChannelStats
from .tensor import Tensor4D
from .traffic import BWD, FWD, SweepLedger

DEFAULT_BUDGET = fused.DEFAULT_BUDGET


@dataclass
class ExecCtx:
    ledger: SweepLedger | None = None
    budget: int = DEFAULT_BUDGET
    workers: int = 1  # tile workers inside fused kernels
    timings: dict = None  # (node_id, pass) -> seconds

    def rec(self, node, pass_, slot, direction, sweeps, role):
        if self.ledger is not None:
            self.ledger.rec(node, pass_, slot, direction, sweeps, role)

    def rec_weights(self, node, pass_, direction, nbytes):
        if self.ledger is not None:
            self.ledger.rec_weights(node, pass_, direction, nbytes)


class Activations:
    """Slot-indexed value table plus shared block buffers for view concat."""

    def __init__(self, g: G.Graph, dtype):
        self.graph = g
        self.dtype = dtype
        self.vals: dict[int, object] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.node_stats: dict[int, ChannelStats] = {}
        self.use_shared = any(
            n.kind == G.FUSED_CONCAT_STATS or (n.kind == G.CONCAT and not n.attrs.physical)
            for n in g.nodes
        )

    def out_array(self, slot_id: int, need_buffer: bool = False) -> np.ndarray:
        slot = self.graph.slots[slot_id]
        if need_buffer and not (self.use_shared and slot.buffer is not None):
            raise StateError(f"slot {slot_id}: view concatenation requires a shared buffer annotation")
        if self.use_shared and slot.buffer is not None:
            group, off = slot.buffer
            buf = self.buffers.get(group)
            if buf is None:
                c_total, h, w = self.graph.buffer_groups[group]
                buf = np.zeros((slot.shape[0], c_total, h, w), dtype=self.dtype)
                self.buffers[group] = buf
            view = buf[:, off : off + slot.shape[1]]
            self.vals[slot_id] = view
            return view
        arr = np.empty(slot.shape, dtype=self.dtype)
        self.vals[slot_id] = arr
        return arr

    def get(self, slot_id: int):
        try:
            return self.vals[slot_id]
        except KeyError:
            raise StateError(f"slot {slot_id} was never produced (missing saved activation?)") from None

    def outputs(self) -> dict[int, np.ndarray]:
        return {sid: self.vals[sid] for sid in self.graph.outputs}


@dataclass
class DeferredBNGrad:
    """Gradient at the normalized-tensor position awaiting the dx transform.

    Carries the per-channel gradient sums and statistics needed to turn the
    normalized-position gradient into the pre-normalization input gradient;
    the transform is applied inline by whichever kernel reads it next.
    """

    dt1: np.ndarray
    dgamma: np.ndarray
    dbeta: np.ndarray
    stats: ChannelStats
    gamma: np.ndarray
    eps: float
    x_slot: int
    c_lo: int
    c_hi: int

    @property
    def shape(self):
        return self.dt1.shape

    def slice(self, lo: int, hi: int) -> "DeferredBNGrad":
        return DeferredBNGrad(
            dt1=self.dt1[:, lo:hi], dgamma=self.dgamma[lo:hi], dbeta=self.dbeta[lo:hi],
            stats=self.stats.slice(lo, hi), gamma=self.gamma[lo:hi], eps=self.eps,
            x_slot=self.x_slot, c_lo=self.c_lo + lo, c_hi=self.c_lo + hi,
        )

    def materialize(self, acts: Activations) -> np.ndarray:
        x = acts.get(self.x_slot)[:, self.c_lo : self.c_hi]
        bn = BNParams(gamma=self.gamma, beta=np.zeros_like(self.gamma), eps=self.eps)
        return ops.bn_dx_from_sums(x, self.dt1, self.stats, bn, self.dgamma, self.dbeta)


@dataclass
class GradBundle:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    inputs: dict[int, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, g: np.ndarray):
        if name in self.params:
            self.params[name] = self.params[name] + g
        else:
            self.params[name] = g


def _resolve(g, acts: Activations):
    return g.materialize(acts) if isinstance(g, DeferredBNGrad) else g


def _add_grad(grads: dict, slot_id: int, g):
    cur = grads.get(slot_id)
    if cur is None:
        grads[slot_id] = g
        return
    if isinstance(cur, DeferredBNGrad) or isinstance(g, DeferredBNGrad):
        raise StateError(f"slot {slot_id}: deferred gradient cannot be accumulated with another contribution")
    grads[slot_id] = cur + g


def _incoming(grads: dict, slot_id: int, acts: Activations) -> np.ndarray:
    g = grads.get(slot_id)
    if g is None:
        raise StateError(f"no gradient arrived at slot {slot_id}")
    return _resolve(g, acts)


# ---------------------------------------------------------------------------
# forward handlers
# ---------------------------------------------------------------------------


def _fwd_conv(node, g, acts, ctx):
    at = node.attrs
    x = acts.get(node.inputs[0])
    xe = np.maximum(x, 0) if at.clip_input else x  # RCF: clip during the ifmap read
    y = acts.out_array(node.outputs[0])
    if node.kind == G.FUSED_CONV_STATS:
        stats = fused.fused_conv_stats_fwd(xe, at.conv, out=y, budget=ctx.budget, workers=ctx.workers)
        acts.vals[node.outputs[1]] = stats
    else:
        ops.conv2d_fwd(xe, at.conv, out=y)
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")
    ctx.rec_weights(node, FWD, "read", (at.conv.weights.size + at.conv.bias.size) * 4)


def _fwd_bn(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    if node.attrs.onepass:
        stats = ops.bn_stats_onepass(x)  # one sweep
        reads = 1
    else:
        stats = ops.bn_stats_twopass(x)  # mean sweep + variance sweep
        reads = 2
    acts.node_stats[node.id] = stats
    y = acts.out_array(node.outputs[0])
    ops.bn_fwd(x, stats, node.attrs.bn, out=y)  # normalize: one more read
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", reads + 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")


def _fwd_relu(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    y = acts.out_array(node.outputs[0])
    ops.relu_fwd(x, out=y)
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")


def _fwd_subbn1(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    acts.vals[node.outputs[0]] = ops.bn_stats_onepass(x)
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")


def _fwd_subbn2(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    stats = acts.get(node.inputs[1])
    y = acts.out_array(node.outputs[0])
    ops.bn_fwd(x, stats, node.attrs.bn, out=y)
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")


def _fwd_nrc(node, g, acts, ctx):
    at = node.attrs
    x = acts.get(node.inputs[0])
    stats = acts.get(node.inputs[1])
    y = acts.out_array(node.outputs[0])
    saved = acts.out_array(node.outputs[1])
    out_stats = fused.fused_norm_relu_conv_fwd(
        x, stats, at.bn, at.conv, out=y, saved_out=saved,
        budget=ctx.budget, workers=ctx.workers, emit_stats=at.emit_stats,
    )
    if at.emit_stats:
        acts.vals[node.outputs[2]] = out_stats
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[1]], "write", 1, "saved")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")
    ctx.rec_weights(node, FWD, "read", (at.conv.weights.size + at.conv.bias.size) * 4)


def _fwd_concat(node, g, acts, ctx):
    pieces = [acts.get(s) for s in node.inputs]
    if node.attrs.physical:
        y = acts.out_array(node.outputs[0])
        np.concatenate(pieces, axis=1, out=y)
        for s in node.inputs:
            ctx.rec(node, FWD, g.slots[s], "read", 1, "ifmap")
        ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")
    else:
        # view mode: producers already wrote their channel ranges in place
        acts.vals[node.outputs[0]] = acts.out_array(node.outputs[0], need_buffer=True)


def _fwd_concat_stats(node, g, acts, ctx):
    feat = [s for s in node.inputs if g.slots[s].kind == "feature"]
    stat = [s for s in node.inputs if g.slots[s].kind == "stats"]
    for s in feat:
        acts.get(s)  # shape/topology sanity; no data movement
    acts.vals[node.outputs[0]] = acts.out_array(node.outputs[0], need_buffer=True)
    acts.vals[node.outputs[1]] = ops.concat_stats([acts.get(s) for s in stat])


def _fwd_split(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    for out in node.outputs:
        acts.vals[out] = x  # pointer passing


def _fwd_ews(node, g, acts, ctx):
    a = acts.get(node.inputs[0])
    b = acts.get(node.inputs[1])
    y = acts.out_array(node.outputs[0])
    np.copyto(y, a)
    cb = b.shape[1]
    if node.attrs.pad_channels:
        y[:, :cb] += b  # skip path zero-padded up to the main path's width
    else:
        if a.shape != b.shape:
            raise ShapeError(f"EltwiseSum operands {a.shape} vs {b.shape}")
        y += b
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.inputs[1]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")


def _fwd_pool(node, g, acts, ctx):
    x = acts.get(node.inputs[0])
    y = acts.out_array(node.outputs[0])
    ops.avgpool_fwd(x, node.attrs.k, out=y)
    if node.attrs.emit_stats:
        # statistics of the freshly written tile ride along with the write
        acts.vals[node.outputs[1]] = ops.bn_stats_onepass(y)
    ctx.rec(node, FWD, g.slots[node.inputs[0]], "read", 1, "ifmap")
    ctx.rec(node, FWD, g.slots[node.outputs[0]], "write", 1, "ofmap")


_FWD_HANDLERS = {
    G.CONV: _fwd_conv,
    G.FUSED_CONV_STATS: _fwd_conv,
    G.BN: _fwd_bn,
    G.RELU: _fwd_relu,
    G.SUBBN1: _fwd_subbn1,
    G.SUBBN2: _fwd_subbn2,
    G.FUSED_NRC: _fwd_nrc,
    G.CONCAT: _fwd_concat,
    G.FUSED_CONCAT_STATS: _fwd_concat_stats,
    G.SPLIT: _fwd_split,
    G.EWS: _fwd_ews,
    G.POOL: _fwd_pool,
}


# ---------------------------------------------------------------------------
# backward handlers
# ---------------------------------------------------------------------------


def _bwd_conv(node, g, acts, grads, bundle, ctx):
    at = node.attrs
    raw = grads.get(node.outputs[0])
    x = acts.get(node.inputs[0])
    if isinstance(raw, DeferredBNGrad):
        # conv+stats backward: the pre-normalization gradient is derived
        # inline from the deferred package against this kernel's own output
        y = acts.get(raw.x_slot)[:, raw.c_lo : raw.c_hi]
        dx, dw, db = fused.fused_conv_stats_bwd(
            y, x, at.conv, raw.dt1, raw.dgamma, raw.dbeta, raw.stats,
            raw.gamma, raw.eps, clip_input=at.clip_input,
        )
    else:
        dy = _incoming(grads, node.outputs[0], acts)
        xe = np.maximum(x, 0) if at.clip_input else x
        dx, dw, db = ops.conv2d_bwd(xe, dy, at.conv)
        if at.clip_input:
            dx = np.where(x > 0, dx, x.dtype.type(0))
    bundle.add(f"{at.conv.name}.weight", dw)
    bundle.add(f"{at.conv.name}.bias", db)
    _add_grad(grads, node.inputs[0], dx)
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 2, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 1, "saved")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")
    nbytes = (at.conv.weights.size + at.conv.bias.size) * 4
    ctx.rec_weights(node, BWD, "read", nbytes)
    ctx.rec_weights(node, BWD, "write", nbytes)


def _bwd_bn(node, g, acts, grads, bundle, ctx):
    stats = acts.node_stats.get(node.id)
    if stats is None:
        raise StateError(f"node {node.id}: backward before forward (no saved statistics)")
    dy = _incoming(grads, node.outputs[0], acts)
    x = acts.get(node.inputs[0])
    dx, dgamma, dbeta = ops.bn_bwd(x, dy, stats, node.attrs.bn)
    bundle.add(f"{node.attrs.bn.name}.gamma", dgamma)
    bundle.add(f"{node.attrs.bn.name}.beta", dbeta)
    _add_grad(grads, node.inputs[0], dx)
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 2, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 2, "saved")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")


def _bwd_relu(node, g, acts, grads, bundle, ctx):
    dy = _incoming(grads, node.outputs[0], acts)
    x = acts.get(node.inputs[0])
    _add_grad(grads, node.inputs[0], ops.relu_bwd(x, dy))
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 1, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 1, "saved")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")


def _bwd_subbn1(node, g, acts, grads, bundle, ctx):
    if node.attrs.defer_backward:
        return  # the downstream gradient reader applies the dx transform inline
    pending = grads.get(node.inputs[0])
    if pending is None:
        return  # statistics were never used downstream of a gradient
    if isinstance(pending, DeferredBNGrad):
        grads[node.inputs[0]] = pending.materialize(acts)
        ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 1, "grad_in")
        ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 1, "saved")
        ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")


def _bwd_subbn2(node, g, acts, grads, bundle, ctx):
    at = node.attrs
    dy = _incoming(grads, node.outputs[0], acts)
    x = acts.get(node.inputs[0])
    stats = acts.get(node.inputs[1])
    c = x.shape[1]
    inv = stats.inv_std(at.bn.eps)
    xhat = (x - stats.mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv.astype(x.dtype).reshape(1, c, 1, 1)
    dbeta = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    dgamma = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    bundle.add(f"{at.bn.name}.gamma", dgamma.astype(x.dtype))
    bundle.add(f"{at.bn.name}.beta", dbeta.astype(x.dtype))
    package = DeferredBNGrad(
        dt1=dy, dgamma=dgamma, dbeta=dbeta, stats=stats, gamma=at.bn.gamma, eps=at.bn.eps,
        x_slot=node.inputs[0], c_lo=0, c_hi=c,
    )
    _add_grad(grads, node.inputs[0], package)
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 1, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "read", 1, "saved")


def _bwd_nrc(node, g, acts, grads, bundle, ctx):
    at = node.attrs
    dy = _incoming(grads, node.outputs[0], acts)
    x = acts.get(node.inputs[0])
    stats = acts.get(node.inputs[1])
    saved = acts.get(node.outputs[1])
    dt1, dw, dbias, dgamma, dbeta = fused.fused_nrc_bwd(x, saved, stats, at.bn, at.conv, dy)
    bundle.add(f"{at.conv.name}.weight", dw)
    bundle.add(f"{at.conv.name}.bias", dbias)
    bundle.add(f"{at.bn.name}.gamma", dgamma.astype(x.dtype))
    bundle.add(f"{at.bn.name}.beta", dbeta.astype(x.dtype))
    package = DeferredBNGrad(
        dt1=dt1, dgamma=dgamma, dbeta=dbeta, stats=stats, gamma=at.bn.gamma, eps=at.bn.eps,
        x_slot=node.inputs[0], c_lo=0, c_hi=x.shape[1],
    )
    _add_grad(grads, node.inputs[0], package)
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 2, "grad_out")
    ctx.rec(node, BWD, g.slots[node.outputs[1]], "read", 1, "saved")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")
    nbytes = (at.conv.weights.size + at.conv.bias.size) * 4
    ctx.rec_weights(node, BWD, "read", nbytes)
    ctx.rec_weights(node, BWD, "write", nbytes)


def _bwd_concat(node, g, acts, grads, bundle, ctx):
    dy = grads.get(node.outputs[0])
    if dy is None:
        raise StateError(f"no gradient arrived at concat output {node.outputs[0]}")
    feat_inputs = [s for s in node.inputs if g.slots[s].kind == "feature"]
    physical = node.kind == G.CONCAT and node.attrs.physical
    off = 0
    for s in feat_inputs:
        c = g.slots[s].shape[1]
        if isinstance(dy, DeferredBNGrad):
            piece = dy.slice(off, off + c)  # per-channel package slicing, zero copy
        else:
            piece = dy[:, off : off + c].copy() if physical else dy[:, off : off + c]
        _add_grad(grads, s, piece)
        off += c
    if physical:
        ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 1, "grad_out")
        for s in feat_inputs:
            ctx.rec(node, BWD, g.slots[s], "write", 1, "grad_in")


def _bwd_split(node, g, acts, grads, bundle, ctx):
    # gradient summing; deferred packages resolve inline during the read
    for out in node.outputs:
        if grads.get(out) is None:
            raise StateError(f"no gradient arrived at split branch {out}")
    total = fused.fused_split_bwd_bn_dx(
        [grads[out] for out in node.outputs], lambda gv: _resolve(gv, acts)
    )
    _add_grad(grads, node.inputs[0], total)
    for out in node.outputs:
        ctx.rec(node, BWD, g.slots[out], "read", 1, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")


def _bwd_ews(node, g, acts, grads, bundle, ctx):
    dy = _incoming(grads, node.outputs[0], acts)
    _add_grad(grads, node.inputs[0], dy)
    cb = g.slots[node.inputs[1]].shape[1]
    _add_grad(grads, node.inputs[1], dy[:, :cb] if node.attrs.pad_channels else dy)
    # pointer/view passing: no sweeps


def _bwd_pool(node, g, acts, grads, bundle, ctx):
    dy = _incoming(grads, node.outputs[0], acts)
    in_shape = g.slots[node.inputs[0]].shape
    _add_grad(grads, node.inputs[0], ops.avgpool_bwd(dy, in_shape, node.attrs.k))
    ctx.rec(node, BWD, g.slots[node.outputs[0]], "read", 1, "grad_out")
    ctx.rec(node, BWD, g.slots[node.inputs[0]], "write", 1, "grad_in")


_BWD_HANDLERS = {
    G.CONV: _bwd_conv,
    G.FUSED_CONV_STATS: _bwd_conv,
    G.BN: _bwd_bn,
    G.RELU: _bwd_relu,
    G.SUBBN1: _bwd_subbn1,
    G.SUBBN2: _bwd_subbn2,
    G.FUSED_NRC: _bwd_nrc,
    G.CONCAT: _bwd_concat,
    G.FUSED_CONCAT_STATS: _bwd_concat,
    G.SPLIT: _bwd_split,
    G.EWS: _bwd_ews,
    G.POOL: _bwd_pool,
}


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------


def _as_input_table(g: G.Graph, inputs) -> dict[int, np.ndarray]:
    if isinstance(inputs, (np.ndarray, Tensor4D)):
        if len(g.inputs) != 1:
            raise ShapeError(f"graph has {len(g.inputs)} inputs, got a single tensor")
        inputs = {g.inputs[0]: inputs}
    table = {}
    for sid, val in inputs.items():
        arr = val.data if isinstance(val, Tensor4D) else np.asarray(val)
        want = g.slots[sid].shape
        if arr.shape != want:
            raise ShapeError(f"input slot {sid}: shape {arr.shape} != declared {want}")
        table[sid] = arr
    return table


def forward(g: G.Graph, inputs, mode: str = "train", ctx: ExecCtx | None = None) -> Activations:
    """Execute every node in topological order; keeps activations for backward."""
    if mode != "train":
        raise StateError(f"only train mode is supported, got {mode!r}")
    ctx = ctx or ExecCtx()
    table = _as_input_table(g, inputs)
    acts = Activations(g, dtype=next(iter(table.values())).dtype)
    acts.vals.update(table)
    for node in g.nodes:
        t0 = time.perf_counter() if ctx.timings is not None else 0.0
        try:
            _FWD_HANDLERS[node.kind](node, g, acts, ctx)
        except ShapeError as e:
            raise ShapeError(f"node {node.id} ({node.kind} {node.name}): {e}") from e
        if ctx.timings is not None:
            key = (node.id, FWD)
            ctx.timings[key] = ctx.timings.get(key, 0.0) + time.perf_counter() - t0
    return acts


def backward(g: G.Graph, acts: Activations, loss_grads: dict, ctx: ExecCtx | None = None) -> GradBundle:
    """Reverse-topological traversal; returns parameter and graph-input gradients."""
    ctx = ctx or ExecCtx()
    grads: dict[int, object] = {}
    for sid in g.outputs:
        if sid not in loss_grads:
            raise ShapeError(f"loss gradient missing for output slot {sid}")
        arr = loss_grads[sid]
        arr = arr.data if isinstance(arr, Tensor4D) else np.asarray(arr)
        if arr.shape != g.slots[sid].shape:
            raise ShapeError(f"loss grad slot {sid}: shape {arr.shape} != {g.slots[sid].shape}")
        grads[sid] = arr
    bundle = GradBundle()
    for node in reversed(g.nodes):
        t0 = time.perf_counter() if ctx.timings is not None else 0.0
        try:
            _BWD_HANDLERS[node.kind](node, g, acts, grads, bundle, ctx)
        except ShapeError as e:
            raise ShapeError(f"node {node.id} ({node.kind} {node.name}): {e}") from e
        if ctx.timings is not None:
            key = (node.id, BWD)
            ctx.timings[key] = ctx.timings.get(key, 0.0) + time.perf_counter() - t0
    for sid in g.inputs:
        gv = grads.get(sid)
        bundle.inputs[sid] = _resolve(gv, acts) if gv is not None else None
    return bundle
