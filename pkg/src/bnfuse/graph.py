"""Typed layer DAG and builders for the two model families.

A Graph is a list of LayerNodes in topological order plus a slot table.
Slots carry feature-map shapes (n, c, h, w) or per-channel statistics.
Builders produce micro-scale executable variants and full-shape variants
that exist only for analytic traffic accounting.

Dense blocks use nested channel concatenation: the running feature stack
for composite layer l+1 is concat(stack_l, new_features_l).  Every stack
slot is annotated with a (buffer group, channel offset) so that view-mode
concatenation can be executed as in-place writes into one shared block
buffer; physical-mode concatenation ignores the annotation and copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSpecError, ShapeError
from .ops import BNParams, ConvParams
from .tensor import Rng

# node kinds
CONV = "Conv2D"
BN = "BatchNorm"
RELU = "ReLU"
CONCAT = "Concat"
SPLIT = "Split"
EWS = "EltwiseSum"
POOL = "AvgPool"
FUSED_CONV_STATS = "FusedConvStats"
FUSED_NRC = "FusedNormReluConv"
FUSED_CONCAT_STATS = "FusedConcatStats"
SUBBN1 = "FissionSubBN1"
SUBBN2 = "FissionSubBN2"

ALL_KINDS = {
    CONV, BN, RELU, CONCAT, SPLIT, EWS, POOL,
    FUSED_CONV_STATS, FUSED_NRC, FUSED_CONCAT_STATS, SUBBN1, SUBBN2,
}

# kinds whose kernels are convolutions (the CONV/FC reporting group)
CONV_GROUP = {CONV, FUSED_CONV_STATS, FUSED_NRC}

# feature-input arity per kind: (min, max or None); stats inputs not counted
_ARITY = {
    CONV: (1, 1), BN: (1, 1), RELU: (1, 1), EWS: (2, 2), POOL: (1, 1),
    SPLIT: (1, 1), CONCAT: (1, None), SUBBN1: (1, 1), SUBBN2: (1, 1),
    FUSED_CONV_STATS: (1, 1), FUSED_NRC: (1, 1), FUSED_CONCAT_STATS: (1, None),
}


# ---------------------------------------------------------------------------
# IR data types
# ---------------------------------------------------------------------------


@dataclass
class Slot:
    id: int
    shape: tuple  # (n, c, h, w) for features, (c,) for stats
    kind: str = "feature"  # feature | stats
    name: str = ""
    buffer: tuple | None = None  # (group name, channel offset) for shared stacks

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def channels(self) -> int:
        return self.shape[1] if self.kind == "feature" else self.shape[0]


@dataclass
class ConvAttrs:
    conv: ConvParams
    clip_input: bool = False  # ReLU folded into the ifmap read (RCF)


@dataclass
class BNAttrs:
    bn: BNParams
    onepass: bool = False  # single-sweep statistics via E(X^2)-E(X)^2 (MVF)


@dataclass
class SubBN1Attrs:
    # backward dx materialization delegated to the downstream gradient reader
    defer_backward: bool = False


@dataclass
class SubBN2Attrs:
    bn: BNParams


@dataclass
class NRCAttrs:
    bn: BNParams
    conv: ConvParams
    emit_stats: bool = False  # accumulate conv-output stats during the write (ICF)


@dataclass
class ConcatAttrs:
    physical: bool = True


@dataclass
class SplitAttrs:
    fanout: int = 2


@dataclass
class EwsAttrs:
    # zero-pad the second operand's channels up to the first's (parameter-free
    # downsample shortcut); 0 means shapes must match exactly
    pad_channels: int = 0


@dataclass
class PoolAttrs:
    k: int = 2
    emit_stats: bool = False  # accumulate output stats during the write (ICF)


@dataclass
class LayerNode:
    id: int
    kind: str
    attrs: object
    inputs: list[int]
    outputs: list[int]
    saved_for_backward: list[int] = field(default_factory=list)
    name: str = ""

    def __repr__(self):
        return f"<{self.kind} #{self.id} {self.name} in={self.inputs} out={self.outputs}>"


class Graph:
    def __init__(self, meta: dict | None = None):
        self.nodes: list[LayerNode] = []
        self.slots: dict[int, Slot] = {}
        self.inputs: list[int] = []
        self.outputs: list[int] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffer_groups: dict[str, tuple] = {}  # group -> (channels, h, w)
        self.meta = dict(meta or {})
        self._next_slot = 0
        self._next_node = 0

    # -- construction -----------------------------------------------------

    def new_slot(self, shape, kind="feature", name="", buffer=None) -> int:
        sid = self._next_slot
        self._next_slot += 1
        self.slots[sid] = Slot(id=sid, shape=tuple(shape), kind=kind, name=name, buffer=buffer)
        return sid

    def add_node(self, kind, attrs, inputs, outputs, saved=None, name="") -> LayerNode:
        node = LayerNode(
            id=self._next_node, kind=kind, attrs=attrs,
            inputs=list(inputs), outputs=list(outputs),
            saved_for_backward=list(saved or []), name=name,
        )
        self._next_node += 1
        self.nodes.append(node)
        return node

    def add_param(self, name: str, array: np.ndarray):
        if name in self.params:
            raise InvalidSpecError(f"duplicate parameter name {name}")
        self.params[name] = array

    def register_conv(self, p: ConvParams):
        self.add_param(f"{p.name}.weight", p.weights)
        self.add_param(f"{p.name}.bias", p.bias)

    def register_bn(self, p: BNParams):
        self.add_param(f"{p.name}.gamma", p.gamma)
        self.add_param(f"{p.name}.beta", p.beta)

    # -- queries ----------------------------------------------------------

    def node_by_id(self, nid: int) -> LayerNode:
        for n in self.nodes:
            if n.id == nid:
                return n
        raise KeyError(nid)

    def producer_of(self, slot_id: int) -> LayerNode | None:
        for n in self.nodes:
            if slot_id in n.outputs:
                return n
        return None

    def consumers_of(self, slot_id: int) -> list[LayerNode]:
        return [n for n in self.nodes if slot_id in n.inputs]

    def nodes_of_kind(self, *kinds) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind in kinds]

    @property
    def topo_order(self) -> list[LayerNode]:
        return self.nodes  # maintained in topological order by construction

    # -- validation -------------------------------------------------------

    def validate(self):
        produced = set(self.inputs)
        for n in self.nodes:
            lo, hi = _ARITY.get(n.kind, (1, None))
            n_feat_in = sum(1 for s in n.inputs if self.slots[s].kind == "feature")
            if n_feat_in < lo or (hi is not None and n_feat_in > hi):
                raise InvalidSpecError(f"node {n.id} ({n.kind}): arity {n_feat_in} outside [{lo}, {hi}]")
            for s in n.inputs:
                if s not in produced:
                    raise InvalidSpecError(
                        f"node {n.id} ({n.kind}) consumes slot {s} before it is produced (cycle or dangling edge)"
                    )
            for s in n.outputs:
                if s in produced:
                    raise InvalidSpecError(f"slot {s} produced twice (node {n.id})")
                produced.add(s)
        for s in self.outputs:
            if s not in produced:
                raise InvalidSpecError(f"graph output slot {s} never produced")
        return self


# ---------------------------------------------------------------------------
# model specs and presets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Shape recipe for a model family.

    ``blocks`` is composite layers per dense block (densenet) or residual
    units per stage (resnet).  ``resnet_stages`` carries per-stage
    (units, mid_channels, out_channels, stride); empty derives a uniform
    identity-skip layout at ``base_channels``.
    """

    family: str
    blocks: tuple = (2,)
    growth_rate: int = 12
    bottleneck_mult: int = 4
    input_dims: tuple = (2, 24, 16, 16)
    scale: str = "micro"  # micro | full
    stem: str = "conv3"  # conv3 | conv7-pool
    base_channels: int = 16
    resnet_stages: tuple = ()
    name: str = ""

    def __post_init__(self):
        if self.family not in ("densenet", "resnet", "toy"):
            raise InvalidSpecError(f"unknown family {self.family!r}")
        if self.family == "densenet" and self.growth_rate < 1:
            raise InvalidSpecError("growth_rate must be >= 1")
        if self.family == "densenet" and self.bottleneck_mult < 1:
            raise InvalidSpecError("bottleneck_mult must be >= 1")
        if any(d < 1 for d in self.input_dims) or len(self.input_dims) != 4:
            raise InvalidSpecError(f"bad input dims {self.input_dims}")

    def with_batch(self, batch: int) -> "ModelSpec":
        return replace(self, input_dims=(batch,) + tuple(self.input_dims[1:]))


def densenet_micro(batch=2, blocks=(3, 3), k=12) -> ModelSpec:
    return ModelSpec(
        family="densenet", blocks=tuple(blocks), growth_rate=k, bottleneck_mult=4,
        input_dims=(batch, 24, 16, 16), scale="micro", stem="conv3", name="densenet-micro",
    )


def densenet121(batch=120) -> ModelSpec:
    return ModelSpec(
        family="densenet", blocks=(6, 12, 24, 16), growth_rate=32, bottleneck_mult=4,
        input_dims=(batch, 3, 224, 224), scale="full", stem="conv7-pool",
        base_channels=64, name="densenet-121",
    )


def resnet_micro(batch=2) -> ModelSpec:
    return ModelSpec(
        family="resnet", blocks=(2,), input_dims=(batch, 8, 16, 16), scale="micro",
        stem="conv3", base_channels=16, resnet_stages=((2, 4, 16, 1),), name="resnet-micro",
    )


def resnet50(batch=120) -> ModelSpec:
    return ModelSpec(
        family="resnet", blocks=(3, 4, 6, 3), input_dims=(batch, 3, 224, 224), scale="full",
        stem="conv7-pool", base_channels=64,
        resnet_stages=((3, 64, 256, 1), (4, 128, 512, 2), (6, 256, 1024, 2), (3, 512, 2048, 2)),
        name="resnet-50",
    )


def gradcheck_micro(batch=2) -> ModelSpec:
    """Smallest useful densenet: every parameter reachable by finite differences."""
    return ModelSpec(
        family="densenet", blocks=(2,), growth_rate=4, bottleneck_mult=4,
        input_dims=(batch, 6, 6, 6), scale="micro", stem="conv3", name="gradcheck-micro",
    )


def single_bn_toy(batch=4) -> ModelSpec:
    """conv3x3 -> BN -> ReLU -> conv3x3: one BN in a minimal conv sandwich."""
    return ModelSpec(family="toy", input_dims=(batch, 4, 8, 8), scale="micro", name="single-bn-toy")


PRESETS = {
    "densenet-micro": densenet_micro,
    "densenet-121": densenet121,
    "resnet-micro": resnet_micro,
    "resnet-50": resnet50,
    "gradcheck-micro": gradcheck_micro,
    "single-bn-toy": single_bn_toy,
}


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


class _ParamFactory:
    def __init__(self, graph: Graph, rng: Rng, dtype):
        self.g = graph
        self.rng = rng
        self.dtype = dtype

    def conv(self, name, in_c, out_c, k, stride=1, pad=0) -> ConvParams:
        bound = float(np.sqrt(6.0 / (in_c * k * k)))
        w = self.rng.uniform((out_c, in_c, k, k), -bound, bound, dtype=self.dtype)
        p = ConvParams(in_c=in_c, out_c=out_c, kh=k, kw=k, stride=stride, pad=pad,
                       weights=w, bias=np.zeros(out_c, dtype=self.dtype), name=name)
        self.g.register_conv(p)
        return p

    def bn(self, name, channels) -> BNParams:
        gamma = self.rng.uniform((1, 1, 1, channels), 0.8, 1.2, dtype=self.dtype).reshape(-1)
        beta = self.rng.uniform((1, 1, 1, channels), -0.2, 0.2, dtype=self.dtype).reshape(-1)
        p = BNParams(gamma=gamma, beta=beta, name=name)
        self.g.register_bn(p)
        return p


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _bn_relu_conv(g: Graph, pf: _ParamFactory, x_slot: int, out_c: int, k: int,
                  stride: int, pad: int, prefix: str, out_buffer=None) -> int:
    """Append BN -> ReLU -> conv to the graph; returns the conv output slot."""
    xs = g.slots[x_slot]
    n, c, h, w = xs.shape
    bnp = pf.bn(f"{prefix}.bn", c)
    t1 = g.new_slot((n, c, h, w), name=f"{prefix}.bn.out")
    g.add_node(BN, BNAttrs(bn=bnp), [x_slot], [t1], saved=[x_slot], name=f"{prefix}.bn")
    t2 = g.new_slot((n, c, h, w), name=f"{prefix}.relu.out")
    g.add_node(RELU, None, [t1], [t2], saved=[t1], name=f"{prefix}.relu")
    convp = pf.conv(f"{prefix}.conv", c, out_c, k, stride=stride, pad=pad)
    oh, ow = convp.out_hw(h, w)
    y = g.new_slot((n, out_c, oh, ow), name=f"{prefix}.conv.out", buffer=out_buffer)
    g.add_node(CONV, ConvAttrs(conv=convp), [t2], [y], saved=[t2], name=f"{prefix}.conv")
    return y


def _final_head(g: Graph, pf: _ParamFactory, x_slot: int, prefix="head") -> int:
    """Final BN -> ReLU -> global average pool before the (excluded) classifier."""
    n, c, h, w = g.slots[x_slot].shape
    bnp = pf.bn(f"{prefix}.bn", c)
    t1 = g.new_slot((n, c, h, w), name=f"{prefix}.bn.out")
    g.add_node(BN, BNAttrs(bn=bnp), [x_slot], [t1], saved=[x_slot], name=f"{prefix}.bn")
    t2 = g.new_slot((n, c, h, w), name=f"{prefix}.relu.out")
    g.add_node(RELU, None, [t1], [t2], saved=[t1], name=f"{prefix}.relu")
    k = min(h, w)
    y = g.new_slot((n, c, h // k, w // k), name=f"{prefix}.pool.out")
    g.add_node(POOL, PoolAttrs(k=k), [t2], [y], saved=[], name=f"{prefix}.pool")
    return y


def build_densenet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    if spec.family != "densenet":
        raise InvalidSpecError(f"build_densenet got family {spec.family!r}")
    g = Graph(meta={"spec": spec, "family": "densenet"})
    pf = _ParamFactory(g, Rng(seed), dtype)
    n, c_in, h, w = spec.input_dims
    k = spec.growth_rate
    mk = spec.bottleneck_mult * k

    x = g.new_slot((n, c_in, h, w), name="input")
    g.inputs = [x]

    # stem
    if spec.stem == "conv7-pool":
        convp = pf.conv("stem.conv", c_in, spec.base_channels, 7, stride=2, pad=3)
        oh, ow = convp.out_hw(h, w)
        t = g.new_slot((n, spec.base_channels, oh, ow), name="stem.conv.out")
        g.add_node(CONV, ConvAttrs(conv=convp), [x], [t], saved=[x], name="stem.conv")
        bnp = pf.bn("stem.bn", spec.base_channels)
        t1 = g.new_slot((n, spec.base_channels, oh, ow), name="stem.bn.out")
        g.add_node(BN, BNAttrs(bn=bnp), [t], [t1], saved=[t], name="stem.bn")
        t2 = g.new_slot((n, spec.base_channels, oh, ow), name="stem.relu.out")
        g.add_node(RELU, None, [t1], [t2], saved=[t1], name="stem.relu")
        cur_c, cur_h, cur_w = spec.base_channels, oh // 2, ow // 2
        cur = g.new_slot((n, cur_c, cur_h, cur_w), name="stem.pool.out")
        g.add_node(POOL, PoolAttrs(k=2), [t2], [cur], saved=[], name="stem.pool")
    else:
        convp = pf.conv("stem.conv", c_in, c_in, 3, stride=1, pad=1)
        cur_c, cur_h, cur_w = c_in, h, w
        cur = g.new_slot((n, cur_c, cur_h, cur_w), name="stem.conv.out")
        g.add_node(CONV, ConvAttrs(conv=convp), [x], [cur], saved=[x], name="stem.conv")

    for bi, n_cpl in enumerate(spec.blocks):
        group = f"block{bi}"
        c_total = cur_c + n_cpl * k
        g.buffer_groups[group] = (c_total, cur_h, cur_w)
        # re-home the block input to the group buffer prefix
        g.slots[cur].buffer = (group, 0)
        c0 = cur_c
        for li in range(n_cpl):
            prefix = f"b{bi}.l{li}"
            c_l = c0 + li * k
            assert c_l == g.slots[cur].shape[1], "channel recurrence c0 + (l-1)k violated"
            br_cpl = g.new_slot((n, c_l, cur_h, cur_w), name=f"{prefix}.split.cpl", buffer=(group, 0))
            br_cat = g.new_slot((n, c_l, cur_h, cur_w), name=f"{prefix}.split.cat", buffer=(group, 0))
            g.add_node(SPLIT, SplitAttrs(fanout=2), [cur], [br_cpl, br_cat], name=f"{prefix}.split")
            mid = _bn_relu_conv(g, pf, br_cpl, mk, 1, 1, 0, f"{prefix}.in")
            new = _bn_relu_conv(g, pf, mid, k, 3, 1, 1, f"{prefix}.out", out_buffer=(group, c_l))
            cat = g.new_slot((n, c_l + k, cur_h, cur_w), name=f"{prefix}.concat.out", buffer=(group, 0))
            g.add_node(CONCAT, ConcatAttrs(physical=True), [br_cat, new], [cat], name=f"{prefix}.concat")
            cur = cat
        cur_c = c0 + n_cpl * k
        if bi + 1 < len(spec.blocks):
            prefix = f"trans{bi}"
            t = _bn_relu_conv(g, pf, cur, cur_c // 2, 1, 1, 0, prefix)
            cur_c = cur_c // 2
            cur_h, cur_w = cur_h // 2, cur_w // 2
            pooled = g.new_slot((n, cur_c, cur_h, cur_w), name=f"{prefix}.pool.out")
            g.add_node(POOL, PoolAttrs(k=2), [t], [pooled], saved=[], name=f"{prefix}.pool")
            cur = pooled

    # micro variants stop at the last block output; the classifier-side head
    # (BN -> ReLU -> global pool) only matters for full-shape traffic accounting
    out = _final_head(g, pf, cur) if spec.scale == "full" else cur
    g.outputs = [out]
    g.meta["conv_count"] = len(g.nodes_of_kind(CONV))
    if spec.scale == "full" and spec.blocks == (6, 12, 24, 16):
        # canonical 121 layout: 120 CONV layers once the classifier is excluded
        assert g.meta["conv_count"] == 120, g.meta["conv_count"]
    return g.validate()


def build_resnet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    if spec.family != "resnet":
        raise InvalidSpecError(f"build_resnet got family {spec.family!r}")
    g = Graph(meta={"spec": spec, "family": "resnet"})
    pf = _ParamFactory(g, Rng(seed), dtype)
    n, c_in, h, w = spec.input_dims
    stages = spec.resnet_stages
    if not stages:
        units = spec.blocks[0] if spec.blocks else 2
        stages = ((units, max(1, spec.base_channels // 4), spec.base_channels, 1),)

    x = g.new_slot((n, c_in, h, w), name="input")
    g.inputs = [x]

    if spec.stem == "conv7-pool":
        convp = pf.conv("stem.conv", c_in, spec.base_channels, 7, stride=2, pad=3)
        oh, ow = convp.out_hw(h, w)
        t = g.new_slot((n, spec.base_channels, oh, ow), name="stem.conv.out")
        g.add_node(CONV, ConvAttrs(conv=convp), [x], [t], saved=[x], name="stem.conv")
        cur_c, cur_h, cur_w = spec.base_channels, oh // 2, ow // 2
        cur = g.new_slot((n, cur_c, cur_h, cur_w), name="stem.pool.out")
        g.add_node(POOL, PoolAttrs(k=2), [t], [cur], saved=[], name="stem.pool")
    else:
        convp = pf.conv("stem.conv", c_in, spec.base_channels, 3, stride=1, pad=1)
        cur_c, cur_h, cur_w = spec.base_channels, h, w
        cur = g.new_slot((n, cur_c, cur_h, cur_w), name="stem.conv.out")
        g.add_node(CONV, ConvAttrs(conv=convp), [x], [cur], saved=[x], name="stem.conv")

    for si, (units, mid_c, out_c, stage_stride) in enumerate(stages):
        for ui in range(units):
            prefix = f"s{si}.u{ui}"
            stride = stage_stride if ui == 0 else 1
            in_c = cur_c
            br_main = g.new_slot((n, in_c, cur_h, cur_w), name=f"{prefix}.split.main")
            br_skip = g.new_slot((n, in_c, cur_h, cur_w), name=f"{prefix}.split.skip")
            g.add_node(SPLIT, SplitAttrs(fanout=2), [cur], [br_main, br_skip], name=f"{prefix}.split")
            t = _bn_relu_conv(g, pf, br_main, mid_c, 1, 1, 0, f"{prefix}.a")
            t = _bn_relu_conv(g, pf, t, mid_c, 3, stride, 1, f"{prefix}.b")
            t = _bn_relu_conv(g, pf, t, out_c, 1, 1, 0, f"{prefix}.c")
            new_h, new_w = g.slots[t].shape[2:]
            skip = br_skip
            if stride > 1:
                pooled = g.new_slot((n, in_c, new_h, new_w), name=f"{prefix}.skip.pool")
                g.add_node(POOL, PoolAttrs(k=stride), [br_skip], [pooled], saved=[], name=f"{prefix}.skip.pool")
                skip = pooled
            pad = out_c - in_c
            if pad < 0:
                raise InvalidSpecError(f"{prefix}: output narrower than input ({out_c} < {in_c})")
            y = g.new_slot((n, out_c, new_h, new_w), name=f"{prefix}.ews.out")
            g.add_node(EWS, EwsAttrs(pad_channels=pad), [t, skip], [y], name=f"{prefix}.ews")
            cur, cur_c, cur_h, cur_w = y, out_c, new_h, new_w

    out = _final_head(g, pf, cur) if spec.scale == "full" else cur
    g.outputs = [out]
    g.meta["conv_count"] = len(g.nodes_of_kind(CONV))
    if spec.scale == "full" and spec.blocks == (3, 4, 6, 3):
        # canonical 50-layer bottleneck layout: 49 CONV once the FC is excluded
        # (parameter-free pooled/zero-padded shortcuts, so no projection convs)
        assert g.meta["conv_count"] == 49, g.meta["conv_count"]
    return g.validate()


def build_toy_chain(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    """conv -> BN -> ReLU -> conv, the minimal fully-fusable BN neighborhood."""
    g = Graph(meta={"spec": spec, "family": "toy"})
    pf = _ParamFactory(g, Rng(seed), dtype)
    n, c, h, w = spec.input_dims
    x = g.new_slot((n, c, h, w), name="input")
    g.inputs = [x]
    convp = pf.conv("conv1", c, c, 3, stride=1, pad=1)
    t0 = g.new_slot((n, c, h, w), name="conv1.out")
    g.add_node(CONV, ConvAttrs(conv=convp), [x], [t0], saved=[x], name="conv1")
    y = _bn_relu_conv(g, pf, t0, c, 3, 1, 1, "mid")
    g.outputs = [y]
    g.meta["conv_count"] = len(g.nodes_of_kind(CONV))
    return g.validate()


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Graph:
    if spec.family == "densenet":
        return build_densenet(spec, seed, dtype)
    if spec.family == "resnet":
        return build_resnet(spec, seed, dtype)
    return build_toy_chain(spec, seed, dtype)
