"""Graph rewriter: batch-norm fission plus fusion into neighboring kernels.

Levels are cumulative:

  baseline   reference graph, physical concatenation
  rcf        ReLU folded into the following convolution's input read;
             concatenation switches to pointer-passing views
  rcf+mvf    batch-norm statistics switch to single-sweep E(X^2)-E(X)^2
  bnff       each BN splits into a statistics sub-layer and a normalize
             sub-layer; the statistics fold into the producing convolution's
             output write, normalize+ReLU fold into the consuming
             convolution's input read.  BNs whose producer is a Split or
             Concat keep a standalone statistics node.
  bnff+icf   boundary statistics fold into whatever writes the concatenated
             stack (assembled per piece at the Concat); boundary backward
             dx transforms fold into the Split gradient sum.

Every rewrite returns a new graph; parameter arrays are shared with the
source graph so all levels compute with identical weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from . import graph as G
from .errors import InvalidSpecError


class FusionLevel(enum.Enum):
    BASELINE = "baseline"
    RCF = "rcf"
    RCF_MVF = "rcf+mvf"
    BNFF = "bnff"
    BNFF_ICF = "bnff+icf"

    @property
    def token(self) -> str:
        return self.value

    @property
    def rank(self) -> int:
        return list(FusionLevel).index(self)


def parse_level(token: str) -> FusionLevel:
    for lv in FusionLevel:
        if lv.value == token.lower():
            return lv
    raise InvalidSpecError(f"unknown fusion level {token!r} (expected one of "
                           f"{[lv.value for lv in FusionLevel]})")


@dataclass
class RewriteRecord:
    originals: tuple
    replacements: tuple
    kind: str


@dataclass
class FusionPlan:
    level: FusionLevel
    rewrites: list[RewriteRecord] = field(default_factory=list)
    unfused_bn_ids: list[int] = field(default_factory=list)
    # original BN node id -> (statistics home node id or None, normalize home
    # node id) in the rewritten graph; only filled by fission-based levels
    bn_map: dict = field(default_factory=dict)

    def count(self, kind: str) -> int:
        return sum(1 for r in self.rewrites if r.kind == kind)

    def describe(self) -> str:
        lines = [f"fusion level: {self.level.token}", f"rewrites: {len(self.rewrites)}"]
        for r in self.rewrites:
            lines.append(f"  {r.kind}: nodes {list(r.originals)} -> {list(r.replacements)}")
        if self.unfused_bn_ids:
            lines.append(f"unfused BNs: {self.unfused_bn_ids}")
        else:
            lines.append("unfused BNs: none")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# graph copying and small rewrite utilities
# ---------------------------------------------------------------------------


def copy_graph(g: G.Graph) -> G.Graph:
    out = G.Graph(meta=dict(g.meta))
    out.slots = {sid: replace(s) for sid, s in g.slots.items()}
    out.nodes = [
        G.LayerNode(id=n.id, kind=n.kind, attrs=n.attrs, inputs=list(n.inputs),
                    outputs=list(n.outputs), saved_for_backward=list(n.saved_for_backward),
                    name=n.name)
        for n in g.nodes
    ]
    out.inputs = list(g.inputs)
    out.outputs = list(g.outputs)
    out.params = dict(g.params)
    out.buffer_groups = dict(g.buffer_groups)
    out._next_slot = max(g.slots, default=-1) + 1
    out._next_node = max((n.id for n in g.nodes), default=-1) + 1
    return out


def _consumers(g: G.Graph) -> dict[int, list[G.LayerNode]]:
    table: dict[int, list[G.LayerNode]] = {}
    for n in g.nodes:
        for s in n.inputs:
            table.setdefault(s, []).append(n)
    return table


def _replace_input(consumers: list[G.LayerNode], old_slot: int, new_slot: int):
    for n in consumers:
        n.inputs = [new_slot if s == old_slot else s for s in n.inputs]
        n.saved_for_backward = [new_slot if s == old_slot else s for s in n.saved_for_backward]


# ---------------------------------------------------------------------------
# individual rewrites
# ---------------------------------------------------------------------------


def apply_rcf(g: G.Graph, plan: FusionPlan | None = None) -> G.Graph:
    """Fold every single-consumer ReLU feeding a convolution into that
    convolution's input read."""
    out = copy_graph(g)
    plan = plan if plan is not None else FusionPlan(FusionLevel.RCF)
    cons = _consumers(out)
    drop = []
    for relu in out.nodes_of_kind(G.RELU):
        t_out = relu.outputs[0]
        users = cons.get(t_out, [])
        if len(users) != 1 or users[0].kind != G.CONV or t_out in out.outputs:
            continue
        conv = users[0]
        t_in = relu.inputs[0]
        conv.attrs = replace(conv.attrs, clip_input=True)
        conv.inputs = [t_in if s == t_out else s for s in conv.inputs]
        conv.saved_for_backward = [t_in]
        drop.append(relu)
        del out.slots[t_out]
        plan.rewrites.append(RewriteRecord((relu.id, conv.id), (conv.id,), "relu-conv-fuse"))
    out.nodes = [n for n in out.nodes if n not in drop]
    return out


def apply_mvf(g: G.Graph, plan: FusionPlan | None = None) -> G.Graph:
    """Switch all batch-norm statistics to the single-sweep identity
    V(X) = E(X^2) - E(X)^2 (fissioned statistics nodes are born one-pass)."""
    out = copy_graph(g)
    plan = plan if plan is not None else FusionPlan(FusionLevel.RCF_MVF)
    for bn in out.nodes_of_kind(G.BN):
        if not bn.attrs.onepass:
            bn.attrs = replace(bn.attrs, onepass=True)
            plan.rewrites.append(RewriteRecord((bn.id,), (bn.id,), "stats-one-pass"))
    return out


def apply_fission(g: G.Graph, plan: FusionPlan | None = None,
                  bn_map: dict | None = None) -> G.Graph:
    """Split each BatchNorm into a statistics sub-layer (single-sweep sums)
    feeding a normalize sub-layer."""
    out = copy_graph(g)
    plan = plan if plan is not None else FusionPlan(FusionLevel.BNFF)
    new_nodes = []
    for node in out.nodes:
        if node.kind != G.BN:
            new_nodes.append(node)
            continue
        x, y = node.inputs[0], node.outputs[0]
        c = out.slots[x].shape[1]
        stats_slot = out.new_slot((c,), kind="stats", name=f"{node.name}.stats")
        sb1 = G.LayerNode(id=out._next_node, kind=G.SUBBN1, attrs=G.SubBN1Attrs(),
                          inputs=[x], outputs=[stats_slot], name=f"{node.name}.stats")
        out._next_node += 1
        sb2 = G.LayerNode(id=out._next_node, kind=G.SUBBN2, attrs=G.SubBN2Attrs(bn=node.attrs.bn),
                          inputs=[x, stats_slot], outputs=[y], saved_for_backward=[x],
                          name=f"{node.name}.norm")
        out._next_node += 1
        new_nodes.extend([sb1, sb2])
        plan.rewrites.append(RewriteRecord((node.id,), (sb1.id, sb2.id), "bn-fission"))
        if bn_map is not None:
            bn_map[node.id] = (sb1.id, sb2.id)
    out.nodes = new_nodes
    return out


def _fuse_norm_into_conv(out: G.Graph, plan: FusionPlan, sub_map: dict) -> None:
    """sub-BN2 whose output feeds a clip-on-read convolution becomes one
    normalize-relu-conv kernel."""
    cons = _consumers(out)
    drop = []
    for sb2 in list(out.nodes_of_kind(G.SUBBN2)):
        t1 = sb2.outputs[0]
        users = cons.get(t1, [])
        if len(users) != 1 or users[0].kind != G.CONV or t1 in out.outputs:
            continue
        conv = users[0]
        if not conv.attrs.clip_input:
            continue  # plain BN -> CONV edges (no ReLU between) stay unfused
        t0 = sb2.inputs[0]
        stats_slot = sb2.inputs[1]
        saved = out.new_slot(out.slots[t0].shape, name=f"{conv.name}.saved_postrelu")
        pos = out.nodes.index(conv)
        nrc = G.LayerNode(
            id=out._next_node, kind=G.FUSED_NRC,
            attrs=G.NRCAttrs(bn=sb2.attrs.bn, conv=conv.attrs.conv),
            inputs=[t0, stats_slot], outputs=[conv.outputs[0], saved],
            saved_for_backward=[saved, t0], name=conv.name,
        )
        out._next_node += 1
        out.nodes[pos] = nrc
        drop.append(sb2)
        del out.slots[t1]
        plan.rewrites.append(RewriteRecord((sb2.id, conv.id), (nrc.id,), "norm-relu-conv-fuse"))
        for bn_id, (sb1_id, sb2_id) in sub_map.items():
            if sb2_id == sb2.id:
                sub_map[bn_id] = (sb1_id, nrc.id)
    out.nodes = [n for n in out.nodes if n not in drop]


def _fuse_stats_into_producer(out: G.Graph, plan: FusionPlan, sub_map: dict) -> None:
    """Standalone statistics node whose input is written by a convolution
    kernel: accumulate the sums during that kernel's output write."""
    drop = []
    for sb1 in list(out.nodes_of_kind(G.SUBBN1)):
        producer = out.producer_of(sb1.inputs[0])
        if producer is None:
            continue
        stats_slot = sb1.outputs[0]
        if producer.kind == G.CONV:
            producer.kind = G.FUSED_CONV_STATS
            producer.outputs = producer.outputs + [stats_slot]
        elif producer.kind == G.FUSED_NRC and not producer.attrs.emit_stats:
            producer.attrs = replace(producer.attrs, emit_stats=True)
            producer.outputs = producer.outputs + [stats_slot]
        else:
            continue  # boundary: Split/Concat/Pool/EWS producers handled by ICF
        drop.append(sb1)
        plan.rewrites.append(RewriteRecord((sb1.id, producer.id), (producer.id,), "conv-stats-fuse"))
        for bn_id, (sb1_id, rest) in sub_map.items():
            if sb1_id == sb1.id:
                sub_map[bn_id] = (producer.id, rest)
    out.nodes = [n for n in out.nodes if n not in drop]


def apply_bnff(g: G.Graph, plan: FusionPlan | None = None,
               bn_map: dict | None = None) -> G.Graph:
    """Full fission-and-fusion: fission + one-pass stats + ReLU folding,
    then both sub-layers merge into the neighboring convolutions."""
    plan = plan if plan is not None else FusionPlan(FusionLevel.BNFF)
    bn_map = bn_map if bn_map is not None else {}
    out = apply_rcf(g, plan)
    out = apply_mvf(out, plan)
    out = apply_fission(out, plan, bn_map)
    _fuse_norm_into_conv(out, plan, bn_map)
    _fuse_stats_into_producer(out, plan, bn_map)
    return out


def _trace_through_splits(g: G.Graph, slot: int):
    node = g.producer_of(slot)
    seen_split = False
    while node is not None and node.kind == G.SPLIT:
        seen_split = True
        slot = node.inputs[0]
        node = g.producer_of(slot)
    return node, seen_split


def _ensure_stats_source(out: G.Graph, plan: FusionPlan, slot: int) -> int | None:
    """Make the writer of ``slot`` also emit that tensor's channel statistics;
    returns the stats slot, or None where no writer can carry them."""
    node, _ = _trace_through_splits(out, slot)
    if node is None:
        return None
    if node.kind == G.FUSED_CONV_STATS:
        return node.outputs[1]
    if node.kind == G.CONV:
        stats = out.new_slot((out.slots[node.outputs[0]].shape[1],), kind="stats",
                             name=f"{node.name}.stats")
        node.kind = G.FUSED_CONV_STATS
        node.outputs = node.outputs + [stats]
        plan.rewrites.append(RewriteRecord((node.id,), (node.id,), "conv-stats-fuse"))
        return stats
    if node.kind == G.FUSED_NRC:
        if node.attrs.emit_stats:
            return node.outputs[2]
        stats = out.new_slot((out.slots[node.outputs[0]].shape[1],), kind="stats",
                             name=f"{node.name}.stats")
        node.attrs = replace(node.attrs, emit_stats=True)
        node.outputs = node.outputs + [stats]
        plan.rewrites.append(RewriteRecord((node.id,), (node.id,), "conv-stats-fuse"))
        return stats
    if node.kind == G.POOL:
        if node.attrs.emit_stats:
            return node.outputs[1]
        stats = out.new_slot((out.slots[node.outputs[0]].shape[1],), kind="stats",
                             name=f"{node.name}.stats")
        node.attrs = replace(node.attrs, emit_stats=True)
        node.outputs = node.outputs + [stats]
        plan.rewrites.append(RewriteRecord((node.id,), (node.id,), "pool-stats-fuse"))
        return stats
    if node.kind == G.FUSED_CONCAT_STATS:
        return node.outputs[1]
    if node.kind == G.CONCAT:
        piece_stats = []
        for piece in list(node.inputs):
            ps = _ensure_stats_source(out, plan, piece)
            if ps is None:
                return None
            piece_stats.append(ps)
        stats = out.new_slot((out.slots[node.outputs[0]].shape[1],), kind="stats",
                             name=f"{node.name}.stats")
        node.kind = G.FUSED_CONCAT_STATS
        node.attrs = G.ConcatAttrs(physical=False)
        node.inputs = node.inputs + piece_stats
        node.outputs = node.outputs + [stats]
        plan.rewrites.append(RewriteRecord((node.id,), (node.id,), "concat-stats-fuse"))
        return stats
    return None  # EltwiseSum or graph input: leave the statistics standalone


def apply_icf(g: G.Graph, plan: FusionPlan | None = None,
              bn_map: dict | None = None) -> G.Graph:
    """Inter-composite-layer fusion of the remaining boundary statistics
    nodes; backward dx transforms of boundary BNs fold into the Split
    gradient sum wherever a Split sits between writer and consumer."""
    out = copy_graph(g)
    plan = plan if plan is not None else FusionPlan(FusionLevel.BNFF_ICF)
    bn_map = bn_map if bn_map is not None else {}
    cons = _consumers(out)
    drop = []
    for sb1 in list(out.nodes_of_kind(G.SUBBN1)):
        src = _ensure_stats_source(out, plan, sb1.inputs[0])
        if src is not None:
            _replace_input(cons.get(sb1.outputs[0], []), sb1.outputs[0], src)
            del out.slots[sb1.outputs[0]]
            drop.append(sb1)
            plan.rewrites.append(RewriteRecord((sb1.id,), (), "boundary-stats-fuse"))
            for bn_id, (sb1_id, rest) in bn_map.items():
                if sb1_id == sb1.id:
                    bn_map[bn_id] = (None, rest)
        else:
            _, through_split = _trace_through_splits(out, sb1.inputs[0])
            if through_split and not sb1.attrs.defer_backward:
                sb1.attrs = replace(sb1.attrs, defer_backward=True)
                plan.rewrites.append(RewriteRecord((sb1.id,), (sb1.id,), "split-grad-fuse"))
    out.nodes = [n for n in out.nodes if n not in drop]
    return out


# ---------------------------------------------------------------------------
# level dispatch
# ---------------------------------------------------------------------------


def _set_concat_views(g: G.Graph, plan: FusionPlan) -> None:
    for node in g.nodes_of_kind(G.CONCAT):
        if node.attrs.physical:
            node.attrs = replace(node.attrs, physical=False)
            plan.rewrites.append(RewriteRecord((node.id,), (node.id,), "concat-pointer-pass"))


def plan(g: G.Graph, level: FusionLevel) -> tuple[G.Graph, FusionPlan]:
    """Apply the cumulative rewrite pipeline for ``level``; returns the
    rewritten graph and the audit plan."""
    fp = FusionPlan(level)
    bn_ids = [n.id for n in g.nodes_of_kind(G.BN)]
    if level == FusionLevel.BASELINE:
        fp.unfused_bn_ids = bn_ids
        return copy_graph(g), fp

    bn_map = fp.bn_map
    if level == FusionLevel.RCF:
        out = apply_rcf(g, fp)
    elif level == FusionLevel.RCF_MVF:
        out = apply_mvf(apply_rcf(g, fp), fp)
    elif level == FusionLevel.BNFF:
        out = apply_bnff(g, fp, bn_map)
    elif level == FusionLevel.BNFF_ICF:
        out = apply_icf(apply_bnff(g, fp, bn_map), fp, bn_map)
    else:
        raise InvalidSpecError(f"unhandled level {level}")
    _set_concat_views(out, fp)

    if level in (FusionLevel.RCF, FusionLevel.RCF_MVF):
        fp.unfused_bn_ids = bn_ids
    else:
        remaining_sub = {n.id for n in out.nodes_of_kind(G.SUBBN1, G.SUBBN2)}
        fp.unfused_bn_ids = sorted(
            bn_id for bn_id, subs in bn_map.items()
            if any(s in remaining_sub for s in subs if s is not None)
        )
    out.validate()
    return out, fp
