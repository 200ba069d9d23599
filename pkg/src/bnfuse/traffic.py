"""Main-memory sweep accounting: analytic rulebook, measured ledger, reports.

A sweep is one complete read or write of a feature-map tensor against main
memory across the whole mini-batch.  The rulebook below charges each node
kind a fixed sweep pattern:

forward                                reads              writes
  Conv2D / FusedConvStats              ifmap x1           ofmap x1
  BatchNorm (two-pass stats)           ifmap x3           ofmap x1
  BatchNorm (one-pass stats)           ifmap x2           ofmap x1
  FissionSubBN1                        ifmap x1           -
  FissionSubBN2                        ifmap x1           ofmap x1
  ReLU                                 ifmap x1           ofmap x1
  FusedNormReluConv                    ifmap x1           saved x1, ofmap x1
  Concat (physical)                    each piece x1      ofmap x1
  Concat (view) / FusedConcatStats     -                  -
  Split                                -                  -
  EltwiseSum                           both x1            ofmap x1
  AvgPool                              ifmap x1           ofmap x1

backward
  Conv-like (Conv2D/FCS/FusedNRC)      d(out) x2, saved input x1, d(in) write x1
  BatchNorm                            d(out) x2, saved ifmap x2, d(in) write x1
  FissionSubBN2 (standalone)           d(out) x1, saved ifmap x1
  FissionSubBN1 (standalone)           pending d x1, saved ifmap x1, d(in) write x1
  FissionSubBN1 (deferred, ICF)        -
  ReLU                                 d(out) x1, saved x1, d(in) write x1
  Concat (physical)                    d(out) x1          each piece d write
  Split                                each branch d x1   d(in) write x1
  EltwiseSum / view Concat             -  (pointer passing)
  AvgPool                              d(out) x1          d(in) write x1

Weight traffic (read forward, read + gradient write backward) is counted
separately from feature-map bytes.  Per-channel statistics vectors are
treated as negligible and never charged.  Where fused backward kernels
re-derive the normalized tensor from an already-resident activation, the
model keeps the idealized fused-schedule counts: only the charges above are
recorded.  Bytes are always sweeps * elements * 4.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

from . import graph as G
from .errors import InvalidSpecError

BYTES_PER_ELEM = 4

FWD = "forward"
BWD = "backward"


@dataclass
class SweepEntry:
    node_id: int
    kind: str
    pass_: str
    slot: int  # -1 for weight traffic
    direction: str  # read | write
    sweeps: int
    bytes: int
    role: str = ""


@dataclass
class SweepLedger:
    entries: list[SweepEntry] = field(default_factory=list)

    def rec(self, node: G.LayerNode, pass_: str, slot: G.Slot, direction: str, sweeps: int, role: str):
        if sweeps <= 0:
            return
        self.entries.append(
            SweepEntry(node.id, node.kind, pass_, slot.id, direction, sweeps,
                       sweeps * slot.numel * BYTES_PER_ELEM, role)
        )

    def rec_weights(self, node: G.LayerNode, pass_: str, direction: str, nbytes: int):
        self.entries.append(SweepEntry(node.id, node.kind, pass_, -1, direction, 1, nbytes, "weights"))

    # -- aggregation ------------------------------------------------------

    def feature_bytes(self, pass_: str | None = None) -> int:
        return sum(e.bytes for e in self.entries if e.role != "weights" and (pass_ is None or e.pass_ == pass_))

    def weight_bytes(self, pass_: str | None = None) -> int:
        return sum(e.bytes for e in self.entries if e.role == "weights" and (pass_ is None or e.pass_ == pass_))

    def total_bytes(self, pass_: str | None = None) -> int:
        return sum(e.bytes for e in self.entries if pass_ is None or e.pass_ == pass_)

    def bytes_by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.kind] = out.get(e.kind, 0) + e.bytes
        return out

    def node_sweeps(self, node_id: int, pass_: str | None = None, role: str | None = None) -> int:
        return sum(
            e.sweeps for e in self.entries
            if e.node_id == node_id and e.role != "weights"
            and (pass_ is None or e.pass_ == pass_) and (role is None or e.role == role)
        )

    def key_map(self) -> dict[tuple, int]:
        """(node, pass, slot, direction) -> total sweeps; weight entries excluded."""
        out: dict[tuple, int] = {}
        for e in self.entries:
            if e.role == "weights":
                continue
            k = (e.node_id, e.pass_, e.slot, e.direction)
            out[k] = out.get(k, 0) + e.sweeps
        return out


# ---------------------------------------------------------------------------
# analytic rulebook
# ---------------------------------------------------------------------------


def _conv_weight_bytes(conv) -> int:
    return (conv.weights.size + conv.bias.size) * BYTES_PER_ELEM


def node_sweep_rules(node: G.LayerNode, g: G.Graph, concat_physical: bool | None = None):
    """Yield (pass, slot_id, direction, sweeps, role) charges for one node.

    ``concat_physical`` overrides the Concat node's own mode when given
    (the acceptance accounting holds Concat at view mode for every level).
    Weight traffic is yielded as (pass, -1, direction, nbytes, "weights").
    """
    s = g.slots
    kind = node.kind
    if kind in (G.CONV, G.FUSED_CONV_STATS):
        x, y = node.inputs[0], node.outputs[0]
        wb = _conv_weight_bytes(node.attrs.conv)
        yield (FWD, x, "read", 1, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        yield (FWD, -1, "read", wb, "weights")
        yield (BWD, y, "read", 2, "grad_out")
        yield (BWD, x, "read", 1, "saved")
        yield (BWD, x, "write", 1, "grad_in")
        yield (BWD, -1, "read", wb, "weights")
        yield (BWD, -1, "write", wb, "weights")
    elif kind == G.BN:
        x, y = node.inputs[0], node.outputs[0]
        reads = 2 if node.attrs.onepass else 3
        yield (FWD, x, "read", reads, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        yield (BWD, y, "read", 2, "grad_out")
        yield (BWD, x, "read", 2, "saved")
        yield (BWD, x, "write", 1, "grad_in")
    elif kind == G.RELU:
        x, y = node.inputs[0], node.outputs[0]
        yield (FWD, x, "read", 1, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        yield (BWD, y, "read", 1, "grad_out")
        yield (BWD, x, "read", 1, "saved")
        yield (BWD, x, "write", 1, "grad_in")
    elif kind == G.SUBBN1:
        x = node.inputs[0]
        yield (FWD, x, "read", 1, "ifmap")
        if not node.attrs.defer_backward:
            yield (BWD, x, "read", 1, "grad_in")  # pending normalized-position gradient
            yield (BWD, x, "read", 1, "saved")
            yield (BWD, x, "write", 1, "grad_in")
    elif kind == G.SUBBN2:
        x, y = node.inputs[0], node.outputs[0]
        yield (FWD, x, "read", 1, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        yield (BWD, y, "read", 1, "grad_out")
        yield (BWD, x, "read", 1, "saved")
    elif kind == G.FUSED_NRC:
        x, y, saved = node.inputs[0], node.outputs[0], node.outputs[1]
        wb = _conv_weight_bytes(node.attrs.conv)
        yield (FWD, x, "read", 1, "ifmap")
        yield (FWD, saved, "write", 1, "saved")
        yield (FWD, y, "write", 1, "ofmap")
        yield (FWD, -1, "read", wb, "weights")
        yield (BWD, y, "read", 2, "grad_out")
        yield (BWD, saved, "read", 1, "saved")
        yield (BWD, x, "write", 1, "grad_in")
        yield (BWD, -1, "read", wb, "weights")
        yield (BWD, -1, "write", wb, "weights")
    elif kind == G.CONCAT:
        physical = node.attrs.physical if concat_physical is None else concat_physical
        if physical:
            y = node.outputs[0]
            for x in node.inputs:
                yield (FWD, x, "read", 1, "ifmap")
            yield (FWD, y, "write", 1, "ofmap")
            yield (BWD, y, "read", 1, "grad_out")
            for x in node.inputs:
                yield (BWD, x, "write", 1, "grad_in")
    elif kind == G.FUSED_CONCAT_STATS:
        return
    elif kind == G.SPLIT:
        x = node.inputs[0]
        for b in node.outputs:
            yield (BWD, b, "read", 1, "grad_out")
        yield (BWD, x, "write", 1, "grad_in")
    elif kind == G.EWS:
        a, b = node.inputs[0], node.inputs[1]
        y = node.outputs[0]
        yield (FWD, a, "read", 1, "ifmap")
        yield (FWD, b, "read", 1, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        # backward is pointer/view passing: no sweeps
    elif kind == G.POOL:
        x, y = node.inputs[0], node.outputs[0]
        yield (FWD, x, "read", 1, "ifmap")
        yield (FWD, y, "write", 1, "ofmap")
        yield (BWD, y, "read", 1, "grad_out")
        yield (BWD, x, "write", 1, "grad_in")
    else:
        raise InvalidSpecError(f"no sweep rule for node kind {kind}")


def count_sweeps(g: G.Graph, concat_physical: bool | None = None) -> SweepLedger:
    """Apply the rulebook to every node; needs concrete slot shapes only."""
    ledger = SweepLedger()
    for node in g.nodes:
        for pass_, slot_id, direction, sweeps, role in node_sweep_rules(node, g, concat_physical):
            if role == "weights":
                ledger.rec_weights(node, pass_, direction, sweeps)
            elif g.slots[slot_id].kind == "feature":
                ledger.rec(node, pass_, g.slots[slot_id], direction, sweeps, role)
    return ledger


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class TrafficReport:
    level: str
    model: str
    ledger: SweepLedger
    forward_bytes: int = 0
    backward_bytes: int = 0
    weight_bytes: int = 0
    conv_group_bytes: int = 0
    non_conv_bytes: int = 0

    def __post_init__(self):
        led = self.ledger
        self.forward_bytes = led.total_bytes(FWD)
        self.backward_bytes = led.total_bytes(BWD)
        self.weight_bytes = led.weight_bytes()
        for e in led.entries:
            group_conv = e.kind in G.CONV_GROUP
            if group_conv:
                self.conv_group_bytes += e.bytes
            else:
                self.non_conv_bytes += e.bytes

    @property
    def total_bytes(self) -> int:
        return self.forward_bytes + self.backward_bytes

    def kind_share(self, *kinds) -> float:
        by_kind = self.ledger.bytes_by_kind()
        return sum(by_kind.get(k, 0) for k in kinds) / self.total_bytes

    def to_csv(self) -> str:
        """One row per (node, pass): node id, kind, pass, reads, writes, bytes."""
        agg: dict[tuple, list] = {}
        for e in self.ledger.entries:
            key = (e.node_id, e.kind, e.pass_)
            row = agg.setdefault(key, [0, 0, 0])
            if e.direction == "read":
                row[0] += e.sweeps if e.role != "weights" else 0
            else:
                row[1] += e.sweeps if e.role != "weights" else 0
            row[2] += e.bytes
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["node_id", "kind", "pass", "reads", "writes", "bytes"])
        for (nid, kind, pass_), (r, w, b) in sorted(agg.items()):
            wr.writerow([nid, kind, pass_, r, w, b])
        return buf.getvalue()

    def to_summary(self, baseline: "TrafficReport | None" = None) -> dict:
        out = {
            "level": self.level,
            "model": self.model,
            "forward_bytes": self.forward_bytes,
            "backward_bytes": self.backward_bytes,
            "total_bytes": self.total_bytes,
            "weight_bytes": self.weight_bytes,
            "conv_group_bytes": self.conv_group_bytes,
            "non_conv_bytes": self.non_conv_bytes,
        }
        if baseline is not None:
            out["reduction_vs_baseline"] = reduction(baseline, self)
            out["relu_share_of_baseline"] = relu_share(baseline)
        return out


def relu_share(report: TrafficReport) -> float:
    """ReLU bytes as a fraction of total (feature + weight) bytes."""
    return report.kind_share(G.RELU)


def reduction(baseline: TrafficReport, fused: TrafficReport) -> float:
    """1 - fused/baseline over total bytes."""
    return 1.0 - fused.total_bytes / baseline.total_bytes


def report_for(g: G.Graph, level: str, concat_physical: bool | None = None) -> TrafficReport:
    model = g.meta.get("spec").name if g.meta.get("spec") else g.meta.get("family", "?")
    return TrafficReport(level=level, model=model, ledger=count_sweeps(g, concat_physical))


def report_densenet121(batch: int = 120, levels=None, concat_physical: bool | None = False) -> dict:
    """Analytic sweep accounting for canonical full-shape DenseNet-121.

    Concat is held at view mode for every level by default so the
    level-to-level comparison isolates the BN/ReLU rewrites.
    """
    from .fusion import FusionLevel, plan  # deferred: fusion imports this module's ledger

    spec = G.densenet121(batch)
    base_graph = G.build_densenet(spec)
    levels = levels or list(FusionLevel)
    reports = {}
    for level in levels:
        rewritten, _ = plan(base_graph, level)
        reports[level.token] = report_for(rewritten, level.token, concat_physical)
    return reports


def instrument_execution(g: G.Graph, inputs, budget: int | None = None) -> SweepLedger:
    """Run the executable graph forward+backward with kernels reporting the
    full-tensor passes they actually schedule; returns the measured ledger."""
    from . import execute
    from .tensor import Rng

    ctx = execute.ExecCtx(ledger=SweepLedger(), budget=budget or execute.DEFAULT_BUDGET)
    acts = execute.forward(g, inputs, ctx=ctx)
    rng = Rng(1234)
    loss = {
        sid: rng.normal(g.slots[sid].shape, dtype=acts.get(sid).dtype)
        for sid in g.outputs
    }
    execute.backward(g, acts, loss, ctx=ctx)
    return ctx.ledger


def compare_ledgers(analytic: SweepLedger, measured: SweepLedger) -> list[str]:
    """Node-for-node integer comparison; returns human-readable divergences."""
    a, m = analytic.key_map(), measured.key_map()
    problems = []
    for key in sorted(set(a) | set(m)):
        if a.get(key, 0) != m.get(key, 0):
            nid, pass_, slot, direction = key
            problems.append(
                f"node {nid} {pass_} slot {slot} {direction}: analytic {a.get(key, 0)} != measured {m.get(key, 0)}"
            )
    return problems


def to_json(reports: dict, baseline_key: str = "baseline") -> str:
    base = reports.get(baseline_key)
    payload = [rep.to_summary(base if rep is not base else None) for rep in reports.values()]
    return json.dumps(payload, indent=2)
