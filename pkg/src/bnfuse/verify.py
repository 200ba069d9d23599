"""Verification suites: equivalence, gradient, variance-identity, traffic.

These are the executable acceptance checks behind ``bnfuse verify``:

  a. forward activations and parameter gradients of every fusion level match
     the baseline graph;
  b. analytic gradients match central finite differences on a float64 build
     of a small model, parameter by parameter;
  c. single-pass variance (E(X^2) - E(X)^2) matches two-pass variance;
  d. the analytic sweep ledger matches the instrumented execution ledger
     node for node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import execute, fusion, graph as G, ops, traffic
from .tensor import Rng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _rel_gap(a, b, floor=1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _run(g, x, loss):
    acts = execute.forward(g, x)
    grads = execute.backward(g, acts, loss)
    return acts, grads


def check_equivalence(spec: G.ModelSpec, seed: int = 0, fwd_tol: float = 1e-4,
                      grad_tol: float = 1e-3, levels=None) -> CheckResult:
    """Every fusion level's activations and parameter gradients vs baseline."""
    base_graph = G.build_model(spec, seed=seed)
    rng = Rng(seed + 1)
    x = rng.uniform(base_graph.slots[base_graph.inputs[0]].shape, -1.0, 1.0)
    loss = {s: rng.normal(base_graph.slots[s].shape) for s in base_graph.outputs}
    base_acts, base_grads = _run(base_graph, x, loss)
    worst = (0.0, "baseline self-comparison")
    for level in levels or list(fusion.FusionLevel):
        g2, _ = fusion.plan(base_graph, level)
        acts, grads = _run(g2, x, loss)
        for s in base_graph.outputs:
            gap = _rel_gap(base_acts.get(s), acts.get(s))
            if gap > worst[0]:
                worst = (gap, f"{level.token} activations slot {s}")
            if gap > fwd_tol:
                return CheckResult("equivalence", False,
                                   f"{spec.name} {level.token}: activation gap {gap:.2e} > {fwd_tol} at slot {s}")
        for name in base_grads.params:
            gap = _rel_gap(base_grads.params[name], grads.params[name], floor=1e-5)
            if gap > worst[0]:
                worst = (gap, f"{level.token} grad {name}")
            if gap > grad_tol:
                return CheckResult("equivalence", False,
                                   f"{spec.name} {level.token}: gradient gap {gap:.2e} > {grad_tol} for {name}")
    return CheckResult("equivalence", True,
                       f"{spec.name}: all levels within fwd {fwd_tol}/grad {grad_tol}; worst {worst[0]:.2e} ({worst[1]})")


def check_gradients(spec: G.ModelSpec, seed: int = 0, rel_tol: float = 1e-2,
                    step: float = 1e-3) -> CheckResult:
    """Central finite differences over every parameter on the float64 path.

    The primary stencil uses ``step``; where it disagrees the check retries
    at step/10 before judging, because a +-1e-3 perturbation can push
    near-zero normalized activations across the ReLU clip and invalidate
    the coarse stencil (the refined value must still meet ``rel_tol``).
    """
    g = G.build_model(spec, seed=seed, dtype=np.float64)
    rng = Rng(seed + 1)
    x = rng.uniform(g.slots[g.inputs[0]].shape, -1.0, 1.0, dtype=np.float64)
    loss = {s: rng.normal(g.slots[s].shape, dtype=np.float64) for s in g.outputs}

    def loss_value() -> float:
        acts = execute.forward(g, x)
        return float(sum(np.sum(acts.get(s) * loss[s]) for s in g.outputs))

    acts = execute.forward(g, x)
    analytic = execute.backward(g, acts, loss).params

    n_checked = 0
    worst = (0.0, "none")
    for name, arr in g.params.items():
        got = analytic.get(name)
        if got is None:
            return CheckResult("gradients", False, f"no gradient produced for {name}")
        flat = arr.reshape(-1)
        gflat = np.asarray(got, dtype=np.float64).reshape(-1)

        def central(i: int, h: float) -> float:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            return (fp - fm) / (2 * h)

        for i in range(flat.size):
            fd = central(i, step)
            gap = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-4)
            if gap > rel_tol:
                fd = central(i, step / 10)  # coarse stencil crossed a ReLU clip
                gap = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-4)
            n_checked += 1
            if gap > worst[0]:
                worst = (gap, f"{name}[{i}]")
            if gap > rel_tol:
                return CheckResult("gradients", False,
                                   f"finite differences disagree at {name}[{i}]: "
                                   f"analytic {gflat[i]:.6g}, fd {fd:.6g} (rel {gap:.2e} > {rel_tol})")
    return CheckResult("gradients", True,
                       f"{n_checked} parameters within rel {rel_tol}; worst {worst[0]:.2e} at {worst[1]}")


def check_mvf(seed: int = 0, channels: int = 100, lo: float = -100.0, hi: float = 100.0,
              rel_tol: float = 1e-4) -> CheckResult:
    """One-pass vs two-pass per-channel variance on bounded random channels."""
    rng = Rng(seed + 2)
    x = rng.uniform((4, channels, 7, 7), lo, hi)
    one = ops.bn_stats_onepass(x)
    two = ops.bn_stats_twopass(x)
    gap = _rel_gap(one.var, two.var, floor=1.0)
    ok = gap <= rel_tol
    return CheckResult("mvf-identity", ok,
                       f"{channels} channels in [{lo}, {hi}]: worst var gap {gap:.2e} vs tol {rel_tol}")


def check_traffic(spec: G.ModelSpec, seed: int = 0, levels=None) -> CheckResult:
    """Instrumented execution vs analytic rulebook, integer-exact per node."""
    base_graph = G.build_model(spec, seed=seed)
    rng = Rng(seed + 3)
    x = rng.uniform(base_graph.slots[base_graph.inputs[0]].shape, -1.0, 1.0)
    for level in levels or list(fusion.FusionLevel):
        g2, _ = fusion.plan(base_graph, level)
        analytic = traffic.count_sweeps(g2)
        measured = traffic.instrument_execution(g2, x)
        problems = traffic.compare_ledgers(analytic, measured)
        if problems:
            return CheckResult("traffic-agreement", False,
                               f"{spec.name} {level.token}: first divergence: {problems[0]}")
    return CheckResult("traffic-agreement", True,
                       f"{spec.name}: measured == analytic at every level")


def run_all(spec: G.ModelSpec, gradcheck_spec: G.ModelSpec | None = None, seed: int = 0) -> list[CheckResult]:
    gradcheck_spec = gradcheck_spec or G.gradcheck_micro(batch=2)
    return [
        check_equivalence(spec, seed),
        check_gradients(gradcheck_spec, seed),
        check_mvf(seed),
        check_traffic(spec, seed),
    ]
