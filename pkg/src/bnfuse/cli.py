"""Command-line harness: bench, verify, traffic, explain.

Config is a flat key=value text file; command-line flags override file
values.  Model shapes come from named presets (densenet-micro, resnet-micro,
densenet-121, resnet-50, gradcheck-micro, single-bn-toy).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import execute, fusion, graph as G, traffic, verify
from .errors import EngineError, InvalidSpecError
from .fused import DEFAULT_BUDGET
from .tensor import Rng


@dataclass
class RunConfig:
    model: str = "densenet-micro"
    batch: int = 8
    fusion: str = "all"
    iterations: int = 5
    warmup: int = 1
    threads: int = 1
    seed: int = 0
    out_path: str = ""
    on_chip_budget: int = DEFAULT_BUDGET
    explain: bool = False
    # inline ModelSpec fields (config keys prefixed model_*), applied on top
    # of a preset or a bare family name
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidSpecError("iterations must be >= 1")
        if self.warmup < 0:
            raise InvalidSpecError("warmup must be >= 0")
        if self.batch < 1:
            raise InvalidSpecError("batch must be >= 1")

    def levels(self) -> list[fusion.FusionLevel]:
        if self.fusion == "all":
            return list(fusion.FusionLevel)
        return [fusion.parse_level(self.fusion)]

    def model_spec(self) -> G.ModelSpec:
        if self.model in G.PRESETS:
            spec = G.PRESETS[self.model](batch=self.batch)
        elif self.model in ("densenet", "resnet"):
            spec = G.ModelSpec(family=self.model, name=f"{self.model}-inline").with_batch(self.batch)
        else:
            raise InvalidSpecError(
                f"unknown model {self.model!r}; presets: {sorted(G.PRESETS)} or a bare family name")
        if self.model_overrides:
            spec = replace(spec, **self.model_overrides)
        return spec


_INT_KEYS = {"batch", "iterations", "warmup", "threads", "seed", "on_chip_budget"}
_MODEL_INT_KEYS = {"growth_rate", "bottleneck_mult", "base_channels"}
_MODEL_TUPLE_KEYS = {"blocks", "input_dims", "resnet_stages"}


def _parse_model_key(key: str, val: str):
    if key in _MODEL_INT_KEYS:
        return int(val)
    if key in _MODEL_TUPLE_KEYS:
        parts = [p for p in val.replace("(", " ").replace(")", " ").split(",") if p.strip()]
        if key == "resnet_stages":  # semicolon-separated (units,mid,out,stride) groups
            return tuple(tuple(int(x) for x in grp.split("/")) for grp in val.split(";"))
        return tuple(int(p) for p in parts)
    return val


def load_config(path: str | None, overrides: dict) -> RunConfig:
    values: dict = {}
    model_overrides: dict = {}
    if path:
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpecError(f"config line not key=value: {raw!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key.startswith("model_"):
                field_name = key[len("model_"):]
                model_overrides[field_name] = _parse_model_key(field_name, val)
            else:
                values[key] = int(val) if key in _INT_KEYS else val
    values.update({k: v for k, v in overrides.items() if v is not None})
    if model_overrides:
        values["model_overrides"] = model_overrides
    return RunConfig(**values)


BENCH_HEADER = ["level", "pass", "median_ms", "mean_ms", "std_ms", "iters",
                "speedup_vs_baseline", "conv_share", "traffic_bytes", "checksum", "threads"]


def read_bench_csv(path) -> list[dict]:
    """Parse a bench report back into typed rows (the schema is frozen)."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and list(rows[0].keys()) != BENCH_HEADER:
        raise InvalidSpecError(f"unexpected bench CSV header: {list(rows[0].keys())}")
    for r in rows:
        for key in ("median_ms", "mean_ms", "std_ms"):
            r[key] = float(r[key])
        for key in ("iters", "traffic_bytes", "threads"):
            r[key] = int(r[key])
        r["speedup_vs_baseline"] = float(r["speedup_vs_baseline"]) if r["speedup_vs_baseline"] else None
    return rows


def _checksum(acts: execute.Activations, outputs: list[int]) -> str:
    h = hashlib.sha1()
    for s in outputs:
        h.update(np.ascontiguousarray(acts.get(s)).tobytes())
    return h.hexdigest()[:12]


def _available_bytes() -> int | None:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_AVPHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return None


def _check_model_fits(g, cfg: RunConfig):
    """Activations + gradients sizing check with a suggested batch on failure."""
    feature_bytes = sum(s.numel * 4 for s in g.slots.values() if s.kind == "feature")
    need = 3 * feature_bytes  # activations, gradients, transient headroom
    avail = _available_bytes()
    if avail is not None and need > avail:
        suggested = max(1, int(cfg.batch * avail / need / 2))
        raise InvalidSpecError(
            f"model at batch {cfg.batch} needs ~{need / 1e9:.1f} GB but only "
            f"{avail / 1e9:.1f} GB is available; try --batch {suggested}"
        )


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig) -> int:
    spec = cfg.model_spec()
    if spec.scale != "micro":
        raise InvalidSpecError(f"{spec.name} is a full-shape spec; bench runs micro models")
    base_graph = G.build_model(spec, seed=cfg.seed)
    _check_model_fits(base_graph, cfg)
    rng = Rng(cfg.seed + 1)
    x = rng.uniform(base_graph.slots[base_graph.inputs[0]].shape, -1.0, 1.0)
    loss = {s: rng.normal(base_graph.slots[s].shape) for s in base_graph.outputs}

    rows = []
    baseline_total = None
    for level in cfg.levels():
        g2, fplan = fusion.plan(base_graph, level)  # rewriting excluded from timing
        if cfg.explain:
            print(fplan.describe())
        fwd_ms, bwd_ms = [], []
        timings: dict = {}
        checksum = ""
        for it in range(cfg.warmup + cfg.iterations):
            ctx = execute.ExecCtx(budget=cfg.on_chip_budget, workers=cfg.threads,
                                  timings=timings)
            t0 = time.perf_counter()
            acts = execute.forward(g2, x, ctx=ctx)
            t1 = time.perf_counter()
            execute.backward(g2, acts, loss, ctx=ctx)
            t2 = time.perf_counter()
            if it >= cfg.warmup:
                fwd_ms.append((t1 - t0) * 1e3)
                bwd_ms.append((t2 - t1) * 1e3)
                checksum = _checksum(acts, g2.outputs)
        conv_s = sum(v for (nid, _p), v in timings.items()
                     if g2.node_by_id(nid).kind in G.CONV_GROUP)
        nonconv_s = sum(v for (nid, _p), v in timings.items()
                        if g2.node_by_id(nid).kind not in G.CONV_GROUP)
        led = traffic.count_sweeps(g2)
        total_ms = [f + b for f, b in zip(fwd_ms, bwd_ms)]
        if level == fusion.FusionLevel.BASELINE:
            baseline_total = statistics.median(total_ms)
        for pass_, series in (("forward", fwd_ms), ("backward", bwd_ms), ("total", total_ms)):
            med = statistics.median(series)
            rows.append({
                "level": level.token, "pass": pass_,
                "median_ms": f"{med:.3f}",
                "mean_ms": f"{statistics.mean(series):.3f}",
                "std_ms": f"{statistics.pstdev(series):.3f}",
                "iters": cfg.iterations,
                "speedup_vs_baseline": (f"{baseline_total / med:.3f}"
                                        if pass_ == "total" and baseline_total else ""),
                "conv_share": f"{conv_s / max(conv_s + nonconv_s, 1e-12):.3f}",
                "traffic_bytes": led.total_bytes(pass_ if pass_ != "total" else None),
                "checksum": checksum,
                "threads": cfg.threads,
            })
    out = cfg.out_path or "bench.csv"
    with open(out, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=BENCH_HEADER)
        wr.writeheader()
        wr.writerows(rows)
    for r in rows:
        if r["pass"] == "total":
            print(f"{r['level']:10s} total {r['median_ms']:>9s} ms  "
                  f"speedup {r['speedup_vs_baseline'] or '-':>6s}  checksum {r['checksum']}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def cmd_verify(cfg: RunConfig) -> int:
    spec = cfg.model_spec()
    if spec.scale != "micro":
        raise InvalidSpecError("verify needs a micro-scale (executable) model")
    results = verify.run_all(spec, seed=cfg.seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------------------
# traffic
# ---------------------------------------------------------------------------


def cmd_traffic(cfg: RunConfig) -> int:
    spec = cfg.model_spec()
    base_graph = G.build_model(spec, seed=cfg.seed)
    out_dir = Path(cfg.out_path or "traffic-report")
    out_dir.mkdir(parents=True, exist_ok=True)
    reports: dict[str, traffic.TrafficReport] = {}
    # Concat held at view mode for every level so the comparison isolates
    # the BN/ReLU rewrites (reference baselines already pass concat pointers)
    for level in cfg.levels():
        g2, _ = fusion.plan(base_graph, level)
        rep = traffic.report_for(g2, level.token, concat_physical=False)
        reports[level.token] = rep
        (out_dir / f"traffic_{level.token.replace('+', '_')}.csv").write_text(rep.to_csv())
    base = reports.get("baseline") or next(iter(reports.values()))
    summary = []
    for tok, rep in reports.items():
        entry = rep.to_summary(base)
        entry["relu_share"] = traffic.relu_share(rep)
        summary.append(entry)
        print(f"{tok:10s} total {rep.total_bytes / 1e9:9.3f} GB  "
              f"reduction {traffic.reduction(base, rep) * 100:6.2f}%  "
              f"relu share {traffic.relu_share(rep) * 100:5.2f}%")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {out_dir}/")
    return 0


# ---------------------------------------------------------------------------
# explain
# ---------------------------------------------------------------------------


def cmd_explain(cfg: RunConfig) -> int:
    spec = cfg.model_spec()
    base_graph = G.build_model(spec, seed=cfg.seed)
    for level in cfg.levels():
        _, fplan = fusion.plan(base_graph, level)
        print(fplan.describe())
        print()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bnfuse",
                                description="mini CNN training engine with BN fission/fusion rewrites")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("bench", "timed training iterations per fusion level"),
                        ("verify", "equivalence / gradient / variance / traffic suites"),
                        ("traffic", "analytic memory-sweep reports"),
                        ("explain", "print the rewrite plan")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", default=None, help="flat key=value config file")
        sp.add_argument("--model", default=None, help=f"preset: {', '.join(sorted(G.PRESETS))}")
        sp.add_argument("--batch", type=int, default=None)
        sp.add_argument("--fusion", default=None,
                        help="baseline, rcf, rcf+mvf, bnff, bnff+icf, or all")
        sp.add_argument("--iters", type=int, default=None, dest="iterations")
        sp.add_argument("--warmup", type=int, default=None)
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, dest="out_path")
        sp.add_argument("--budget", type=int, default=None, dest="on_chip_budget",
                        help="on-chip tile budget in bytes")
        sp.add_argument("--explain", action="store_true", default=None,
                        help="print the rewrite plan before running")
    return p


_COMMANDS = {"bench": cmd_bench, "verify": cmd_verify, "traffic": cmd_traffic, "explain": cmd_explain}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = load_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
