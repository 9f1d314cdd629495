"""Command line entry point: ``parplan <subcommand> ...``.

Exit status: 0 success, 2 no feasible plan / infeasible strategy, 1 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import report as rep
from .cluster import ProfileError, load_profile, lookup_bandwidth, MissingCurveError
from .config import ConfigError, load_config
from .cost import InfeasibleStrategyError, MissingComputeEntryError, step_time, throughput
from .search import PlanEntry, explain, search
from .strategy import STRATEGY_KEYS, Strategy, validate

EXIT_OK, EXIT_USAGE, EXIT_NONE = 0, 1, 2

# message sizes printed by profile-check: 1 KiB .. 4 GiB in powers of 4
CHECK_SIZES = [4**k * 1024 for k in range(12)]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", help="YAML run configuration")
    g.add_argument("--preset", help="model preset: 7b, 13b, 30b or 65b")
    g.add_argument("--profile", help="bandwidth CSV (overrides paths.bandwidth_csv)")
    g.add_argument("--seq-len", type=int)
    g.add_argument("--global-batch-tokens", type=int)
    g.add_argument("--total-gpus", type=int)
    g.add_argument("--gpus-per-node", type=int)
    g.add_argument("--gpu-memory-bytes", type=float)
    g.add_argument("--slowdown-ratio", type=float)
    g.add_argument("--oss-variant", choices=("printed", "prose"))
    return p


def _strategy_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("strategy")
    for key in STRATEGY_KEYS:
        g.add_argument(f"--{key}", type=int, required=True)
    return p


def build_parser() -> argparse.ArgumentParser:
    cfg, strat = _config_parent(), _strategy_parent()
    parser = _Parser(prog="parplan", description="Parallelism plan search and cost estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", parents=[cfg], help="rank the top-K feasible strategies")
    p.add_argument("--top-k", type=int)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--memory-slack", type=float)
    p.add_argument("--explain", type=int, metavar="RANK", help="print the rationale for one rank")
    p.add_argument("--emit-breakdown", metavar="CSV")
    p.add_argument("--figure", metavar="PNG", help="memory/communication bars of the ranked plans")

    p = sub.add_parser("estimate", parents=[cfg, strat], help="cost breakdown of one strategy")
    p.add_argument("--emit-breakdown", metavar="CSV")
    p.add_argument("--figure", metavar="PNG")

    sub.add_parser("validate", parents=[cfg, strat], help="feasibility verdict of one strategy")

    p = sub.add_parser("simulate-overlap", parents=[cfg],
                       help="two-stream timeline of prefetch and reduce-scatter overlap")
    src = p.add_argument_group("workload (used when no strategy is given)")
    src.add_argument("--layers", type=int, default=2)
    src.add_argument("--forward", type=float, default=10.0)
    src.add_argument("--grad-input", type=float)
    src.add_argument("--grad-weight", type=float)
    src.add_argument("--gather", type=float, default=10.0)
    src.add_argument("--reduce-scatter", type=float, default=10.0)
    for key in STRATEGY_KEYS:
        src.add_argument(f"--{key}", type=int)
    p.add_argument("--forward-policy", choices=("naive", "inter_layer_prefetch"),
                   default="inter_layer_prefetch")
    p.add_argument("--backward-policy", choices=("fused", "selective"), default="selective")
    p.add_argument("--issue-delay", type=float, default=0.0)
    p.add_argument("--group-size", type=int, default=0)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--emit-timeline", metavar="CSV")
    p.add_argument("--figure", metavar="PNG")

    p = sub.add_parser("simulate-mempool", parents=[cfg, strat],
                       help="best-fit caching allocator replay of a synthesized trace")
    p.add_argument("--policy", action="append", default=[],
                   choices=("none", "pinned_comm_pool", "consolidate", "grad_premap", "all"))
    p.add_argument("--consolidate-k", type=int, default=3)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--figure", metavar="PNG", help="reserved/fragmented bytes, baseline vs policies")

    p = sub.add_parser("profile-check", help="validate a bandwidth CSV and print interpolated curves")
    p.add_argument("profile_csv", nargs="?")
    p.add_argument("--profile", dest="profile_flag")
    return parser


def _overrides(args) -> dict:
    ov = {
        "model.seq_len": args.seq_len,
        "model.global_batch_tokens": args.global_batch_tokens,
        "cluster.total_gpus": args.total_gpus,
        "cluster.gpus_per_node": args.gpus_per_node,
        "cluster.gpu_memory_capacity_bytes": args.gpu_memory_bytes,
        "overlap.slowdown_ratio": args.slowdown_ratio,
        "search.oss_variant": args.oss_variant,
        "paths.bandwidth_csv": os.path.abspath(args.profile) if args.profile else None,
    }
    for key in ("top_k", "memory_slack"):
        if getattr(args, key, None) is not None:
            ov[f"search.{key}"] = getattr(args, key)
    return ov


def _load(args, need_profile=True):
    cfg = load_config(args.config, preset=args.preset, overrides=_overrides(args))
    if need_profile and cfg.profile is None:
        raise UsageError("a bandwidth profile is required (--profile or paths.bandwidth_csv)")
    return cfg


def _strategy(args) -> Strategy:
    return Strategy(**{k: getattr(args, k) for k in STRATEGY_KEYS})


def _write(path, writer, *payload):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    writer(*payload, path)


def cmd_plan(args, out) -> int:
    cfg = _load(args)
    report = search(cfg.model, cfg.cluster, cfg.profile, cfg.compute, cfg.overlap,
                    top_k=cfg.top_k, memory_slack=cfg.memory_slack, options=cfg.options)
    out.write(rep.render_report(report, args.format))
    if not report.entries:
        return EXIT_NONE
    if args.explain is not None:
        out.write(explain(report, args.explain, cfg.model, cfg.cluster) + "\n")
    if args.emit_breakdown:
        _write(args.emit_breakdown, rep.write_breakdown_csv, report.entries)
    if args.figure:
        from .plotting import plot_breakdown
        _write(args.figure, plot_breakdown, report.entries)
    return EXIT_OK


def cmd_estimate(args, out) -> int:
    cfg = _load(args)
    s = _strategy(args)
    try:
        cost = step_time(s, cfg.model, cfg.cluster, cfg.profile, cfg.compute, cfg.overlap, cfg.options)
    except InfeasibleStrategyError as exc:
        out.write(json.dumps({"strategy": s.to_dict(), **exc.verdict.to_dict()}, sort_keys=True) + "\n")
        return EXIT_NONE
    from .cluster import place_groups

    entry = PlanEntry(s, cost, place_groups(cfg.cluster, s))
    out.write(s.label() + "\n")
    out.write(rep.render_cost(cost))
    tp = throughput(cost, cfg.model, cfg.cluster, cfg.compute.peak_flops)
    out.write(f"  TGS {tp.tgs:.2f} tokens/GPU/s   MFU {tp.mfu:.4f}\n")
    fits = cost.mem_total <= cfg.cluster.gpu_memory_capacity * cfg.memory_slack
    out.write(f"  fits in memory: {'yes' if fits else 'no'}\n")
    out.write(rep.render_records([entry]))
    if args.emit_breakdown:
        _write(args.emit_breakdown, rep.write_breakdown_csv, [entry])
    if args.figure:
        from .plotting import plot_breakdown
        _write(args.figure, plot_breakdown, [entry])
    return EXIT_OK


def cmd_validate(args, out) -> int:
    cfg = _load(args, need_profile=False)
    s = _strategy(args)
    verdict = validate(s, cfg.model, cfg.cluster)
    out.write(json.dumps({"strategy": s.to_dict(), **verdict.to_dict()}, sort_keys=True) + "\n")
    return EXIT_OK if verdict else EXIT_NONE


def cmd_simulate_overlap(args, out) -> int:
    from .overlap import (LayerWorkload, compare_to_analytic, layer_workloads, simulate_backward,
                          simulate_forward, write_timeline_csv)

    given = [k for k in STRATEGY_KEYS if getattr(args, k) is not None]
    slowdown = 1.0
    if given:
        if len(given) != len(STRATEGY_KEYS):
            missing = sorted(set(STRATEGY_KEYS) - set(given))
            raise UsageError(f"strategy flags must be given together; missing {', '.join(missing)}")
        cfg = _load(args)
        s = _strategy(args)
        verdict = validate(s, cfg.model, cfg.cluster)
        if not verdict:
            out.write(json.dumps({"strategy": s.to_dict(), **verdict.to_dict()}, sort_keys=True) + "\n")
            return EXIT_NONE
        workloads = layer_workloads(s, cfg.model, cfg.cluster, cfg.profile, cfg.compute)
        slowdown = cfg.overlap.slowdown
    else:
        if args.layers < 1:
            raise UsageError("--layers must be >= 1")
        gx = args.forward if args.grad_input is None else args.grad_input
        gw = args.forward if args.grad_weight is None else args.grad_weight
        try:
            w = LayerWorkload(args.forward, gx, gw, args.gather, args.reduce_scatter)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        workloads = [w] * args.layers
    fwd = simulate_forward(workloads, args.forward_policy, args.issue_delay)
    bwd = simulate_backward(workloads, args.backward_policy, args.issue_delay)
    base_f = simulate_forward(workloads, "naive", args.issue_delay)
    base_b = simulate_backward(workloads, "fused", args.issue_delay)
    cmp_b = compare_to_analytic(bwd, slowdown, args.group_size or None)
    rows = [("forward", args.forward_policy, fwd.makespan, "naive", base_f.makespan),
            ("backward", args.backward_policy, bwd.makespan, "fused", base_b.makespan)]
    if args.format == "records":
        for phase, pol, ms, bpol, bms in rows:
            out.write(json.dumps({"schema_version": rep.SCHEMA_VERSION, "phase": phase, "policy": pol,
                                  "makespan": ms, "baseline_policy": bpol, "baseline_makespan": bms},
                                 sort_keys=True) + "\n")
        out.write(json.dumps({"schema_version": rep.SCHEMA_VERSION, "phase": "backward",
                              "analytic_ratio": cmp_b.overall, "group_ratios": cmp_b.groups,
                              "slowdown": slowdown}, sort_keys=True) + "\n")
    else:
        out.write(f"layers {len(workloads)}\n")
        out.write(f"{'phase':<9}{'policy':<22}{'makespan':>14}  {'baseline':<8}{'makespan':>14}\n")
        for phase, pol, ms, bpol, bms in rows:
            out.write(f"{phase:<9}{pol:<22}{ms:>14.6g}  {bpol:<8}{bms:>14.6g}\n")
        out.write(f"backward makespan / (R*max(comp, comm)) = {cmp_b.overall:.4f} (R={slowdown})\n")
        for i, r in enumerate(cmp_b.groups):
            out.write(f"  group {i}: {r:.4f}\n")
    combined = fwd.then(bwd)
    if args.emit_timeline:
        _write(args.emit_timeline, write_timeline_csv, combined)
    if args.figure:
        from .plotting import plot_timeline
        _write(args.figure, plot_timeline, combined)
    return EXIT_OK


def _mempool_record(label, r) -> dict:
    return {"schema_version": rep.SCHEMA_VERSION, "policies": label, "threshold": r.threshold,
            "peak_reserved": r.peak_reserved, "peak_allocated": r.peak_allocated,
            "peak_fragmented": r.peak_fragmented,
            "fragments_at_peak": {str(k): v for k, v in sorted(r.fragments_at_peak.items())},
            "pinned_reserved": r.pinned_reserved, "oom_events": len(r.oom_events),
            "steps": [vars(st) for st in r.steps]}


def cmd_simulate_mempool(args, out) -> int:
    from .mempool import MIB, run, synthesize_trace

    cfg = _load(args, need_profile=False)
    s = _strategy(args)
    verdict = validate(s, cfg.model, cfg.cluster)
    if not verdict:
        out.write(json.dumps({"strategy": s.to_dict(), **verdict.to_dict()}, sort_keys=True) + "\n")
        return EXIT_NONE
    if args.steps < 1 or args.consolidate_k < 1:
        raise UsageError("--steps and --consolidate-k must be >= 1")
    pol = set(args.policy)
    if "all" in pol:
        pol |= {"pinned_comm_pool", "consolidate", "grad_premap"}
    pol -= {"all", "none"}
    trace = synthesize_trace(cfg.model, s, args.steps)
    cap = cfg.cluster.gpu_memory_capacity or None
    runs = {"none": run(trace, capacity=cap)}
    if pol:
        label = "+".join(sorted(pol))
        runs[label] = run(trace, pinned_comm_pool="pinned_comm_pool" in pol,
                          consolidate_every_k_mlp=args.consolidate_k if "consolidate" in pol else 0,
                          grad_premap="grad_premap" in pol, capacity=cap)
    if args.format == "records":
        for label, r in runs.items():
            out.write(json.dumps(_mempool_record(label, r), sort_keys=True) + "\n")
    else:
        sizes = sorted({op.size for op in trace.ops if op.kind == "alloc" and op.tag != "grad"})
        out.write("request sizes (MiB): " + ", ".join(f"{x / MIB:g}" for x in sizes) + "\n")
        out.write(f"{'policies':<40}{'threshold':>11}{'peak_res':>11}{'peak_frag':>11}"
                  f"{'oom':>5}  fragments at peak\n")
        for label, r in runs.items():
            frags = ", ".join(f"{c}x{size / MIB:g}MiB" for size, c in sorted(r.fragments_at_peak.items()))
            out.write(f"{label:<40}{r.threshold / MIB:>9.0f}Mi{r.peak_reserved / 2**30:>9.2f}Gi"
                      f"{r.peak_fragmented / 2**30:>9.3f}Gi{len(r.oom_events):>5}  {frags or '-'}\n")
        out.write("(sizes in MiB/GiB)\n")
    if args.figure:
        from .plotting import plot_mempool
        _write(args.figure, plot_mempool, runs)
    return EXIT_OK


def cmd_profile_check(args, out) -> int:
    path = args.profile_csv or args.profile_flag
    if not path:
        raise UsageError("profile-check needs a CSV path")
    try:
        profile = load_profile(path)
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    keys = profile.curve_keys()
    out.write(f"{path}: {len(profile.entries)} samples, {len(keys)} curves\n")
    out.write(f"{'op':<15}{'p':>5} {'axis':<6}" + "".join(f"{_size(v):>10}" for v in CHECK_SIZES) + "\n")
    for op, p, axis in keys:
        cells = []
        for v in CHECK_SIZES:
            try:
                cells.append(f"{lookup_bandwidth(profile, op, p, axis, v) / 1e9:>10.3g}")
            except MissingCurveError:
                cells.append(f"{'-':>10}")
        out.write(f"{op:<15}{p:>5} {axis:<6}" + "".join(cells) + "\n")
    out.write("(effective bandwidth in GB/s; clamped outside the sampled range)\n")
    return EXIT_OK


def _size(v: float) -> str:
    for unit, scale in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if v >= scale:
            return f"{v / scale:g}{unit}"
    return f"{v:g}B"


COMMANDS = {
    "plan": cmd_plan,
    "estimate": cmd_estimate,
    "validate": cmd_validate,
    "simulate-overlap": cmd_simulate_overlap,
    "simulate-mempool": cmd_simulate_mempool,
    "profile-check": cmd_profile_check,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args, out)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
    except (UsageError, ProfileError, MissingComputeEntryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
