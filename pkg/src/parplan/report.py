"""Table and line-delimited JSON renderings of plan reports and cost breakdowns."""

from __future__ import annotations

import csv
import json

from .cluster import MeshPlacement
from .cost import CostBreakdown
from .search import PlanEntry, PlanReport
from .strategy import STRATEGY_KEYS, Strategy

SCHEMA_VERSION = 1
GIB = 2**30

TABLE_COLUMNS = (
    ("rank", "{}"),
    *((k, "{}") for k in STRATEGY_KEYS),
    ("mem_GiB", "{:.2f}"),
    ("act_GiB", "{:.2f}"),
    ("step_ms", "{:.2f}"),
    ("update_ms", "{:.2f}"),
    ("bubble", "{}"),
)


def entry_record(rank: int, e: PlanEntry) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "rank": rank,
        "strategy": e.strategy.to_dict(),
        "cost": e.cost.to_dict(),
        "placement": {"axes": dict(e.placement.axes), "spans": dict(e.placement.spans)},
    }


def record_entry(rec: dict) -> PlanEntry:
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {rec.get('schema_version')!r}")
    p = rec["placement"]
    return PlanEntry(Strategy.from_dict(rec["strategy"]), CostBreakdown.from_dict(rec["cost"]),
                     MeshPlacement(dict(p["axes"]), dict(p["spans"])))


def render_records(entries: list[PlanEntry]) -> str:
    return "".join(json.dumps(entry_record(i, e), sort_keys=True) + "\n"
                   for i, e in enumerate(entries))


def parse_records(text: str) -> list[PlanEntry]:
    recs = [json.loads(line) for line in text.splitlines() if line.strip()]
    recs.sort(key=lambda r: r["rank"])
    return [record_entry(r) for r in recs]


def render_table(entries: list[PlanEntry]) -> str:
    rows = []
    for rank, e in enumerate(entries):
        c = e.cost
        values = [rank, *e.strategy.as_tuple(), c.mem_total / GIB, c.mem_act / GIB,
                  c.t_step * 1e3, c.t_update * 1e3, c.bubble_factor]
        rows.append([fmt.format(v) for (_, fmt), v in zip(TABLE_COLUMNS, values)])
    names = [name for name, _ in TABLE_COLUMNS]
    widths = [max([len(n)] + [len(r[i]) for r in rows]) for i, n in enumerate(names)]
    lines = [" ".join(f"{n:>{w}}" for n, w in zip(names, widths))]
    lines += [" ".join(f"{cell:>{w}}" for cell, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def render_report(report: PlanReport | list[PlanEntry], fmt: str = "table") -> str:
    entries = report.entries if isinstance(report, PlanReport) else report
    if fmt == "records":
        return render_records(entries)
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    if not entries:
        return "no feasible plan\n"
    text = render_table(entries)
    if isinstance(report, PlanReport):
        text += (f"# ranked by {report.ranked_by}; enumerated={report.enumerated} "
                 f"feasible={report.feasible} pruned_by_memory={report.pruned} "
                 f"memory_limit_GiB={report.memory_limit / GIB:.2f}\n")
    return text


MEMORY_PARTS = (("P", "mem_params"), ("G", "mem_grads"), ("OS", "mem_optstate"),
                ("ACT", "mem_act"), ("other", "mem_other"))
COMM_PARTS = (("act", "t_comm_act"), ("param", "t_comm_param"), ("grad/oss", "t_comm_grad_oss"))


def render_cost(cost: CostBreakdown) -> str:
    lines = ["memory (GiB)"]
    for name, attr in MEMORY_PARTS:
        lines.append(f"  {name:<10}{getattr(cost, attr) / GIB:>12.3f}")
    lines.append(f"  {'total':<10}{cost.mem_total / GIB:>12.3f}")
    lines.append("time (ms)")
    for label, attr in (("comp/layer/mb", "t_comp_per_layer"), ("comm act", "t_comm_act"),
                        ("comm param", "t_comm_param"), ("comm grad/oss", "t_comm_grad_oss"),
                        ("overlapped", "t_layer_overlapped"), ("other", "t_other"),
                        ("fwd_bwd", "t_fwd_bwd"), ("update", "t_update"), ("step", "t_step")):
        lines.append(f"  {label:<14}{getattr(cost, attr) * 1e3:>14.4f}")
    lines.append(f"  bubble factor {cost.bubble_factor}")
    return "\n".join(lines) + "\n"


def write_breakdown_csv(entries: list[PlanEntry], path) -> None:
    """Long-format memory/communication bar data: one row per (plan, component)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "strategy", "kind", "component", "value", "unit"])
        for rank, e in enumerate(entries):
            label = e.strategy.label()
            for name, attr in MEMORY_PARTS:
                w.writerow([rank, label, "memory", name, repr(getattr(e.cost, attr)), "bytes"])
            for name, attr in COMM_PARTS:
                w.writerow([rank, label, "communication", name, repr(getattr(e.cost, attr)), "seconds"])
