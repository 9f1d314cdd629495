"""Top-K plan search over the enumerated strategy space."""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable

from .cluster import BandwidthProfile, ClusterConfig, MeshPlacement, place_groups
from .cost import (DEFAULT_OPTIONS, ComputeModel, CostBreakdown, EstimatorOptions, OverlapModel,
                   memory, step_time)
from .model import ModelConfig
from .strategy import DEFAULT_BOUNDS, SearchBounds, Strategy, enumerate_strategies, validate

GIB = 2**30


@dataclass(frozen=True)
class PlanEntry:
    strategy: Strategy
    cost: CostBreakdown
    placement: MeshPlacement

    @property
    def sort_key(self):
        return (self.cost.t_step, self.strategy.as_tuple())


@dataclass
class PlanReport:
    entries: list[PlanEntry]
    enumerated: int = 0
    feasible: int = 0
    pruned: int = 0
    top_k: int = 10
    memory_limit: float = 0.0
    # the ranking is by estimate only; no on-cluster profiling of the shortlist
    ranked_by: str = "estimate"


def memory_gate(s: Strategy, model: ModelConfig, capacity: float, slack: float = 1.0) -> bool:
    return memory(s, model).total <= capacity * slack


def merge_top_k(parts, k: int) -> list[PlanEntry]:
    """Combine partial top-K lists; associative and order-independent."""
    pool = [e for part in parts for e in part]
    return sorted(pool, key=lambda e: e.sort_key)[:k]


def search(model: ModelConfig, cluster: ClusterConfig, profile: BandwidthProfile,
           compute: ComputeModel, overlap: OverlapModel = OverlapModel(), top_k: int = 10,
           memory_slack: float = 1.0, bounds: SearchBounds = DEFAULT_BOUNDS,
           options: EstimatorOptions = DEFAULT_OPTIONS,
           on_candidate: Callable[[float], None] | None = None) -> PlanReport:
    """Estimate every feasible plan that fits in memory and keep the K fastest.

    ``on_candidate`` receives the running K-th best step time after each
    accepted candidate (inf until K plans have been seen).
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    limit = cluster.gpu_memory_capacity * memory_slack
    # max-heap on (t_step, tuple) via negation of a sortable key
    heap: list = []
    enumerated = feasible = 0
    for s in enumerate_strategies(model, cluster, bounds):
        enumerated += 1
        if memory(s, model).total > limit:
            continue
        feasible += 1
        cost = step_time(s, model, cluster, profile, compute, overlap, options)
        key = (cost.t_step, s.as_tuple())
        item = (_Neg(key), s, cost)
        if len(heap) < top_k:
            heapq.heappush(heap, item)
        elif key < heap[0][0].key:
            heapq.heapreplace(heap, item)
        if on_candidate is not None:
            on_candidate(heap[0][0].key[0] if len(heap) == top_k else float("inf"))
    entries = [PlanEntry(s, cost, place_groups(cluster, s)) for _, s, cost in heap]
    entries.sort(key=lambda e: e.sort_key)
    return PlanReport(entries, enumerated, feasible, enumerated - feasible, top_k, limit)


class _Neg:
    __slots__ = ("key",)

    def __init__(self, key):
        self.key = key

    def __lt__(self, other):
        return self.key > other.key


_BUMPS = ("b", "s_pp", "s_sp", "s_ps", "s_oss", "s_gs")


def _bumped(s: Strategy, dim: str, model: ModelConfig, cluster: ClusterConfig) -> Strategy:
    """Double one dimension and re-derive s_dp / n so only that choice changes."""
    d = s.to_dict()
    if dim == "s_gs":
        d["s_gs"] = s.s_oss if s.s_gs == 1 else s.s_gs * 2
    else:
        d[dim] = getattr(s, dim) * 2
    if dim == "s_sp" and s.s_tp > 1:
        d["s_tp"] = d["s_sp"]
    if dim in ("s_pp", "s_sp"):
        d["s_dp"] = max(1, cluster.total_gpus // (d["s_pp"] * d["s_sp"]))
    seqs = model.global_batch_tokens // model.seq_len
    d["n"] = max(1, seqs // (d["s_dp"] * d["b"]))
    return Strategy(**d)


def _bar(parts: list[tuple[str, float]], total: float, width: int = 40) -> str:
    out = []
    for name, v in parts:
        cells = int(round(width * v / total)) if total > 0 else 0
        out.append(f"  {name:<10} {'#' * cells:<{width}} {v:12.4g}")
    return "\n".join(out)


def explain(report: PlanReport, rank: int, model: ModelConfig | None = None,
            cluster: ClusterConfig | None = None) -> str:
    """Human-readable rationale for one ranked plan."""
    if not 0 <= rank < len(report.entries):
        raise IndexError(f"rank {rank} out of range (report holds {len(report.entries)} plans)")
    e = report.entries[rank]
    c = e.cost
    lines = [f"rank {rank}: {e.strategy.label()}",
             f"predicted step time {c.t_step * 1e3:.3f} ms "
             f"(fwd/bwd {c.t_fwd_bwd * 1e3:.3f} ms, update {c.t_update * 1e3:.3f} ms, "
             f"bubble factor {c.bubble_factor})",
             f"memory per GPU {c.mem_total / GIB:.2f} GiB (GiB below):"]
    mem = [("P", c.mem_params / GIB), ("G", c.mem_grads / GIB), ("OS", c.mem_optstate / GIB),
           ("ACT", c.mem_act / GIB), ("other", c.mem_other / GIB)]
    lines.append(_bar(mem, max(v for _, v in mem)))
    lines.append("communication per layer per step (ms):")
    comm = [("act", c.t_comm_act * 1e3), ("param", c.t_comm_param * 1e3),
            ("grad/oss", c.t_comm_grad_oss * 1e3)]
    lines.append(_bar(comm, max(max(v for _, v in comm), 1e-30)))
    lines.append("placement: " + ", ".join(f"{k}={v}" for k, v in e.placement.axes.items()))
    if model is not None and cluster is not None:
        lines.append("if doubled:")
        for dim in _BUMPS:
            t = _bumped(e.strategy, dim, model, cluster)
            if t == e.strategy:
                continue
            verdict = validate(t, model, cluster)
            if not verdict:
                why = ", ".join(verdict.violations)
            elif memory(t, model).total > report.memory_limit:
                why = f"memory {memory(t, model).total / GIB:.2f} GiB exceeds limit"
            else:
                why = "still feasible"
            lines.append(f"  {dim}: {getattr(e.strategy, dim)} -> {getattr(t, dim)}: {why}")
    return "\n".join(lines)
