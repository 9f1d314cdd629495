"""Best-fit caching allocator simulation over synthesized MLP activation traces.

Models the fragmentation that appears when a checkpointed MLP output is
placed into a cached segment left behind by the larger MLP intermediates,
and the effect of a pinned all-gather pool, grouped output consolidation, and
a pre-mapped contiguous gradient buffer.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .model import ModelConfig, layer_param_count
from .strategy import Strategy

MIB = 2**20
TAGS = ("mlp-intermediate", "mlp-output", "grad", "comm-buffer", "other")
ACTIVATION_TAGS = ("mlp-intermediate", "mlp-output", "other")


@dataclass(frozen=True)
class TraceOp:
    kind: str  # alloc | free | step
    id: int = -1
    size: int = 0
    tag: str = "other"


@dataclass
class Trace:
    ops: list[TraceOp] = field(default_factory=list)

    def alloc(self, id_, size, tag):
        self.ops.append(TraceOp("alloc", id_, int(size), tag))

    def free(self, id_):
        self.ops.append(TraceOp("free", id_))

    def step(self):
        self.ops.append(TraceOp("step"))

    def check(self) -> None:
        live, seen = set(), set()
        for op in self.ops:
            if op.kind == "alloc":
                if op.id in seen:
                    raise ValueError(f"duplicate alloc id {op.id}")
                if op.tag not in TAGS:
                    raise ValueError(f"unknown tag {op.tag!r}")
                seen.add(op.id)
                live.add(op.id)
            elif op.kind == "free":
                if op.id not in live:
                    raise ValueError(f"free of id {op.id} that is not live")
                live.remove(op.id)
            elif op.kind != "step":
                raise ValueError(f"unknown op kind {op.kind!r}")

    def without_tag(self, tag: str) -> "Trace":
        dropped = {op.id for op in self.ops if op.kind == "alloc" and op.tag == tag}
        return Trace([op for op in self.ops if op.kind == "step" or op.id not in dropped])


def mlp_hidden(hidden_dim: int, multiple_of: int = 256) -> int:
    """LLaMA feed-forward width: 8H/3 rounded up to ``multiple_of``."""
    width = int(2 * 4 * hidden_dim / 3)
    return multiple_of * math.ceil(width / multiple_of)


def synthesize_trace(model: ModelConfig, s: Strategy, steps: int = 1) -> Trace:
    """Allocation trace of one pipeline stage's MLP layers under checkpointing.

    Per layer in forward: three intermediates (gate, up, their product),
    released by checkpointing when ``s.a == 1`` (kept until backward
    otherwise), then the persistent layer output. Backward walks layers in
    reverse, recomputes the intermediates if they were released, allocates
    the layer's gradient shard on the first micro-batch and frees the output.
    When parameters are sharded, the gathered-weights buffer of the next
    layer is allocated before the current one is freed (double buffering).
    """
    bpe = model.bytes_per_element
    tokens = s.b * model.seq_len // s.s_sp
    inter = tokens * mlp_hidden(model.hidden_dim) * bpe
    out = tokens * model.hidden_dim * bpe
    psi = layer_param_count(model.hidden_dim)
    gathered = bpe * psi // s.s_tp
    grad = bpe * psi // (s.s_tp * s.s_ps * s.s_gs)
    layers = math.ceil(model.layers / s.s_pp)
    trace = Trace()
    ids = iter(range(1 << 62))

    def gather_pass(order, body):
        buf = {}
        if s.s_ps > 1:
            buf[order[0]] = next(ids)
            trace.alloc(buf[order[0]], gathered, "comm-buffer")
        for pos, layer in enumerate(order):
            if s.s_ps > 1 and pos + 1 < len(order):
                buf[order[pos + 1]] = next(ids)
                trace.alloc(buf[order[pos + 1]], gathered, "comm-buffer")
            body(layer)
            if s.s_ps > 1:
                trace.free(buf.pop(layer))

    for _ in range(steps):
        grads = {}
        for mb in range(s.n):
            outputs, kept = {}, {}

            def fwd(layer):
                tmp = [next(ids) for _ in range(3)]
                for t in tmp:
                    trace.alloc(t, inter, "mlp-intermediate")
                if s.a:
                    for t in tmp:
                        trace.free(t)
                else:
                    kept[layer] = tmp
                outputs[layer] = next(ids)
                trace.alloc(outputs[layer], out, "mlp-output")

            def bwd(layer):
                if s.a:
                    tmp = [next(ids) for _ in range(3)]
                    for t in tmp:
                        trace.alloc(t, inter, "mlp-intermediate")
                else:
                    tmp = kept.pop(layer)
                if layer not in grads:
                    grads[layer] = next(ids)
                    trace.alloc(grads[layer], grad, "grad")
                for t in tmp:
                    trace.free(t)
                trace.free(outputs.pop(layer))

            gather_pass(list(range(layers)), fwd)
            gather_pass(list(range(layers - 1, -1, -1)), bwd)
        for layer in sorted(grads):
            trace.free(grads[layer])
        trace.step()
    return trace


@dataclass
class _Chunk:
    offset: int
    size: int
    owner: int | None = None  # alloc id, None when free


@dataclass
class _Segment:
    sid: int
    size: int
    chunks: list[_Chunk]


class _BestFitPool:
    """Caching pool: never returns segments, splits and merges chunks in place."""

    def __init__(self):
        self.segments: list[_Segment] = []
        self.where: dict[int, tuple[_Segment, _Chunk]] = {}

    def reserved(self) -> int:
        return sum(seg.size for seg in self.segments)

    def free_chunks(self):
        for seg in self.segments:
            for ch in seg.chunks:
                if ch.owner is None:
                    yield seg, ch

    def alloc(self, id_: int, size: int) -> None:
        best = None
        for seg, ch in self.free_chunks():
            if ch.size >= size:
                key = (ch.size, seg.sid, ch.offset)
                if best is None or key < best[0]:
                    best = (key, seg, ch)
        if best is None:
            seg = _Segment(len(self.segments), size, [_Chunk(0, size)])
            self.segments.append(seg)
            ch = seg.chunks[0]
        else:
            _, seg, ch = best
        if ch.size > size:
            idx = seg.chunks.index(ch)
            seg.chunks.insert(idx + 1, _Chunk(ch.offset + size, ch.size - size))
            ch.size = size
        ch.owner = id_
        self.where[id_] = (seg, ch)

    def new_segment(self, size: int) -> _Segment:
        seg = _Segment(len(self.segments), size, [_Chunk(0, size)])
        self.segments.append(seg)
        return seg

    def free(self, id_: int) -> None:
        seg, ch = self.where.pop(id_)
        ch.owner = None
        merged = []
        for c in seg.chunks:
            if merged and merged[-1].owner is None and c.owner is None:
                merged[-1].size += c.size
            else:
                merged.append(c)
        seg.chunks = merged


@dataclass(frozen=True)
class Snapshot:
    reserved: int
    allocated: int
    free_cached: int
    fragmented: int


@dataclass
class StepStats:
    step: int
    peak_reserved: int
    peak_fragmented: int
    end_fragmented: int


@dataclass
class FragmentationReport:
    threshold: int
    peak_reserved: int
    peak_allocated: int
    peak_fragmented: int
    fragments_at_peak: dict[int, int]
    steps: list[StepStats]
    history: list[Snapshot]
    pinned_reserved: int
    oom_events: list[int]

    @property
    def worst_fragment_accumulation(self) -> int:
        """Largest total of sub-threshold free chunks observed (derived statistic)."""
        return self.peak_fragmented


def recurring_threshold(trace: Trace, tags=ACTIVATION_TAGS) -> int:
    """Smallest activation request size that occurs at least twice (0 if none)."""
    counts = Counter(op.size for op in trace.ops if op.kind == "alloc" and op.tag in tags)
    recurring = [size for size, c in counts.items() if c >= 2]
    return min(recurring) if recurring else 0


def run(trace: Trace, pinned_comm_pool: bool = False, consolidate_every_k_mlp: int = 0,
        grad_premap: bool = False, capacity: float | None = None) -> FragmentationReport:
    """Replay ``trace`` through a best-fit caching pool.

    ``consolidate_every_k_mlp`` > 0 packs each run of k MLP outputs into one
    fresh contiguous buffer (buffers are recycled once all k are released).
    Pinned communication buffers and the pre-mapped gradient buffer live
    outside the general pool.
    """
    trace.check()
    pool = _BestFitPool()
    general = trace.without_tag("comm-buffer") if pinned_comm_pool else trace
    threshold = recurring_threshold(general)

    comm_sizes = [op.size for op in trace.ops if op.kind == "alloc" and op.tag == "comm-buffer"]
    pinned = 2 * max(comm_sizes) if (pinned_comm_pool and comm_sizes) else 0

    grad_ops = [op for op in general.ops if op.kind == "alloc" and op.tag == "grad"]
    grad_live: dict[int, int] = {}
    grad_capacity = 0
    if grad_premap and grad_ops:
        # one contiguous chunk sized for the largest per-step gradient set
        per_step, cur = [], 0
        for op in general.ops:
            if op.kind == "alloc" and op.tag == "grad":
                cur += op.size
            elif op.kind == "step":
                per_step.append(cur)
                cur = 0
        per_step.append(cur)
        grad_capacity = max(per_step)

    k = consolidate_every_k_mlp
    groups: list[dict] = []  # {"size": bytes, "slots": [id|None]*k}
    in_group: dict[int, dict] = {}
    open_group = None

    def consolidated_bytes():
        used = sum(sum(1 for x in g["slots"] if x is not None) * g["slot"] for g in groups)
        total = sum(g["slot"] * k for g in groups)
        return total, used

    history, steps, oom = [], [], []
    peak_res = peak_alloc = peak_frag = 0
    frags_at_peak: dict[int, int] = {}
    step_peak_res = step_peak_frag = 0

    def snapshot():
        seg_res = pool.reserved()
        used = sum(ch.size for seg in pool.segments for ch in seg.chunks if ch.owner is not None)
        free_small = [ch.size for _, ch in pool.free_chunks() if ch.size < threshold]
        free_big = sum(ch.size for _, ch in pool.free_chunks() if ch.size >= threshold)
        g_total, g_used = consolidated_bytes()
        grad_used = sum(grad_live.values())
        reserved = seg_res + g_total + grad_capacity
        allocated = used + g_used + grad_used
        free_cached = free_big + (g_total - g_used) + (grad_capacity - grad_used)
        return Snapshot(reserved, allocated, free_cached, sum(free_small)), free_small

    for idx, op in enumerate(general.ops):
        if op.kind == "step":
            snap = history[-1] if history else Snapshot(0, 0, 0, 0)
            steps.append(StepStats(len(steps), step_peak_res, step_peak_frag, snap.fragmented))
            step_peak_res = step_peak_frag = 0
            continue
        if op.kind == "alloc":
            if op.tag == "grad" and grad_premap:
                grad_live[op.id] = op.size
            elif op.tag == "mlp-output" and k > 0:
                if open_group is None or all(x is not None for x in open_group["slots"]) \
                        or open_group["slot"] != op.size:
                    open_group = next((g for g in groups if g["slot"] == op.size
                                       and all(x is None for x in g["slots"])), None)
                    if open_group is None:
                        open_group = {"slot": op.size, "slots": [None] * k}
                        groups.append(open_group)
                slot = open_group["slots"].index(None)
                open_group["slots"][slot] = op.id
                in_group[op.id] = open_group
            else:
                pool.alloc(op.id, op.size)
        else:
            if op.id in grad_live:
                del grad_live[op.id]
            elif op.id in in_group:
                g = in_group.pop(op.id)
                g["slots"][g["slots"].index(op.id)] = None
                if open_group is g and all(x is None for x in g["slots"]):
                    open_group = None
            else:
                pool.free(op.id)
        snap, small = snapshot()
        history.append(snap)
        total_reserved = snap.reserved + pinned
        if capacity is not None and total_reserved > capacity:
            oom.append(idx)
        step_peak_res = max(step_peak_res, total_reserved)
        step_peak_frag = max(step_peak_frag, snap.fragmented)
        peak_res = max(peak_res, total_reserved)
        peak_alloc = max(peak_alloc, snap.allocated)
        if snap.fragmented > peak_frag:
            peak_frag = snap.fragmented
            frags_at_peak = dict(Counter(small))
    if not steps or general.ops[-1].kind != "step":
        if history:
            steps.append(StepStats(len(steps), step_peak_res, step_peak_frag, history[-1].fragmented))
    return FragmentationReport(threshold, peak_res, peak_alloc, peak_frag, frags_at_peak, steps,
                               history, pinned, oom)
