"""Two-stream event simulation of parameter prefetch and gradient reduce-scatter overlap.

One compute stream and one communication stream; each stream runs its events
in issue order. Times are in arbitrary units (seconds by convention).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field


@dataclass(frozen=True)
class LayerWorkload:
    forward: float
    grad_input: float
    grad_weight: float
    gather: float
    reduce_scatter: float

    def __post_init__(self):
        if min(self.forward, self.grad_input, self.grad_weight, self.gather,
               self.reduce_scatter) < 0:
            raise ValueError("workload times must be non-negative")

    @classmethod
    def from_forward(cls, forward, gather, reduce_scatter, backward_ratio=2.0, gx_share=0.5):
        """Split a backward of ``backward_ratio * forward`` into G-X and G-W."""
        bwd = backward_ratio * forward
        return cls(forward, gx_share * bwd, (1 - gx_share) * bwd, gather, reduce_scatter)


@dataclass(frozen=True)
class Event:
    stream: str
    kind: str
    layer: int
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Timeline:
    events: list[Event] = field(default_factory=list)

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0.0)

    def busy(self, stream: str) -> float:
        return sum(e.duration for e in self.events if e.stream == stream)

    def stream_events(self, stream: str) -> list[Event]:
        return sorted((e for e in self.events if e.stream == stream), key=lambda e: e.start)

    def then(self, other: "Timeline") -> "Timeline":
        """This timeline followed by ``other`` shifted to start at this makespan."""
        t0 = self.makespan
        moved = [Event(e.stream, e.kind, e.layer, e.start + t0, e.end + t0) for e in other.events]
        return Timeline(self.events + moved)

    def find(self, kind: str, layer: int) -> Event:
        for e in self.events:
            if e.kind == kind and e.layer == layer:
                return e
        raise KeyError((kind, layer))


class _Streams:
    def __init__(self, issue_delay: float):
        self.free = {"compute": 0.0, "comm": 0.0}
        self.delay = issue_delay
        self.timeline = Timeline()

    def run(self, stream, kind, layer, duration, ready=0.0) -> Event:
        start = max(self.free[stream], ready) + self.delay
        ev = Event(stream, kind, layer, start, start + duration)
        self.free[stream] = ev.end
        self.timeline.events.append(ev)
        return ev


def simulate_forward(workloads: list[LayerWorkload], policy: str = "inter_layer_prefetch",
                     issue_delay: float = 0.0) -> Timeline:
    """``naive`` gathers then computes each layer serially; ``inter_layer_prefetch``
    gathers layer i+1 while layer i computes (double-buffered)."""
    if not workloads:
        raise ValueError("need at least one layer")
    if policy not in ("naive", "inter_layer_prefetch"):
        raise ValueError(f"unknown forward policy {policy!r}")
    st = _Streams(issue_delay)
    if policy == "naive":
        for i, w in enumerate(workloads):
            g = st.run("comm", "all-gather", i, w.gather)
            c = st.run("compute", "forward", i, w.forward, ready=g.end)
            st.free["comm"] = max(st.free["comm"], c.end)
        return st.timeline
    g = st.run("comm", "all-gather", 0, workloads[0].gather)
    for i, w in enumerate(workloads):
        c_ready = g.end
        # the buffer for layer i+1 is free once layer i-1 finished, i.e. when compute i can start
        launch = max(st.free["compute"], c_ready)
        if i + 1 < len(workloads):
            nxt = st.run("comm", "all-gather", i + 1, workloads[i + 1].gather, ready=launch)
        c = st.run("compute", "forward", i, w.forward, ready=c_ready)
        if i + 1 < len(workloads):
            g = nxt
    return st.timeline


def simulate_backward(workloads: list[LayerWorkload], policy: str = "selective",
                      issue_delay: float = 0.0) -> Timeline:
    """Backward pass over layers in reverse order.

    ``fused``: gather -> (G-X + G-W) -> reduce-scatter, fully serialized.
    ``selective``: G-W runs first so its reduce-scatter overlaps the following
    G-X; the next layer's gather is issued ahead of that reduce-scatter, as
    soon as G-W starts.
    """
    if not workloads:
        raise ValueError("need at least one layer")
    if policy not in ("fused", "selective"):
        raise ValueError(f"unknown backward policy {policy!r}")
    st = _Streams(issue_delay)
    order = list(range(len(workloads) - 1, -1, -1))
    if policy == "fused":
        for i in order:
            w = workloads[i]
            g = st.run("comm", "all-gather", i, w.gather, ready=st.free["compute"])
            c = st.run("compute", "backward", i, w.grad_input + w.grad_weight, ready=g.end)
            st.run("comm", "reduce-scatter", i, w.reduce_scatter, ready=c.end)
            st.free["compute"] = st.free["comm"]
        return st.timeline
    g = st.run("comm", "all-gather", order[0], workloads[order[0]].gather)
    for pos, i in enumerate(order):
        w = workloads[i]
        gw = st.run("compute", "grad-weight", i, w.grad_weight, ready=g.end)
        if pos + 1 < len(order):
            j = order[pos + 1]
            g = st.run("comm", "all-gather", j, workloads[j].gather, ready=gw.start)
        st.run("comm", "reduce-scatter", i, w.reduce_scatter, ready=gw.end)
        st.run("compute", "grad-input", i, w.grad_input, ready=gw.end)
    return st.timeline


@dataclass(frozen=True)
class OverlapComparison:
    overall: float
    groups: list[float]


def compare_to_analytic(timeline: Timeline, slowdown: float = 1.0,
                        group_size: int | None = None) -> OverlapComparison:
    """makespan / (slowdown * max(sum comp, sum comm)), overall and per layer group.

    A group's makespan is the span from its first event start to its last event end.
    """
    def ratio(events):
        comp = sum(e.duration for e in events if e.stream == "compute")
        comm = sum(e.duration for e in events if e.stream == "comm")
        span = max(e.end for e in events) - min(e.start for e in events)
        bound = slowdown * max(comp, comm)
        return span / bound if bound > 0 else 1.0

    overall = ratio(timeline.events) if timeline.events else 1.0
    groups = []
    if group_size:
        layers = sorted({e.layer for e in timeline.events})
        for k in range(0, len(layers), group_size):
            chosen = set(layers[k:k + group_size])
            groups.append(ratio([e for e in timeline.events if e.layer in chosen]))
    return OverlapComparison(overall, groups)


def layer_workloads(s, model, cluster, profile, compute) -> list[LayerWorkload]:
    """Per-layer workloads of one pipeline stage and one micro-batch under ``s``.

    Gather and reduce-scatter move one layer's parameters over the ps group;
    both are zero when parameters are not sharded.
    """
    from .cluster import collective_time, place_groups
    from .cost import comp_time_layer
    from .model import layer_param_count

    forward = comp_time_layer(s, model, compute) / (3 + s.a)
    gather = rs = 0.0
    if s.s_ps > 1:
        v = model.bytes_per_element * layer_param_count(model.hidden_dim) / s.s_tp
        axis = place_groups(cluster, s).axis("ps")
        gather = collective_time(profile, "all-gather", v, s.s_ps, axis)
        rs = collective_time(profile, "reduce-scatter", v, s.s_ps, axis)
    w = LayerWorkload.from_forward(forward, gather, rs)
    return [w] * math.ceil(model.layers / s.s_pp)


def write_timeline_csv(timeline: Timeline, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stream", "kind", "layer", "start", "end"])
        for e in sorted(timeline.events, key=lambda e: (e.start, e.stream)):
            w.writerow([e.stream, e.kind, e.layer, repr(e.start), repr(e.end)])
