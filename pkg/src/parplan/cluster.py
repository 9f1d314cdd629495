"""Cluster topology, profiled collective bandwidth curves, and group placement."""

from __future__ import annotations

import csv
import math
from bisect import bisect_left
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable

OPS = ("all-reduce", "all-gather", "reduce-scatter", "all-to-all")
AXES = ("intra", "inter")
CSV_HEADER = ("op", "participants", "axis", "message_bytes", "bandwidth_bytes_per_sec")
GROUP_KINDS = ("tp/sp", "ps", "oss", "gs", "dp")


class ProfileError(ValueError):
    pass


class MissingCurveError(KeyError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    total_gpus: int
    gpus_per_node: int
    gpu_memory_capacity: float

    def __post_init__(self):
        problems = cluster_problems(self)
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def num_nodes(self) -> int:
        return self.total_gpus // self.gpus_per_node


def cluster_problems(c) -> list[str]:
    problems = []
    for key in ("total_gpus", "gpus_per_node"):
        value = getattr(c, key)
        if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
            problems.append(f"{key}: must be a positive integer, got {value!r}")
    if not isinstance(c.gpu_memory_capacity, (int, float)) or c.gpu_memory_capacity < 0:
        problems.append(
            f"gpu_memory_capacity_bytes: must be a non-negative number, got {c.gpu_memory_capacity!r}"
        )
    if not problems and c.total_gpus % c.gpus_per_node:
        problems.append(
            f"total_gpus: {c.total_gpus} is not divisible by gpus_per_node={c.gpus_per_node}"
        )
    return problems


@dataclass(frozen=True)
class BandwidthEntry:
    op: str
    participants: int
    axis: str
    message_bytes: float
    bandwidth: float


@dataclass(frozen=True)
class BandwidthProfile:
    """Effective bandwidth w(o, v, p, axis) sampled on a per-curve size grid.

    Entries are grouped into curves keyed by ``(op, participants, axis)``; each
    curve must have strictly increasing message sizes.
    """

    entries: tuple[BandwidthEntry, ...]
    _curves: dict = field(default=None, init=False, repr=False, compare=False, hash=False)
    _cache: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        curves: dict[tuple, list[BandwidthEntry]] = {}
        for i, e in enumerate(self.entries):
            if e.op not in OPS:
                raise ProfileError(f"entry {i}: unknown op {e.op!r}")
            if e.axis not in AXES:
                raise ProfileError(f"entry {i}: axis must be intra or inter, got {e.axis!r}")
            if e.participants < 1:
                raise ProfileError(f"entry {i}: participants must be >= 1")
            if not (e.bandwidth > 0 and math.isfinite(e.bandwidth)):
                raise ProfileError(f"entry {i}: bandwidth must be positive and finite")
            if not e.message_bytes > 0:
                raise ProfileError(f"entry {i}: message_bytes must be positive")
            curves.setdefault((e.op, e.participants, e.axis), []).append(e)
        packed = {}
        for key, rows in curves.items():
            sizes = [r.message_bytes for r in rows]
            if any(b <= a for a, b in zip(sizes, sizes[1:])):
                raise ProfileError(f"curve {key}: message sizes must be strictly increasing")
            packed[key] = (tuple(math.log(s) for s in sizes),
                           tuple(math.log(r.bandwidth) for r in rows),
                           tuple(r.bandwidth for r in rows))
        object.__setattr__(self, "_curves", packed)
        object.__setattr__(self, "_cache", {})

    @classmethod
    def flat(cls, intra: float, inter: float | None = None,
             participants: Iterable[int] = (2,), ops: Iterable[str] = OPS):
        """Constant-bandwidth profile, one single-sample curve per (op, p, axis)."""
        inter = intra if inter is None else inter
        entries = []
        for op in ops:
            for p in participants:
                entries.append(BandwidthEntry(op, p, "intra", 1.0, float(intra)))
                entries.append(BandwidthEntry(op, p, "inter", 1.0, float(inter)))
        return cls(tuple(entries))

    def curve_keys(self) -> list[tuple]:
        return sorted(self._curves)

    def curve_samples(self, op, participants, axis) -> list[tuple[float, float]]:
        return [(e.message_bytes, e.bandwidth) for e in self.entries
                if (e.op, e.participants, e.axis) == (op, participants, axis)]


def load_profile(path) -> BandwidthProfile:
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ProfileError(f"{path}: empty file") from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ProfileError(f"{path}: header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise ProfileError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            op, p, axis, v, w = (c.strip() for c in row)
            try:
                entries.append(BandwidthEntry(op, int(p), axis, float(v), float(w)))
            except ValueError as exc:
                raise ProfileError(f"{path}:{lineno}: {exc}") from None
    try:
        return BandwidthProfile(tuple(entries))
    except ProfileError as exc:
        raise ProfileError(f"{path}: {exc}") from None


def write_profile(profile: BandwidthProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for e in profile.entries:
            w.writerow([e.op, e.participants, e.axis, repr(e.message_bytes), repr(e.bandwidth)])


def _nearest_participants(profile: BandwidthProfile, op: str, p: int, axis: str) -> int:
    candidates = [k[1] for k in profile._curves if k[0] == op and k[2] == axis]
    if not candidates:
        raise MissingCurveError(f"no bandwidth curve for op={op} axis={axis}")
    # nearest participant count, ties toward the larger one
    return min(candidates, key=lambda q: (abs(q - p), -q))


def lookup_bandwidth(profile: BandwidthProfile, op: str, p: int, axis: str, v: float) -> float:
    """Effective bandwidth at size ``v``, log-log interpolated and clamped."""
    key = (op, p, axis, v)
    hit = profile._cache.get(key)
    if hit is not None:
        return hit
    q = _nearest_participants(profile, op, p, axis)
    log_sizes, log_bws, bws = profile._curves[(op, q, axis)]
    if v <= 0:
        w = bws[0]
    else:
        x = math.log(v)
        i = bisect_left(log_sizes, x)
        if i == 0:
            w = bws[0]
        elif i == len(log_sizes):
            w = bws[-1]
        elif log_sizes[i] == x:
            w = bws[i]
        else:
            x0, x1 = log_sizes[i - 1], log_sizes[i]
            t = (x - x0) / (x1 - x0)
            w = math.exp(log_bws[i - 1] + t * (log_bws[i] - log_bws[i - 1]))
            w = min(max(w, min(bws[i - 1], bws[i])), max(bws[i - 1], bws[i]))
    profile._cache[key] = w
    return w


def collective_time(profile: BandwidthProfile, op: str, v: float, p: int, axis: str) -> float:
    """tau(o, v, p) = v / w(o, v, p). Groups of one, or empty messages, cost nothing.

    A ``mixed`` axis (group straddling nodes) is priced with the inter curve.
    """
    if p <= 1 or v == 0:
        return 0.0
    if axis == "mixed":
        axis = "inter"
    return v / lookup_bandwidth(profile, op, p, axis, v)


@dataclass(frozen=True)
class MeshPlacement:
    """Axis per process-group kind plus the node span of the widest group."""

    axes: dict
    spans: dict

    def axis(self, kind: str) -> str:
        return self.axes[kind]


def rank_groups(total_gpus: int, s_pp: int, s_tp: int, s_sp: int, s_ps: int,
                s_oss: int) -> dict[str, list[list[int]]]:
    """Explicit rank lists of every process group under the nested layout.

    Ranks within a pipeline stage are laid out tensor-rank innermost; the
    sequence group is the innermost block of the replica index, parameter
    sharding groups stride over whole sequence groups when they tile evenly
    (and fall back to contiguous replica blocks otherwise), and optimizer
    sharding groups are consecutive chunks of the same-shard replica set.
    """
    per_stage = total_gpus // s_pp
    replicas = per_stage // s_tp
    act_extent = s_sp // s_tp
    q_extent = replicas // act_extent
    strided_ps = q_extent % s_ps == 0
    coords = {}
    for rank in range(total_gpus):
        stage, local = divmod(rank, per_stage)
        j, tp_rank = divmod(local, s_tp)
        act_rank = tp_rank if s_tp > 1 else j % act_extent
        if strided_ps:
            q = j // act_extent
            ps_rank = q % s_ps
            ps_gid = (j % act_extent, q // s_ps)
        else:
            ps_rank = j % s_ps
            ps_gid = (j // s_ps,)
        coords[rank] = (stage, tp_rank, j, act_rank, ps_rank, ps_gid)

    def collect(keyfn):
        groups: dict = {}
        for rank in range(total_gpus):
            groups.setdefault(keyfn(coords[rank]), []).append(rank)
        return [groups[k] for k in sorted(groups)]

    if s_tp > 1:
        act = collect(lambda c: (c[0], c[2]))
    else:
        act = collect(lambda c: (c[0], c[2] // act_extent))
    ps = collect(lambda c: (c[0], c[1], c[5]))
    replica = collect(lambda c: (c[0], c[1], c[4]))
    oss = [grp[i:i + s_oss] for grp in replica for i in range(0, len(grp), s_oss)]
    dp = collect(lambda c: (c[0], c[1], c[3]))
    return {"tp/sp": act, "ps": ps, "oss": oss, "gs": replica, "dp": dp}


def _classify(groups: list[list[int]], gpus_per_node: int) -> tuple[str, int]:
    worst = "intra"
    max_span = 1
    for grp in groups:
        nodes = {r // gpus_per_node for r in grp}
        max_span = max(max_span, len(nodes))
        if len(nodes) == 1:
            continue
        kind = "inter" if len(nodes) == len(grp) else "mixed"
        if worst == "intra" or kind == "mixed":
            worst = kind
    return worst, max_span


@lru_cache(maxsize=4096)
def _placement(total_gpus, gpus_per_node, s_pp, s_tp, s_sp, s_ps, s_oss) -> MeshPlacement:
    groups = rank_groups(total_gpus, s_pp, s_tp, s_sp, s_ps, s_oss)
    axes, spans = {}, {}
    for kind in GROUP_KINDS:
        axes[kind], spans[kind] = _classify(groups[kind], gpus_per_node)
    return MeshPlacement(axes, spans)


def place_groups(cluster: ClusterConfig, strategy) -> MeshPlacement:
    """Assign each group kind to the intra/inter axis.

    Tensor/sequence groups are packed first, parameter-sharding groups next,
    the remaining groups take what is left. A group confined to one node is
    ``intra``; one whose members all sit on distinct nodes is ``inter``;
    anything in between is ``mixed``.
    """
    return _placement(cluster.total_gpus, cluster.gpus_per_node, strategy.s_pp,
                      strategy.s_tp, strategy.s_sp, strategy.s_ps, strategy.s_oss)
