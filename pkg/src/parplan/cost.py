"""Memory and step-time estimation for one plan.

All byte counts follow the 16-bit coefficients of the footprint table scaled by
``bytes_per_element``; all times are seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

from .cluster import BandwidthProfile, ClusterConfig, MeshPlacement, collective_time, place_groups
from .model import ModelConfig, layer_param_count, total_param_count
from .strategy import Strategy, validate

DEFAULT_SLOWDOWN = 1.30
DEFAULT_UPDATE_BANDWIDTH = 1e12


class InfeasibleStrategyError(ValueError):
    def __init__(self, strategy, verdict):
        self.strategy = strategy
        self.verdict = verdict
        super().__init__(f"infeasible strategy ({strategy.label()}): "
                         + ", ".join(verdict.violations))


class MissingComputeEntryError(KeyError):
    pass


@dataclass(frozen=True)
class ComputeModel:
    """Per-layer compute time source.

    ``analytic`` divides a FLOP count by ``peak_flops * efficiency``.
    ``profiled`` looks up measured forward seconds keyed by
    ``(b, S/s_sp, H/s_tp)``; ``head_table`` optionally gives the forward
    seconds of the embedding+head under the same keys (absent -> 0).
    """

    mode: str = "analytic"
    peak_flops: float = 312e12
    efficiency: float = 0.5
    table: dict = field(default_factory=dict)
    head_table: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("analytic", "profiled"):
            raise ValueError(f"compute mode must be analytic or profiled, got {self.mode!r}")
        if not (0 < self.efficiency <= 1):
            raise ValueError("efficiency must be in (0, 1]")
        if self.peak_flops <= 0:
            raise ValueError("peak_flops must be positive")
        if any(t <= 0 for t in self.table.values()) or any(t < 0 for t in self.head_table.values()):
            raise ValueError("profiled times must be positive")

    @property
    def flops_per_second(self) -> float:
        return self.peak_flops * self.efficiency


@dataclass(frozen=True)
class OverlapModel:
    slowdown: float = DEFAULT_SLOWDOWN

    def __post_init__(self):
        if self.slowdown < 1:
            raise ValueError("slowdown ratio must be >= 1")

    def overlapped(self, comp: float, comm: float) -> float:
        return self.slowdown * max(comp, comm)


@dataclass(frozen=True)
class EstimatorOptions:
    update_bandwidth: float = DEFAULT_UPDATE_BANDWIDTH
    # "printed": reduce-scatter over s_oss + all-reduce over replicas;
    # "prose": all-reduce over replicas + all-gather of updated shards over s_oss
    oss_variant: str = "printed"

    def __post_init__(self):
        if self.oss_variant not in ("printed", "prose"):
            raise ValueError("oss_variant must be printed or prose")


DEFAULT_OPTIONS = EstimatorOptions()


@dataclass(frozen=True)
class MemoryBreakdown:
    mem_params: float
    mem_grads: float
    mem_optstate: float
    mem_act: float
    embed_params: float
    embed_grads: float
    embed_optstate: float
    logits_act: float
    comm_buffer: float

    @property
    def mem_other(self) -> float:
        return (self.embed_params + self.embed_grads + self.embed_optstate
                + self.logits_act + self.comm_buffer)

    @property
    def total(self) -> float:
        return (self.mem_params + self.mem_grads + self.mem_optstate + self.mem_act
                + self.mem_other)


@dataclass(frozen=True)
class LayerComm:
    """Per-layer communication seconds over a whole step (all n micro-batches)."""

    act: float = 0.0
    param: float = 0.0
    oss: float = 0.0
    gs: float = 0.0

    @property
    def grad_oss(self) -> float:
        return self.oss + self.gs

    @property
    def total(self) -> float:
        return self.act + self.param + self.oss + self.gs


@dataclass(frozen=True)
class CostBreakdown:
    mem_params: float
    mem_grads: float
    mem_optstate: float
    mem_act: float
    mem_other: float
    mem_embed_params: float
    mem_embed_grads: float
    mem_embed_optstate: float
    mem_logits_act: float
    mem_comm_buffer: float
    t_comp_per_layer: float
    t_comm_act: float
    t_comm_param: float
    t_comm_grad_oss: float
    t_layer_overlapped: float
    t_other: float
    t_fwd_bwd: float
    t_update: float
    t_step: float
    bubble_factor: int

    @property
    def mem_total(self) -> float:
        return (self.mem_params + self.mem_grads + self.mem_optstate + self.mem_act
                + self.mem_other)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "CostBreakdown":
        kw = {f.name: d[f.name] for f in fields(cls)}
        kw["bubble_factor"] = int(kw["bubble_factor"])
        return cls(**kw)


def _require_feasible(s, model, cluster):
    if cluster is None:
        return
    verdict = validate(s, model, cluster)
    if not verdict:
        raise InfeasibleStrategyError(s, verdict)


def memory(s: Strategy, model: ModelConfig, cluster: ClusterConfig | None = None) -> MemoryBreakdown:
    """Peak per-GPU bytes of the most loaded (first) pipeline stage."""
    _require_feasible(s, model, cluster)
    H, L, V, S = model.hidden_dim, model.layers, model.vocab, model.seq_len
    k = model.bytes_per_element / 2
    psi = layer_param_count(H)
    shard_p = s.s_pp * s.s_tp * s.s_ps
    mem_p = k * 2 * L * psi / shard_p
    mem_g = k * 2 * L * psi / (shard_p * s.s_gs)
    mem_os = k * 6 * L * psi / (shard_p * s.s_oss)
    # 1F1B: the first stage holds min(s_pp, n) micro-batches in flight
    mem_act = k * min(s.s_pp, s.n) * s.b * S * H * L * (34 - 32 * s.a) / (s.s_pp * s.s_sp)

    emb = 2 * V * H
    emb_shard = s.s_tp * s.s_ps
    embed_p = k * 2 * emb / emb_shard
    embed_g = k * 2 * emb / (emb_shard * s.s_gs)
    embed_os = k * 6 * emb / (emb_shard * s.s_oss)
    logits = k * 2 * s.b * S * (H + V) / s.s_sp
    # double buffer of gathered layer parameters while prefetching
    buf = k * 2 * 2 * psi / s.s_tp if s.s_ps > 1 else 0.0
    return MemoryBreakdown(mem_p, mem_g, mem_os, mem_act, embed_p, embed_g, embed_os,
                           logits, buf)


def comm_time_layer(s: Strategy, model: ModelConfig, placement: MeshPlacement,
                    profile: BandwidthProfile, total_gpus: int,
                    options: EstimatorOptions = DEFAULT_OPTIONS) -> LayerComm:
    """Communication seconds attributable to one transformer layer over a step."""
    H, S = model.hidden_dim, model.seq_len
    k = model.bytes_per_element / 2
    n, b = s.n, s.b
    act_bytes = k * 2 * b * S * H
    psi = layer_param_count(H)
    act_axis = placement.axis("tp/sp")

    act = 0.0
    if s.s_tp == s.s_sp and s.s_tp > 1:
        act = (2 * n * collective_time(profile, "reduce-scatter", act_bytes, s.s_tp, act_axis)
               + 3 * n * collective_time(profile, "all-gather", act_bytes, s.s_tp, act_axis))
    elif s.s_sp > 1 and s.s_tp == 1:
        act = (2 * n * collective_time(profile, "all-to-all", 3 * act_bytes, s.s_sp, act_axis)
               + 2 * n * collective_time(profile, "all-to-all", act_bytes, s.s_sp, act_axis))

    param = 0.0
    p_bytes = k * 2 * psi / s.s_tp
    if s.s_ps > 1:
        ps_axis = placement.axis("ps")
        param = (2 * n * collective_time(profile, "all-gather", p_bytes, s.s_ps, ps_axis)
                 + n * collective_time(profile, "reduce-scatter", p_bytes, s.s_ps, ps_axis))

    shard_bytes = p_bytes / s.s_ps
    replicas = total_gpus // (s.s_pp * s.s_tp * s.s_ps)
    oss_axis, rep_axis = placement.axis("oss"), placement.axis("gs")
    allreduce = collective_time(profile, "all-reduce", shard_bytes, replicas, rep_axis)
    if options.oss_variant == "printed":
        oss = collective_time(profile, "reduce-scatter", shard_bytes, s.s_oss, oss_axis) + allreduce
    else:
        oss = allreduce + collective_time(profile, "all-gather", shard_bytes, s.s_oss, oss_axis)

    gs = (n - 1) * allreduce if s.s_gs > 1 else 0.0
    return LayerComm(act, param, oss, gs)


def forward_layer_flops(s: Strategy, model: ModelConfig) -> float:
    """Forward FLOPs of one layer on one GPU for one micro-batch.

    QKV (6bS'H^2) + output projection (2bS'H^2) + MLP at ratio 4 (16bS'H^2)
    + score/value matmuls (4bSS'H), with S' = S/s_sp tokens per GPU. The
    work is split once over the sequence group; in tensor mode s_tp == s_sp
    so the same divisor applies.
    """
    H, S = model.hidden_dim, model.seq_len
    local = s.b * S / s.s_sp
    return 24 * local * H * H + 4 * local * S * H


def head_forward_flops(s: Strategy, model: ModelConfig) -> float:
    return 2 * s.b * (model.seq_len / s.s_sp) * model.hidden_dim * model.vocab


def _profiled_forward(table, s, model, what):
    key = (s.b, model.seq_len // s.s_sp, model.hidden_dim // s.s_tp)
    try:
        return table[key]
    except KeyError:
        raise MissingComputeEntryError(f"no profiled {what} time for (b, S/s_sp, H/s_tp)={key}") from None


def comp_time_layer(s: Strategy, model: ModelConfig, compute: ComputeModel) -> float:
    """Forward + backward (2x) + recompute (1x when a=1) seconds of one layer, one micro-batch."""
    passes = 3 + s.a
    if compute.mode == "profiled":
        return passes * _profiled_forward(compute.table, s, model, "layer")
    return passes * forward_layer_flops(s, model) / compute.flops_per_second


def other_time(s: Strategy, model: ModelConfig, compute: ComputeModel,
               profile: BandwidthProfile, placement: MeshPlacement) -> float:
    """Embedding/head seconds per micro-batch: compute plus parameter gathers, not overlapped."""
    if compute.mode == "profiled":
        comp = 3 * compute.head_table[(s.b, model.seq_len // s.s_sp, model.hidden_dim // s.s_tp)] \
            if compute.head_table else 0.0
    else:
        comp = 3 * head_forward_flops(s, model) / compute.flops_per_second
    comm = 0.0
    if s.s_ps > 1:
        v = model.bytes_per_element * 2 * model.vocab * model.hidden_dim / s.s_tp
        axis = placement.axis("ps")
        comm = (2 * collective_time(profile, "all-gather", v, s.s_ps, axis)
                + collective_time(profile, "reduce-scatter", v, s.s_ps, axis))
    return comp + comm


def fwd_bwd_time(n: int, s_pp: int, layers: int, t_other: float, overlapped_layer: float) -> float:
    """(n + s_pp - 1) * (T_other + ceil(L / s_pp) * OPro)."""
    return (n + s_pp - 1) * (t_other + math.ceil(layers / s_pp) * overlapped_layer)


def step_time(s: Strategy, model: ModelConfig, cluster: ClusterConfig, profile: BandwidthProfile,
              compute: ComputeModel, overlap: OverlapModel = OverlapModel(),
              options: EstimatorOptions = DEFAULT_OPTIONS) -> CostBreakdown:
    _require_feasible(s, model, cluster)
    mem = memory(s, model)
    placement = place_groups(cluster, s)
    comm = comm_time_layer(s, model, placement, profile, cluster.total_gpus, options)
    comp = comp_time_layer(s, model, compute)
    # per-layer, per-micro-batch view; once-per-step OSS/GS traffic is charged to the update
    comm_mb = (comm.act + comm.param) / s.n
    opro = overlap.overlapped(comp, comm_mb)
    t_other = other_time(s, model, compute, profile, placement)
    t_fb = fwd_bwd_time(s.n, s.s_pp, model.layers, t_other, opro)
    stage_layers = math.ceil(model.layers / s.s_pp)
    t_update = stage_layers * comm.grad_oss + mem.mem_optstate / options.update_bandwidth
    return CostBreakdown(
        mem_params=mem.mem_params,
        mem_grads=mem.mem_grads,
        mem_optstate=mem.mem_optstate,
        mem_act=mem.mem_act,
        mem_other=mem.mem_other,
        mem_embed_params=mem.embed_params,
        mem_embed_grads=mem.embed_grads,
        mem_embed_optstate=mem.embed_optstate,
        mem_logits_act=mem.logits_act,
        mem_comm_buffer=mem.comm_buffer,
        t_comp_per_layer=comp,
        t_comm_act=comm.act,
        t_comm_param=comm.param,
        t_comm_grad_oss=comm.grad_oss,
        t_layer_overlapped=opro,
        t_other=t_other,
        t_fwd_bwd=t_fb,
        t_update=t_update,
        t_step=t_fb + t_update,
        bubble_factor=s.n + s.s_pp - 1,
    )


@dataclass(frozen=True)
class Throughput:
    tgs: float
    mfu: float


def throughput(cost: CostBreakdown, model: ModelConfig, cluster: ClusterConfig,
               peak_flops: float) -> Throughput:
    """Tokens per GPU per second and model-FLOPs utilisation of a predicted step."""
    if cost.t_step <= 0:
        raise ValueError("t_step must be positive")
    B, N = model.global_batch_tokens, cluster.total_gpus
    tgs = B / (cost.t_step * N)
    # attention term halved for causal masking
    flops = 6 * total_param_count(model) * B + 6 * model.layers * model.hidden_dim * model.seq_len * B
    mfu = flops / (cost.t_step * N * peak_flops)
    return Throughput(tgs, mfu)
