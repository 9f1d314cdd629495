"""The plan vector, its feasibility constraints, and the enumeration loop nest."""

from __future__ import annotations

from dataclasses import astuple, dataclass, fields
from typing import Iterator

from .cluster import ClusterConfig
from .model import ModelConfig

STRATEGY_KEYS = ("b", "n", "a", "s_pp", "s_dp", "s_tp", "s_sp", "s_ps", "s_gs", "s_oss")

# names reported by validate(), in check order
CONSTRAINTS = (
    "positive",
    "global_batch",
    "gpu_count",
    "ps_divides_gpus",
    "oss_divides_gpus",
    "gs_choice",
    "mode_coupling",
    "ps_range",
    "oss_range",
    "head_divisibility",
    "pp_layers",
)


@dataclass(frozen=True, order=True)
class Strategy:
    """S = [b, n, a, s_pp, s_dp, s_tp, s_sp, s_ps, s_gs, s_oss].

    Field order is the lexicographic tie-break order used everywhere.
    """

    b: int = 1
    n: int = 1
    a: int = 0
    s_pp: int = 1
    s_dp: int = 1
    s_tp: int = 1
    s_sp: int = 1
    s_ps: int = 1
    s_gs: int = 1
    s_oss: int = 1

    def as_tuple(self) -> tuple:
        return astuple(self)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "Strategy":
        return cls(**{k: int(d[k]) for k in STRATEGY_KEYS})

    def label(self) -> str:
        return " ".join(f"{k}={v}" for k, v in self.to_dict().items())


@dataclass(frozen=True)
class Verdict:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def to_dict(self) -> dict:
        return {"feasible": self.ok, "violations": list(self.violations)}


@dataclass(frozen=True)
class ShardingLayout:
    """A tensor of ``elements`` replicated over ``replicas`` GPUs, sharded by ``factor``."""

    factor: int
    replicas: int
    elements: int

    def __post_init__(self):
        if self.factor < 1 or self.replicas % self.factor:
            raise ValueError(f"sharding factor {self.factor} must divide {self.replicas}")

    @property
    def replica_groups(self) -> int:
        return self.replicas // self.factor

    @property
    def elements_per_gpu(self) -> float:
        return self.elements / self.factor

    @property
    def kind(self) -> str:
        if self.factor == 1:
            return "full-replication"
        if self.factor == self.replicas:
            return "full-sharding"
        return "hybrid"


def validate(s: Strategy, model: ModelConfig, cluster: ClusterConfig) -> Verdict:
    """Check every constraint of the integer program; infeasibility is a verdict."""
    N = cluster.total_gpus
    comps = s.as_tuple()
    if any(isinstance(c, bool) or not isinstance(c, int) for c in comps) \
            or min(c for k, c in zip(STRATEGY_KEYS, comps) if k != "a") < 1 or s.a not in (0, 1):
        return Verdict(("positive",))
    bad = []
    if s.b * model.seq_len * s.n * s.s_dp != model.global_batch_tokens:
        bad.append("global_batch")
    if s.s_dp * s.s_sp * s.s_pp != N:
        bad.append("gpu_count")
    if N % (s.s_ps * s.s_pp * s.s_tp):
        bad.append("ps_divides_gpus")
    if N % (s.s_ps * s.s_oss * s.s_pp * s.s_tp):
        bad.append("oss_divides_gpus")
    if s.s_gs not in (1, s.s_oss):
        bad.append("gs_choice")
    if not (s.s_tp == 1 or s.s_tp == s.s_sp):
        bad.append("mode_coupling")
    if s.s_ps * s.s_pp * s.s_tp > N:
        bad.append("ps_range")
    if s.s_oss * s.s_pp * s.s_tp * s.s_ps > N:
        bad.append("oss_range")
    if s.s_sp > model.heads or model.heads % s.s_sp:
        bad.append("head_divisibility")
    if s.s_pp > model.layers:
        bad.append("pp_layers")
    return Verdict(tuple(bad))


def divisors(x: int) -> list[int]:
    return [d for d in range(1, x + 1) if x % d == 0]


def powers_of_two(limit: int) -> list[int]:
    out, v = [], 1
    while v <= limit:
        out.append(v)
        v *= 2
    return out


def is_power_of_two(x: int) -> bool:
    return x >= 1 and x & (x - 1) == 0


@dataclass(frozen=True)
class SearchBounds:
    """Optional caps on each searched dimension (None = whatever is feasible)."""

    max_pp: int | None = None
    max_sp: int | None = None
    max_b: int | None = None
    max_ps: int | None = None
    max_oss: int | None = None
    sp_powers_of_two: bool = True
    recompute: tuple[int, ...] = (0, 1)

    def admits(self, s: Strategy) -> bool:
        """True when ``s`` lies inside the box the loop nest walks."""
        def under(v, cap):
            return cap is None or v <= cap
        return (under(s.s_pp, self.max_pp) and under(s.s_sp, self.max_sp)
                and under(s.b, self.max_b) and under(s.s_ps, self.max_ps)
                and under(s.s_oss, self.max_oss) and s.a in self.recompute
                and (not self.sp_powers_of_two or is_power_of_two(s.s_sp)))


DEFAULT_BOUNDS = SearchBounds()


def enumerate_strategies(model: ModelConfig, cluster: ClusterConfig,
                         bounds: SearchBounds = DEFAULT_BOUNDS) -> Iterator[Strategy]:
    """Walk the search loop nest and yield each feasible plan exactly once.

    The nest is s_pp -> (s_sp, s_tp) -> s_dp -> b -> (s_ps, s_gs, s_oss) -> a,
    with the micro-batch count derived as B / (S * s_dp * b).
    """
    N = cluster.total_gpus
    S, B = model.seq_len, model.global_batch_tokens
    if B % S:
        return
    seqs = B // S
    for s_pp in divisors(N):
        if s_pp > model.layers or (bounds.max_pp and s_pp > bounds.max_pp):
            continue
        rest = N // s_pp
        sp_values = powers_of_two(rest) if bounds.sp_powers_of_two else divisors(rest)
        for s_sp in sp_values:
            if rest % s_sp or (bounds.max_sp and s_sp > bounds.max_sp):
                continue
            if s_sp > model.heads or model.heads % s_sp:
                continue
            s_dp = rest // s_sp
            if seqs % s_dp:
                continue
            tp_values = (1,) if s_sp == 1 else (1, s_sp)
            for s_tp in tp_values:
                for b in divisors(seqs // s_dp):
                    if bounds.max_b and b > bounds.max_b:
                        continue
                    n = seqs // (s_dp * b)
                    ps_room = N // (s_pp * s_tp)
                    for s_ps in divisors(ps_room):
                        if bounds.max_ps and s_ps > bounds.max_ps:
                            continue
                        for s_oss in divisors(ps_room // s_ps):
                            if bounds.max_oss and s_oss > bounds.max_oss:
                                continue
                            for s_gs in ((1,) if s_oss == 1 else (1, s_oss)):
                                for a in bounds.recompute:
                                    yield Strategy(b, n, a, s_pp, s_dp, s_tp, s_sp,
                                                   s_ps, s_gs, s_oss)
