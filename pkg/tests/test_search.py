import random

import pytest
from hypothesis import given, settings, strategies as st

from parplan.cluster import BandwidthProfile, ClusterConfig
from parplan.cost import ComputeModel, memory
from parplan.model import preset
from parplan.search import PlanReport, explain, memory_gate, merge_top_k, search
from parplan.strategy import Strategy

from oracles import brute_force_top_k, random_instance

PROFILE = BandwidthProfile.flat(150e9, 20e9, participants=(2, 4, 8, 16))


@pytest.mark.parametrize("seed", range(12))
def test_top_k_equals_brute_force(seed):
    model, cluster, profile, compute, overlap = random_instance(random.Random(seed))
    k = random.Random(seed).choice([1, 3, 10])
    got = search(model, cluster, profile, compute, overlap, top_k=k)
    want = brute_force_top_k(model, cluster, profile, compute, overlap, k)
    assert [(e.cost.t_step, e.strategy.as_tuple()) for e in got.entries] == want


def test_report_counts_and_label():
    model = preset("7b", global_batch_tokens=4096 * 16)
    cluster = ClusterConfig(16, 8, 40e9)
    rep = search(model, cluster, PROFILE, ComputeModel(), top_k=5)
    assert len(rep.entries) == 5
    assert rep.feasible + rep.pruned == rep.enumerated
    assert rep.pruned > 0
    assert rep.ranked_by == "estimate"
    assert [e.sort_key for e in rep.entries] == sorted(e.sort_key for e in rep.entries)
    for e in rep.entries:
        assert memory_gate(e.strategy, model, 40e9)


def test_slack_admits_more():
    model = preset("7b", global_batch_tokens=4096 * 16)
    tight = search(model, ClusterConfig(16, 8, 30e9), PROFILE, ComputeModel(), top_k=1)
    loose = search(model, ClusterConfig(16, 8, 30e9), PROFILE, ComputeModel(), top_k=1,
                   memory_slack=1.5)
    assert loose.feasible >= tight.feasible


def test_no_feasible_plan():
    model = preset("65b", global_batch_tokens=4096 * 2)
    rep = search(model, ClusterConfig(2, 2, 1e9), PROFILE, ComputeModel())
    assert rep.entries == [] and rep.enumerated > 0 and rep.feasible == 0


def test_top_k_validation():
    with pytest.raises(ValueError):
        search(preset("7b"), ClusterConfig(8, 8, 80e9), PROFILE, ComputeModel(), top_k=0)


def test_anytime_kth_best_non_increasing():
    model = preset("7b", global_batch_tokens=4096 * 16)
    seen = []
    search(model, ClusterConfig(16, 8, 80e9), PROFILE, ComputeModel(), top_k=4,
           on_candidate=seen.append)
    assert seen and all(b <= a for a, b in zip(seen, seen[1:]))
    assert seen[-1] < float("inf")


def test_determinism():
    model = preset("7b", global_batch_tokens=4096 * 16)
    a = search(model, ClusterConfig(16, 8, 80e9), PROFILE, ComputeModel())
    b = search(model, ClusterConfig(16, 8, 80e9), PROFILE, ComputeModel())
    assert a == b


@settings(max_examples=40)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6), parts=st.integers(1, 4))
def test_merge_is_order_independent(seed, k, parts):
    rng = random.Random(seed)
    model, cluster, profile, compute, overlap = random_instance(rng)
    full = search(model, cluster, profile, compute, overlap, top_k=50).entries
    rng.shuffle(full)
    chunks = [full[i::parts] for i in range(parts)]
    partial = [merge_top_k([c], k) for c in chunks]
    merged = merge_top_k(partial, k)
    rng.shuffle(partial)
    assert merged == merge_top_k(partial, k) == sorted(full, key=lambda e: e.sort_key)[:k]


def test_explain():
    model = preset("7b", global_batch_tokens=4096 * 16)
    cluster = ClusterConfig(16, 8, 80e9)
    rep = search(model, cluster, PROFILE, ComputeModel(), top_k=3)
    text = explain(rep, 0, model, cluster)
    assert text.startswith("rank 0: b=")
    for word in ("memory per GPU", "communication", "placement", "if doubled", "s_oss"):
        assert word in text
    with pytest.raises(IndexError):
        explain(rep, 3)
    assert "if doubled" not in explain(rep, 1)


def test_memory_gate_threshold():
    model = preset("7b")
    s = Strategy(b=1, n=8, s_dp=128)
    total = memory(s, model).total
    assert memory_gate(s, model, total)
    assert not memory_gate(s, model, total * 0.999)
    assert memory_gate(s, model, total / 1.1, slack=1.1 + 1e-9)


def test_empty_report_defaults():
    rep = PlanReport([])
    assert rep.top_k == 10 and rep.ranked_by == "estimate"
