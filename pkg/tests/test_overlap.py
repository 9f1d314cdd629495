import pytest
from hypothesis import given, strategies as st

from parplan.cluster import BandwidthProfile, ClusterConfig
from parplan.cost import ComputeModel
from parplan.model import preset
from parplan.overlap import (Event, LayerWorkload, Timeline, compare_to_analytic, layer_workloads,
                             simulate_backward, simulate_forward, write_timeline_csv)
from parplan.strategy import Strategy


def uniform(n, f=10.0, gx=10.0, gw=10.0, g=10.0, rs=10.0):
    return [LayerWorkload(f, gx, gw, g, rs)] * n


def spans(tl):
    return sorted((e.stream, e.kind, e.layer, e.start, e.end) for e in tl.events)


# hand-laid schedules ----------------------------------------------------------

def test_forward_hand_examples():
    w = uniform(2)
    naive = simulate_forward(w, "naive")
    pre = simulate_forward(w, "inter_layer_prefetch")
    assert naive.makespan == 40 and pre.makespan == 30
    assert spans(pre) == sorted([
        ("comm", "all-gather", 0, 0, 10), ("comm", "all-gather", 1, 10, 20),
        ("compute", "forward", 0, 10, 20), ("compute", "forward", 1, 20, 30)])


def test_backward_hand_examples():
    w = uniform(2)
    fused = simulate_backward(w, "fused")
    sel = simulate_backward(w, "selective")
    assert fused.makespan == 80 and sel.makespan == 50
    assert spans(sel) == sorted([
        ("comm", "all-gather", 1, 0, 10),
        ("compute", "grad-weight", 1, 10, 20), ("comm", "all-gather", 0, 10, 20),
        ("compute", "grad-input", 1, 20, 30), ("comm", "reduce-scatter", 1, 20, 30),
        ("compute", "grad-weight", 0, 30, 40),
        ("compute", "grad-input", 0, 40, 50), ("comm", "reduce-scatter", 0, 40, 50)])


def test_gather_free_forward_is_pure_compute():
    w = uniform(5, f=3.0, g=0.0)
    assert simulate_forward(w, "naive").makespan == simulate_forward(w).makespan == 15


def test_single_layer_policies_identical():
    w = uniform(1, f=7.0, g=4.0)
    assert spans(simulate_forward(w, "naive")) == spans(simulate_forward(w))


def test_comm_free_backward():
    w = uniform(3, gx=2.0, gw=5.0, g=0.0, rs=0.0)
    assert simulate_backward(w, "fused").makespan == simulate_backward(w).makespan == 21


def test_single_layer_reduce_scatter_exposed_without_grad_input():
    # with nothing left to compute after G-W, the reduce-scatter is fully exposed
    w = uniform(1, gx=0.0, gw=10.0, g=5.0, rs=8.0)
    tl = simulate_backward(w)
    assert tl.makespan == 5 + 10 + 8
    assert tl.find("reduce-scatter", 0).end == tl.makespan


def test_issue_delay_adds_latency():
    w = uniform(4)
    assert simulate_backward(w, issue_delay=0.5).makespan > simulate_backward(w).makespan


def test_validation():
    with pytest.raises(ValueError):
        simulate_forward([])
    with pytest.raises(ValueError):
        simulate_backward(uniform(1), "eager")
    with pytest.raises(ValueError):
        LayerWorkload(-1, 0, 0, 0, 0)


def test_from_forward_split():
    w = LayerWorkload.from_forward(3.0, 1.0, 2.0)
    assert (w.grad_input, w.grad_weight) == (3.0, 3.0)
    assert w.grad_input + w.grad_weight == 2 * w.forward


# analytic comparison ----------------------------------------------------------

def test_comm_free_ratio_is_one():
    tl = simulate_backward(uniform(4, g=0.0, rs=0.0))
    assert compare_to_analytic(tl, 1.0).overall == 1.0


def test_balanced_ratio_tends_to_one_from_above():
    # per layer: G-X + G-W = 20 = gather + reduce-scatter
    r8 = compare_to_analytic(simulate_backward(uniform(8)), 1.0).overall
    r64 = compare_to_analytic(simulate_backward(uniform(64)), 1.0).overall
    assert r8 == 170 / 160 and r64 == 1290 / 1280
    assert 1.0 < r64 < r8


def test_comm_bound_ratio_near_one():
    tl = simulate_backward(uniform(64, gx=1, gw=1, g=20, rs=20))
    assert compare_to_analytic(tl, 1.0).overall == pytest.approx(1.0, abs=0.02)


def test_group_ratios():
    cmp = compare_to_analytic(simulate_backward(uniform(8)), 1.3, group_size=4)
    assert len(cmp.groups) == 2 and all(r > 0 for r in cmp.groups)


def test_then_and_csv(tmp_path):
    fwd = simulate_forward(uniform(2))
    both = fwd.then(simulate_backward(uniform(2)))
    assert both.makespan == 80
    path = tmp_path / "tl.csv"
    write_timeline_csv(both, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "stream,kind,layer,start,end" and len(lines) == 1 + len(both.events)


def test_workloads_from_strategy():
    model = preset("7b", global_batch_tokens=4096 * 16)
    cluster = ClusterConfig(16, 8, 80e9)
    s = Strategy(b=1, n=1, s_pp=2, s_dp=8, s_ps=4)
    wl = layer_workloads(s, model, cluster, BandwidthProfile.flat(100e9), ComputeModel())
    assert len(wl) == 16
    assert wl[0].gather == pytest.approx(2 * 201_334_784 / 100e9)
    assert wl[0].grad_input + wl[0].grad_weight == pytest.approx(2 * wl[0].forward)
    no_ps = layer_workloads(Strategy(b=1, n=1, s_dp=16), model, cluster,
                            BandwidthProfile.flat(100e9), ComputeModel())
    assert no_ps[0].gather == no_ps[0].reduce_scatter == 0


# properties -------------------------------------------------------------------

t = st.floats(0, 50, allow_nan=False)
workloads = st.lists(st.builds(LayerWorkload, t, t, t, t, t), min_size=1, max_size=12)


def _check_bounds(tl):
    comp, comm = tl.busy("compute"), tl.busy("comm")
    eps = 1e-9 * (comp + comm + 1)
    assert max(comp, comm) - eps <= tl.makespan <= comp + comm + eps


def _check_exclusive(tl):
    for stream in ("compute", "comm"):
        ev = tl.stream_events(stream)
        for a, b in zip(ev, ev[1:]):
            assert a.end <= b.start + 1e-9


@given(workloads)
def test_forward_properties(w):
    naive, pre = simulate_forward(w, "naive"), simulate_forward(w)
    for tl in (naive, pre):
        _check_bounds(tl)
        _check_exclusive(tl)
        for i in range(len(w)):
            assert tl.find("forward", i).start >= tl.find("all-gather", i).end - 1e-9
    assert pre.makespan <= naive.makespan + 1e-9


@given(workloads)
def test_backward_properties(w):
    fused, sel = simulate_backward(w, "fused"), simulate_backward(w)
    for tl in (fused, sel):
        _check_bounds(tl)
        _check_exclusive(tl)
    for i in range(len(w)):
        assert fused.find("backward", i).start >= fused.find("all-gather", i).end - 1e-9
        g = sel.find("all-gather", i).end
        assert sel.find("grad-weight", i).start >= g - 1e-9
        assert sel.find("grad-input", i).start >= g - 1e-9
        assert sel.find("reduce-scatter", i).start >= sel.find("grad-weight", i).end - 1e-9
    assert sel.makespan <= fused.makespan + 1e-9


@given(workloads)
def test_simulation_deterministic(w):
    assert simulate_backward(w).events == simulate_backward(w).events


def test_timeline_helpers():
    tl = Timeline([Event("comm", "all-gather", 0, 0.0, 2.0)])
    assert tl.busy("comm") == 2.0 and tl.busy("compute") == 0
    with pytest.raises(KeyError):
        tl.find("forward", 0)
    assert Timeline().makespan == 0.0
