"""Matplotlib figures for plan breakdowns, overlap timelines and allocator traces."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

GIB = 2**30

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

MEMORY_COLORS = {"P": "#4c72b0", "G": "#55a868", "OS": "#c44e52", "ACT": "#8172b2", "other": "#937860"}
COMM_COLORS = {"act": "#dd8452", "param": "#4c72b0", "grad/oss": "#55a868"}
STREAM_COLORS = {"all-gather": "#4c72b0", "reduce-scatter": "#c44e52", "forward": "#55a868",
                 "backward": "#8172b2", "grad-weight": "#8172b2", "grad-input": "#55a868"}


def figure(width=6.4, height=None, nrows=1, ncols=1):
    golden = (5**0.5 - 1) / 2
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(nrows, ncols, figsize=(width, height or width * golden))
    return fig, ax


def save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)


def plot_breakdown(entries, path):
    """Stacked memory bars (GiB) and per-source communication bars (ms), one per plan."""
    from .report import COMM_PARTS, MEMORY_PARTS

    fig, (ax_mem, ax_comm) = figure(width=8, height=3.4, ncols=2)
    xs = list(range(len(entries)))
    bottom = [0.0] * len(entries)
    for name, attr in MEMORY_PARTS:
        vals = [getattr(e.cost, attr) / GIB for e in entries]
        ax_mem.bar(xs, vals, bottom=bottom, color=MEMORY_COLORS[name], label=name)
        bottom = [b + v for b, v in zip(bottom, vals)]
    ax_mem.set_xlabel("plan rank")
    ax_mem.set_ylabel("memory per GPU (GiB)")
    ax_mem.legend(frameon=False)
    width = 0.8 / len(COMM_PARTS)
    for k, (name, attr) in enumerate(COMM_PARTS):
        vals = [getattr(e.cost, attr) * 1e3 for e in entries]
        ax_comm.bar([x + k * width for x in xs], vals, width=width, color=COMM_COLORS[name], label=name)
    ax_comm.set_xlabel("plan rank")
    ax_comm.set_ylabel("comm per layer per step (ms)")
    ax_comm.legend(frameon=False)
    for ax in (ax_mem, ax_comm):
        ax.set_xticks(xs)
    save(fig, path)


def plot_timeline(timeline, path, title=None):
    fig, ax = figure(width=8, height=2.2)
    lanes = {"compute": 1, "comm": 0}
    seen = set()
    for e in timeline.events:
        label = e.kind if e.kind not in seen else None
        seen.add(e.kind)
        ax.barh(lanes[e.stream], e.duration, left=e.start, height=0.6,
                color=STREAM_COLORS.get(e.kind, "#999999"), edgecolor="white", label=label)
        if e.duration > 0:
            ax.text(e.start + e.duration / 2, lanes[e.stream], str(e.layer),
                    ha="center", va="center", fontsize=7, color="white")
    ax.set_yticks([0, 1])
    ax.set_yticklabels(["comm", "compute"])
    ax.set_xlabel("time")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, ncol=4, loc="upper center", bbox_to_anchor=(0.5, -0.35))
    save(fig, path)


def plot_mempool(reports: dict, path):
    """Reserved and fragmented bytes over the trace, one line pair per policy."""
    fig, ax = figure(width=7, height=3.2)
    for label, rep in reports.items():
        xs = range(len(rep.history))
        line, = ax.plot(xs, [h.reserved / GIB for h in rep.history], label=f"{label} reserved")
        ax.plot(xs, [h.fragmented / GIB for h in rep.history], linestyle="--",
                color=line.get_color(), label=f"{label} fragmented")
    ax.set_xlabel("trace op")
    ax.set_ylabel("GiB")
    ax.legend(frameon=False)
    save(fig, path)
