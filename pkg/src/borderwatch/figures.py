"""Report rendering: figures and delimited event export for a sim run.

Everything here is driven by the SimulationReport and the stored event
records, so the same artifacts can be regenerated from any saved report
without re-running the scenario.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .simulate import SimulationReport
from .store import IntrusionEvent

EVENT_CSV_COLUMNS = ["event_id", "device_id", "device_seq",
                     "device_ts_ms", "server_ts_ms", "text"]


def write_events_csv(events: list[IntrusionEvent], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENT_CSV_COLUMNS)
        for e in events:
            writer.writerow([e.event_id, e.device_id, e.device_seq,
                             e.device_ts_ms, e.server_ts_ms, e.text])


def render_figures(report: SimulationReport, outdir: str | Path) -> list[Path]:
    """Write the standard report figures; returns the files created."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = [
        _counts_figure(report, outdir / "counts.png"),
        _latency_figure(report, outdir / "latency.png"),
    ]
    return written


def _counts_figure(report: SimulationReport, path: Path) -> Path:
    fig, (ax_nodes, ax_ops) = plt.subplots(1, 2, figsize=(9, 3.5))

    node_ids = list(report.nodes)
    detections = [report.nodes[n]["detections"] for n in node_ids]
    dropped = [report.nodes[n]["uplink_dropped"] for n in node_ids]
    x = range(len(node_ids))
    ax_nodes.bar([i - 0.2 for i in x], detections, width=0.4, label="detections")
    ax_nodes.bar([i + 0.2 for i in x], dropped, width=0.4, label="frames dropped")
    ax_nodes.set_xticks(list(x))
    ax_nodes.set_xticklabels(node_ids, rotation=30, ha="right")
    ax_nodes.set_ylabel("count")
    ax_nodes.set_title(f"per node (stored events: {report.stored_events})")
    ax_nodes.legend(fontsize=8)

    op_ids = list(report.operators)
    delivered = [report.operators[o]["delivered"] for o in op_ids]
    ax_ops.bar(range(len(op_ids)), delivered, color="tab:green")
    ax_ops.set_xticks(range(len(op_ids)))
    ax_ops.set_xticklabels(op_ids, rotation=30, ha="right")
    ax_ops.set_ylabel("events delivered")
    ax_ops.set_title("per operator")

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _latency_figure(report: SimulationReport, path: Path) -> Path:
    fig, (ax_notify, ax_cmd) = plt.subplots(1, 2, figsize=(9, 3.5))

    for ax, samples, title in (
        (ax_notify, report.notification_latency_ticks, "notification latency"),
        (ax_cmd, report.command_roundtrip_ticks, "command round trip"),
    ):
        if samples:
            bins = range(0, max(samples) + 2)
            ax.hist(samples, bins=bins, align="left", color="tab:blue")
        else:
            ax.text(0.5, 0.5, "no samples", ha="center", va="center",
                    transform=ax.transAxes, color="gray")
        ax.set_xlabel("ticks")
        ax.set_ylabel("occurrences")
        ax.set_title(title)

    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
