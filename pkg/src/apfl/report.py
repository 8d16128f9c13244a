"""CSV output of run traces and the cross-run comparison table."""

from __future__ import annotations

import csv
import io
from dataclasses import fields

from .errors import RejectedInput
from .sim import DOWN, UP, MetricsRow, RunTrace, sig9

METRICS_COLUMNS = tuple(f.name for f in fields(MetricsRow))
SUMMARY_COLUMNS = (
    "protocol", "name", "seed", "n_clients",
    "final_mean_accuracy", "final_min_accuracy", "client_accuracies",
    "q_max", "q_avg", "convergence_proxy",
    "up_bytes", "down_bytes", "peak_up_1s", "peak_down_1s",
    "target_accuracy", "time_to_target", "accepted_pushes", "broadcasts", "cluster_count", "end_time",
)
_INT_COLUMNS = {"client_id", "cluster_id", "staleness", "up_bytes_cum", "down_bytes_cum", "cluster_count"}


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".9g")
    return str(v)


def metrics_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in trace.rows:
        w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
    return buf.getvalue()


def parse_metrics_csv(text: str) -> list[MetricsRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != METRICS_COLUMNS:
        raise RejectedInput(f"unexpected metrics header {header}")
    out = []
    for row in reader:
        values = {}
        for name, raw in zip(METRICS_COLUMNS, row):
            if name == "event":
                values[name] = raw
            elif name in _INT_COLUMNS:
                values[name] = int(raw)
            else:
                values[name] = float(raw)
        out.append(MetricsRow(**values))
    return out


def summary_record(trace: RunTrace, target: float) -> dict[str, str]:
    q_max, q_avg = float(trace.q_max), trace.q_avg
    t = trace.time_to_accuracy(target)
    rec = {
        "protocol": trace.protocol,
        "name": trace.name,
        "seed": trace.seed,
        "n_clients": trace.n_clients,
        "final_mean_accuracy": sig9(trace.final_mean_accuracy),
        "final_min_accuracy": sig9(trace.final_min_accuracy),
        "client_accuracies": ";".join(_fmt(sig9(float(a))) for a in trace.final_accuracy),
        "q_max": int(q_max),
        "q_avg": sig9(q_avg),
        "convergence_proxy": sig9((q_max * q_avg) ** 0.5),
        "up_bytes": trace.total_bytes(UP),
        "down_bytes": trace.total_bytes(DOWN),
        "peak_up_1s": sig9(trace.peak(UP, 1.0)),
        "peak_down_1s": sig9(trace.peak(DOWN, 1.0)),
        "target_accuracy": sig9(target),
        "time_to_target": "" if t is None else sig9(t),
        "accepted_pushes": trace.accepted_pushes,
        "broadcasts": trace.broadcasts,
        "cluster_count": len(set(trace.assignment)),
        "end_time": sig9(trace.end_time),
    }
    return {k: _fmt(v) for k, v in rec.items()}


def summary_csv(trace: RunTrace, target: float) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerow(summary_record(trace, target))
    return buf.getvalue()


def read_summary(text: str, source: str = "<summary>") -> list[dict[str, str]]:
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    for col in SUMMARY_COLUMNS:
        if col not in header:
            raise RejectedInput(f"{source}: missing column '{col}'")
    return list(reader)


def compare(summaries: list[list[dict[str, str]]]) -> str:
    """Fixed-width table; time reduction is relative to the first synchronous row."""
    rows = [r for s in summaries for r in s]
    if not rows:
        raise RejectedInput("nothing to compare")
    ref = next((r for r in rows if r["protocol"].startswith("sync") and r["time_to_target"]), None)
    header = ["protocol", "name", "time_to_target", "time_reduction_pct", "final_mean", "final_min",
              "up_bytes", "down_bytes", "q_max", "q_avg", "peak_up_1s", "peak_down_1s"]
    table = [header]
    for r in rows:
        reduction = ""
        if ref is not None and r["time_to_target"]:
            reduction = f"{100.0 * (1.0 - float(r['time_to_target']) / float(ref['time_to_target'])):.1f}"
        table.append([
            r["protocol"], r["name"], r["time_to_target"] or "-", reduction or "-",
            r["final_mean_accuracy"], r["final_min_accuracy"], r["up_bytes"], r["down_bytes"],
            r["q_max"], r["q_avg"], r["peak_up_1s"], r["peak_down_1s"],
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table) + "\n"
