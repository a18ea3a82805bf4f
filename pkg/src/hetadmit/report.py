"""Render a run directory of JSON outputs as a Markdown summary."""

from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Any

from .cost import format_pct


def load_run(run_dir: str | Path) -> list[dict[str, Any]]:
    docs = []
    for path in sorted(Path(run_dir).glob("*.json")):
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "kind" in doc:
            doc["_file"] = path.name
            docs.append(doc)
    return docs


def _table(header: list[str], rows: list[list[Any]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def _fmt_slo(t: float) -> str:
    return f"{t:g}s limit"


def depth_table(docs: list[dict[str, Any]]) -> str | None:
    # (slo, method) -> {device: depth}
    cells: dict[tuple[float, str], dict[str, int]] = defaultdict(dict)
    devices: list[str] = []

    def note(name: str) -> None:
        if name not in devices:
            devices.append(name)

    for doc in docs:
        kind = doc["kind"]
        if kind == "estimate":
            for name, depth in doc["depths"].items():
                note(name)
                cells[(doc["slo"], "linear regression")][name] = depth
        elif kind == "stress":
            note(doc["device"])
            cells[(doc["slo"], "stress test")][doc["device"]] = doc["depth"]
        elif kind == "finetune":
            for role, name in doc["devices"].items():
                if name is None:
                    continue
                note(name)
                cells[(doc["slo"], "fine-tuned")][name] = doc["tuned"][f"{role}_depth"]
    if not cells:
        return None
    order = {"linear regression": 0, "stress test": 1, "fine-tuned": 2}
    rows = []
    for slo, method in sorted(cells, key=lambda k: (k[0], order[k[1]])):
        rows.append([_fmt_slo(slo), method] + [cells[(slo, method)].get(d, "") for d in devices])
    return _table(["SLO", "method", *devices], rows)


def overall_table(docs: list[dict[str, Any]]) -> str | None:
    rows = []
    for doc in docs:
        if doc["kind"] != "finetune":
            continue
        acc = doc["tuned"]["accelerator_depth"]
        cpu = doc["tuned"]["cpu_depth"]
        gain = format_pct(cpu / acc) if acc else "n/a"
        pair = f"{doc['devices'].get('accelerator')} + {doc['devices'].get('cpu')}"
        rows.append([pair, _fmt_slo(doc["slo"]), acc, f"{acc} + {cpu}", gain])
    if not rows:
        return None
    return _table(["devices", "SLO", "accelerator only", "with offload", "conc. improvement"], rows)


def metrics_table(docs: list[dict[str, Any]]) -> str | None:
    rows = []
    for doc in docs:
        if doc["kind"] != "metrics":
            continue
        m = doc["metrics"]
        plan = doc.get("plan", {})
        rows.append([
            doc["_file"],
            f"({plan.get('accelerator_depth')}, {plan.get('cpu_depth')})",
            m["accepted"], m["rejected_busy"], m["slo_violations"],
            f"{m['latency_p50']:.3f}", f"{m['latency_p99']:.3f}", f"{m['latency_max']:.3f}",
            f"{m['throughput']:.2f}",
        ])
    if not rows:
        return None
    return _table(
        ["run", "plan", "accepted", "busy", "SLO violations", "p50 (s)", "p99 (s)", "max (s)", "throughput (q/s)"],
        rows,
    )


def cost_table(docs: list[dict[str, Any]]) -> str | None:
    rows = []
    for doc in docs:
        if doc["kind"] != "cost":
            continue
        r = doc["report"]
        avg = r["average_strategy_cost"]
        peak = r["peak_strategy_cost"]
        rows.append([
            doc.get("c_accel"), doc.get("c_cpu"),
            format_pct(r["peak_savings_ratio"]), format_pct(r["throughput_gain_ratio"]),
            "" if avg is None else f"{avg:.2f}", "" if peak is None else f"{peak:.2f}",
        ])
    if not rows:
        return None
    return _table(["C accel", "C cpu", "peak savings", "throughput gain", "avg-sizing cost", "peak-sizing cost"], rows)


def render_report(run_dir: str | Path) -> str:
    docs = load_run(run_dir)
    sections = [f"# Run summary: {Path(run_dir).name}"]
    for title, table in (
        ("Queue depths", depth_table(docs)),
        ("Overall concurrency", overall_table(docs)),
        ("Simulation metrics", metrics_table(docs)),
        ("Deployment cost", cost_table(docs)),
    ):
        if table:
            sections.append(f"## {title}\n\n{table}")
    if len(sections) == 1:
        sections.append("No recognised result files found.")
    return "\n\n".join(sections) + "\n"
