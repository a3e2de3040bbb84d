"""Run reports: one versioned JSON document per run (the single source of
truth), with the human summary, CSV, and figures all rendered from it."""
from __future__ import annotations

import csv
import json
import os
from typing import Optional

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

REPORT_SCHEMA = "cpsim.report@1"
MATRIX_SCHEMA = "cpsim.matrix@1"

VERDICT_COLORS = {
    "ATTACK_SUCCEEDED": "#c0392b",
    "ATTACK_BLOCKED": "#27ae60",
    "INCONCLUSIVE": "#7f8c8d",
}


def build_report(engine, cfg: dict, metrics: dict) -> dict:
    counters = engine.counters.to_dict()
    report = {
        "schema": REPORT_SCHEMA,
        "scenario": cfg.get("name", "unnamed"),
        "paradigm": cfg.get("paradigm"),
        "threat_model": cfg.get("threat_model", "END_HOST"),
        "seed": engine.seed,
        "horizon": engine.horizon,
        "verdict": metrics.get("verdict"),
        "verdict_reason": metrics.get("verdict_reason"),
        "interception_ratio": round(metrics.get("interception_ratio", 0.0), 6),
        "frames_intercepted_by_adversary": metrics.get("frames_intercepted", 0),
        "frames_delivered": metrics.get("frames_delivered", {}),
        "forwarding_loop_detected": metrics.get("forwarding_loop_detected", False),
        "topology_divergence": metrics.get("topology_divergence", 0),
        "elected_master": metrics.get("elected_master"),
        "defense_blocks": metrics.get("defense_blocks", 0),
        "defense_block_detail": counters["defense_blocks"],
        "trace_digest": engine.trace.digest(),
        "counters": counters,
        "extra": {k: v for k, v in metrics.items()
                  if k not in ("verdict", "verdict_reason", "interception_ratio",
                               "frames_intercepted", "frames_delivered",
                               "forwarding_loop_detected", "topology_divergence",
                               "elected_master", "defense_blocks")},
    }
    return report


def human_summary(report: dict) -> str:
    lines = [
        f"scenario       {report['scenario']}  ({report['paradigm']}, "
        f"{report['threat_model']}, seed {report['seed']})",
        f"verdict        {report['verdict']}  [{report['verdict_reason']}]",
        f"interception   {report['interception_ratio']:.3f} "
        f"({report['frames_intercepted_by_adversary']} frames)",
        f"delivered      {sum(report['frames_delivered'].values())} data frames "
        f"to {len(report['frames_delivered'])} hosts",
        f"loops          {'DETECTED' if report['forwarding_loop_detected'] else 'none'}"
        f"   topo divergence {report['topology_divergence']}",
        f"elected master {report['elected_master']}",
        f"defense blocks {report['defense_blocks']}",
        f"trace digest   {report['trace_digest'][:16]}…",
    ]
    return "\n".join(lines)


def write_run_outputs(report: dict, engine, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=str)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("scenario", "verdict", "interception_ratio",
                    "frames_intercepted_by_adversary", "topology_divergence",
                    "defense_blocks", "forwarding_loop_detected",
                    "elected_master", "trace_digest"):
            w.writerow([key, report[key]])
        for host, n in sorted(report["frames_delivered"].items()):
            w.writerow([f"delivered[{host}]", n])
    _delivery_figure(engine, os.path.join(out_dir, "delivery_timeline.png"))


def _delivery_figure(engine, path: str):
    per_tick: dict[int, int] = {}
    drops: dict[int, int] = {}
    for r in engine.trace.events:
        if r["ev"] == "recv" and r.get("kind") == "DATA":
            per_tick[r["t"]] = per_tick.get(r["t"], 0) + 1
        elif r["ev"] == "drop":
            drops[r["t"]] = drops.get(r["t"], 0) + 1
    fig, ax = plt.subplots(figsize=(7, 2.8))
    if per_tick:
        ticks = sorted(per_tick)
        ax.bar(ticks, [per_tick[t] for t in ticks], width=1.0,
               color="#2c7fb8", label="delivered")
    if drops:
        ticks = sorted(drops)
        ax.bar(ticks, [-drops[t] for t in ticks], width=1.0,
               color="#d95f0e", label="dropped")
    ax.set_xlabel("tick")
    ax.set_ylabel("frames")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title("data-frame deliveries and drops per tick", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_matrix_outputs(matrix: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "matrix.json"), "w") as fh:
        json.dump(matrix, fh, indent=2, sort_keys=True, default=str)
    with open(os.path.join(out_dir, "matrix.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "property", "paradigm", "attack", "defenses",
                    "verdict", "expected", "match", "interception_ratio",
                    "defense_blocks"])
        for cell in matrix["cells"]:
            w.writerow([cell["id"], cell["property"], cell["paradigm"],
                        cell["attack"], cell["defenses"], cell["verdict"],
                        cell.get("expected", ""), cell.get("match", ""),
                        cell.get("interception_ratio", ""),
                        cell.get("defense_blocks", "")])
    _matrix_figure(matrix, os.path.join(out_dir, "matrix.png"))


def _matrix_figure(matrix: dict, path: str):
    cells = matrix["cells"]
    attacks = sorted({(c["paradigm"], c["attack"]) for c in cells})
    columns = sorted({c["defenses"] for c in cells})
    fig_h = max(2.5, 0.32 * len(attacks) + 1.2)
    fig, ax = plt.subplots(figsize=(6.5, fig_h))
    for yi, (paradigm, attack) in enumerate(attacks):
        for xi, col in enumerate(columns):
            match = [c for c in cells
                     if (c["paradigm"], c["attack"]) == (paradigm, attack)
                     and c["defenses"] == col]
            if not match:
                continue
            cell = match[0]
            color = VERDICT_COLORS.get(cell["verdict"], "#bdc3c7")
            edge = "black" if cell.get("match") is False else "white"
            ax.add_patch(plt.Rectangle((xi, len(attacks) - 1 - yi), 0.94, 0.94,
                                       color=color, ec=edge, lw=1.6))
    ax.set_xlim(0, len(columns))
    ax.set_ylim(0, len(attacks))
    ax.set_xticks([i + 0.5 for i in range(len(columns))])
    ax.set_xticklabels([f"defenses {c}" for c in columns], fontsize=8)
    ax.set_yticks([len(attacks) - 1 - i + 0.5 for i in range(len(attacks))])
    ax.set_yticklabels([f"{p}:{a}" for p, a in attacks], fontsize=7)
    handles = [plt.Rectangle((0, 0), 1, 1, color=c)
               for c in VERDICT_COLORS.values()]
    ax.legend(handles, list(VERDICT_COLORS), fontsize=7, loc="upper left",
              bbox_to_anchor=(1.01, 1.0))
    ax.set_title("attack x defense verdict grid", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
