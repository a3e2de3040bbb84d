"""Scenario runner and the matrix harness that reproduces the attack x
defense comparison grid. Matrix cells run in isolated engines, optionally in
a parallel worker pool; report assembly is a single-writer merge."""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Optional

import yaml

from . import adversary, report as rpt, scenario as scn
from .engine import SimError

JOBS_ENV = "CPSIM_JOBS"

MATRIX_ROWS = ("basic_forwarding", "loop_free_forwarding", "link_redundancy",
               "device_redundancy", "scalability")
_CELL_KEYS = {"id", "property", "paradigm", "attack", "defenses", "scenario"}


class MissingScenario(SimError):
    pass


def run_scenario_file(path: str, seed: Optional[int] = None,
                      trace_out: Optional[str] = None,
                      out_dir: Optional[str] = None) -> dict:
    cfg = scn.load_file(path)
    return run_scenario_cfg(cfg, seed=seed, trace_out=trace_out, out_dir=out_dir)


def run_scenario_cfg(cfg: dict, seed: Optional[int] = None,
                     trace_out: Optional[str] = None,
                     out_dir: Optional[str] = None) -> dict:
    if seed is not None:
        cfg = dict(cfg)
        cfg["seed"] = seed
    engine, metrics = scn.run(cfg)
    report = rpt.build_report(engine, cfg, metrics)
    if trace_out:
        engine.trace.write_jsonl(trace_out)
    if out_dir:
        rpt.write_run_outputs(report, engine, out_dir)
    return report


def load_matrix(path: str) -> dict:
    with open(path) as fh:
        spec = yaml.safe_load(fh)
    if not isinstance(spec, dict) or "cells" not in spec:
        raise SimError("matrix spec must be a mapping with a cells list")
    for key in spec:
        if key not in ("version", "rows", "cells"):
            raise SimError(f"matrix.{key}: unknown key")
    rows = spec.get("rows", list(MATRIX_ROWS))
    base = os.path.dirname(os.path.abspath(path))
    seen = set()
    for i, cell in enumerate(spec["cells"]):
        for key in cell:
            if key not in _CELL_KEYS:
                raise SimError(f"matrix.cells[{i}].{key}: unknown key")
        for key in _CELL_KEYS:
            if key not in cell:
                raise SimError(f"matrix.cells[{i}].{key}: missing")
        if cell["id"] in seen:
            raise SimError(f"matrix.cells[{i}].id: duplicate {cell['id']}")
        seen.add(cell["id"])
        if cell["property"] not in rows:
            raise SimError(f"matrix.cells[{i}].property: not one of {rows}")
        if cell["attack"] not in adversary.ATTACK_KINDS:
            raise SimError(f"matrix.cells[{i}].attack: unknown attack")
        cell["scenario_path"] = os.path.join(base, cell["scenario"])
        if not os.path.exists(cell["scenario_path"]):
            raise MissingScenario(cell["scenario_path"])
    spec["rows"] = rows
    return spec


def _run_cell(args) -> dict:
    cell, seed = args
    report = run_scenario_file(cell["scenario_path"], seed=seed)
    return {
        "id": cell["id"],
        "property": cell["property"],
        "paradigm": cell["paradigm"],
        "attack": cell["attack"],
        "defenses": cell["defenses"],
        "scenario": cell["scenario"],
        "verdict": report["verdict"],
        "interception_ratio": report["interception_ratio"],
        "defense_blocks": report["defense_blocks"],
        "topology_divergence": report["topology_divergence"],
        "trace_digest": report["trace_digest"],
    }


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def run_matrix(path: str, jobs: Optional[int] = None,
               check_path: Optional[str] = None,
               out_dir: Optional[str] = None,
               seed: Optional[int] = None) -> tuple:
    """Run every cell; returns (matrix dict, ok). ok is False when a checked
    expectation deviates."""
    spec = load_matrix(path)
    jobs = jobs or default_jobs()
    work = [(cell, seed) for cell in spec["cells"]]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]

    expected = {}
    if check_path:
        with open(check_path) as fh:
            expected = json.load(fh)
    mismatches = []
    for cell in results:
        if cell["id"] in expected:
            cell["expected"] = expected[cell["id"]]
            cell["match"] = cell["verdict"] == expected[cell["id"]]
            if not cell["match"]:
                mismatches.append(cell["id"])
        else:
            cell["expected"] = None
            cell["match"] = None
    matrix = {
        "schema": rpt.MATRIX_SCHEMA,
        "rows": spec["rows"],
        "cells": results,
        "mismatches": mismatches,
        "checked": bool(check_path),
    }
    if out_dir:
        rpt.write_matrix_outputs(matrix, out_dir)
    return matrix, not mismatches


def matrix_summary(matrix: dict) -> str:
    lines = []
    width = max((len(c["id"]) for c in matrix["cells"]), default=10)
    for cell in matrix["cells"]:
        mark = ""
        if cell.get("match") is True:
            mark = "  ok"
        elif cell.get("match") is False:
            mark = f"  MISMATCH (expected {cell['expected']})"
        lines.append(f"{cell['id']:<{width}}  {cell['verdict']:<16}{mark}")
    succeeded = sum(1 for c in matrix["cells"] if c["verdict"] == "ATTACK_SUCCEEDED")
    blocked = sum(1 for c in matrix["cells"] if c["verdict"] == "ATTACK_BLOCKED")
    lines.append(f"{len(matrix['cells'])} cells: {succeeded} succeeded, "
                 f"{blocked} blocked, {len(matrix['mismatches'])} mismatches")
    return "\n".join(lines)
