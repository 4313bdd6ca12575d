"""JSON and CSV rendering of merge/analysis results (schema 1)."""
from __future__ import annotations

import csv
import io
import json
import math
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .calibrate import CalibrationResult
from .spectral import CrossTermMatrix, SubspaceOverlapReport

SCHEMA_VERSION = 1

CSV_HEADER = ["parameter", "r", "sigma", "sigma_star", "gap", "gamma", "min_s", "max_s", "mean_s"]


def _num(x: Any) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _nums(a: Iterable[Any]) -> List[Optional[float]]:
    return [_num(x) for x in np.asarray(a, dtype=np.float64).reshape(-1)]


def dumps(doc: Mapping[str, Any]) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False, ensure_ascii=False) + "\n").encode("utf-8")


def subspace_rows(report: SubspaceOverlapReport, gamma: Sequence[float]) -> List[Dict[str, Any]]:
    rows = []
    for r in range(report.rank):
        row: Dict[str, Any] = {
            "r": r + 1,
            "sigma": _num(report.sigma[r]),
            "sigma_star": _num(report.sigma_star[r]),
            "gap": _num(report.gap[r]),
            "gamma": _num(gamma[r]),
            "above_floor": bool(report.above_floor[r]),
            "s": _nums(report.s[:, r]),
            "gamma_opt": _nums(report.gamma_opt[:, r]),
            "interference": _nums(report.interference[:, r]),
            "norm_sq": _nums(report.norm_sq[:, r]),
            "retained": [bool(x) for x in report.retained[:, r]],
        }
        row.update(report.s_stats(r))
        rows.append(row)
    return rows


def analysis_entry(
    name: str,
    shape: Sequence[int],
    report: SubspaceOverlapReport,
    gamma: Sequence[float],
    cross: Sequence[CrossTermMatrix],
    concentration: Mapping[str, Optional[float]],
    *,
    preference: Optional[np.ndarray] = None,
    alpha_sweep: Optional[Sequence[Mapping[str, float]]] = None,
) -> Dict[str, Any]:
    entry: Dict[str, Any] = {
        "name": name,
        "shape": [int(d) for d in shape],
        "rank": report.rank,
        "subspaces": subspace_rows(report, gamma),
        "cross_terms": [[_nums(row) for row in m.g] for m in cross],
        "cross_term_concentration": dict(concentration),
    }
    if preference is not None:
        entry["preference_gamma"] = [_nums(row) for row in preference]
    if alpha_sweep is not None:
        entry["alpha_sweep"] = [dict(row) for row in alpha_sweep]
    return entry


def calibration_entry(name: str, shape: Sequence[int], result: Optional[CalibrationResult]) -> Dict[str, Any]:
    entry: Dict[str, Any] = {"name": name, "shape": [int(d) for d in shape], "calibrated": result is not None}
    if result is not None:
        entry.update(
            alpha=_num(result.alpha),
            gamma=_nums(result.gamma),
            sigma=_nums(result.sigma),
            sigma_tilde=_nums(result.sigma_tilde),
            retained_counts=[int(c) for c in result.retained_counts],
        )
    return entry


def document(command: str, **fields: Any) -> Dict[str, Any]:
    doc: Dict[str, Any] = {"schema": SCHEMA_VERSION, "command": command}
    doc.update(fields)
    return doc


def _cell(x: Any) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def render_csv(entries: Sequence[Mapping[str, Any]]) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for entry in entries:
        for row in entry["subspaces"]:
            writer.writerow([_cell(entry["name"])] + [_cell(row[col]) for col in CSV_HEADER[1:]])
    return buf.getvalue().encode("utf-8")
