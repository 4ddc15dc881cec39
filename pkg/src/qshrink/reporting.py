"""Serialize experiment reports as CSV, aligned text tables or JSON.

Output is byte-stable: floats are written with ``repr`` (shortest round-trip
form), JSON keys are sorted and line endings are ``\\n``.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .simlab import ExperimentReport

FORMATS = ("csv", "table", "json")
SUFFIX = {"csv": ".csv", "table": ".txt", "json": ".json"}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def render(report: ExperimentReport, fmt: str) -> str:
    """Return the report as text in one of ``FORMATS``."""
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(report.columns)
        for r in report.rows:
            w.writerow([_cell(r[c]) for c in report.columns])
        return buf.getvalue()
    if fmt == "table":
        cells = [list(report.columns)] + [[_cell(r[c]) for c in report.columns] for r in report.rows]
        widths = [max(len(row[j]) for row in cells) for j in range(len(report.columns))]
        lines = ["  ".join(s.rjust(wd) for s, wd in zip(row, widths)).rstrip() for row in cells]
        return "\n".join(lines) + "\n"
    if fmt == "json":
        doc = {"columns": list(report.columns), "rows": report.rows, "metadata": report.metadata}
        return json.dumps(doc, sort_keys=True, indent=2, allow_nan=True) + "\n"
    raise SchemaError(f"unknown report format {fmt!r}; choose from {FORMATS}")


def emit_report(report: ExperimentReport, fmt: str, path) -> Path:
    """Write the report to ``path``; a directory gets ``report.<suffix>``."""
    text = render(report, fmt)
    path = Path(path)
    if path.is_dir():
        path = path / f"report{SUFFIX[fmt]}"
    with path.open("w", newline="") as fh:
        fh.write(text)
    return path


def load_report(path) -> ExperimentReport:
    """Read a JSON report written by ``emit_report``."""
    with Path(path).open() as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path} is not a JSON report: {exc}") from None
    missing = {"columns", "rows", "metadata"} - set(doc)
    if missing:
        raise SchemaError(f"report is missing keys {sorted(missing)}")
    return ExperimentReport(tuple(doc["columns"]), doc["rows"], doc["metadata"])
