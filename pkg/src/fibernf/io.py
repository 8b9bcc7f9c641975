"""Serialisation of reports, recipes, matrices and tables.

JSON numbers are written with 17 significant digits (exact round trip of
binary64) and a fixed key order, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path

import numpy as np

from .errors import RecipeError


def format_float(x, digits=17):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    s = f"{x:.{digits}g}"
    if "e" not in s and "." not in s and "n" not in s:
        s += ".0"
    return s


def _encode(obj, indent, level, out):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None:
        out.append("null")
    elif isinstance(obj, (bool, np.bool_)):
        out.append("true" if obj else "false")
    elif isinstance(obj, (int, np.integer)):
        out.append(str(int(obj)))
    elif isinstance(obj, (float, np.floating)):
        out.append(format_float(obj))
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = list(obj.items())
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}{json.dumps(str(k))}: ")
            _encode(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple)):
        if not obj:
            out.append("[]")
            return
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            parts = []
            for v in obj:
                sub = []
                _encode(v, indent, level + 1, sub)
                parts.append("".join(sub))
            out.append("[" + ", ".join(parts) + "]")
            return
        out.append("[\n")
        for i, v in enumerate(obj):
            out.append(pad)
            _encode(v, indent, level + 1, out)
            out.append(",\n" if i < len(obj) - 1 else "\n")
        out.append(end + "]")
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj, indent=2):
    """JSON text with 17-significant-digit floats; non-finite values become null."""
    out = []
    _encode(obj, indent, 0, out)
    return "".join(out) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise RecipeError(f"{path}: invalid JSON ({exc})") from exc


def csv_text(header, rows, digits=17):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([format_float(v, digits) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(header, rows))
    return path


def orbit_csv(orbit):
    """Orbit table with header ``t,q0..qd,p0..pd,energy``."""
    return csv_text(orbit.csv_header(), orbit.csv_rows())


def matrix_doc(T):
    """Transfer matrix as row-major JSON with metadata."""
    return T.to_dict()


def experiment_csv(result):
    return csv_text(result.header, [(r.eps, r.identity_residual, r.effect_size,
                                     r.symplecticity_L1, r.symplecticity_L2) for r in result.rows])


def human_table(header, rows, digits=6):
    """Plain fixed-width table; floats with ``digits`` significant digits."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([f"{v:.{digits}g}" if isinstance(v, (float, np.floating)) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines)


def report_table(report):
    rows = [(c.name, c.max_residual, c.tolerance, "pass" if c.passed else "FAIL") for c in report.conditions]
    return human_table(("condition", "residual", "tolerance", "status"), rows)
