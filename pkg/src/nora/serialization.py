"""Deterministic text serialization for run outputs.

All floating-point output is fixed at 17 significant digits (full float64
round-trip precision), so identical runs produce byte-identical files.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "format_float",
    "json_dumps",
    "write_jsonl",
    "write_chain",
    "read_chain",
    "write_deadpoints",
]


def format_float(x: float) -> str:
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    if x == int(x) and abs(x) < 1e16:
        return f"{x:.1f}"
    return format(x, ".17g")


def json_dumps(obj) -> str:
    """JSON with floats at 17 significant digits and stable key order."""
    return _emit(obj)


def _emit(obj) -> str:
    if obj is None:
        return "null"
    if isinstance(obj, bool) or isinstance(obj, np.bool_):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(float(obj))
    if isinstance(obj, str):
        out = obj.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
        return f'"{out}"'
    if isinstance(obj, np.ndarray):
        return _emit(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_emit(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = ", ".join(f'{_emit(str(k))}: {_emit(v)}' for k, v in obj.items())
        return "{" + items + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_jsonl(path, objects):
    with open(path, "w") as fh:
        for obj in objects:
            fh.write(json_dumps(obj) + "\n")


def write_chain(path, weights, log_target, locations):
    """Rows of "weight log_target x_1 ... x_d" (linear, normalized weights)."""
    locations = np.atleast_2d(locations)
    with open(path, "w") as fh:
        for w, lt, x in zip(weights, log_target, locations):
            cols = [format_float(w), format_float(lt)]
            cols += [format_float(v) for v in x]
            fh.write(" ".join(cols) + "\n")


def read_chain(path):
    """Read a chain file; returns (weights, log_target, locations)."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 3:
                raise ValueError(f"malformed chain row: {line!r}")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"chain file {path} is empty")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"ragged chain file {path}")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], arr[:, 2:]


def write_deadpoints(path, log_weights, log_target, locations):
    """Rows of "log_weight log_target x_1 ... x_d"."""
    locations = np.atleast_2d(locations)
    with open(path, "w") as fh:
        for lw, lt, x in zip(log_weights, log_target, locations):
            cols = [format_float(lw), format_float(lt)]
            cols += [format_float(v) for v in x]
            fh.write(" ".join(cols) + "\n")
