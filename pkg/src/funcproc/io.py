"""Deterministic CSV and JSON writers for run artifacts."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def format_real(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _is_complex(arr: np.ndarray) -> bool:
    return np.iscomplexobj(arr)


def write_table(path, columns: dict) -> Path:
    """Write named columns; complex columns become ``<name>_re`` and ``<name>_im``."""
    path = Path(path)
    header, cols = [], []
    for name, values in columns.items():
        arr = np.asarray(values)
        if _is_complex(arr):
            header += [f"{name}_re", f"{name}_im"]
            cols += [arr.real, arr.imag]
        else:
            header.append(name)
            cols.append(arr)
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns must have equal length")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(n):
            row = []
            for c in cols:
                v = c[i]
                row.append(str(int(v)) if np.issubdtype(c.dtype, np.integer) else format_real(v))
            writer.writerow(row)
    return path


def write_matrix(path, matrix, rows=None, cols=None, row_name: str = "row", col_name: str = "col") -> Path:
    """Long-format matrix: one line per entry."""
    M = np.asarray(matrix)
    rows = list(range(M.shape[0])) if rows is None else list(rows)
    cols = list(range(M.shape[1])) if cols is None else list(cols)
    ri, ci = np.meshgrid(np.arange(M.shape[0]), np.arange(M.shape[1]), indexing="ij")
    return write_table(
        path,
        {
            row_name: np.asarray(rows, dtype=int)[ri.ravel()],
            col_name: np.asarray(cols, dtype=int)[ci.ravel()],
            "value": M.ravel(),
        },
    )


def write_vector(path, values, index=None, index_name: str = "node") -> Path:
    v = np.asarray(values)
    idx = np.arange(v.size) if index is None else np.asarray(index, dtype=int)
    return write_table(path, {index_name: idx, "value": v})


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (complex, np.complexfloating)):
        return {"re": to_jsonable(obj.real), "im": to_jsonable(obj.imag)}
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path
