"""CSV and JSON conventions shared by the command-line tools.

Covariate and outcome CSVs require a header row; a ``unit_id`` column is
optional (row order is the identity otherwise).  Missing cells are empty
fields or the literal ``NA``.
"""

from __future__ import annotations

import csv
import json

import numpy as np

__all__ = [
    "read_table_csv",
    "read_outcome_csv",
    "read_assignment_csv",
    "write_assignment_csv",
    "read_matrix_csv",
    "write_json",
]

_MISSING = ("", "NA")


def _parse_cell(cell: str) -> float:
    cell = cell.strip()
    if cell in _MISSING:
        return np.nan
    return float(cell)


def read_table_csv(path: str):
    """Read a header-named numeric table; returns (names, values, unit_ids).

    Missing cells come back as NaN.  A ``unit_id`` column, if present, is
    split off and returned as strings.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file; a header row is required") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row]
    id_col = header.index("unit_id") if "unit_id" in header else None
    names = [h for i, h in enumerate(header) if i != id_col]
    unit_ids = []
    values = np.empty((len(rows), len(names)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {r + 2} has {len(row)} fields, expected {len(header)}")
        c = 0
        for i, cell in enumerate(row):
            if i == id_col:
                unit_ids.append(cell.strip())
            else:
                values[r, c] = _parse_cell(cell)
                c += 1
    if id_col is None:
        unit_ids = [str(i) for i in range(len(rows))]
    return tuple(names), values, unit_ids


def read_outcome_csv(path: str) -> np.ndarray:
    """Single outcome column (plus optional unit_id); NaN marks missing."""
    names, values, _ = read_table_csv(path)
    if len(names) != 1:
        raise ValueError(f"{path}: expected one outcome column, found {names}")
    return values[:, 0]


def read_assignment_csv(path: str) -> np.ndarray:
    names, values, _ = read_table_csv(path)
    if "z" not in names:
        raise ValueError(f"{path}: assignment file needs a 'z' column")
    z = values[:, names.index("z")]
    if np.any(np.isnan(z)):
        raise ValueError(f"{path}: assignment column has missing entries")
    return z.astype(np.int8)


def write_assignment_csv(path: str, z: np.ndarray, unit_ids=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["unit_id", "z"])
        for i, zi in enumerate(z):
            writer.writerow([unit_ids[i] if unit_ids else i, int(zi)])


def read_matrix_csv(path: str) -> np.ndarray:
    """Headerless numeric matrix (used for quadratic-form matrices)."""
    with open(path, newline="") as fh:
        rows = [[float(c) for c in row] for row in csv.reader(fh) if row]
    return np.asarray(rows, dtype=np.float64)


def _jsonable(obj):
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(payload: dict, path: str | None):
    text = json.dumps(payload, indent=2, sort_keys=True, default=_jsonable)
    if path is None:
        print(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
