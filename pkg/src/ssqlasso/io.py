"""CSV and config-file I/O for the command-line tools.

Data files have a header ``y,z_0,...,z_{q-1},x_0,...,x_{p-1}`` (the
intercept column is implicit) and floats are written with 17 significant
digits so that a write/read cycle is lossless.
"""
from __future__ import annotations

import csv
import json
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .em import Dataset

FLOAT_FMT = "%.17g"


class SchemaError(ValueError):
    """Malformed input file; the message names the file and line."""


def fmt(x) -> str:
    return FLOAT_FMT % float(x)


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence]):
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def data_header(q: int, p: int) -> list:
    return ["y"] + [f"z_{k}" for k in range(q)] + [f"x_{k}" for k in range(p)]


def write_dataset(path, data: Dataset):
    mat = np.column_stack([data.y, data.Z[:, 1:], data.X])
    _write_rows(path, data_header(data.q, data.p), ([float(v) for v in row] for row in mat))


_Z = re.compile(r"z_(\d+)$")
_X = re.compile(r"x_(\d+)$")


def _check_header(header, path):
    if not header or header[0] != "y":
        raise SchemaError(f"{path}: line 1: first column must be 'y'")
    q = p = 0
    for col in header[1:]:
        mz, mx = _Z.match(col), _X.match(col)
        if mz and p == 0 and int(mz.group(1)) == q:
            q += 1
        elif mx and int(mx.group(1)) == p:
            p += 1
        else:
            raise SchemaError(f"{path}: line 1: unexpected column {col!r}; expected "
                              f"y, z_0..z_(q-1), x_0..x_(p-1) in order")
    if p == 0:
        raise SchemaError(f"{path}: line 1: no genetic columns x_0..")
    return q, p


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        q, p = _check_header(header, path)
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 1 + q + p:
                raise SchemaError(f"{path}: line {line}: expected {1 + q + p} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise SchemaError(f"{path}: line {line}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise SchemaError(f"{path}: line {line}: NaN or infinite value")
            rows.append(vals)
    if len(rows) < 2:
        raise SchemaError(f"{path}: need at least 2 data rows, found {len(rows)}")
    mat = np.array(rows)
    return Dataset.from_arrays(mat[:, 0], mat[:, 1 + q:], mat[:, 1:1 + q])


def write_truth(path, beta, alpha):
    """Columns: kind (alpha|beta), index, value, nonzero."""
    rows = [("alpha", k, float(v), int(v != 0)) for k, v in enumerate(alpha)]
    rows += [("beta", k, float(v), int(v != 0)) for k, v in enumerate(beta)]
    _write_rows(path, ["kind", "index", "value", "nonzero"], rows)


def write_beta(path, beta, eta):
    _write_rows(path, ["index", "value", "eta"],
                ((k, float(b), float(e)) for k, (b, e) in enumerate(zip(beta, eta))))


def write_alpha(path, alpha):
    _write_rows(path, ["index", "value"], ((k, float(a)) for k, a in enumerate(alpha)))


def write_table(path, header, rows):
    _write_rows(path, header, rows)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n",
                          encoding="utf-8")


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SchemaError(f"{source}: line {line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SchemaError(f"{source}: line {line_no}: empty key")
        out[key] = value
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, str(path))
