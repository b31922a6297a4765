"""CSV and JSON serialisation.

Formats (all diffable text, no binary):

  * distance matrix CSV: header row of point ids, symmetric body
  * weights CSV:         point_id,weight
  * field CSV:           point_id,value
  * stencil CSV:         x_id,y_id,weight
  * jacobi CSV:          point_id,i,j,value
  * generic tables:      header + rows, floats printed with %.17g so that
                         re-running a run reproduces byte-identical files
"""
from __future__ import annotations

import csv
import json
import os

import numpy as np

from .fields import ScalarField
from .space import FiniteMetricMeasureSpace

__all__ = [
    "fmt_float",
    "write_table",
    "read_table",
    "write_space_csv",
    "read_space_csv",
    "write_field_csv",
    "read_field_csv",
    "write_json",
    "read_json",
]


def fmt_float(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_table(path, header, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(x) for x in row])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader if row]


def write_space_csv(space: FiniteMetricMeasureSpace, dist_path, weights_path,
                    coords_path=None) -> None:
    n = space.n
    with open(dist_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(space.point_ids)
        for i in range(n):
            w.writerow([fmt_float(v) for v in space.dist_row(i)])
    write_table(weights_path, ["point_id", "weight"],
                zip(space.point_ids, space.weights))
    if coords_path is not None and space.ambient_coords is not None:
        dim = space.ambient_coords.shape[1]
        write_table(coords_path, ["point_id"] + [f"x{k}" for k in range(dim)],
                    ([pid, *row] for pid, row in zip(space.point_ids, space.ambient_coords)))


def read_space_csv(dist_path, weights_path) -> FiniteMetricMeasureSpace:
    with open(dist_path, newline="") as fh:
        reader = csv.reader(fh)
        ids = next(reader)
        rows = [[float(x) for x in row] for row in reader if row]
    dist = np.asarray(rows)
    header, wrows = read_table(weights_path)
    wmap = {pid: float(w) for pid, w in wrows}
    missing = [pid for pid in ids if pid not in wmap]
    if missing:
        raise ValueError(f"weights file missing ids: {missing[:5]}")
    weights = np.array([wmap[pid] for pid in ids])
    return FiniteMetricMeasureSpace(ids, weights, dist_matrix=dist)


def write_field_csv(f: ScalarField, path) -> None:
    write_table(path, ["point_id", "value"], zip(f.space.point_ids, f.values))


def read_field_csv(space: FiniteMetricMeasureSpace, path, name="") -> ScalarField:
    header, rows = read_table(path)
    vmap = {pid: float(v) for pid, v in rows}
    missing = [pid for pid in space.point_ids if pid not in vmap]
    if missing:
        raise ValueError(f"field file missing ids: {missing[:5]}")
    return ScalarField(space, np.array([vmap[p] for p in space.point_ids]), name=name)


def write_json(path, obj) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj)}")
