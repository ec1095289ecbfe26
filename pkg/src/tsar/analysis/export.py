"""Plot-ready CSV files plus a JSON manifest per analysis."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .. import __version__


def _atomic_text(path: Path, write) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        write(fh)
    os.replace(tmp, path)
    return path


def write_histogram_csv(path, counts: np.ndarray) -> Path:
    """One ``row,col,count`` line per cell."""
    counts = np.asarray(counts)

    def write(fh):
        w = csv.writer(fh)
        w.writerow(["row", "col", "count"])
        rows, cols = np.indices(counts.shape)
        for r, c, v in zip(rows.ravel(), cols.ravel(), counts.ravel()):
            w.writerow([int(r), int(c), repr(float(v))])

    return _atomic_text(Path(path), write)


def write_series_csv(path, x, y, header=("x", "y")) -> Path:
    def write(fh):
        w = csv.writer(fh)
        w.writerow(list(header))
        for a, b in zip(np.asarray(x).ravel(), np.asarray(y).ravel()):
            w.writerow([repr(float(a)), repr(float(b))])

    return _atomic_text(Path(path), write)


def write_table_csv(path, columns: dict[str, np.ndarray]) -> Path:
    names = list(columns)
    arrays = [np.asarray(columns[n]).ravel() for n in names]

    def write(fh):
        w = csv.writer(fh)
        w.writerow(names)
        for row in zip(*arrays):
            w.writerow([repr(float(v)) for v in row])

    return _atomic_text(Path(path), write)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_manifest(path, analysis: str, files: list, params: dict, results: dict, config: dict | None = None) -> Path:
    doc = {
        "analysis": analysis,
        "version": __version__,
        "config": config or {},
        "params": params,
        "files": [str(Path(f).name) for f in files],
        "results": results,
    }
    return _atomic_text(Path(path), lambda fh: fh.write(json.dumps(_jsonable(doc), indent=2)))
