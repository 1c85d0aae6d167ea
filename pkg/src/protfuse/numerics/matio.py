"""Plain-text dense matrix files and parameter checkpoints.

Matrix file: a ``rows cols`` header, then one whitespace-separated row per
line written with 17 significant digits so float64 values round-trip.
A checkpoint is a directory with ``manifest.tsv`` (name, rows, cols, file)
and one matrix file per parameter; higher-rank arrays are flattened to
``rows = shape[0]`` and restored from the recorded shape.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, DataFault


def save_matrix(path, matrix) -> None:
    a = np.asarray(matrix, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ContractViolation(f"matrix must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractViolation("matrix contains non-finite entries")
    rows, cols = a.shape
    with open(path, "w") as fh:
        fh.write(f"{rows} {cols}\n")
        for row in a:
            fh.write(" ".join(format(x, ".17g") for x in row))
            fh.write("\n")


def load_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataFault(f"missing matrix file: {path}")
    with open(path) as fh:
        header = fh.readline().split()
        try:
            rows, cols = int(header[0]), int(header[1])
            data = np.array(fh.read().split(), dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise DataFault(f"malformed matrix file {path}: {exc}") from None
    if data.size != rows * cols:
        raise DataFault(f"{path}: header says {rows}x{cols} but found {data.size} values")
    return data.reshape(rows, cols)


def save_params(directory, params: dict) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for name in sorted(params):
        value = np.asarray(getattr(params[name], "value", params[name]))
        fname = name.replace("/", "__") + ".mat"
        save_matrix(Path(directory) / fname, value.reshape(value.shape[0] if value.ndim else 1, -1))
        lines.append(f"{name}\t{'x'.join(map(str, value.shape))}\t{fname}")
    (Path(directory) / "manifest.tsv").write_text("\n".join(lines) + "\n")


def load_params(directory) -> dict[str, np.ndarray]:
    manifest = Path(directory) / "manifest.tsv"
    if not manifest.exists():
        raise DataFault(f"missing checkpoint manifest: {manifest}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, shape, fname = line.split("\t")
        dims = tuple(int(s) for s in shape.split("x")) if shape else ()
        out[name] = load_matrix(Path(directory) / fname).reshape(dims)
    return out
