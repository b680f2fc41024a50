"""Self-describing text format for dense arrays.

Layout::

    # trendmap-array v1
    kind = matrix
    shape = 3 2
    labels.0 = u1<TAB>u2<TAB>u3
    labels.1 = facebook<TAB>google
    <any other key> = <value>
    ---
    0.5<TAB>0.5
    ...

One data line per index of the first axis; the remaining axes are flattened
in C order. Floats are written with ``repr`` so a write/read round trip is
lossless. Labels may not contain tabs or newlines.
"""

from __future__ import annotations

from typing import IO, Mapping, Sequence

import numpy as np

MAGIC = "# trendmap-array v1"


class ArrayFormatError(ValueError):
    pass


def format_float(x: float) -> str:
    return repr(float(x))


def _check_label(label: str) -> str:
    if "\t" in label or "\n" in label or "\r" in label:
        raise ValueError(f"label {label!r} contains a tab or newline")
    return label


def write_array(
    fh: IO[str],
    values: np.ndarray,
    labels: Sequence[Sequence[str]] = (),
    meta: Mapping[str, str] | None = None,
) -> None:
    values = np.asarray(values, dtype=float)
    if values.ndim < 1:
        raise ValueError("need at least a 1-D array")
    fh.write(MAGIC + "\n")
    fh.write("shape = " + " ".join(str(n) for n in values.shape) + "\n")
    for i, axis_labels in enumerate(labels):
        if len(axis_labels) != values.shape[i]:
            raise ValueError(f"axis {i}: {len(axis_labels)} labels for length {values.shape[i]}")
        fh.write(f"labels.{i} = " + "\t".join(_check_label(str(l)) for l in axis_labels) + "\n")
    for key, val in (meta or {}).items():
        if key in ("shape",) or key.startswith("labels."):
            raise ValueError(f"reserved key {key!r}")
        fh.write(f"{key} = {val}\n")
    fh.write("---\n")
    flat = values.reshape(values.shape[0], -1)
    for row in flat:
        fh.write("\t".join(format_float(x) for x in row) + "\n")


def read_array(fh: IO[str]) -> tuple[np.ndarray, list[list[str]], dict[str, str]]:
    """Inverse of :func:`write_array`: returns ``(values, labels, meta)``."""
    first = fh.readline().rstrip("\n")
    if first != MAGIC:
        raise ArrayFormatError(f"not a trendmap array file (header {first!r})")
    meta: dict[str, str] = {}
    labels: dict[int, list[str]] = {}
    shape: tuple[int, ...] | None = None
    for line in fh:
        line = line.rstrip("\n")
        if line == "---":
            break
        key, sep, val = line.partition(" = ")
        if not sep:
            raise ArrayFormatError(f"bad header line {line!r}")
        if key == "shape":
            shape = tuple(int(t) for t in val.split())
        elif key.startswith("labels."):
            labels[int(key[7:])] = val.split("\t") if val else []
        else:
            meta[key] = val
    else:
        raise ArrayFormatError("missing '---' separator")
    if shape is None:
        raise ArrayFormatError("missing shape")
    rows = [line.rstrip("\n") for line in fh if line.strip()]
    if len(rows) != shape[0]:
        raise ArrayFormatError(f"expected {shape[0]} data rows, found {len(rows)}")
    width = int(np.prod(shape[1:], dtype=int)) if len(shape) > 1 else 1
    data = np.empty((shape[0], width))
    for i, row in enumerate(rows):
        parts = row.split("\t")
        if len(parts) != width:
            raise ArrayFormatError(f"data row {i}: expected {width} values, found {len(parts)}")
        data[i] = [float(p) for p in parts]
    out_labels = [labels.get(i, []) for i in range(len(shape))] if labels else []
    return data.reshape(shape), out_labels, meta
