"""CSV ingestion and export of binary datasets.

Files carry a header row and one integer per cell. Columns are
``z1..zp, a, m, y`` followed by ``u`` and ``a2`` when present.
"""

from __future__ import annotations

import csv
import re
from pathlib import Path

import numpy as np

from .model import Dataset

_Z = re.compile(r"z(\d+)$")


def column_order(data: Dataset) -> list[str]:
    cols = [f"z{j + 1}" for j in range(data.z_dim)] + ["a"]
    cols += [c for c in ("m", "y", "u", "a2") if c == "y" or getattr(data, c) is not None]
    return cols


def write_csv(data: Dataset, path) -> None:
    cols = data.columns()
    order = column_order(data)
    table = np.column_stack([cols[c] for c in order])
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(order)
        wr.writerows(table.tolist())


def read_csv(path) -> Dataset:
    """Parse a dataset file; raises ValueError on a malformed header or non-integer cell."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise ValueError(f"{path}: duplicate column names")
    known = {"a", "m", "y", "u", "a2"}
    zcols = sorted((int(_Z.match(h).group(1)), i) for i, h in enumerate(header) if _Z.match(h))
    if [k for k, _ in zcols] != list(range(1, len(zcols) + 1)):
        raise ValueError(f"{path}: covariate columns must be z1..zp")
    extra = set(header) - known - {h for h in header if _Z.match(h)}
    if extra:
        raise ValueError(f"{path}: unknown columns {sorted(extra)}")
    for need in ("a", "y"):
        if need not in header:
            raise ValueError(f"{path}: missing column {need!r}")
    try:
        body = np.array([[int(v) for v in r] for r in rows[1:] if r], dtype=np.int64)
    except ValueError as exc:
        raise ValueError(f"{path}: non-integer cell ({exc})") from exc
    if body.size == 0:
        raise ValueError(f"{path}: no data rows")
    if body.shape[1] != len(header):
        raise ValueError(f"{path}: ragged rows")
    get = lambda c: body[:, header.index(c)] if c in header else None
    z = body[:, [i for _, i in zcols]] if zcols else np.zeros((body.shape[0], 0), dtype=np.int64)
    return Dataset(z, get("a"), get("y"), m=get("m"), u=get("u"), a2=get("a2"))


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
