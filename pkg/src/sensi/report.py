"""Machine-readable reports: JSON envelope, input hashing and CSV export.

Field names are documented in ``docs/report-schema.md``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__

SCHEMA_VERSION = 1


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def jsonable(x):
    """Plain JSON types; non-finite floats become the strings "inf", "-inf", "nan"."""
    if isinstance(x, dict):
        return {str(k): jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def envelope(kind: str, body: dict, config: dict, seed=None, input_sha256=None) -> dict:
    return {
        "tool": "sensi",
        "version": __version__,
        "schema": SCHEMA_VERSION,
        "kind": kind,
        "input_sha256": input_sha256,
        "seed": seed,
        "config": config,
        **body,
    }


def dumps(report: dict) -> str:
    return json.dumps(jsonable(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text(text: str, out=None) -> None:
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(["" if v is None else v for v in jsonable(list(row))])
    return buf.getvalue()


__all__ = ["SCHEMA_VERSION", "sha256_file", "jsonable", "envelope", "dumps", "write_text",
           "csv_text"]
