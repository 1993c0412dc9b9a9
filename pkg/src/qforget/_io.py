"""Small helpers for the CSV/JSON files every command writes."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def header_line(config: Any) -> str:
    return f"# qforget {__version__} config={config_hash(config)}"


def _cell(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return ""
        return repr(float(v))
    if isinstance(v, bool):
        return str(v)
    if hasattr(v, "item"):        # numpy scalar
        return _cell(v.item())
    return str(v)


def write_table(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[Sequence[Any]], config: Any) -> Path:
    """Write a CSV preceded by a ``# qforget <version> config=<hash>`` comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(header_line(config) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    os.replace(tmp, path)
    return path


def read_table(path: str | os.PathLike) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_json(path: str | os.PathLike, obj: Any, config: Any = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"_meta": {"tool": "qforget", "version": __version__, "config_hash": config_hash(config if config is not None else obj)}}
    payload.update(obj)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)
    return path
