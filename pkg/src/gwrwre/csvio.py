"""CSV output with a commented header, and the matching reader.

Layout::

    # gwrwre-csv 1
    # <key>: <json value>        (one line per metadata item)
    # columns: name:type,...     (type is int, float or str)
    name,...
    rows...

Floats are written with ``repr`` so the reader recovers them bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

MAGIC = "gwrwre-csv 1"
_TYPES = {"int": int, "float": float, "str": str}


def _cell(value, kind: str) -> str:
    if value is None:
        return ""
    if kind == "float":
        return repr(float(value))
    if kind == "int":
        return str(int(value))
    text = str(value)
    if "\x00" in text:
        raise ValueError("text cells cannot contain NUL characters")
    return text


def _parse(text: str, kind: str):
    if text == "":
        return None
    return _TYPES[kind](text)


def format_csv(columns: Sequence[Tuple[str, str]], rows: Sequence[Sequence], meta: Dict) -> str:
    """Render rows to text.  ``columns`` is a list of ``(name, type)`` pairs."""
    for name, kind in columns:
        if kind not in _TYPES:
            raise ValueError(f"column {name!r} has unknown type {kind!r}")
        if not name or any(ch in name for ch in ",:\n"):
            raise ValueError(f"bad column name {name!r}")
    buf = io.StringIO()
    buf.write(f"# {MAGIC}\n")
    for key, value in meta.items():
        if key == "columns" or ":" in key or "\n" in key:
            raise ValueError(f"bad metadata key {key!r}")
        buf.write(f"# {key}: {json.dumps(value, sort_keys=True, separators=(',', ':'))}\n")
    buf.write("# columns: " + ",".join(f"{n}:{k}" for n, k in columns) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([n for n, _ in columns])
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        writer.writerow([_cell(v, k) for v, (_, k) in zip(row, columns)])
    return buf.getvalue()


def write_csv(path: Union[str, Path], columns, rows, meta: Dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(columns, rows, meta))
    return path


def parse_csv(text: str):
    """Inverse of :func:`format_csv`: ``(meta, columns, rows)`` with typed cells."""
    lines = text.splitlines(keepends=True)
    if not lines or lines[0].strip() != f"# {MAGIC}":
        raise ValueError("not a gwrwre CSV file (missing magic header line)")
    meta: Dict = {}
    columns: List[Tuple[str, str]] = []
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, sep, value = lines[i][1:].strip().partition(": ")
        if not sep:
            raise ValueError(f"malformed header line {i + 1}: {lines[i]!r}")
        if key == "columns":
            columns = [tuple(c.split(":", 1)) for c in value.split(",")]
        else:
            meta[key] = json.loads(value)
        i += 1
    if not columns:
        raise ValueError("header has no column schema")
    reader = csv.reader(io.StringIO("".join(lines[i:])))
    names = next(reader)
    if names != [n for n, _ in columns]:
        raise ValueError(f"column row {names} does not match the schema")
    rows = [tuple(_parse(v, k) for v, (_, k) in zip(r, columns)) for r in reader]
    return meta, columns, rows


def read_csv(path: Union[str, Path]):
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return parse_csv(fh.read())


def read_records(path: Union[str, Path]) -> List[dict]:
    """Rows as dicts keyed by column name."""
    _, columns, rows = read_csv(path)
    names = [n for n, _ in columns]
    return [dict(zip(names, r)) for r in rows]
