"""CSV/JSON table I/O shared by every emitted artifact.

Floats are written with ``repr`` so values round-trip exactly and files are
byte-stable for identical inputs. Missing values are written as empty cells.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    if hasattr(value, "item"):  # numpy scalar
        return format_cell(value.item())
    return str(value)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        extra = set(row) - set(header)
        if extra:
            raise ValueError(f"row has columns not in header: {sorted(extra)}")
        writer.writerow([format_cell(row.get(col)) for col in header])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def parse_cell(text: str):
    """Inverse of :func:`format_cell` for numbers; other text is returned as-is."""
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path: str | Path, typed: bool = True, text_columns: Sequence[str] = ("image_id",)
             ) -> tuple[list[str], list[dict]]:
    """Read a table written by :func:`write_csv`.

    Returns ``(header, rows)``. Columns in ``text_columns`` are never converted.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty CSV file") from None
        rows = []
        for lineno, values in enumerate(reader, start=2):
            if len(values) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(values)}")
            if typed:
                rows.append({k: (v if k in text_columns else parse_cell(v)) for k, v in zip(header, values)})
            else:
                rows.append(dict(zip(header, values)))
    return header, rows


def write_json(path: str | Path, payload, indent: Optional[int] = 2) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=indent, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
