"""Versioned line-delimited JSON container.

Line 1 is a header object ``{"format": <fmt>, "version": <int>, ...}``;
every following line is one JSON record. Output is UTF-8, LF-terminated,
with compact separators so identical content yields identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Iterator

from .errors import FormatError


def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def write_container(path, fmt: str, version: int, records: Iterable[dict], **header) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_line({"format": fmt, "version": version, **header}) + "\n")
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def read_container(path, fmt: str, version: int) -> tuple[dict, Iterator[dict]]:
    """Return the header and an iterator over the remaining records."""
    path = Path(path)
    fh = path.open("r", encoding="utf-8")
    first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        fh.close()
        raise FormatError(f"{path}: header line is not JSON") from exc
    if not isinstance(header, dict) or header.get("format") != fmt:
        fh.close()
        raise FormatError(f"{path}: expected format {fmt!r}, found {header!r}")
    if header.get("version") != version:
        fh.close()
        raise FormatError(f"{path}: unsupported {fmt} version {header.get('version')!r}")

    def records():
        with fh:
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}:{lineno}: invalid JSON") from exc

    return header, records()
