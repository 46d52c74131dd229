"""Atomic text/CSV/JSON writers: every output goes to a temp file and is renamed into place."""

from __future__ import annotations

import csv
import io
import json
import os
from typing import Iterable, Sequence

from .nn.checkpoint import atomic_write_bytes


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def write_json(path: str | os.PathLike, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")
