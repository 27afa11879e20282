"""Plain-text parameter checkpoints.

Layout::

    ckpt/1
    name <id> shape <d0 d1 ...>
    <values, space separated, 17 significant digits>
    ...

Seventeen significant digits round-trip every float64 exactly.
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

from ..errors import ParseError

MAGIC = "ckpt/1"


def format_params(params: Mapping[str, np.ndarray]) -> str:
    lines = [MAGIC]
    for name, arr in params.items():
        a = np.asarray(getattr(arr, "value", arr), dtype=np.float64)
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"invalid tensor name {name!r}")
        lines.append(f"name {name} shape {' '.join(str(d) for d in a.shape)}".rstrip())
        lines.append(" ".join(f"{v:.17g}" for v in a.reshape(-1)))
    return "\n".join(lines) + "\n"


def save_params(params: Mapping[str, np.ndarray], path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_params(params))


def parse_params(text: str, path=None) -> dict[str, np.ndarray]:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MAGIC:
        raise ParseError(f"expected header {MAGIC!r}", 1, path)
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        head = lines[i].split()
        if len(head) < 3 or head[0] != "name" or head[2] != "shape":
            raise ParseError("expected 'name <id> shape <dims>'", i + 1, path)
        name = head[1]
        try:
            shape = tuple(int(d) for d in head[3:])
        except ValueError:
            raise ParseError("non-integer dimension", i + 1, path) from None
        if i + 1 >= len(lines):
            raise ParseError(f"missing values for {name}", i + 2, path)
        body = lines[i + 1].split()
        try:
            vals = np.array([float(v) for v in body], dtype=np.float64)
        except ValueError:
            raise ParseError("malformed value", i + 2, path) from None
        expected = int(np.prod(shape, dtype=np.int64))
        if vals.size != expected:
            raise ParseError(f"{name}: expected {expected} values, found {vals.size}", i + 2, path)
        if name in out:
            raise ParseError(f"duplicate tensor {name}", i + 1, path)
        out[name] = vals.reshape(shape)
        i += 2
    return out


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        return parse_params(fh.read(), os.fspath(path))
