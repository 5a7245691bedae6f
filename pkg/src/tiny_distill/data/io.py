"""Corpus and item files.

A corpus file is a JSON header line prefixed with ``#`` followed by one
space-separated token sequence per line. Item files hold one JSON object
per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import DomainError
from .items import ClozeItem

HEADER_PREFIX = "#corpus "


def write_corpus(path, sequences, header: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        f.write(HEADER_PREFIX + json.dumps(header, sort_keys=True) + "\n")
        for seq in sequences:
            f.write(" ".join(map(str, np.asarray(seq).tolist())) + "\n")


def read_corpus(path) -> tuple[dict, list[np.ndarray]]:
    path = Path(path)
    with path.open() as f:
        first = f.readline()
        if not first.startswith(HEADER_PREFIX):
            raise DomainError(f"{path}: missing corpus header")
        header = json.loads(first[len(HEADER_PREFIX):])
        seqs = [np.array(line.split(), dtype=np.int64) for line in f if line.strip()]
    return header, seqs


def write_items(path, items) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as f:
        for it in items:
            f.write(json.dumps(it.to_dict()) + "\n")


def read_items(path) -> list[ClozeItem]:
    with Path(path).open() as f:
        return [ClozeItem.from_dict(json.loads(line)) for line in f if line.strip()]
