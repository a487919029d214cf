"""Bounded-memory external merge sort over text lines."""

from __future__ import annotations

import heapq
import os
import tempfile
from itertools import islice


def _spill(chunk, tmp_dir):
    fd, path = tempfile.mkstemp(dir=tmp_dir, prefix="run-", suffix=".txt")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        for _, line in chunk:
            fh.write(line)
    return path


def _read_run(path, key):
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            yield key(line), line


def external_sort(lines, key, chunk_size=100_000, tmp_dir=None):
    """Yield ``lines`` ordered by ``(key(line), line)``.

    At most ``chunk_size`` lines are held in memory; longer inputs are spilled
    to sorted runs under ``tmp_dir`` and k-way merged. Every line must end
    with a newline. Ties on key are broken by the full line, so the output
    does not depend on input order.
    """
    it = iter(lines)
    first = [(key(line), line) for line in islice(it, chunk_size)]
    first.sort()
    if len(first) < chunk_size:
        for _, line in first:
            yield line
        return

    runs = [_spill(first, tmp_dir)]
    del first
    try:
        while True:
            chunk = [(key(line), line) for line in islice(it, chunk_size)]
            if not chunk:
                break
            chunk.sort()
            runs.append(_spill(chunk, tmp_dir))
            del chunk
        for _, line in heapq.merge(*(_read_run(p, key) for p in runs)):
            yield line
    finally:
        for p in runs:
            try:
                os.unlink(p)
            except OSError:
                pass
