"""Deterministic sharded export and the dataset manifest.

Layout::

    out/<functional>/<source>/shard-00000.jsonl
    out/manifest.json

Frames inside a cell are globally sorted by ``frame_id`` before being cut
into shards, so shard bytes do not depend on arrival order or worker count.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from json.decoder import scanstring
from pathlib import Path

from .extsort import external_sort
from .schema import Frame, Functional, SourceId, dumps_frame, loads_frame

SCHEMA_VERSION = "1.0"
SHARD_TEMPLATE = "shard-{:05d}.jsonl"
_FRAME_ID_PREFIX = '{"frame_id":'
_TRAJ_ID_SEP = ',"trajectory_id":'

CELL_ORDER = [(f, s) for f in Functional for s in SourceId]


class ExportError(Exception):
    pass


class DuplicateConflict(ExportError):
    pass


class CountMismatch(ExportError):
    pass


@dataclass(frozen=True)
class Shard:
    path: str           # relative to the export root, POSIX separators
    functional: Functional
    source: SourceId
    frame_count: int
    byte_count: int
    content_hash: str

    def to_dict(self):
        d = asdict(self)
        d["functional"] = self.functional.value
        d["source"] = self.source.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["path"], Functional(d["functional"]), SourceId(d["source"]),
                   int(d["frame_count"]), int(d["byte_count"]), d["content_hash"])


def line_ids(line: str):
    """(frame_id, trajectory_id) of a canonical frame line without a full parse."""
    if line.startswith(_FRAME_ID_PREFIX):
        try:
            fid, end = scanstring(line, len(_FRAME_ID_PREFIX) + 1)
            if line.startswith(_TRAJ_ID_SEP, end):
                start = end + len(_TRAJ_ID_SEP) + 1
                tid, _ = scanstring(line, start)
                return fid, tid
        except ValueError:
            pass
    d = json.loads(line)
    return d["frame_id"], d["trajectory_id"]


def frame_id_of(line: str) -> str:
    return line_ids(line)[0]


def line_cell(line: str):
    """(functional, source) of a canonical frame line."""
    d = json.loads(line)
    return Functional(d["functional"]), SourceId(d["source"])


def cell_dir(root, functional, source) -> Path:
    return Path(root) / Functional(functional).value / SourceId(source).value


def _as_line(frame) -> str:
    if isinstance(frame, Frame):
        return dumps_frame(frame) + "\n"
    line = frame if frame.endswith("\n") else frame + "\n"
    return line


def _clear_cell(directory: Path):
    if directory.is_dir():
        for p in directory.iterdir():
            if p.name.startswith("shard-"):
                p.unlink()


class _ShardWriter:
    def __init__(self, root, functional, source, max_frames, columnar):
        self.root = Path(root)
        self.functional = functional
        self.source = source
        self.max_frames = max_frames
        self.columnar = columnar
        self.dir = cell_dir(root, functional, source)
        self.shards = []
        self._fh = None
        self._lines = []

    def _open(self):
        self.dir.mkdir(parents=True, exist_ok=True)
        name = SHARD_TEMPLATE.format(len(self.shards))
        self._path = self.dir / name
        self._tmp = self.dir / f".{name}.tmp"
        self._fh = open(self._tmp, "wb")
        self._hash = hashlib.sha256()
        self._count = 0
        self._bytes = 0
        self._lines = []

    def write(self, line: str):
        if self._fh is None:
            self._open()
        data = line.encode("utf-8")
        self._fh.write(data)
        self._hash.update(data)
        self._count += 1
        self._bytes += len(data)
        if self.columnar:
            self._lines.append(line)
        if self._count == self.max_frames:
            self._close()

    def _close(self):
        if self._fh is None:
            return
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._fh.close()
        self._fh = None
        os.replace(self._tmp, self._path)
        if self.columnar:
            write_parquet(self._lines, self._path.with_suffix(".parquet"))
            self._lines = []
        rel = self._path.relative_to(self.root).as_posix()
        self.shards.append(Shard(rel, self.functional, self.source, self._count,
                                 self._bytes, self._hash.hexdigest()))

    def finish(self):
        self._close()
        return self.shards


def write_cell(lines, out_dir, functional, source, max_frames_per_shard,
               columnar=False, chunk_size=100_000, tmp_dir=None):
    """Sort, dedupe and shard the frames of one (functional, source) cell."""
    if max_frames_per_shard < 1:
        raise ValueError("max_frames_per_shard must be >= 1")
    functional, source = Functional(functional), SourceId(source)
    _clear_cell(cell_dir(out_dir, functional, source))
    writer = _ShardWriter(out_dir, functional, source, max_frames_per_shard, columnar)
    prev_id = prev_line = None
    for line in external_sort(lines, key=frame_id_of, chunk_size=chunk_size, tmp_dir=tmp_dir):
        fid = frame_id_of(line)
        if fid == prev_id:
            if line != prev_line:
                raise DuplicateConflict(f"frame {fid} occurs with different content")
            continue
        writer.write(line)
        prev_id, prev_line = fid, line
    return writer.finish()


def write_shards(frames, out_dir, max_frames_per_shard: int, columnar=False,
                 chunk_size=100_000, tmp_dir=None):
    """Export frames (Frame objects or canonical JSONL lines) as sorted shards.

    Frames are first spooled to one temporary file per cell, then each cell is
    externally sorted and cut into shards. Returns shards in cell order.
    """
    if max_frames_per_shard < 1:
        raise ValueError("max_frames_per_shard must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    work = Path(tempfile.mkdtemp(dir=tmp_dir, prefix="export-"))
    try:
        spools = {}
        try:
            for fr in frames:
                if isinstance(fr, Frame):
                    cell = (fr.functional, fr.source)
                    line = dumps_frame(fr) + "\n"
                else:
                    line = _as_line(fr)
                    cell = line_cell(line)
                fh = spools.get(cell)
                if fh is None:
                    fh = spools[cell] = open(work / f"{cell[0].value}.{cell[1].value}.jsonl",
                                             "w", encoding="utf-8")
                fh.write(line)
        finally:
            for fh in spools.values():
                fh.close()
        shards = []
        for functional, source in CELL_ORDER:
            if (functional, source) not in spools:
                _clear_cell(cell_dir(out_dir, functional, source))
                continue
            path = work / f"{functional.value}.{source.value}.jsonl"
            with open(path, "r", encoding="utf-8") as fh:
                shards += write_cell(fh, out_dir, functional, source, max_frames_per_shard,
                                     columnar=columnar, chunk_size=chunk_size, tmp_dir=work)
        return shards
    finally:
        shutil.rmtree(work, ignore_errors=True)


def iter_shard_lines(out_dir, shards):
    for sh in shards:
        with open(Path(out_dir) / sh.path, "r", encoding="utf-8") as fh:
            yield from fh


def iter_shard_frames(out_dir, shards):
    for line in iter_shard_lines(out_dir, shards):
        yield loads_frame(line)


# --------------------------------------------------------------------------
# manifest

def count_cells(out_dir, shards):
    """Stream the shard files and count frames and trajectories per cell.

    Frame ids embed their trajectory id as a prefix, so within a cell's
    sorted shards each trajectory's frames are contiguous.
    """
    counts = {}
    per_shard = {}
    for functional, source in CELL_ORDER:
        cell_shards = [s for s in shards if (s.functional, s.source) == (functional, source)]
        if not cell_shards:
            continue
        n_frames = n_traj = 0
        last_tid = None
        for sh in cell_shards:
            n = 0
            digest = hashlib.sha256()
            with open(Path(out_dir) / sh.path, "rb") as fh:
                for raw in fh:
                    digest.update(raw)
                    n += 1
                    _, tid = line_ids(raw.decode("utf-8"))
                    if tid != last_tid:
                        n_traj += 1
                        last_tid = tid
            per_shard[sh.path] = (n, digest.hexdigest())
            n_frames += n
        counts[(functional, source)] = (n_traj, n_frames)
    return counts, per_shard


def build_manifest(shards, filter_stats=None, frames_index=None, out_dir=".",
                   filter_config=None, created_at=None, pipeline_git_ref=None) -> dict:
    """Manifest dict with per-(functional, source) counts recounted from the shards.

    ``frames_index`` maps (functional, source) to the number of frames the
    upstream stream delivered for that cell; any disagreement with the
    recount raises CountMismatch.
    """
    counts, per_shard = count_cells(out_dir, shards)
    for sh in shards:
        n, digest = per_shard[sh.path]
        if n != sh.frame_count or digest != sh.content_hash:
            raise CountMismatch(f"{sh.path}: recount {n} frames / {digest[:12]} "
                                f"vs recorded {sh.frame_count} / {sh.content_hash[:12]}")
    if frames_index is not None:
        for cell in set(frames_index) | set(counts):
            want = frames_index.get(cell, 0)
            got = counts.get(cell, (0, 0))[1]
            if want != got:
                raise CountMismatch(f"{cell[0].value}/{cell[1].value}: stream delivered "
                                    f"{want} frames, shards hold {got}")
    total = sum(n for _, n in counts.values())
    if filter_stats is not None and filter_stats.frames_out != total:
        raise CountMismatch(f"filter kept {filter_stats.frames_out} frames, shards hold {total}")
    cells = [
        {"functional": f.value, "source": s.value,
         "n_trajectories": counts[(f, s)][0], "n_frames": counts[(f, s)][1]}
        for f, s in CELL_ORDER if (f, s) in counts
    ]
    return {
        "schema_version": SCHEMA_VERSION,
        "filter_config": filter_config.to_dict() if filter_config is not None else None,
        "filter_stats": filter_stats.to_dict() if filter_stats is not None else None,
        "cells": cells,
        "shards": [s.to_dict() for s in shards],
        "created_at": created_at,
        "pipeline_git_ref": pipeline_git_ref,
    }


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, sort_keys=True, indent=2, allow_nan=False) + "\n").encode()


def write_manifest(manifest: dict, path) -> bytes:
    from .ingest import atomic_write_text

    data = manifest_bytes(manifest)
    atomic_write_text(path, data.decode())
    return data


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def manifest_shards(manifest: dict) -> list:
    return [Shard.from_dict(d) for d in manifest["shards"]]


# --------------------------------------------------------------------------
# columnar mirror

def write_parquet(lines, path):
    """Parquet copy of a shard with the same logical fields."""
    try:
        import pyarrow as pa
        import pyarrow.parquet as pq
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ExportError("columnar export needs pyarrow (pip install artifact[parquet])") from exc
    rows = [json.loads(line) for line in lines]
    columns = ["frame_id", "trajectory_id", "relaxation_step", "relaxation_number", "lattice",
               "species", "positions", "energy", "forces", "stress", "functional", "source",
               "source_record_id"]
    matrix = pa.list_(pa.list_(pa.float64()))
    schema = pa.schema([
        ("frame_id", pa.string()), ("trajectory_id", pa.string()),
        ("relaxation_step", pa.int64()), ("relaxation_number", pa.int64()),
        ("lattice", matrix), ("species", pa.list_(pa.string())), ("positions", matrix),
        ("energy", pa.float64()), ("forces", matrix), ("stress", matrix),
        ("functional", pa.string()), ("source", pa.string()), ("source_record_id", pa.string()),
    ])
    table = pa.table({c: [r.get(c) for r in rows] for c in columns}, schema=schema)
    tmp = Path(str(path) + ".tmp")
    pq.write_table(table, tmp)
    os.replace(tmp, path)


def read_parquet_frames(path):
    import pyarrow.parquet as pq

    for row in pq.read_table(path).to_pylist():
        yield Frame.from_dict({k: v for k, v in row.items() if v is not None})
