"""Resumable, batched streaming of raw source records.

A snapshot is a directory (local or served over HTTP) of line-delimited
files. Records are enumerated file by file in lexicographic name order and
line by line within a file; a record's offset is ``(file_index, line_index)``.
A checkpoint stores the offset of the next unread line.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
import time
import urllib.error
import urllib.parse
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .schema import SourceId

log = logging.getLogger(__name__)

SNAPSHOT_SUFFIX = ".jsonl"


class IngestError(Exception):
    pass


class LocationUnreadable(IngestError):
    pass


class CorruptCheckpoint(IngestError):
    pass


class IoFailure(IngestError):
    """Retryable read or write failure; stream state is unchanged."""


@dataclass(frozen=True)
class SourceConfig:
    source: SourceId
    location: str
    batch_size: int = 1000
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "source", SourceId(self.source))
        if int(self.batch_size) < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class RawRecord:
    source: SourceId
    payload: bytes
    offset: tuple


@dataclass(frozen=True)
class Checkpoint:
    source: SourceId
    file_index: int
    line_index: int
    records_emitted: int

    @property
    def last_committed_offset(self) -> tuple:
        return (self.file_index, self.line_index)

    def to_json(self) -> str:
        return json.dumps({
            "source": SourceId(self.source).value,
            "file_index": self.file_index,
            "line_index": self.line_index,
            "records_emitted": self.records_emitted,
        }, sort_keys=True)


def read_checkpoint(path, source: SourceId) -> Optional[Checkpoint]:
    path = Path(path)
    if not path.exists():
        return None
    try:
        d = json.loads(path.read_text())
        ck = Checkpoint(SourceId(d["source"]), int(d["file_index"]),
                        int(d["line_index"]), int(d["records_emitted"]))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: {exc!r}") from exc
    if ck.source != SourceId(source):
        raise CorruptCheckpoint(f"{path}: checkpoint is for {ck.source.value}, not {source.value}")
    if min(ck.file_index, ck.line_index, ck.records_emitted) < 0:
        raise CorruptCheckpoint(f"{path}: negative offset")
    return ck


def atomic_write_text(path, text: str) -> None:
    """Write-temp-then-rename; readers see either the old or the new content."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# --------------------------------------------------------------------------
# backends: list the snapshot files, open one at a byte offset


class LocalBackend:
    def __init__(self, location):
        if location.startswith("file://"):
            location = urllib.parse.urlparse(location).path
        self.root = Path(location)
        if not self.root.is_dir() or not os.access(self.root, os.R_OK | os.X_OK):
            raise LocationUnreadable(f"{self.root} is not a readable directory")

    def list_files(self) -> list:
        return sorted(p.name for p in self.root.iterdir()
                      if p.is_file() and p.name.endswith(SNAPSHOT_SUFFIX))

    def open(self, name, byte_offset=0):
        fh = open(self.root / name, "rb")
        fh.seek(byte_offset)
        return fh


def with_retries(fn, attempts=5, base=0.5, factor=2.0, sleep=time.sleep,
                 retry_on=(OSError,)):
    """Call ``fn`` with exponential backoff; re-raise the last error."""
    delay = base
    for attempt in range(1, attempts + 1):
        try:
            return fn()
        except retry_on as exc:
            if attempt == attempts:
                raise
            log.warning("attempt %d/%d failed (%s); retrying in %.2fs",
                        attempt, attempts, exc, delay)
            sleep(delay)
            delay *= factor


class _RangedReader:
    """File-like reader over HTTP range requests."""

    def __init__(self, backend, url, offset, chunk_bytes):
        self.backend = backend
        self.url = url
        self.pos = offset        # offset of the first byte in ``buf``
        self.buf = b""
        self.eof = False
        self.chunk_bytes = chunk_bytes

    def _fill(self):
        start = self.pos + len(self.buf)
        end = start + self.chunk_bytes - 1
        status, data = self.backend.get(self.url, (start, end))
        if status == 200:
            # server ignored the range header
            data = data[start:end + 1]
        elif status == 416:
            data = b""
        if len(data) < self.chunk_bytes:
            self.eof = True
        self.buf += data

    def readline(self) -> bytes:
        while True:
            i = self.buf.find(b"\n")
            if i >= 0:
                line, self.buf = self.buf[:i + 1], self.buf[i + 1:]
                self.pos += len(line)
                return line
            if self.eof:
                line, self.buf = self.buf, b""
                self.pos += len(line)
                return line
            self._fill()

    def tell(self) -> int:
        return self.pos

    def close(self):
        self.buf = b""


class HttpBackend:
    """Same file layout served over HTTP; ``<base>/index.json`` lists the files."""

    def __init__(self, location, attempts=5, base_delay=0.5, factor=2.0,
                 sleep=time.sleep, chunk_bytes=1 << 20, timeout=30.0):
        self.base = location.rstrip("/") + "/"
        self.retry = dict(attempts=attempts, base=base_delay, factor=factor, sleep=sleep)
        self.chunk_bytes = chunk_bytes
        self.timeout = timeout
        try:
            status, body = self.get(self.base + "index.json")
            index = json.loads(body)
        except (OSError, ValueError) as exc:
            raise LocationUnreadable(f"{self.base}index.json: {exc!r}") from exc
        files = index.get("files") if isinstance(index, dict) else index
        if not isinstance(files, list):
            raise LocationUnreadable(f"{self.base}index.json has no file list")
        self._files = sorted(str(f) for f in files if str(f).endswith(SNAPSHOT_SUFFIX))

    def get(self, url, byte_range=None):
        def once():
            req = urllib.request.Request(url)
            if byte_range is not None:
                req.add_header("Range", "bytes=%d-%d" % byte_range)
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    return resp.status, resp.read()
            except urllib.error.HTTPError as exc:
                if exc.code == 416:
                    return 416, b""
                if 400 <= exc.code < 500 and exc.code != 429:
                    raise LocationUnreadable(f"{url}: HTTP {exc.code}") from exc
                raise
        return with_retries(once, **self.retry)

    def list_files(self) -> list:
        return list(self._files)

    def open(self, name, byte_offset=0):
        return _RangedReader(self, self.base + urllib.parse.quote(name),
                             byte_offset, self.chunk_bytes)


def make_backend(location, **http_options):
    if location.startswith(("http://", "https://")):
        return HttpBackend(location, **http_options)
    return LocalBackend(location)


# --------------------------------------------------------------------------


class RecordStream:
    """Sequential reader over one snapshot; not shared between workers."""

    def __init__(self, config: SourceConfig, backend, files, file_indices=None):
        self.config = config
        self.source = config.source
        self.backend = backend
        self.files = files
        # indices (into ``files``) this stream covers; a partition may skip some
        self.file_indices = list(range(len(files))) if file_indices is None else list(file_indices)
        self.file_index = self.file_indices[0] if self.file_indices else len(files)
        self.line_index = 0
        self.byte_offset = 0
        self.records_emitted = 0
        self._reader = None

    # position helpers -------------------------------------------------
    def position(self) -> tuple:
        return (self.file_index, self.line_index)

    def _state(self):
        return (self.file_index, self.line_index, self.byte_offset, self.records_emitted)

    def _restore(self, state):
        self._close_reader()
        self.file_index, self.line_index, self.byte_offset, self.records_emitted = state

    def _close_reader(self):
        if self._reader is not None:
            try:
                self._reader.close()
            except OSError:
                pass
        self._reader = None

    def _next_file(self):
        self._close_reader()
        later = [i for i in self.file_indices if i > self.file_index]
        self.file_index = later[0] if later else len(self.files)
        self.line_index = 0
        self.byte_offset = 0

    def _readline(self):
        """Next raw line of the current file or None when the stream is exhausted."""
        while self.file_index < len(self.files):
            if self._reader is None:
                self._reader = self.backend.open(self.files[self.file_index], self.byte_offset)
            line = self._reader.readline()
            if line:
                offset = (self.file_index, self.line_index)
                self.line_index += 1
                self.byte_offset += len(line)
                return offset, line
            self._next_file()
        return None

    def seek_lines(self, file_index, line_index):
        """Position at a checkpointed offset by re-reading the skipped lines."""
        if file_index > len(self.files) or (file_index < len(self.files)
                                            and file_index not in self.file_indices):
            raise CorruptCheckpoint(f"file_index {file_index} outside snapshot")
        self._close_reader()
        self.file_index, self.line_index, self.byte_offset = file_index, 0, 0
        if file_index == len(self.files):
            if line_index:
                raise CorruptCheckpoint("line_index past end of snapshot")
            return
        reader = self.backend.open(self.files[file_index], 0)
        try:
            for _ in range(line_index):
                line = reader.readline()
                if not line:
                    raise CorruptCheckpoint(
                        f"{self.files[file_index]} has fewer than {line_index} lines")
                self.byte_offset += len(line)
        finally:
            reader.close()
        self.line_index = line_index

    # public API ---------------------------------------------------------
    def next_batch(self, n: int) -> list:
        if n < 1:
            raise ValueError("n must be >= 1")
        saved = self._state()
        batch = []
        try:
            while len(batch) < n:
                item = self._readline()
                if item is None:
                    break
                offset, line = item
                payload = line.rstrip(b"\r\n")
                if not payload.strip():
                    continue
                batch.append(RawRecord(self.source, payload, offset))
        except (OSError, LocationUnreadable) as exc:
            self._restore(saved)
            raise IoFailure(f"{self.source.value}: read failed at {self.position()}: {exc!r}") from exc
        self.records_emitted += len(batch)
        return batch

    def __iter__(self):
        while True:
            batch = self.next_batch(self.config.batch_size)
            if not batch:
                return
            yield from batch

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.source, self.file_index, self.line_index, self.records_emitted)

    def commit_checkpoint(self) -> Checkpoint:
        ck = self.checkpoint()
        if self.config.checkpoint_path:
            try:
                atomic_write_text(self.config.checkpoint_path, ck.to_json())
            except OSError as exc:
                raise IoFailure(f"checkpoint write failed: {exc!r}") from exc
        return ck

    def close(self):
        self._close_reader()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_stream(config: SourceConfig, partition=None, **http_options) -> RecordStream:
    """Open a snapshot, resuming after the committed checkpoint when one exists.

    ``partition=(k, n)`` restricts the stream to files whose index is
    congruent to ``k`` modulo ``n``.
    """
    backend = make_backend(config.location, **http_options)
    ck = read_checkpoint(config.checkpoint_path, config.source) if config.checkpoint_path else None
    try:
        files = backend.list_files()
    except OSError as exc:
        raise LocationUnreadable(f"{config.location}: {exc!r}") from exc
    indices = None
    if partition is not None:
        k, n = partition
        indices = [i for i in range(len(files)) if i % n == k]
    stream = RecordStream(config, backend, files, indices)
    if ck is not None:
        stream.seek_lines(ck.file_index, ck.line_index)
        stream.records_emitted = ck.records_emitted
    return stream


def next_batch(stream: RecordStream, n: int) -> list:
    return stream.next_batch(n)


def commit_checkpoint(stream: RecordStream) -> Checkpoint:
    return stream.commit_checkpoint()
