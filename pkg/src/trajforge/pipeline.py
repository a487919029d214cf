"""Staged, resumable, parallel pipeline run.

Working layout under ``out_dir``::

    work/raw/<source>/part-NNNNNN.raw     fetched records, one batch per part
    work/fetch/<source>.ckpt              ingest checkpoint (next unread line)
    work/frames/part-PPP.jsonl            transformed frames, hash-partitioned
                                          by trajectory id
    work/filtered/part-PPP.jsonl          frames of kept trajectories
    work/<stage>.done                     stage summary; presence = stage done
    <functional>/<source>/shard-*.jsonl   exported shards
    manifest.json, rejects.jsonl, splits/, stats/, pes/

A stage without a done marker is re-run from scratch (fetch resumes from
its checkpoint), so an interrupted run finishes with the same bytes as an
uninterrupted one. Worker count never affects output: work units are fixed
(raw parts, hash partitions) and results are consumed in submission order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
import os
import shutil
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import DatasetStats
from .curate import FilterConfig, FilterStats, filter_trajectory
from .export import (
    build_manifest,
    frame_id_of,
    iter_shard_lines,
    line_cell,
    line_ids,
    load_manifest,
    manifest_shards,
    write_manifest,
    write_shards,
)
from .extsort import external_sort
from .hashing import seeded_hash, sub_seed
from .ingest import IngestError, RawRecord, SourceConfig, atomic_write_text, open_stream
from .schema import (
    SOURCE_SLUG,
    Functional,
    SourceId,
    dumps_frame,
    loads_frame,
    make_trajectory,
)
from .splits import (
    TEST,
    TRAIN,
    KeyCollision,
    SplitColumns,
    SplitConfig,
    SplitError,
    balance_sources,
    columnar_split,
    stratified_split,
)
from .transform import RejectSink, TransformStats, dispatch, field_map

log = logging.getLogger(__name__)

STAGES = ("fetch", "transform", "filter", "export", "split", "stats", "pes")
DEFAULT_STAGES = ("fetch", "transform", "filter", "export", "split", "stats")
REQUIRES = {
    "fetch": None,
    "transform": "fetch",
    "filter": "transform",
    "export": "filter",
    "split": "export",
    "stats": "export",
    "pes": "export",
}
CRASH_ENV = "TRAJFORGE_CRASH_AFTER"
OUT_ENV = "TRAJFORGE_OUT"
CRASH_EXIT_CODE = 97


class PipelineError(Exception):
    pass


class ConfigInvalid(PipelineError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class StageFailure(PipelineError):
    def __init__(self, stage, offset, cause):
        self.stage, self.offset, self.cause = stage, offset, cause
        super().__init__(f"stage {stage} failed at {offset}: {cause}")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SplitSettings:
    test_fraction: float = 0.2
    source_balance: dict = field(default_factory=lambda: {
        SourceId.MP: 0.1, SourceId.OQMD: 0.1, SourceId.ALEXANDRIA: 0.8})
    # per functional value; absent → keep every trajectory
    target_size: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PesSettings:
    elements: tuple = ("Fe", "Cu", "Al", "Ni")
    functional: Functional = Functional.PBE
    project_functional: Optional[Functional] = None
    r_cut: float = 5.0
    n_max: int = 8
    l_max: int = 6
    sigma: float = 0.5
    n_components: int = 2
    max_fit_frames: Optional[int] = None
    overlay_trajectories: int = 20
    refs: Optional[str] = None


@dataclass(frozen=True)
class PipelineConfig:
    sources: tuple = ()
    filter: FilterConfig = FilterConfig()
    out_dir: str = "out"
    workers: int = 1
    max_frames_per_shard: int = 100_000
    stages: tuple = DEFAULT_STAGES
    seed: int = 0
    n_partitions: int = 16
    max_reject_rate: float = 0.01
    columnar: bool = False
    sort_chunk_size: int = 100_000
    queue_depth: int = 2
    field_maps: dict = field(default_factory=dict)
    split: SplitSettings = SplitSettings()
    stats_bins: int = 20
    pes: PesSettings = PesSettings()
    created_at: Optional[str] = None
    pipeline_git_ref: Optional[str] = None

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def work(self) -> Path:
        return self.out / "work"

    def with_overrides(self, **kw):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return PipelineConfig(**d)


_TOP_KEYS = {"sources", "filter", "out_dir", "workers", "max_frames_per_shard", "stages", "seed",
             "n_partitions", "max_reject_rate", "columnar", "sort_chunk_size", "queue_depth",
             "field_maps", "split", "stats_bins", "pes", "created_at", "pipeline_git_ref"}


def _check_keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ConfigInvalid(path, "must be an object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigInvalid(f"{path}.{extra[0]}" if path else extra[0], "unknown key")


def _int(d, key, path, default, minimum=None):
    v = d.get(key, default)
    if v is None and default is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigInvalid(path, f"must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigInvalid(path, f"must be >= {minimum}, got {v}")
    return v


def _num(d, key, path, default, positive=True):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigInvalid(path, f"must be a number, got {v!r}")
    if positive and not v > 0:
        raise ConfigInvalid(path, f"must be > 0, got {v}")
    return float(v)


def _enum(cls, value, path):
    try:
        return cls(value)
    except ValueError:
        raise ConfigInvalid(path, f"unknown value {value!r}") from None


def config_from_dict(raw: dict, base_dir=".", check_dependencies=True) -> PipelineConfig:
    """Parse, default and check a config mapping. Errors carry the field path."""
    base_dir = Path(base_dir)
    raw = {} if raw is None else raw
    _check_keys(raw, _TOP_KEYS, "")

    sources = []
    src_list = raw.get("sources", [])
    if not isinstance(src_list, list):
        raise ConfigInvalid("sources", "must be a list")
    seen = set()
    for i, s in enumerate(src_list):
        path = f"sources[{i}]"
        _check_keys(s, {"source", "location", "batch_size"}, path)
        if "source" not in s or "location" not in s:
            raise ConfigInvalid(path, "needs 'source' and 'location'")
        sid = _enum(SourceId, s["source"], f"{path}.source")
        if sid in seen:
            raise ConfigInvalid(f"{path}.source", f"{sid.value} listed twice")
        seen.add(sid)
        loc = str(s["location"])
        if "://" not in loc and not Path(loc).is_absolute():
            loc = str((base_dir / loc).resolve())
        batch = _int(s, "batch_size", f"{path}.batch_size", 1000, minimum=1)
        sources.append(SourceConfig(sid, loc, batch))

    fraw = raw.get("filter", {})
    _check_keys(fraw, {"energy_convergence_threshold", "final_force_threshold"}, "filter")
    filt = FilterConfig(
        _num(fraw, "energy_convergence_threshold", "filter.energy_convergence_threshold", 0.02),
        _num(fraw, "final_force_threshold", "filter.final_force_threshold", 0.2))

    # the environment override is taken relative to the working directory,
    # a configured out_dir relative to the config file
    if os.environ.get(OUT_ENV):
        out_dir = str(Path(os.environ[OUT_ENV]).resolve())
    else:
        out_dir = raw.get("out_dir", "out")
        if not isinstance(out_dir, str) or not out_dir:
            raise ConfigInvalid("out_dir", "must be a non-empty string")
        out_dir = str((base_dir / out_dir).resolve())

    stages = raw.get("stages", list(DEFAULT_STAGES))
    if not isinstance(stages, list) or not stages:
        raise ConfigInvalid("stages", "must be a non-empty list")
    for i, st in enumerate(stages):
        if st not in STAGES:
            raise ConfigInvalid(f"stages[{i}]", f"unknown stage {st!r}")
    if len(set(stages)) != len(stages):
        raise ConfigInvalid("stages", "duplicate stage")
    if list(stages) != sorted(stages, key=STAGES.index):
        raise ConfigInvalid("stages", f"must follow the order {', '.join(STAGES)}")

    sraw = raw.get("split", {})
    _check_keys(sraw, {"test_fraction", "source_balance", "target_size"}, "split")
    tf = _num(sraw, "test_fraction", "split.test_fraction", 0.2)
    if not tf < 1:
        raise ConfigInvalid("split.test_fraction", "must be in (0, 1)")
    braw = sraw.get("source_balance", {"MaterialsProject": 0.1, "OQMD": 0.1, "Alexandria": 0.8})
    _check_keys(braw, {s.value for s in SourceId}, "split.source_balance")
    balance = {SourceId(k): _num(braw, k, f"split.source_balance.{k}", 0, positive=False)
               for k in braw}
    if any(v < 0 for v in balance.values()) or abs(sum(balance.values()) - 1.0) > 1e-9:
        raise ConfigInvalid("split.source_balance", "fractions must be >= 0 and sum to 1")
    traw = sraw.get("target_size", {})
    _check_keys(traw, {f.value for f in Functional}, "split.target_size")
    targets = {Functional(k): _int(traw, k, f"split.target_size.{k}", None, minimum=0) for k in traw}
    split = SplitSettings(tf, balance, targets)

    praw = raw.get("pes", {})
    _check_keys(praw, set(PesSettings.__dataclass_fields__), "pes")
    els = praw.get("elements", list(PesSettings.elements))
    from .elements import is_element
    if not isinstance(els, list) or not els or not all(isinstance(e, str) and is_element(e) for e in els):
        raise ConfigInvalid("pes.elements", "must be a non-empty list of element symbols")
    refs = praw.get("refs")
    if refs is not None and not Path(refs).is_absolute():
        refs = str((base_dir / refs).resolve())
    pf = praw.get("project_functional")
    pes = PesSettings(
        elements=tuple(els),
        functional=_enum(Functional, praw.get("functional", "PBE"), "pes.functional"),
        project_functional=None if pf is None else _enum(Functional, pf, "pes.project_functional"),
        r_cut=_num(praw, "r_cut", "pes.r_cut", 5.0),
        n_max=_int(praw, "n_max", "pes.n_max", 8, minimum=1),
        l_max=_int(praw, "l_max", "pes.l_max", 6, minimum=0),
        sigma=_num(praw, "sigma", "pes.sigma", 0.5),
        n_components=_int(praw, "n_components", "pes.n_components", 2, minimum=1),
        max_fit_frames=_int(praw, "max_fit_frames", "pes.max_fit_frames", None, minimum=1),
        overlay_trajectories=_int(praw, "overlay_trajectories", "pes.overlay_trajectories", 20, minimum=0),
        refs=refs,
    )

    fm = raw.get("field_maps", {})
    _check_keys(fm, {s.value for s in SourceId}, "field_maps")
    field_maps = {}
    for k, v in fm.items():
        if not isinstance(v, dict) or not all(isinstance(p, str) for p in v.values()):
            raise ConfigInvalid(f"field_maps.{k}", "must map field names to dotted paths")
        try:
            field_maps[SourceId(k)] = field_map(SourceId(k), v)
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"field_maps.{k}", str(exc)) from None

    rate = _num(raw, "max_reject_rate", "max_reject_rate", 0.01, positive=False)
    if not 0 <= rate <= 1:
        raise ConfigInvalid("max_reject_rate", "must be in [0, 1]")
    columnar = raw.get("columnar", False)
    if not isinstance(columnar, bool):
        raise ConfigInvalid("columnar", "must be a boolean")
    for key in ("created_at", "pipeline_git_ref"):
        if raw.get(key) is not None and not isinstance(raw[key], str):
            raise ConfigInvalid(key, "must be a string or null")

    cfg = PipelineConfig(
        sources=tuple(sources),
        filter=filt,
        out_dir=out_dir,
        workers=_int(raw, "workers", "workers", 1, minimum=1),
        max_frames_per_shard=_int(raw, "max_frames_per_shard", "max_frames_per_shard", 100_000, minimum=1),
        stages=tuple(stages),
        seed=_int(raw, "seed", "seed", 0),
        n_partitions=_int(raw, "n_partitions", "n_partitions", 16, minimum=1),
        max_reject_rate=rate,
        columnar=columnar,
        sort_chunk_size=_int(raw, "sort_chunk_size", "sort_chunk_size", 100_000, minimum=1),
        queue_depth=_int(raw, "queue_depth", "queue_depth", 2, minimum=1),
        field_maps=field_maps,
        split=split,
        stats_bins=_int(raw, "stats_bins", "stats_bins", 20, minimum=1),
        pes=pes,
        created_at=raw.get("created_at"),
        pipeline_git_ref=raw.get("pipeline_git_ref"),
    )
    if check_dependencies:
        check_stage_dependencies(cfg)
    return cfg


def check_stage_dependencies(cfg: PipelineConfig):
    """Each stage's prerequisite runs earlier in the list or has already completed."""
    for i, st in enumerate(cfg.stages):
        dep = REQUIRES[st]
        if dep is None or dep in cfg.stages[:i]:
            continue
        if not stage_done(cfg, dep):
            raise ConfigInvalid(f"stages[{i}]", f"{st} needs {dep} outputs, none found in {cfg.work}")


def validate_config(path, check_dependencies=True, **overrides) -> PipelineConfig:
    """Read a JSON config file; an empty file gives the all-defaults config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid("", f"cannot read {path}: {exc}") from None
    try:
        raw = json.loads(text) if text.strip() else {}
    except ValueError as exc:
        raise ConfigInvalid("", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigInvalid("", "config must be a JSON object")
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return config_from_dict(raw, base_dir=path.parent, check_dependencies=check_dependencies)


# --------------------------------------------------------------------------
# stage bookkeeping


# config fields whose value shapes each stage's output (worker count,
# queue depth and sort chunk size never do)
STAGE_FIELDS = {
    "fetch": ("sources",),
    "transform": ("field_maps", "n_partitions", "seed", "max_reject_rate"),
    "filter": ("filter",),
    "export": ("max_frames_per_shard", "columnar", "created_at", "pipeline_git_ref"),
    "split": ("split", "seed"),
    "stats": ("stats_bins",),
    "pes": ("pes", "seed"),
}


def _plain(v):
    if hasattr(v, "__dataclass_fields__"):
        return {k: _plain(getattr(v, k)) for k in v.__dataclass_fields__}
    if isinstance(v, dict):
        return {str(getattr(k, "value", k)): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return getattr(v, "value", v)


def stage_fingerprint(cfg, stage) -> str:
    """Hash of the config fields feeding ``stage`` and, transitively, its prerequisites."""
    chain = []
    st = stage
    while st is not None:
        chain.append({f: _plain(getattr(cfg, f)) for f in STAGE_FIELDS[st]})
        st = REQUIRES[st]
    return hashlib.sha256(json.dumps(chain, sort_keys=True).encode()).hexdigest()


def marker_path(cfg, stage) -> Path:
    return cfg.work / f"{stage}.done"


def read_marker(cfg, stage):
    """Stage summary when the stage completed under the current config, else None."""
    p = marker_path(cfg, stage)
    if not p.exists():
        return None
    try:
        doc = json.loads(p.read_text())
    except ValueError:
        return None
    if doc.get("fingerprint") != stage_fingerprint(cfg, stage):
        return None
    return doc["summary"]


def stage_done(cfg, stage) -> bool:
    return read_marker(cfg, stage) is not None


def _mark_done(cfg, stage, summary):
    doc = {"fingerprint": stage_fingerprint(cfg, stage), "summary": summary}
    atomic_write_text(marker_path(cfg, stage), json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _invalidate_from(cfg, stage):
    """A re-run stage invalidates every later stage's marker."""
    for st in STAGES[STAGES.index(stage):]:
        p = marker_path(cfg, st)
        if p.exists():
            p.unlink()


def _crash_point(stage, units=None):
    """Test hook: exit abruptly at a configured point (``stage`` or ``stage:N``)."""
    spec = os.environ.get(CRASH_ENV)
    if not spec:
        return
    name, _, count = spec.partition(":")
    if name != stage:
        return
    if (count == "" and units is None) or (count and units is not None and int(count) == units):
        logging.shutdown()
        os._exit(CRASH_EXIT_CODE)


@dataclass
class StageReport:
    name: str
    status: str               # "ran" or "resumed" (done marker found)
    wall_time: float
    summary: dict


@dataclass
class RunReport:
    stages: list = field(default_factory=list)
    filter_stats: Optional[dict] = None
    manifest_path: Optional[str] = None
    reject_sink_path: Optional[str] = None
    conservation: dict = field(default_factory=dict)

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        return None

    def to_dict(self):
        return {
            "stages": [asdict(s) for s in self.stages],
            "filter_stats": self.filter_stats,
            "manifest_path": self.manifest_path,
            "reject_sink_path": self.reject_sink_path,
            "conservation": self.conservation,
        }


# --------------------------------------------------------------------------
# worker plumbing


class Executor:
    """Ordered map over a process pool with a bounded number of tasks in flight."""

    def __init__(self, workers, depth=2):
        self.workers = workers
        self.window = max(1, workers * depth)
        self.pool = multiprocessing.get_context("fork").Pool(workers) if workers > 1 else None

    def imap(self, fn, items):
        if self.pool is None:
            for item in items:
                yield fn(item)
            return
        pending = deque()
        for item in items:
            pending.append(self.pool.apply_async(fn, (item,)))
            if len(pending) >= self.window:
                yield pending.popleft().get()
        while pending:
            yield pending.popleft().get()

    def close(self):
        if self.pool is not None:
            self.pool.close()
            self.pool.join()
            self.pool = None

    def terminate(self):
        if self.pool is not None:
            self.pool.terminate()
            self.pool.join()
            self.pool = None


# --------------------------------------------------------------------------
# fetch


def _raw_dir(cfg, source):
    return cfg.work / "raw" / SOURCE_SLUG[source]


def _encode_raw(rec: RawRecord) -> bytes:
    return f"{rec.offset[0]} {rec.offset[1]}\t".encode() + rec.payload + b"\n"


def _decode_raw(source, line: bytes) -> RawRecord:
    head, _, payload = line.rstrip(b"\n").partition(b"\t")
    fi, li = head.split()
    return RawRecord(source, payload, (int(fi), int(li)))


def stage_fetch(cfg: PipelineConfig, ex: Executor) -> dict:
    """Copy every source snapshot into fixed-size raw parts, checkpointing per part.

    Part k holds records [k*batch, (k+1)*batch); after a crash the stream
    resumes at the committed checkpoint and rewrites the same part.
    """
    stamp = cfg.work / "fetch" / "sources.json"
    want = json.dumps(_plain(cfg.sources), sort_keys=True)
    if not stamp.exists() or stamp.read_text() != want:
        shutil.rmtree(cfg.work / "raw", ignore_errors=True)
        shutil.rmtree(cfg.work / "fetch", ignore_errors=True)
        atomic_write_text(stamp, want)
    summary = {}
    units = 0
    for sc in cfg.sources:
        rdir = _raw_dir(cfg, sc.source)
        rdir.mkdir(parents=True, exist_ok=True)
        ck_path = cfg.work / "fetch" / f"{SOURCE_SLUG[sc.source]}.ckpt"
        conf = SourceConfig(sc.source, sc.location, sc.batch_size, str(ck_path))
        try:
            stream = open_stream(conf)
        except IngestError as exc:
            raise StageFailure("fetch", None, f"{sc.source.value}: {exc}") from exc
        with stream:
            while True:
                part = stream.records_emitted // sc.batch_size
                try:
                    batch = stream.next_batch(sc.batch_size)
                except IngestError as exc:
                    raise StageFailure("fetch", stream.position(), f"{sc.source.value}: {exc}") from exc
                if not batch:
                    break
                data = b"".join(_encode_raw(r) for r in batch)
                _atomic_write_bytes(rdir / f"part-{part:06d}.raw", data)
                stream.commit_checkpoint()
                units += 1
                _crash_point("fetch", units)
            summary[sc.source.value] = stream.records_emitted
    return {"records_out": summary, "records_total": sum(summary.values())}


def _atomic_write_bytes(path, data: bytes):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _raw_parts(cfg):
    parts = []
    for sc in cfg.sources:
        rdir = _raw_dir(cfg, sc.source)
        parts += [(sc.source.value, str(p)) for p in sorted(rdir.glob("part-*.raw"))]
    return parts


# --------------------------------------------------------------------------
# transform


def _transform_part(args):
    source_value, path, field_maps = args
    source = SourceId(source_value)
    sink = RejectSink()
    stats = TransformStats()
    lines = []
    with open(path, "rb") as fh:
        for raw_line in fh:
            rec = _decode_raw(source, raw_line)
            for fr in dispatch(rec, sink, field_maps, stats):
                lines.append((fr.trajectory_id, dumps_frame(fr) + "\n"))
    last = None
    if stats.records_in:
        last = rec.offset
    return lines, list(sink.lines()), asdict(stats), last


def partition_of(trajectory_id, seed, n_partitions):
    return seeded_hash(seed, trajectory_id) % n_partitions


def stage_transform(cfg: PipelineConfig, ex: Executor) -> dict:
    fdir = cfg.work / "frames"
    shutil.rmtree(fdir, ignore_errors=True)
    fdir.mkdir(parents=True)
    pseed = sub_seed(cfg.seed, "partition")
    outs = [open(fdir / f"part-{p:03d}.jsonl", "w", encoding="utf-8") for p in range(cfg.n_partitions)]
    rejects_path = cfg.out / "rejects.jsonl"
    totals = TransformStats()
    per_source = {}
    units = 0
    try:
        with open(rejects_path, "w", encoding="utf-8") as rej:
            parts = _raw_parts(cfg)
            jobs = ((src, path, cfg.field_maps) for src, path in parts)
            for (src, path), (lines, rejects, st, last) in zip(parts, ex.imap(_transform_part, jobs)):
                for tid, line in lines:
                    outs[partition_of(tid, pseed, cfg.n_partitions)].write(line)
                rej.writelines(rejects)
                part_stats = TransformStats(**st)
                totals.merge(part_stats)
                per_source.setdefault(src, TransformStats()).merge(part_stats)
                units += 1
                _crash_point("transform", units)
                if totals.records_in and totals.records_rejected / totals.records_in > cfg.max_reject_rate \
                        and totals.records_rejected >= _reject_floor(cfg):
                    raise StageFailure("transform", {"source": src, "part": Path(path).name, "offset": last},
                                       f"reject rate {totals.records_rejected}/{totals.records_in} "
                                       f"exceeds {cfg.max_reject_rate}")
    finally:
        for fh in outs:
            fh.close()
    if totals.records_in and totals.records_rejected / totals.records_in > cfg.max_reject_rate:
        raise StageFailure("transform", None, f"reject rate {totals.records_rejected}/{totals.records_in} "
                                              f"exceeds {cfg.max_reject_rate}")
    return {**asdict(totals), "per_source": {k: asdict(v) for k, v in sorted(per_source.items())},
            "reject_sink": str(rejects_path)}


def _reject_floor(cfg):
    # do not abort mid-stream on the first few records; the end-of-stage check is exact
    return max(10, int(1 / cfg.max_reject_rate) if cfg.max_reject_rate else 10)


# --------------------------------------------------------------------------
# filter


def _trajectory_groups(sorted_lines):
    group, tid = [], None
    for line in sorted_lines:
        _, t = line_ids(line)
        if t != tid and group:
            yield group
            group = []
        tid = t
        group.append(line)
    if group:
        yield group


def _filter_partition(args):
    path, out_path, fcfg, chunk, tmp = args
    stats = FilterStats()
    cells = {}
    with open(path, "r", encoding="utf-8") as src, open(out_path, "w", encoding="utf-8") as out:
        for group in _trajectory_groups(external_sort(src, key=frame_id_of, chunk_size=chunk, tmp_dir=tmp)):
            traj = filter_trajectory([loads_frame(l) for l in group], fcfg, stats)
            if traj is None:
                continue
            for fr in traj.frames:
                out.write(dumps_frame(fr) + "\n")
            cell = (traj.functional.value, traj.source.value)
            cells[cell] = cells.get(cell, 0) + len(traj.frames)
    return asdict(stats), cells


def stage_filter(cfg: PipelineConfig, ex: Executor) -> dict:
    odir = cfg.work / "filtered"
    shutil.rmtree(odir, ignore_errors=True)
    odir.mkdir(parents=True)
    tmp = cfg.work / "tmp"
    tmp.mkdir(exist_ok=True)
    jobs = [(str(cfg.work / "frames" / f"part-{p:03d}.jsonl"), str(odir / f"part-{p:03d}.jsonl"),
             cfg.filter, cfg.sort_chunk_size, str(tmp)) for p in range(cfg.n_partitions)]
    total = FilterStats()
    cells = {}
    for units, (st, c) in enumerate(ex.imap(_filter_partition, jobs), 1):
        total.merge(FilterStats(**st))
        for k, v in c.items():
            cells[k] = cells.get(k, 0) + v
        _crash_point("filter", units)
    if not total.conserved():
        raise StageFailure("filter", None, f"frame conservation violated: {total.to_dict()}")
    return {"filter_stats": total.to_dict(),
            "frames_by_cell": [[f, s, n] for (f, s), n in sorted(cells.items())]}


# --------------------------------------------------------------------------
# export


def _filtered_lines(cfg):
    for p in range(cfg.n_partitions):
        with open(cfg.work / "filtered" / f"part-{p:03d}.jsonl", "r", encoding="utf-8") as fh:
            yield from fh


def stage_export(cfg: PipelineConfig, ex: Executor) -> dict:
    filt = read_marker(cfg, "filter")
    stats = FilterStats(**filt["filter_stats"])
    index = {(Functional(f), SourceId(s)): n for f, s, n in filt["frames_by_cell"]}
    tmp = cfg.work / "tmp"
    tmp.mkdir(exist_ok=True)
    shards = write_shards(_filtered_lines(cfg), cfg.out, cfg.max_frames_per_shard,
                          columnar=cfg.columnar, chunk_size=cfg.sort_chunk_size, tmp_dir=tmp)
    _crash_point("export", 1)
    manifest = build_manifest(shards, filter_stats=stats, frames_index=index, out_dir=cfg.out,
                              filter_config=cfg.filter, created_at=cfg.created_at,
                              pipeline_git_ref=cfg.pipeline_git_ref or f"trajforge {__version__}")
    data = write_manifest(manifest, cfg.out / "manifest.json")
    return {"manifest": str(cfg.out / "manifest.json"),
            "manifest_sha256": hashlib.sha256(data).hexdigest(),
            "frames_out": sum(c["n_frames"] for c in manifest["cells"]),
            "trajectories_out": sum(c["n_trajectories"] for c in manifest["cells"]),
            "n_shards": len(shards)}


def _exported(cfg):
    return manifest_shards(load_manifest(cfg.out / "manifest.json"))


def iter_exported_trajectories(cfg, functional=None):
    """Trajectories from the exported shards, cell by cell (frames are contiguous per trajectory)."""
    shards = [s for s in _exported(cfg) if functional is None or s.functional == functional]
    group, tid = [], None
    for line in iter_shard_lines(cfg.out, shards):
        _, t = line_ids(line)
        if t != tid and group:
            yield make_trajectory(group)
            group = []
        tid = t
        group.append(loads_frame(line))
    if group:
        yield make_trajectory(group)


# --------------------------------------------------------------------------
# split


@dataclass(frozen=True)
class TrajectorySummary:
    trajectory_id: str
    elements: frozenset
    source: SourceId


def _summaries(cfg, functional):
    out = []
    shards = [s for s in _exported(cfg) if s.functional == functional]
    last = None
    for line in iter_shard_lines(cfg.out, shards):
        _, tid = line_ids(line)
        if tid == last:
            continue
        last = tid
        fr = loads_frame(line)
        out.append(TrajectorySummary(tid, fr.elements, fr.source))
    return out


def _split_columns(cfg, functional, bal, spl):
    cols = SplitColumns(bal.seed, spl.seed)
    shards = [s for s in _exported(cfg) if s.functional == functional]
    last = None
    for line in iter_shard_lines(cfg.out, shards):
        _, tid = line_ids(line)
        if tid != last:
            last = tid
            fr = loads_frame(line)
            cols.add(tid, fr.elements, fr.source)
    return cols


def _write_labels(cfg, functional, labels, path):
    """Stream the split file sorted by trajectory id, same bytes as write_split."""
    names = {0: TRAIN, 1: TEST}

    def lines():
        shards = [s for s in _exported(cfg) if s.functional == functional]
        last, k = None, -1
        for line in iter_shard_lines(cfg.out, shards):
            _, tid = line_ids(line)
            if tid != last:
                last, k = tid, k + 1
                if labels[k] >= 0:
                    yield json.dumps({"trajectory_id": tid, "label": names[int(labels[k])]}) + "\n"

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for line in external_sort(lines(), key=lambda l: json.loads(l)["trajectory_id"],
                                  chunk_size=cfg.sort_chunk_size, tmp_dir=cfg.work / "tmp"):
            fh.write(line)
    os.replace(tmp, path)


def _split_objects(cfg, functional, bal, spl):
    """Fallback when two order hashes collide and ids must break the tie."""
    summ = _summaries(cfg, functional)
    assignment = stratified_split(balance_sources(summ, bal), spl)
    index = {t.trajectory_id: k for k, t in enumerate(summ)}
    labels = np.full(len(summ), -1, dtype=np.int8)
    for tid, lab in assignment.items():
        labels[index[tid]] = 1 if lab == TEST else 0
    return labels


def stage_split(cfg: PipelineConfig, ex: Executor) -> dict:
    """Per-functional split. Memory holds a few fixed-width keys per trajectory;
    the ids are re-read from the shards when the split file is written."""
    sdir = cfg.out / "splits"
    shutil.rmtree(sdir, ignore_errors=True)
    sdir.mkdir(parents=True)
    (cfg.work / "tmp").mkdir(parents=True, exist_ok=True)
    results = {}
    for fn in Functional:
        target = cfg.split.target_size.get(fn)
        bal = SplitConfig(cfg.split.test_fraction, sub_seed(cfg.seed, "balance"),
                          cfg.split.source_balance, target)
        spl = SplitConfig(cfg.split.test_fraction, sub_seed(cfg.seed, "split"), cfg.split.source_balance)
        cols = _split_columns(cfg, fn, bal, spl)
        if not len(cols):
            continue
        try:
            try:
                labels = columnar_split(cols, bal, spl)
            except KeyCollision:
                labels = _split_objects(cfg, fn, bal, spl)
        except SplitError as exc:
            results[fn.value] = {"status": "skipped", "reason": str(exc), "n_trajectories": len(cols)}
            continue
        _write_labels(cfg, fn, labels, sdir / f"{fn.value}.jsonl")
        n_sel, n_test = int(np.sum(labels >= 0)), int(np.sum(labels == 1))
        results[fn.value] = {"status": "ok", "n_trajectories": len(cols), "n_selected": n_sel,
                             "n_train": n_sel - n_test, "n_test": n_test}
    atomic_write_text(sdir / "summary.json", json.dumps(results, sort_keys=True, indent=2) + "\n")
    return results


# --------------------------------------------------------------------------
# stats


def stage_stats(cfg: PipelineConfig, ex: Executor) -> dict:
    sdir = cfg.out / "stats"
    shutil.rmtree(sdir, ignore_errors=True)
    everything = DatasetStats(n_bins=cfg.stats_bins)
    counts = {}
    for fn in Functional:
        st = DatasetStats(n_bins=cfg.stats_bins)
        n = 0
        for traj in iter_exported_trajectories(cfg, fn):
            st.add(traj)
            n += 1
        if not n:
            continue
        st.write(sdir / fn.value)
        everything.merge(st)
        counts[fn.value] = n
    if counts:
        everything.write(sdir / "all")
    return {"trajectories": counts}


# --------------------------------------------------------------------------
# pes


def _exported_frames(cfg, functional):
    shards = [s for s in _exported(cfg) if s.functional == functional]
    allowed = frozenset(cfg.pes.elements)
    for line in iter_shard_lines(cfg.out, shards):
        fr = loads_frame(line)
        if fr.elements <= allowed:
            yield fr


def stage_pes(cfg: PipelineConfig, ex: Executor) -> dict:
    from .pes import PesConfig, PesError, load_reference_table, run_pes
    from .soap import SoapParams

    p = cfg.pes
    params = SoapParams(r_cut=p.r_cut, n_max=p.n_max, l_max=p.l_max, sigma=p.sigma)
    pcfg = PesConfig(elements=p.elements, soap=params, n_components=p.n_components,
                     max_fit_frames=p.max_fit_frames, overlay_trajectories=p.overlay_trajectories,
                     seed=cfg.seed)
    refs = load_reference_table(p.refs) if p.refs else None
    fit = list(_exported_frames(cfg, p.functional))
    proj = None if p.project_functional is None else list(_exported_frames(cfg, p.project_functional))

    def parallel_map(fn, frames):
        return ex.imap(fn, frames)

    try:
        res = run_pes(fit, cfg.out / "pes", pcfg, project_frames=proj, refs=refs,
                      fit_label=p.functional.value,
                      project_label=None if p.project_functional is None else p.project_functional.value,
                      map_fn=parallel_map, tmp_dir=cfg.work)
    except PesError as exc:
        raise StageFailure("pes", None, str(exc)) from exc
    return {"n_fit": res.n_fit, "n_projected": res.n_projected, "n_overlays": res.n_overlays,
            "rank_deficient": res.model.rank_deficient}


STAGE_FUNCS = {
    "fetch": stage_fetch,
    "transform": stage_transform,
    "filter": stage_filter,
    "export": stage_export,
    "split": stage_split,
    "stats": stage_stats,
    "pes": stage_pes,
}


# --------------------------------------------------------------------------
# run


def _conservation(summaries):
    out = {}
    fetch, tr, fl, exp = (summaries.get(s) for s in ("fetch", "transform", "filter", "export"))
    if fetch and tr:
        out["fetch_out == transform_in"] = fetch["records_total"] == tr["records_in"]
    if tr:
        out["transform_in == ok + rejected"] = tr["records_in"] == tr["records_ok"] + tr["records_rejected"]
    if tr and fl:
        out["transform_frames_out == filter_frames_in"] = tr["frames_out"] == fl["filter_stats"]["frames_in"]
    if fl:
        s = fl["filter_stats"]
        out["filter_in == out + dropped"] = s["frames_in"] == s["frames_out"] + sum(
            s[k] for k in ("frames_dropped_missing_targets", "frames_dropped_schema",
                           "frames_dropped_convergence", "frames_dropped_final_force"))
    if fl and exp:
        out["filter_out == exported"] = fl["filter_stats"]["frames_out"] == exp["frames_out"]
    return out


def run(cfg: PipelineConfig) -> RunReport:
    """Execute the configured stages in order, skipping those already done."""
    check_stage_dependencies(cfg)
    cfg.work.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    summaries = {}
    ex = Executor(cfg.workers, cfg.queue_depth)
    try:
        for stage in cfg.stages:
            summary = read_marker(cfg, stage)
            if summary is not None:
                report.stages.append(StageReport(stage, "resumed", 0.0, summary))
                summaries[stage] = summary
                log.info("stage %s already done", stage)
                continue
            _invalidate_from(cfg, stage)
            t0 = time.perf_counter()
            log.info("stage %s starting", stage)
            try:
                summary = STAGE_FUNCS[stage](cfg, ex)
            except StageFailure:
                raise
            except Exception as exc:
                raise StageFailure(stage, None, f"{type(exc).__name__}: {exc}") from exc
            _mark_done(cfg, stage, summary)
            _crash_point(stage)
            dt = time.perf_counter() - t0
            report.stages.append(StageReport(stage, "ran", dt, summary))
            summaries[stage] = summary
            log.info("stage %s done in %.2fs", stage, dt)
        ex.close()
    except BaseException:
        ex.terminate()
        raise
    for stage in ("filter", "export", "transform"):
        if stage not in summaries and stage_done(cfg, stage):
            summaries[stage] = read_marker(cfg, stage)
    if "filter" in summaries:
        report.filter_stats = summaries["filter"]["filter_stats"]
    if "export" in summaries:
        report.manifest_path = summaries["export"]["manifest"]
    if "transform" in summaries:
        report.reject_sink_path = summaries["transform"]["reject_sink"]
    report.conservation = _conservation(summaries)
    if not all(report.conservation.values()):
        bad = [k for k, v in report.conservation.items() if not v]
        raise StageFailure("report", None, f"conservation violated: {bad}")
    # wall times vary between runs, so the report lives with the scratch files
    atomic_write_text(cfg.work / "run_report.json", json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    return report
