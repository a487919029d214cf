import json
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_frame
from trajforge.curate import FilterConfig, FilterStats
from trajforge.export import (
    CountMismatch,
    DuplicateConflict,
    build_manifest,
    iter_shard_frames,
    line_ids,
    manifest_bytes,
    read_parquet_frames,
    write_cell,
    write_shards,
)
from trajforge.extsort import external_sort
from trajforge.schema import Functional, SourceId, dumps_frame, loads_frame


@settings(max_examples=40, deadline=None)
@given(st.lists(st.text(alphabet="abcxyz:%", max_size=5), max_size=60), st.integers(1, 7))
def test_external_sort_matches_sorted(words, chunk):
    lines = [w + "\n" for w in words]
    assert list(external_sort(lines, key=lambda s: s[:2], chunk_size=chunk)) == \
        sorted(lines, key=lambda s: (s[:2], s))


def test_line_ids_fast_path_and_fallback():
    fr = make_frame(record='we"ird:id')
    line = dumps_frame(fr)
    assert line_ids(line) == (fr.frame_id, fr.trajectory_id)
    reordered = json.dumps({"trajectory_id": "t", "frame_id": "f"})
    assert line_ids(reordered) == ("f", "t")


def five_frames():
    return [make_frame(record="t", step=s) for s in range(5)]


def test_shard_sizes(tmp_path):
    shards = write_shards(five_frames(), tmp_path, 2)
    assert [s.frame_count for s in shards] == [2, 2, 1]
    assert [s.path for s in shards] == [f"PBE/MaterialsProject/shard-0000{i}.jsonl" for i in range(3)]
    assert sum(s.byte_count for s in shards) == sum(
        (tmp_path / s.path).stat().st_size for s in shards)


def test_frames_sorted_by_frame_id(tmp_path):
    frames = [make_frame(record=f"r{i % 7}", step=i) for i in range(40)]
    random.Random(1).shuffle(frames)
    shards = write_shards(frames, tmp_path, 6)
    ids = [f.frame_id for f in iter_shard_frames(tmp_path, shards)]
    assert ids == sorted(f.frame_id for f in frames)


def test_byte_identical_duplicates_collapse(tmp_path):
    fr = make_frame()
    shards = write_shards([fr, fr], tmp_path, 10)
    assert [s.frame_count for s in shards] == [1]


def test_conflicting_duplicates_fail(tmp_path):
    with pytest.raises(DuplicateConflict):
        write_shards([make_frame(energy=-1.0), make_frame(energy=-2.0)], tmp_path, 10)


def test_order_and_chunking_independent(tmp_path):
    frames = [make_frame(record=f"r{i % 13}", step=i,
                         functional=[Functional.PBE, Functional.SCAN][i % 2],
                         source=[SourceId.MP, SourceId.OQMD][i % 3 % 2])
              for i in range(120)]
    a = write_shards(frames, tmp_path / "a", 17)
    rev = frames[::-1]
    b = write_shards([dumps_frame(f) for f in rev], tmp_path / "b", 17, chunk_size=7)
    assert a == b


def test_round_trip_and_idempotence(tmp_path):
    frames = [make_frame(record=f"r{i}", step=i % 3, energy=e)
              for i, e in enumerate([0.1, 5e-324, 2.0 ** 60, -1 / 3, 1e-310])]
    shards = write_shards(frames, tmp_path / "x", 2)
    back = list(iter_shard_frames(tmp_path / "x", shards))
    assert back == sorted(frames, key=lambda f: f.frame_id)
    again = write_shards(back, tmp_path / "x", 2)
    assert again == shards


def test_rewrite_removes_stale_shards(tmp_path):
    write_shards(five_frames(), tmp_path, 1)
    shards = write_shards(five_frames()[:2], tmp_path, 1)
    files = sorted(p.name for p in (tmp_path / "PBE" / "MaterialsProject").iterdir())
    assert files == ["shard-00000.jsonl", "shard-00001.jsonl"] and len(shards) == 2


def test_manifest_counts(tmp_path):
    frames = []
    for t, n in enumerate([3, 2, 2]):
        frames += [make_frame(record=f"p{t}", step=s) for s in range(n)]
    frames += [make_frame(record="s0", step=s, functional=Functional.SCAN) for s in range(2)]
    shards = write_shards(frames, tmp_path, 4)
    m = build_manifest(shards, out_dir=tmp_path, filter_config=FilterConfig())
    assert m["cells"] == [
        {"functional": "PBE", "source": "MaterialsProject", "n_trajectories": 3, "n_frames": 7},
        {"functional": "SCAN", "source": "MaterialsProject", "n_trajectories": 1, "n_frames": 2},
    ]
    assert m["schema_version"] == "1.0"
    assert sum(c["n_frames"] for c in m["cells"]) == sum(s["frame_count"] for s in m["shards"])
    again = build_manifest(write_shards(frames[::-1], tmp_path, 4), out_dir=tmp_path,
                           filter_config=FilterConfig())
    assert manifest_bytes(again) == manifest_bytes(m)


def test_manifest_empty(tmp_path):
    shards = write_shards([], tmp_path, 4)
    m = build_manifest(shards, out_dir=tmp_path)
    assert m["cells"] == [] and m["shards"] == []


def test_manifest_count_mismatch(tmp_path):
    shards = write_shards(five_frames(), tmp_path, 10)
    with pytest.raises(CountMismatch):
        build_manifest(shards, FilterStats(frames_out=4), out_dir=tmp_path)
    with pytest.raises(CountMismatch):
        build_manifest(shards, frames_index={(Functional.PBE, SourceId.MP): 6}, out_dir=tmp_path)
    (tmp_path / shards[0].path).write_text("")
    with pytest.raises(CountMismatch):
        build_manifest(shards, out_dir=tmp_path)


def test_parquet_mirror(tmp_path):
    frames = [make_frame(record="t", step=s, energy=None if s == 1 else -1.0 * s) for s in range(3)]
    shards = write_shards(frames, tmp_path, 2, columnar=True)
    pq_frames = []
    for sh in shards:
        pq_frames += list(read_parquet_frames(tmp_path / sh.path.replace(".jsonl", ".parquet")))
    assert pq_frames == list(iter_shard_frames(tmp_path, shards))


def test_write_cell_rejects_bad_shard_size(tmp_path):
    with pytest.raises(ValueError):
        write_cell([], tmp_path, Functional.PBE, SourceId.MP, 0)
