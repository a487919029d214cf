import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from trajforge.cli import main
from trajforge.pipeline import (
    CRASH_EXIT_CODE,
    ConfigInvalid,
    StageFailure,
    config_from_dict,
    run,
    validate_config,
)
from trajforge.schema import SourceId
from trajforge.synthetic import fixture_config, fixture_corpus

ALL_STAGES = ["fetch", "transform", "filter", "export", "split", "stats"]


def output_tree(out):
    """Every output file except scratch state, as {relative path: bytes}."""
    out = Path(out)
    return {str(p.relative_to(out)): p.read_bytes()
            for p in sorted(out.rglob("*")) if p.is_file() and p.relative_to(out).parts[0] != "work"}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return fixture_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="module")
def golden(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("golden")
    run(config_from_dict(fixture_config(corpus, out)))
    return output_tree(out)


def write_config(path, corpus, out, **extra):
    path.write_text(json.dumps(fixture_config(corpus, out, **extra)))
    return path


def test_empty_config_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("TRAJFORGE_OUT", raising=False)
    p = tmp_path / "c.json"
    p.write_text("")
    cfg = validate_config(p)
    assert cfg.filter.energy_convergence_threshold == 0.02
    assert cfg.filter.final_force_threshold == 0.2
    assert cfg.split.test_fraction == 0.2
    assert cfg.split.source_balance == {SourceId.MP: 0.1, SourceId.OQMD: 0.1, SourceId.ALEXANDRIA: 0.8}
    assert cfg.workers == 1 and cfg.sources == ()
    assert cfg.out_dir == str((tmp_path / "out").resolve())


@pytest.mark.parametrize("raw, field", [
    ({"filter": {"final_force_threshold": -0.1}}, "filter.final_force_threshold"),
    ({"filter": {"energy_convergence_threshold": 0}}, "filter.energy_convergence_threshold"),
    ({"workers": 0}, "workers"),
    ({"stages": ["transform", "fetch"]}, "stages"),
    ({"stages": ["bogus"]}, "stages[0]"),
    ({"sources": [{"source": "NOMAD", "location": "x"}]}, "sources[0].source"),
    ({"split": {"source_balance": {"OQMD": 0.5}}}, "split.source_balance"),
    ({"pes": {"elements": ["Xx"]}}, "pes.elements"),
    ({"typo": 1}, "typo"),
])
def test_config_invalid_field_paths(raw, field, tmp_path):
    with pytest.raises(ConfigInvalid) as err:
        config_from_dict(raw, base_dir=tmp_path)
    assert err.value.path == field


def test_stage_dependency_rule(tmp_path):
    with pytest.raises(ConfigInvalid) as err:
        config_from_dict({"stages": ["export"], "out_dir": str(tmp_path / "o")})
    assert "filter" in str(err.value)


def test_env_overrides_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("TRAJFORGE_OUT", str(tmp_path / "elsewhere"))
    cfg = config_from_dict({"out_dir": "ignored"}, base_dir=tmp_path)
    assert cfg.out_dir == str(tmp_path / "elsewhere")


def test_fixture_counts_and_conservation(corpus, tmp_path):
    report = run(config_from_dict(fixture_config(corpus, tmp_path)))
    assert all(report.conservation.values())
    tr = report.stage("transform").summary
    assert (tr["records_in"], tr["records_rejected"]) == (22, 2)
    rejects = [json.loads(l) for l in open(report.reject_sink_path)]
    assert {r["reason"].split(":")[0] for r in rejects} == {"UnknownFunctional", "ParseFailure"}
    assert report.filter_stats["frames_out"] == 58


@pytest.mark.parametrize("workers", [4, 8])
def test_worker_count_does_not_change_output(corpus, golden, tmp_path, workers):
    run(config_from_dict(fixture_config(corpus, tmp_path, workers=workers)))
    assert output_tree(tmp_path) == golden


def test_seed_changes_partitioning_not_export(corpus, golden, tmp_path):
    run(config_from_dict(fixture_config(corpus, tmp_path, seed=12345)))
    got = output_tree(tmp_path)
    for k in golden:
        if k.startswith("splits/") or k.startswith("stats/"):
            continue
        assert got[k] == golden[k], k


def test_stats_only_run_is_read_only(corpus, tmp_path):
    run(config_from_dict(fixture_config(corpus, tmp_path)))
    shards = {k: v for k, v in output_tree(tmp_path).items() if "shard-" in k or k == "manifest.json"}
    # a changed bin count forces the stage to recompute rather than resume
    report = run(config_from_dict(fixture_config(corpus, tmp_path, stages=["stats"], stats_bins=7)))
    assert [s.status for s in report.stages] == ["ran"]
    after = output_tree(tmp_path)
    assert {k: after[k] for k in shards} == shards


def test_rerun_resumes_all_stages(corpus, tmp_path):
    cfg = config_from_dict(fixture_config(corpus, tmp_path))
    run(cfg)
    report = run(cfg)
    assert [s.status for s in report.stages] == ["resumed"] * len(ALL_STAGES)


def test_changed_threshold_reruns_filter(corpus, tmp_path):
    run(config_from_dict(fixture_config(corpus, tmp_path)))
    report = run(config_from_dict(fixture_config(
        corpus, tmp_path, filter={"energy_convergence_threshold": 0.5})))
    assert [s.status for s in report.stages] == ["resumed", "resumed"] + ["ran"] * 4
    assert report.filter_stats["trajectories_dropped_convergence"] == 0


def test_reject_rate_abort(corpus, tmp_path):
    cfg = config_from_dict(fixture_config(corpus, tmp_path, max_reject_rate=0.01))
    with pytest.raises(StageFailure) as err:
        run(cfg)
    assert err.value.stage == "transform" and "reject rate" in str(err.value)


def test_cli_exit_codes(corpus, tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"filter": {"final_force_threshold": -1}}))
    assert main(["run", "-c", str(bad)]) == 2
    strict = write_config(tmp_path / "strict.json", corpus, tmp_path / "o1", max_reject_rate=0.0)
    assert main(["run", "-c", str(strict)]) == 3
    ok = write_config(tmp_path / "ok.json", corpus, tmp_path / "o2")
    assert main(["run", "-c", str(ok), "--workers", "2"]) == 0
    assert (tmp_path / "o2" / "manifest.json").exists()
    assert main(["validate", "-c", str(ok)]) == 0
    capsys.readouterr()


def test_cli_pes_stage(corpus, tmp_path):
    cfg = write_config(tmp_path / "c.json", corpus, tmp_path / "o")
    assert main(["run", "-c", str(cfg)]) == 0
    assert main(["pes", "-c", str(cfg), "--elements", "Fe,Cu,Al,Ni", "--rcut", "4.0", "--nmax", "3",
                 "--lmax", "2", "--sigma", "0.5", "--refs",
                 str(Path(__file__).parents[1] / "src/trajforge/data/fixture_references.json")]) == 0
    pes = tmp_path / "o" / "pes"
    assert {p.name for p in pes.iterdir()} == {"points.csv", "trajectories.csv", "model.json"}
    model = json.loads((pes / "model.json").read_text())
    assert model["soap"]["r_cut"] == 4.0 and model["fit_input"] == "PBE"


def _cli(cfg_path, env_extra=None):
    env = {**os.environ, **(env_extra or {})}
    env.pop("TRAJFORGE_OUT", None)
    return subprocess.run([sys.executable, "-m", "trajforge", "run", "-c", str(cfg_path)],
                          env=env, capture_output=True, text=True)


CRASH_POINTS = ["fetch:2", "fetch", "transform:3", "transform", "filter:2", "filter",
                "export:1", "export", "split", "stats"]


def crash_and_resume(corpus, tmp_path, point, workers=1):
    cfg = write_config(tmp_path / "c.json", corpus, tmp_path / "out", workers=workers)
    crashed = _cli(cfg, {"TRAJFORGE_CRASH_AFTER": point})
    assert crashed.returncode == CRASH_EXIT_CODE, crashed.stderr
    resumed = _cli(cfg)
    assert resumed.returncode == 0, resumed.stderr
    return output_tree(tmp_path / "out")


@pytest.mark.parametrize("point", CRASH_POINTS)
def test_crash_resume_byte_identical(corpus, golden, tmp_path, point):
    assert crash_and_resume(corpus, tmp_path, point) == golden


def test_split_hash_tie_falls_back_to_same_output(corpus, golden, tmp_path, monkeypatch):
    import trajforge.pipeline as pl
    from trajforge.splits import KeyCollision

    def tie(*a, **k):
        raise KeyCollision("forced")
    monkeypatch.setattr(pl, "columnar_split", tie)
    run(config_from_dict(fixture_config(corpus, tmp_path)))
    got = output_tree(tmp_path)
    assert {k: v for k, v in got.items() if k.startswith("splits/")} == \
        {k: v for k, v in golden.items() if k.startswith("splits/")}
