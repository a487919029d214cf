"""Synthetic raw snapshots in each source's native layout.

``fixture_corpus`` writes a small hand-specified corpus covering the seven
populated (functional, source) cells with planted rejects and filter
drops; ``scale_corpus`` streams an arbitrarily large corpus for memory and
throughput runs.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from .schema import SOURCE_SLUG, SourceId

# trajectory kinds
OK = "ok"
NOT_CONVERGED = "not_converged"     # last energy step 0.05 eV > 0.02
HIGH_FORCE = "high_force"           # final max force 0.5 eV/Å > 0.2
MISSING_ENERGY = "missing_energy"   # one interior frame lacks its energy
DEPRECATED = "deprecated"           # MP task flagged deprecated
UNKNOWN_FUNCTIONAL = "unknown_functional"


def energies(n, kind=OK, e_final=-10.0):
    """Strictly decreasing energies whose last step is 0.01 eV (0.05 when not converged)."""
    last = 0.05 if kind == NOT_CONVERGED else 0.01
    if n == 1:
        return [e_final]
    return [e_final + last + 0.3 * (n - 2 - t) for t in range(n - 1)] + [e_final]


def force_sizes(n, kind=OK):
    final = 0.5 if kind == HIGH_FORCE else 0.05
    return [1.0 * 0.5 ** t + 0.1 for t in range(n - 1)] + [final]


def structure(species, rng, scale=1.0):
    """Atoms on a jittered simple-cubic grid inside a cubic cell (no overlaps)."""
    n = len(species)
    per_side = 1
    while per_side ** 3 < n:
        per_side += 1
    a = 2.4 * per_side * scale
    sites = [(i, j, k) for i in range(per_side) for j in range(per_side) for k in range(per_side)][:n]
    step = a / per_side
    pos = [[round((c + 0.5) * step + rng.uniform(-0.2, 0.2), 6) for c in site] for site in sites]
    return {"lattice": [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]], "species": list(species),
            "positions": pos}


def _forces(n_atoms, size, rng):
    rows = []
    for i in range(n_atoms):
        # the first atom carries the maximum norm exactly
        if i == 0:
            rows.append([0.0, 0.0, size])
        else:
            rows.append([round(rng.uniform(-1, 1) * size / 2, 6) for _ in range(3)])
    return rows


def _steps(species, n, kind, rng, e_final=-10.0):
    es = energies(n, kind, e_final * len(species) / 2)
    fs = force_sizes(n, kind)
    base = structure(species, rng)
    steps = []
    for t in range(n):
        s = {"lattice": base["lattice"], "species": base["species"],
             "positions": [[round(c * (1 - 0.002 * t), 6) for c in row] for row in base["positions"]]}
        steps.append({"structure": s, "energy": es[t], "forces": _forces(len(species), fs[t], rng)})
    if kind == MISSING_ENERGY and n >= 3:
        steps[n // 2]["energy"] = None
    return steps


def mp_record(rid, functional, species, n, kind=OK, rng=None):
    rng = rng or random.Random(rid)
    tag = "HSE06" if kind == UNKNOWN_FUNCTIONAL else functional
    return {"task_id": rid, "functional": tag, "deprecated": kind == DEPRECATED,
            "ionic_steps": _steps(species, n, kind, rng)}


def alexandria_record(rid, functional, species, n, kind=OK, rng=None):
    rng = rng or random.Random(rid)
    return {"entry_id": rid, "functional": functional, "steps": _steps(species, n, kind, rng)}


OQMD_LABELS = {1: "coarse relaxation", 2: "relaxation", 3: "fine relaxation"}


def oqmd_record(rid, species, stages, kind=OK, rng=None, broken_stage=None):
    """One calculation per stage; ``broken_stage`` loses its output energy."""
    rng = rng or random.Random(rid)
    steps = _steps(species, 2 * len(stages), kind, rng)
    calcs = []
    for i, rn in enumerate(stages):
        inp, out = steps[2 * i], steps[2 * i + 1]
        calc = {"label": OQMD_LABELS[rn],
                "input_structure": {**inp["structure"], "energy": inp["energy"], "forces": inp["forces"]},
                "output_structure": {**out["structure"], "energy": out["energy"], "forces": out["forces"]}}
        if rn == broken_stage:
            calc["output_structure"]["energy"] = None
        calcs.append(calc)
    return {"entry_id": rid, "calculations": calcs}


# --------------------------------------------------------------------------
# fixture corpus

@dataclass(frozen=True)
class FixtureEntry:
    source: SourceId
    record_id: str
    functional: str
    species: tuple
    n: int              # steps (MP/Alexandria) or unused (OQMD)
    kind: str = OK
    stages: tuple = ()
    broken_stage: int | None = None


MP, AX, OQ = SourceId.MP, SourceId.ALEXANDRIA, SourceId.OQMD

FIXTURE = (
    FixtureEntry(MP, "mp-1", "PBE", ("Fe", "Cu"), 5),
    FixtureEntry(MP, "mp-2", "PBE", ("Al", "Ni"), 4),
    FixtureEntry(MP, "mp-3", "PBE", ("Fe", "Ni"), 3, NOT_CONVERGED),
    FixtureEntry(MP, "mp-4", "PBE", ("Cu", "O"), 3, DEPRECATED),
    FixtureEntry(MP, "mp-5", "PBE", ("Fe", "Al", "Cu"), 6, MISSING_ENERGY),
    FixtureEntry(MP, "mp-6", "GGA+U", ("Fe", "O"), 3),
    FixtureEntry(MP, "mp-11", "PBEsol", ("Cu", "Ni"), 4),
    FixtureEntry(MP, "mp-12", "PBE_sol", ("Si", "O"), 2),
    FixtureEntry(MP, "mp-13", "PBEsol", ("Fe", "Cu"), 3, HIGH_FORCE),
    FixtureEntry(MP, "mp-21", "SCAN", ("Mg", "O"), 3),
    FixtureEntry(MP, "mp-22", "SCAN", ("Al",), 1),
    FixtureEntry(MP, "mp-31", "r2SCAN", ("Fe", "Cu", "Ni"), 5),
    FixtureEntry(MP, "mp-32", "r2SCAN", ("Li", "O"), 2, UNKNOWN_FUNCTIONAL),
    FixtureEntry(AX, "agm-1", "PBE", ("Fe", "Ni"), 4),
    FixtureEntry(AX, "agm-2", "PBE", ("Yb", "Cu"), 3),
    FixtureEntry(AX, "agm-3", "PBE", ("Al", "Cu", "Ni"), 7),
    FixtureEntry(AX, "agm-11", "PBEsol", ("Fe", "Al"), 3),
    FixtureEntry(AX, "agm-12", "PBEsol", ("Ni",), 2),
    FixtureEntry(OQ, "oqmd-1", "PBE", ("Fe", "Cu"), 0, stages=(1, 3)),
    FixtureEntry(OQ, "oqmd-2", "PBE", ("Al", "Fe", "Ni"), 0, stages=(1, 2, 3)),
    FixtureEntry(OQ, "oqmd-3", "PBE", ("Cu", "Al"), 0, stages=(1, 2), broken_stage=2),
)

# one undecodable line per source file at this position
FIXTURE_BAD_LINE = "{not json"


def fixture_record(e: FixtureEntry) -> dict:
    if e.source == MP:
        return mp_record(e.record_id, e.functional, e.species, e.n, e.kind)
    if e.source == AX:
        return alexandria_record(e.record_id, e.functional, e.species, e.n, e.kind)
    return oqmd_record(e.record_id, e.species, e.stages, e.kind, broken_stage=e.broken_stage)


def fixture_corpus(root, bad_lines=(SourceId.ALEXANDRIA,)) -> dict:
    """Write the fixture snapshots; returns {source: directory}.

    Records are spread over two files per source so that file boundaries
    are exercised.
    """
    root = Path(root)
    dirs = {}
    for src in SourceId:
        entries = [e for e in FIXTURE if e.source == src]
        d = root / SOURCE_SLUG[src]
        d.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(fixture_record(e)) for e in entries]
        if src in bad_lines:
            lines.insert(1, FIXTURE_BAD_LINE)
        half = (len(lines) + 1) // 2
        (d / "part-000.jsonl").write_text("".join(l + "\n" for l in lines[:half]))
        (d / "part-001.jsonl").write_text("".join(l + "\n" for l in lines[half:]))
        dirs[src] = d
    return dirs


def fixture_config(corpus_dirs, out_dir, **extra) -> dict:
    cfg = {
        "sources": [{"source": s.value, "location": str(d), "batch_size": 3}
                    for s, d in corpus_dirs.items()],
        "out_dir": str(out_dir),
        "max_frames_per_shard": 4,
        "max_reject_rate": 0.2,
        "n_partitions": 4,
        "created_at": "2020-01-01T00:00:00Z",
    }
    cfg.update(extra)
    return cfg


# --------------------------------------------------------------------------
# scale corpus

SCALE_ELEMENTS = ("Fe", "Cu", "Al", "Ni", "O", "Si", "Mg", "Ti", "Co", "Zn")


def scale_corpus(root, n_frames, frames_per_trajectory=10, atoms=8, seed=0,
                 records_per_file=5000) -> dict:
    """Stream about ``n_frames`` frames of well-formed trajectories to disk.

    Sources rotate MP / Alexandria / OQMD (OQMD entries hold 3 stages x 2
    frames). Returns {"frames": written, "trajectories": n, "dirs": {...}}.
    """
    root = Path(root)
    rng = random.Random(seed)
    dirs = {s: root / SOURCE_SLUG[s] for s in SourceId}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    handles, counts = {}, {s: 0 for s in SourceId}
    written = n_traj = 0
    try:
        while written < n_frames:
            src = (MP, AX, OQ)[n_traj % 3]
            k = counts[src] // records_per_file
            fh = handles.get(src)
            if fh is None or fh.name != str(dirs[src] / f"part-{k:05d}.jsonl"):
                if fh is not None:
                    fh.close()
                fh = handles[src] = open(dirs[src] / f"part-{k:05d}.jsonl", "w")
            species = tuple(rng.choice(SCALE_ELEMENTS) for _ in range(atoms))
            rid = f"s{n_traj}"
            if src == OQ:
                rec = oqmd_record(rid, species, (1, 2, 3), rng=rng)
                n = 6
            else:
                n = frames_per_trajectory
                maker = mp_record if src == MP else alexandria_record
                rec = maker(rid, "PBE", species, n, rng=rng)
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
            counts[src] += 1
            written += n
            n_traj += 1
    finally:
        for fh in handles.values():
            fh.close()
    return {"frames": written, "trajectories": n_traj, "dirs": dirs}
