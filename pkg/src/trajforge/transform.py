"""Source-native raw records -> unified Frames.

Field names of the raw payloads are looked up through per-source field maps
(dotted paths), so a new dump layout only needs a new map.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .schema import (
    Frame,
    Functional,
    SourceId,
    canonical_frame_id,
    canonical_trajectory_id,
    to_matrix,
)

FUNCTIONAL_ALIASES = {
    "pbe": Functional.PBE,
    "gga": Functional.PBE,
    "gga+u": Functional.PBE,
    "pbesol": Functional.PBESOL,
    "pbe_sol": Functional.PBESOL,
    "pbe-sol": Functional.PBESOL,
    "scan": Functional.SCAN,
    "r2scan": Functional.R2SCAN,
}

OQMD_STAGES = {
    "coarse relaxation": 1,
    "relaxation": 2,
    "fine relaxation": 3,
}

_STEP_FIELDS = {
    "structure": "structure",
    "energy": "energy",
    "forces": "forces",
    "stress": "stress",
    "lattice": "lattice",
    "species": "species",
    "positions": "positions",
    "frac_coords": "frac_coords",
}

DEFAULT_FIELD_MAPS = {
    SourceId.MP: {"record_id": "task_id", "deprecated": "deprecated",
                  "functional": "functional", "steps": "ionic_steps", **_STEP_FIELDS},
    SourceId.ALEXANDRIA: {"record_id": "entry_id", "functional": "functional",
                          "steps": "steps", **_STEP_FIELDS},
    SourceId.OQMD: {"record_id": "entry_id", "functional": "functional",
                    "calculations": "calculations", "label": "label",
                    "input": "input_structure", "output": "output_structure",
                    **_STEP_FIELDS},
}

# OQMD entries carry no functional tag in the minimal layout; OQMD is PBE-only.
OQMD_DEFAULT_FUNCTIONAL = "PBE"


class TransformError(ValueError):
    pass


class UnknownFunctional(TransformError):
    pass


class ParseFailure(TransformError):
    pass


class MissingTargets(TransformError):
    pass


_MISSING = object()


def get_path(obj, path, default=_MISSING):
    cur = obj
    for part in path.split("."):
        if isinstance(cur, dict) and part in cur:
            cur = cur[part]
        else:
            if default is _MISSING:
                raise ParseFailure(f"missing field {path!r}")
            return default
    return cur


def map_functional(tag) -> Functional:
    if isinstance(tag, str):
        f = FUNCTIONAL_ALIASES.get(tag.strip().lower())
        if f is not None:
            return f
    raise UnknownFunctional(f"unknown functional {tag!r}")


def field_map(source, overrides=None) -> dict:
    fm = dict(DEFAULT_FIELD_MAPS[SourceId(source)])
    if overrides:
        fm.update(overrides)
    return fm


def _matrix(value, what):
    try:
        return to_matrix(value)
    except (TypeError, ValueError) as exc:
        raise ParseFailure(f"{what}: not a numeric matrix") from exc


def _structure(obj, fm):
    """(lattice, species, cartesian positions) from a raw structure object."""
    lattice = _matrix(get_path(obj, fm["lattice"]), "lattice")
    species = get_path(obj, fm["species"])
    if not isinstance(species, list) or not all(isinstance(s, str) for s in species):
        raise ParseFailure("species must be a list of symbols")
    pos = get_path(obj, fm["positions"], None)
    if pos is not None:
        positions = _matrix(pos, "positions")
    else:
        frac = _matrix(get_path(obj, fm["frac_coords"]), "frac_coords")
        if len(lattice) != 3 or any(len(r) != 3 for r in lattice + frac):
            raise ParseFailure("frac_coords/lattice shape")
        positions = tuple(
            tuple(sum(f[k] * lattice[k][j] for k in range(3)) for j in range(3))
            for f in frac)
    return lattice, tuple(species), positions


def _energy(value, what="energy"):
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ParseFailure(f"{what} is not a number")
    return float(value)


def _opt_matrix(value, what):
    return None if value is None else _matrix(value, what)


def _frame(source, record_id, functional, rn, step, lattice, species, positions,
           energy=None, forces=None, stress=None):
    return Frame(
        frame_id=canonical_frame_id(source, record_id, rn, step),
        trajectory_id=canonical_trajectory_id(source, record_id),
        relaxation_step=step,
        relaxation_number=rn,
        lattice=lattice,
        species=species,
        positions=positions,
        energy=energy,
        forces=forces,
        stress=stress,
        functional=functional,
        source=source,
        source_record_id=record_id,
    )


def _record_id(raw, fm):
    rid = get_path(raw, fm["record_id"])
    if not isinstance(rid, (str, int)) or isinstance(rid, bool) or rid == "":
        raise ParseFailure("record id must be a non-empty string")
    return str(rid)


def _steps_to_frames(raw, source, fm, rn=1):
    record_id = _record_id(raw, fm)
    functional = map_functional(get_path(raw, fm["functional"]))
    steps = get_path(raw, fm["steps"])
    if not isinstance(steps, list):
        raise ParseFailure("steps must be a list")
    frames = []
    for i, step in enumerate(steps):
        if not isinstance(step, dict):
            raise ParseFailure(f"step {i} is not an object")
        lattice, species, positions = _structure(get_path(step, fm["structure"]), fm)
        frames.append(_frame(
            source, record_id, functional, rn, i, lattice, species, positions,
            energy=_energy(get_path(step, fm["energy"], None)),
            forces=_opt_matrix(get_path(step, fm["forces"], None), "forces"),
            stress=_opt_matrix(get_path(step, fm["stress"], None), "stress"),
        ))
    return frames


def transform_mp(raw: dict, fm=None) -> list:
    """Materials Project task: one frame per ionic step; deprecated tasks dropped."""
    fm = fm or DEFAULT_FIELD_MAPS[SourceId.MP]
    deprecated = get_path(raw, fm["deprecated"], False)
    if not isinstance(deprecated, bool):
        raise ParseFailure("deprecated must be a boolean")
    if deprecated:
        return []
    return _steps_to_frames(raw, SourceId.MP, fm)


def transform_alexandria(raw: dict, fm=None) -> list:
    """Alexandria entry: one frame per step; entries containing Yb dropped."""
    fm = fm or DEFAULT_FIELD_MAPS[SourceId.ALEXANDRIA]
    steps = get_path(raw, fm["steps"])
    if not isinstance(steps, list) or not steps:
        raise ParseFailure("Alexandria entry must have at least one step")
    frames = _steps_to_frames(raw, SourceId.ALEXANDRIA, fm)
    if any("Yb" in fr.species for fr in frames):
        return []
    return frames


def _oqmd_targets(obj, n_atoms, fm):
    energy = get_path(obj, fm["energy"], None)
    forces = get_path(obj, fm["forces"], None)
    if isinstance(energy, bool) or not isinstance(energy, (int, float)) \
            or not math.isfinite(energy):
        raise MissingTargets("energy missing or malformed")
    try:
        forces = to_matrix(forces)
    except (TypeError, ValueError):
        raise MissingTargets("forces missing or malformed") from None
    if len(forces) != n_atoms or any(len(r) != 3 for r in forces):
        raise MissingTargets("forces shape does not match species")
    return float(energy), forces


def transform_oqmd(raw: dict, fm=None) -> list:
    """OQMD entry: input (step 0) and output (step 1) structure per relaxation stage.

    Stage -> relaxation_number is fixed (coarse 1, plain 2, fine 3); absent
    stages are skipped without renumbering. A calculation whose structures do
    not both carry well-formed energy and forces contributes nothing.
    """
    fm = fm or DEFAULT_FIELD_MAPS[SourceId.OQMD]
    record_id = _record_id(raw, fm)
    functional = map_functional(get_path(raw, fm["functional"], OQMD_DEFAULT_FUNCTIONAL))
    calcs = get_path(raw, fm["calculations"])
    if not isinstance(calcs, list):
        raise ParseFailure("calculations must be a list")
    seen = set()
    frames = []
    for calc in calcs:
        if not isinstance(calc, dict):
            raise ParseFailure("calculation is not an object")
        label = get_path(calc, fm["label"])
        if label not in OQMD_STAGES:
            raise ParseFailure(f"unknown calculation label {label!r}")
        if label in seen:
            raise ParseFailure(f"duplicate calculation label {label!r}")
        seen.add(label)
        rn = OQMD_STAGES[label]
        structures = [get_path(calc, fm["input"]), get_path(calc, fm["output"])]
        parsed = [_structure(s, fm) for s in structures]
        try:
            targets = [_oqmd_targets(s, len(p[1]), fm) for s, p in zip(structures, parsed)]
        except MissingTargets:
            continue
        for step, ((lattice, species, positions), (energy, forces), s) in enumerate(
                zip(parsed, targets, structures)):
            frames.append(_frame(
                SourceId.OQMD, record_id, functional, rn, step, lattice, species, positions,
                energy=energy, forces=forces,
                stress=_opt_matrix(get_path(s, fm["stress"], None), "stress"),
            ))
    frames.sort(key=lambda f: (f.relaxation_number, f.relaxation_step))
    return frames


TRANSFORMERS = {
    SourceId.MP: transform_mp,
    SourceId.ALEXANDRIA: transform_alexandria,
    SourceId.OQMD: transform_oqmd,
}

EXCERPT_BYTES = 256


def reject_entry(source, offset, reason, payload: bytes) -> dict:
    excerpt = payload[:EXCERPT_BYTES].decode("utf-8", errors="ignore")
    return {"source": SourceId(source).value, "offset": list(offset),
            "reason": reason, "payload_excerpt": excerpt}


@dataclass
class RejectSink:
    """Collects rejected records; ``write`` emits them as JSONL."""

    entries: list = field(default_factory=list)

    def reject(self, raw, reason):
        self.entries.append(reject_entry(raw.source, raw.offset, reason, raw.payload))

    def __len__(self):
        return len(self.entries)

    def lines(self):
        for e in self.entries:
            yield json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n"

    def write(self, path, mode="w"):
        with open(path, mode, encoding="utf-8") as fh:
            fh.writelines(self.lines())


@dataclass
class TransformStats:
    records_in: int = 0
    records_rejected: int = 0
    records_ok: int = 0
    frames_out: int = 0

    def merge(self, other):
        self.records_in += other.records_in
        self.records_rejected += other.records_rejected
        self.records_ok += other.records_ok
        self.frames_out += other.frames_out
        return self


def dispatch(raw, sink: RejectSink, field_maps=None, stats: TransformStats = None) -> list:
    """Route one RawRecord to its source transformer.

    Unparseable records and unknown functionals go to ``sink``; the run
    continues.
    """
    if stats is not None:
        stats.records_in += 1
    try:
        source = SourceId(raw.source)
        try:
            payload = json.loads(raw.payload)
        except (ValueError, UnicodeDecodeError) as exc:
            raise ParseFailure(f"invalid JSON: {exc}") from exc
        if not isinstance(payload, dict):
            raise ParseFailure("payload is not a JSON object")
        fm = (field_maps or {}).get(source) or DEFAULT_FIELD_MAPS[source]
        frames = TRANSFORMERS[source](payload, fm)
    except UnknownFunctional as exc:
        sink.reject(raw, f"UnknownFunctional: {exc}")
        frames = None
    except (TransformError, ValueError, TypeError, KeyError) as exc:
        sink.reject(raw, f"ParseFailure: {exc}")
        frames = None
    if frames is None:
        if stats is not None:
            stats.records_rejected += 1
        return []
    if stats is not None:
        stats.records_ok += 1
        stats.frames_out += len(frames)
    return frames
