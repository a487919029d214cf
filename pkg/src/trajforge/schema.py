"""Unified trajectory-frame data model.

Each record is one atomic configuration; optimization trajectories are
recovered by grouping frames on ``trajectory_id`` and ordering them by
``(relaxation_number, relaxation_step)``.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

from .elements import ATOMIC_NUMBER, is_element

Matrix = tuple  # tuple of row tuples of float


class Functional(str, Enum):
    PBE = "PBE"
    PBESOL = "PBESol"
    SCAN = "SCAN"
    R2SCAN = "r2SCAN"


class SourceId(str, Enum):
    MP = "MaterialsProject"
    ALEXANDRIA = "Alexandria"
    OQMD = "OQMD"


SOURCE_SLUG = {
    SourceId.MP: "mp",
    SourceId.ALEXANDRIA: "alexandria",
    SourceId.OQMD: "oqmd",
}


class SchemaError(ValueError):
    """A record cannot be turned into a Frame at all."""


class TrajectoryError(ValueError):
    pass


class CompositionMismatch(TrajectoryError):
    pass


class MixedProvenance(TrajectoryError):
    pass


class DuplicateKey(TrajectoryError):
    pass


def _escape(text: str) -> str:
    return text.replace("%", "%25").replace(":", "%3A")


def canonical_trajectory_id(source: SourceId, source_record_id: str) -> str:
    return f"{SOURCE_SLUG[SourceId(source)]}:{_escape(source_record_id)}"


def canonical_frame_id(source: SourceId, source_record_id: str,
                       relaxation_number: int, relaxation_step: int) -> str:
    """Colon-joined ``slug:record:number:step`` key.

    ``%`` and ``:`` inside the record id are percent-escaped, which keeps the
    mapping injective and makes every frame id start with its trajectory id
    followed by a colon.
    """
    return (f"{canonical_trajectory_id(source, source_record_id)}"
            f":{int(relaxation_number)}:{int(relaxation_step)}")


@dataclass(frozen=True, kw_only=True)
class Frame:
    frame_id: str
    trajectory_id: str
    relaxation_step: int
    relaxation_number: int
    lattice: Matrix
    species: tuple
    positions: Matrix
    energy: Optional[float] = None
    forces: Optional[Matrix] = None
    stress: Optional[Matrix] = None
    functional: Functional
    source: SourceId
    source_record_id: str

    @property
    def n_atoms(self) -> int:
        return len(self.species)

    @property
    def key(self) -> tuple:
        return (self.trajectory_id, self.relaxation_number, self.relaxation_step)

    @property
    def composition(self) -> tuple:
        return composition_of(self.species)

    @property
    def elements(self) -> frozenset:
        return frozenset(self.species)

    @property
    def formula(self) -> str:
        return "".join(s if n == 1 else f"{s}{n}" for s, n in self.composition)

    def fractional_positions(self):
        import numpy as np

        return np.linalg.solve(np.asarray(self.lattice).T,
                               np.asarray(self.positions).T).T

    def to_dict(self) -> dict:
        d = {
            "frame_id": self.frame_id,
            "trajectory_id": self.trajectory_id,
            "relaxation_step": self.relaxation_step,
            "relaxation_number": self.relaxation_number,
            "lattice": self.lattice,
            "species": self.species,
            "positions": self.positions,
        }
        if self.energy is not None:
            d["energy"] = self.energy
        if self.forces is not None:
            d["forces"] = self.forces
        if self.stress is not None:
            d["stress"] = self.stress
        d["functional"] = self.functional.value
        d["source"] = self.source.value
        d["source_record_id"] = self.source_record_id
        return d

    def to_json(self) -> str:
        return dumps_frame(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Frame":
        try:
            forces = d.get("forces")
            stress = d.get("stress")
            energy = d.get("energy")
            return cls(
                frame_id=str(d["frame_id"]),
                trajectory_id=str(d["trajectory_id"]),
                relaxation_step=_as_int(d["relaxation_step"]),
                relaxation_number=_as_int(d["relaxation_number"]),
                lattice=to_matrix(d["lattice"]),
                species=tuple(str(s) for s in d["species"]),
                positions=to_matrix(d["positions"]),
                energy=None if energy is None else float(energy),
                forces=None if forces is None else to_matrix(forces),
                stress=None if stress is None else to_matrix(stress),
                functional=Functional(d["functional"]),
                source=SourceId(d["source"]),
                source_record_id=str(d["source_record_id"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"unparseable frame: {exc!r}") from exc


def _as_int(value) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected integer, got {value!r}")
    if isinstance(value, float) and not value.is_integer():
        raise ValueError(f"expected integer, got {value!r}")
    return int(value)


def to_matrix(rows) -> Matrix:
    """Nested sequence -> tuple of tuples of float."""
    return tuple(tuple(float(x) for x in row) for row in rows)


def composition_of(species: Iterable[str]) -> tuple:
    """Multiset of symbols as ``((symbol, count), ...)`` ordered by atomic number."""
    counts = Counter(species)
    return tuple(sorted(counts.items(),
                        key=lambda kv: (ATOMIC_NUMBER.get(kv[0], 1000), kv[0])))


def dumps_frame(frame: Frame) -> str:
    # Python's float repr is the shortest string that round-trips.
    return json.dumps(frame.to_dict(), separators=(",", ":"), allow_nan=False)


def loads_frame(line: str) -> Frame:
    try:
        d = json.loads(line)
    except ValueError as exc:
        raise SchemaError(f"invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise SchemaError("frame line is not a JSON object")
    return Frame.from_dict(d)


def read_frames(path) -> Iterable[Frame]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield loads_frame(line)


# --------------------------------------------------------------------------
# validation

@dataclass(frozen=True)
class ValidationReport:
    frame_id: str
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def rule_ids(self) -> set:
        return {rule for rule, _ in self.violations}


def _shape_ok(m, n_rows) -> bool:
    if not isinstance(m, (tuple, list)) or len(m) != n_rows:
        return False
    return all(isinstance(r, (tuple, list)) and len(r) == 3 for r in m)


def _all_finite(m) -> bool:
    try:
        return all(math.isfinite(x) for row in m for x in row)
    except TypeError:
        return False


def det3(m) -> float:
    (a, b, c), (d, e, f), (g, h, i) = m
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def validate_frame(frame: Frame) -> ValidationReport:
    """Report every violated frame invariant; never raises."""
    v = []
    n = len(frame.species) if isinstance(frame.species, (tuple, list)) else -1

    if not frame.frame_id:
        v.append(("MISSING_ID", "frame_id is empty"))
    if not frame.trajectory_id:
        v.append(("MISSING_ID", "trajectory_id is empty"))
    if n < 1:
        v.append(("EMPTY_SPECIES", "species must list at least one atom"))
    else:
        unknown = sorted({s for s in frame.species if not is_element(s)}, key=str)
        if unknown:
            v.append(("UNKNOWN_ELEMENT", f"unknown element symbols {unknown}"))

    if not isinstance(frame.relaxation_step, int) or frame.relaxation_step < 0:
        v.append(("NEGATIVE_STEP", f"relaxation_step={frame.relaxation_step!r}"))
    if not isinstance(frame.relaxation_number, int) or frame.relaxation_number < 1:
        v.append(("RELAXATION_NUMBER",
                  f"relaxation_number={frame.relaxation_number!r} must be >= 1"))
    if not isinstance(frame.functional, Functional):
        v.append(("UNKNOWN_FUNCTIONAL", f"{frame.functional!r}"))
    if not isinstance(frame.source, SourceId):
        v.append(("UNKNOWN_SOURCE", f"{frame.source!r}"))

    finite = True
    if not _shape_ok(frame.lattice, 3):
        v.append(("LATTICE_SHAPE", "lattice must be 3x3"))
    else:
        finite &= _all_finite(frame.lattice)
    if not _shape_ok(frame.positions, max(n, 0)):
        v.append(("POSITION_SHAPE", f"positions must be {n}x3"))
    else:
        finite &= _all_finite(frame.positions)
    if frame.forces is not None:
        if not _shape_ok(frame.forces, max(n, 0)):
            v.append(("FORCE_SHAPE", f"forces must be {n}x3"))
        else:
            finite &= _all_finite(frame.forces)
    if frame.stress is not None:
        if not _shape_ok(frame.stress, 3):
            v.append(("STRESS_SHAPE", "stress must be 3x3"))
        else:
            finite &= _all_finite(frame.stress)
    if frame.energy is not None:
        try:
            finite &= math.isfinite(frame.energy)
        except TypeError:
            finite = False
    if not finite:
        v.append(("NON_FINITE", "non-finite numeric value"))
    elif _shape_ok(frame.lattice, 3):
        vol = det3(frame.lattice)
        if not vol > 0:
            v.append(("CELL_VOLUME", f"det(lattice)={vol!r} must be > 0"))

    return ValidationReport(frame.frame_id, tuple(v))


# --------------------------------------------------------------------------
# trajectories

@dataclass(frozen=True)
class Trajectory:
    trajectory_id: str
    frames: tuple = field(repr=False)

    @property
    def composition(self) -> tuple:
        return self.frames[0].composition

    @property
    def elements(self) -> frozenset:
        return self.frames[0].elements

    @property
    def functional(self) -> Functional:
        return self.frames[0].functional

    @property
    def source(self) -> SourceId:
        return self.frames[0].source

    @property
    def n_atoms(self) -> int:
        return self.frames[0].n_atoms

    def __len__(self) -> int:
        return len(self.frames)


def sort_key(frame: Frame) -> tuple:
    return (frame.relaxation_number, frame.relaxation_step)


def make_trajectory(frames) -> Trajectory:
    """Order frames of a single trajectory and check its invariants."""
    frames = sorted(frames, key=sort_key)
    if not frames:
        raise TrajectoryError("trajectory must be non-empty")
    first = frames[0]
    comp = first.composition
    prev = None
    for fr in frames:
        if fr.trajectory_id != first.trajectory_id:
            raise TrajectoryError(
                f"mixed trajectory ids {first.trajectory_id!r}/{fr.trajectory_id!r}")
        k = sort_key(fr)
        if k == prev:
            raise DuplicateKey(f"duplicate key {(fr.trajectory_id,) + k}")
        prev = k
        if fr.composition != comp:
            raise CompositionMismatch(
                f"{fr.trajectory_id}: composition {fr.formula} != {first.formula}")
        if fr.functional != first.functional or fr.source != first.source:
            raise MixedProvenance(
                f"{fr.trajectory_id}: frames disagree on functional/source")
    return Trajectory(first.trajectory_id, tuple(frames))


def assemble_trajectories(frames: Iterable[Frame]) -> list:
    """Group frames by trajectory id; result ordered by trajectory id."""
    groups = {}
    for fr in frames:
        groups.setdefault(fr.trajectory_id, []).append(fr)
    return [make_trajectory(groups[tid]) for tid in sorted(groups)]
