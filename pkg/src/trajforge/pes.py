"""Potential-energy-surface projection of a chemical subset.

Frames whose species lie inside a chosen element set are featurized with
SOAP, a PCA is fitted on one set of descriptors and used to project
another (possibly the same) set, and every projected frame gets its
formation energy per atom. Trajectory paths are emitted as polylines with
their first and last points marked.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .hashing import seeded_hash, sub_seed
from .pca import PcaModel, fit_pca_stream, project
from .schema import Frame, Functional, assemble_trajectories
from .soap import Soap, SoapParams


class PesError(ValueError):
    pass


class MissingReference(PesError):
    pass


def select_chemical_subset(frames: Iterable[Frame], elements) -> list:
    """Frames whose species set is contained in ``elements``."""
    allowed = frozenset(elements)
    if not allowed:
        raise PesError("element set must be non-empty")
    return [f for f in frames if f.elements <= allowed]


# --------------------------------------------------------------------------
# reference energies


@dataclass(frozen=True)
class ReferenceEnergies:
    """Elemental reference energies (eV/atom) for one functional.

    ``functional`` None means the table is not tied to a level of theory.
    """
    energies: Mapping[str, float]
    functional: Functional | None = None

    def __getitem__(self, element):
        try:
            return self.energies[element]
        except KeyError:
            raise MissingReference(f"no reference energy for {element}") from None

    def covers(self, elements):
        return set(elements) <= set(self.energies)


def load_reference_table(path) -> dict:
    """Read ``{"PBE": {"Fe": -8.47, ...}, ...}`` into ReferenceEnergies per functional.

    A flat ``{"Fe": ..., ...}`` table is returned under the key None.
    """
    raw = json.loads(Path(path).read_text())
    if raw and all(isinstance(v, (int, float)) for v in raw.values()):
        return {None: ReferenceEnergies({k: float(v) for k, v in raw.items()})}
    out = {}
    for name, table in raw.items():
        fn = Functional(name)
        out[fn] = ReferenceEnergies({k: float(v) for k, v in table.items()}, fn)
    return out


FIXTURE_REFERENCES = Path(__file__).parent / "data" / "fixture_references.json"


def references_for(table: Mapping, functional) -> ReferenceEnergies:
    if functional in table:
        return table[functional]
    if None in table:
        return table[None]
    raise MissingReference(f"no reference table for functional {functional}")


def formation_energy_per_atom(frame: Frame, refs) -> float:
    """(E_total - sum_i count_i * ref_i) / N_atoms in eV/atom."""
    if frame.energy is None:
        raise PesError(f"{frame.frame_id}: energy missing")
    if isinstance(refs, ReferenceEnergies):
        if refs.functional is not None and refs.functional != frame.functional:
            raise MissingReference(
                f"{frame.frame_id}: references are {refs.functional.value}, frame is {frame.functional.value}")
        table = refs
    else:
        table = ReferenceEnergies(refs)
    elemental = sum(count * table[el] for el, count in frame.composition)
    return (frame.energy - elemental) / frame.n_atoms


def _formation(frame, refs):
    """Formation energy against a single table or a per-functional table set; None without refs."""
    if refs is None:
        return None
    per_functional = (not isinstance(refs, ReferenceEnergies)
                      and any(isinstance(v, ReferenceEnergies) for v in refs.values()))
    if per_functional:
        refs = references_for(refs, frame.functional)
    return formation_energy_per_atom(frame, refs)


# --------------------------------------------------------------------------
# overlays


@dataclass(frozen=True)
class OverlayPoint:
    frame_id: str
    coords: tuple
    formation_energy: float | None
    initial: bool
    final: bool


@dataclass(frozen=True)
class Polyline:
    trajectory_id: str
    points: tuple


def polylines(trajs, coords_of: Callable, refs=None) -> list:
    """One Polyline per trajectory from precomputed coordinates ``coords_of(frame)``."""
    lines = []
    for traj in trajs:
        last = len(traj.frames) - 1
        lines.append(Polyline(traj.trajectory_id, tuple(
            OverlayPoint(f.frame_id, tuple(float(v) for v in coords_of(f)), _formation(f, refs),
                         i == 0, i == last)
            for i, f in enumerate(traj.frames))))
    return lines


def trajectory_overlay(trajs, model: PcaModel, featurize: Callable, refs=None) -> list:
    """Projected path per trajectory, in canonical frame order; endpoints flagged."""
    return polylines(trajs, lambda f: project(model, featurize(f)), refs)


def marker(point: OverlayPoint) -> str:
    if point.initial and point.final:
        return "initial+final"
    return "initial" if point.initial else "final" if point.final else ""


# --------------------------------------------------------------------------
# end-to-end run


def describe(soap: Soap, frame: Frame):
    return soap.descriptor(frame)


class DescriptorSpool:
    """Descriptors appended to a raw float64 file and re-read as row blocks."""

    def __init__(self, dim, directory=None):
        self.dim = dim
        fd, self.path = tempfile.mkstemp(suffix=".f64", dir=directory)
        self.fh = os.fdopen(fd, "wb")
        self.rows = 0

    def append(self, vec):
        np.asarray(vec, dtype=np.float64).tofile(self.fh)
        self.rows += 1

    def finish(self):
        self.fh.close()

    def blocks(self, size=4096):
        if self.rows == 0:
            return iter(())
        mm = np.memmap(self.path, dtype=np.float64, mode="r", shape=(self.rows, self.dim))
        return (np.array(mm[i:i + size]) for i in range(0, self.rows, size))

    def cleanup(self):
        if not self.fh.closed:
            self.fh.close()
        if os.path.exists(self.path):
            os.unlink(self.path)


@dataclass
class PesConfig:
    elements: tuple = ("Fe", "Cu", "Al", "Ni")
    soap: SoapParams = field(default_factory=SoapParams)
    n_components: int = 2
    max_fit_frames: int | None = None
    overlay_trajectories: int = 20
    seed: int = 0

    def __post_init__(self):
        self.elements = tuple(self.elements)
        if not self.elements:
            raise PesError("elements must be non-empty")
        if self.n_components < 1:
            raise PesError("n_components must be >= 1")


@dataclass
class PesResult:
    model: PcaModel
    n_fit: int
    n_projected: int
    n_overlays: int
    paths: dict


def _sample_ids(ids, limit, seed):
    if limit is None or len(ids) <= limit:
        return set(ids)
    ranked = sorted(ids, key=lambda i: (seeded_hash(seed, i), i))
    return set(ranked[:limit])


def run_pes(fit_frames: Iterable[Frame], out_dir, cfg: PesConfig = PesConfig(),
            project_frames: Iterable[Frame] | None = None, refs=None,
            fit_label="input", project_label=None, map_fn=map, tmp_dir=None) -> PesResult:
    """Fit PCA on ``fit_frames``, project ``project_frames`` (default: the same).

    Writes points.csv, trajectories.csv and model.json to ``out_dir``.
    ``map_fn`` lets callers parallelize descriptor computation (ordered map).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    soap = Soap(cfg.elements, cfg.soap)
    featurize = partial(describe, soap)
    sampling_seed = sub_seed(cfg.seed, "pes-sampling")

    fit = select_chemical_subset(fit_frames, cfg.elements)
    keep = _sample_ids([f.frame_id for f in fit], cfg.max_fit_frames, sampling_seed)
    fit = sorted((f for f in fit if f.frame_id in keep), key=lambda f: f.frame_id)
    if len(fit) < cfg.n_components:
        raise PesError(f"{len(fit)} frames in the subset, need at least {cfg.n_components}")

    same_input = project_frames is None
    proj = fit if same_input else sorted(select_chemical_subset(project_frames, cfg.elements),
                                         key=lambda f: f.frame_id)

    spool = DescriptorSpool(soap.n_features, tmp_dir)
    try:
        cache = {}
        for frame, vec in zip(fit, map_fn(featurize, fit)):
            spool.append(vec)
            if same_input:
                cache[frame.frame_id] = vec
        spool.finish()
        model = fit_pca_stream(spool.blocks, cfg.n_components, dim=soap.n_features)
    finally:
        spool.cleanup()

    if not same_input:
        cache = dict(zip((f.frame_id for f in proj), map_fn(featurize, proj)))
    coords = {fid: project(model, vec) for fid, vec in cache.items()}
    cache.clear()

    k = model.k
    pc_cols = [f"pc{i + 1}" for i in range(k)]
    points_path = out / "points.csv"
    with open(points_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "trajectory_id", "source", "functional", "formula",
                    *pc_cols, "formation_energy_per_atom"])
        for f in proj:
            ef = _formation(f, refs)
            w.writerow([f.frame_id, f.trajectory_id, f.source.value, f.functional.value, f.formula,
                        *(repr(float(v)) for v in coords[f.frame_id]),
                        "" if ef is None else repr(ef)])

    trajs = assemble_trajectories(proj)
    chosen = _sample_ids([t.trajectory_id for t in trajs], cfg.overlay_trajectories, sampling_seed)
    lines = polylines([t for t in trajs if t.trajectory_id in chosen],
                      lambda f: coords[f.frame_id], refs)
    traj_path = out / "trajectories.csv"
    with open(traj_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trajectory_id", "order", "frame_id", *pc_cols, "formation_energy_per_atom", "marker"])
        for line in lines:
            for i, p in enumerate(line.points):
                w.writerow([line.trajectory_id, i, p.frame_id, *(repr(v) for v in p.coords),
                            "" if p.formation_energy is None else repr(p.formation_energy), marker(p)])

    model_path = out / "model.json"
    doc = {
        "elements": list(soap.elements),
        "soap": {**cfg.soap.to_dict(), "sigma_is_default": cfg.soap.sigma == SoapParams().sigma},
        "radial_basis": "polynomial (r_cut - r)^(a+2), Gram-Schmidt orthonormalized",
        "n_features": soap.n_features,
        "pca": model.to_dict(),
        "fit_input": fit_label,
        "projected_input": fit_label if same_input else (project_label or "projection input"),
        "fit_mode": "joint" if same_input else "fit-one-project-other",
        "n_fit_frames": len(fit),
        "n_projected_frames": len(proj),
        "max_fit_frames": cfg.max_fit_frames,
        "seed": cfg.seed,
        "formation_energy": refs is not None,
    }
    model_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return PesResult(model, len(fit), len(proj), len(lines),
                     {"points": points_path, "trajectories": traj_path, "model": model_path})
