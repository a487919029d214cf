"""Frame- and trajectory-level quality filters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

from .schema import Functional, TrajectoryError, make_trajectory, validate_frame

DEFAULT_ENERGY_CONVERGENCE = 0.02   # eV
DEFAULT_FINAL_FORCE = 0.2           # eV/Å


@dataclass(frozen=True)
class FilterConfig:
    energy_convergence_threshold: float = DEFAULT_ENERGY_CONVERGENCE
    final_force_threshold: float = DEFAULT_FINAL_FORCE

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
                raise ValueError(f"{f.name} must be > 0, got {v!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class FilterStats:
    frames_in: int = 0
    frames_dropped_missing_targets: int = 0
    frames_dropped_schema: int = 0
    trajectories_dropped_convergence: int = 0
    frames_dropped_convergence: int = 0
    trajectories_dropped_final_force: int = 0
    frames_dropped_final_force: int = 0
    trajectories_out: int = 0
    frames_out: int = 0

    def merge(self, other: "FilterStats") -> "FilterStats":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def conserved(self) -> bool:
        return self.frames_out == self.frames_in - (
            self.frames_dropped_missing_targets + self.frames_dropped_schema
            + self.frames_dropped_convergence + self.frames_dropped_final_force)

    def to_dict(self):
        return asdict(self)


def filter_frame_completeness(frame) -> bool:
    return frame.energy is not None and frame.forces is not None


def filter_convergence(traj, cfg: FilterConfig) -> bool:
    """Keep unless the last energy step exceeds the threshold (equality keeps)."""
    if len(traj.frames) < 2:
        return True
    e_prev = traj.frames[-2].energy
    e_last = traj.frames[-1].energy
    return abs(e_prev - e_last) <= cfg.energy_convergence_threshold


def max_force_norm(forces) -> float:
    return max(math.sqrt(fx * fx + fy * fy + fz * fz) for fx, fy, fz in forces)


def filter_final_force(traj, cfg: FilterConfig) -> bool:
    return max_force_norm(traj.frames[-1].forces) <= cfg.final_force_threshold


def _dedupe(frames):
    """Collapse exact duplicates; conflicting duplicates raise."""
    seen = {}
    for fr in frames:
        prev = seen.get(fr.frame_id)
        if prev is None:
            seen[fr.frame_id] = fr
        elif prev != fr:
            raise TrajectoryError(f"conflicting duplicate frame {fr.frame_id}")
    return list(seen.values())


def filter_trajectory(frames, cfg: FilterConfig, stats: FilterStats):
    """Apply all rules to the frames of one trajectory; return the kept Trajectory or None."""
    frames = list(frames)
    stats.frames_in += len(frames)
    complete = [f for f in frames if filter_frame_completeness(f)]
    stats.frames_dropped_missing_targets += len(frames) - len(complete)
    valid = [f for f in complete if validate_frame(f).ok]
    stats.frames_dropped_schema += len(complete) - len(valid)
    if not valid:
        return None
    try:
        traj = make_trajectory(_dedupe(valid))
    except TrajectoryError:
        stats.frames_dropped_schema += len(valid)
        return None
    # collapsed exact duplicates are accounted as schema drops
    stats.frames_dropped_schema += len(valid) - len(traj.frames)
    if not filter_convergence(traj, cfg):
        stats.trajectories_dropped_convergence += 1
        stats.frames_dropped_convergence += len(traj.frames)
        return None
    if not filter_final_force(traj, cfg):
        stats.trajectories_dropped_final_force += 1
        stats.frames_dropped_final_force += len(traj.frames)
        return None
    stats.trajectories_out += 1
    stats.frames_out += len(traj.frames)
    return traj


def run_filters(trajs, cfg: FilterConfig, stats: FilterStats = None):
    """Filter a stream of trajectories (or per-trajectory frame groups).

    Order per trajectory: frame completeness, frame schema validation,
    reassembly of the surviving frames, convergence, final force. Returns
    ``(kept_trajectories, stats)``; the list is consumed lazily from ``trajs``.
    """
    stats = FilterStats() if stats is None else stats
    kept = []
    for t in trajs:
        frames = t.frames if hasattr(t, "frames") else t
        out = filter_trajectory(frames, cfg, stats)
        if out is not None:
            kept.append(out)
    return kept, stats


def iter_filtered(groups, cfg: FilterConfig, stats: FilterStats):
    """Streaming variant of ``run_filters`` over per-trajectory frame groups."""
    for frames in groups:
        out = filter_trajectory(frames, cfg, stats)
        if out is not None:
            yield out


def partition_by_functional(frames) -> dict:
    parts = {f: [] for f in Functional}
    for fr in frames:
        parts[fr.functional].append(fr)
    return parts
