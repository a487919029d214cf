"""Dataset statistics as plot-ready tables.

Everything is computed from per-trajectory contributions folded into
accumulators whose ``merge`` is associative, so partial results from
separate workers combine exactly for counts and stably for means/variances.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import SourceId


class MissingForces(ValueError):
    pass


@dataclass
class Histogram:
    bin_edges: list
    counts: list
    scale: str = "linear"

    def __post_init__(self):
        assert len(self.counts) == len(self.bin_edges) - 1


@dataclass
class ProfileCurve:
    bin_centers: list
    mean: list
    std: list
    n: list


PROFILE_METADATA = {
    "fraction": "t/(T-1) over the frames of a trajectory in (relaxation_number, "
                "relaxation_step) order; single-frame trajectories contribute one point at 1.0",
    "std": "population standard deviation (ddof=0)",
    "binning": "equal-width bins over [0, 1], left-closed, last bin closed",
}


def log10_edges(max_value, n_bins):
    upper = max(float(max_value), 1.0)
    hi = math.log10(upper) if upper > 1.0 else 1.0
    return [10.0 ** (hi * i / n_bins) for i in range(n_bins + 1)]


def histogram_log10(values, n_bins) -> Histogram:
    """Log-spaced bins over [1, max]; bins are right-closed and the first bin
    also includes its left edge, i.e. [1, e1], (e1, e2], ..."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    values = list(values)
    edges = log10_edges(max(values) if values else 1, n_bins)
    counts = [0] * n_bins
    if values:
        idx = np.searchsorted(np.asarray(edges), np.asarray(values, dtype=float), side="left") - 1
        for i in np.clip(idx, 0, n_bins - 1):
            counts[int(i)] += 1
    return Histogram(edges, counts, "log10")


def trajectory_length_histogram(trajs, n_bins) -> Histogram:
    return histogram_log10((len(t.frames) for t in trajs), n_bins)


def max_force_norm(frame) -> float:
    if frame.forces is None:
        raise MissingForces(f"{frame.frame_id} has no forces")
    return max(math.sqrt(x * x + y * y + z * z) for x, y, z in frame.forces)


# --------------------------------------------------------------------------
# profiles

class ProfileAccumulator:
    """Per-bin count/mean/M2 over (fraction, value) points."""

    def __init__(self, n_bins):
        if n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        self.n_bins = n_bins
        self.count = np.zeros(n_bins, dtype=np.int64)
        self.mean = np.zeros(n_bins)
        self.m2 = np.zeros(n_bins)

    def bin_of(self, fraction):
        return min(int(fraction * self.n_bins), self.n_bins - 1)

    def add(self, fraction, value):
        b = self.bin_of(fraction)
        self.count[b] += 1
        delta = value - self.mean[b]
        self.mean[b] += delta / self.count[b]
        self.m2[b] += delta * (value - self.mean[b])

    def merge(self, other):
        if other.n_bins != self.n_bins:
            raise ValueError("bin count mismatch")
        n = self.count + other.count
        with np.errstate(invalid="ignore", divide="ignore"):
            delta = other.mean - self.mean
            w = np.where(n > 0, other.count / np.maximum(n, 1), 0.0)
            self.mean = self.mean + delta * w
            self.m2 = self.m2 + other.m2 + delta ** 2 * self.count * w
        self.count = n
        return self

    def curve(self) -> ProfileCurve:
        centers = [(i + 0.5) / self.n_bins for i in range(self.n_bins)]
        mean, std = [], []
        for c, m, m2 in zip(self.count, self.mean, self.m2):
            if c == 0:
                mean.append(math.nan)
                std.append(math.nan)
            else:
                mean.append(float(m))
                std.append(math.sqrt(max(float(m2) / c, 0.0)))
        return ProfileCurve(centers, mean, std, [int(c) for c in self.count])


def _fractions(T):
    if T == 1:
        return [1.0]
    return [t / (T - 1) for t in range(T)]


def delta_e_points(traj):
    """(fraction, (E_t - E_T)/N_atoms) for each frame."""
    frames = traj.frames
    e_final = frames[-1].energy
    n = frames[-1].n_atoms
    return [(f, (fr.energy - e_final) / n) for f, fr in zip(_fractions(len(frames)), frames)]


def force_points(traj):
    frames = traj.frames
    return [(f, max_force_norm(fr)) for f, fr in zip(_fractions(len(frames)), frames)]


def delta_e_profile(trajs, n_bins) -> ProfileCurve:
    acc = ProfileAccumulator(n_bins)
    for t in trajs:
        for f, v in delta_e_points(t):
            acc.add(f, v)
    return acc.curve()


def force_profile(trajs, n_bins) -> ProfileCurve:
    acc = ProfileAccumulator(n_bins)
    for t in trajs:
        for f, v in force_points(t):
            acc.add(f, v)
    return acc.curve()


def element_trajectory_counts(trajs) -> dict:
    counts = Counter()
    for t in trajs:
        counts.update(t.elements)
    return dict(counts)


@dataclass
class StageHistogram:
    histogram: Histogram
    n: int


def _stage_hist(counter: Counter) -> StageHistogram:
    top = max(counter) if counter else 1
    edges = list(range(1, top + 2))
    counts = [counter.get(k, 0) for k in range(1, top + 1)]
    return StageHistogram(Histogram(edges, counts, "linear"), sum(counter.values()))


def stage_step_counts(traj) -> Counter:
    return Counter(fr.relaxation_number for fr in traj.frames)


def relaxation_stage_histogram(trajs) -> dict:
    """relaxation_number -> histogram of frames-per-stage across trajectories.

    Bins are unit width starting at 1 step: bin k holds stages with k+1 frames.
    """
    per_stage = {}
    for t in trajs:
        for rn, k in stage_step_counts(t).items():
            per_stage.setdefault(rn, Counter())[k] += 1
    return {rn: _stage_hist(c) for rn, c in sorted(per_stage.items())}


# --------------------------------------------------------------------------
# combined streaming accumulator used by the ``stats`` stage

FORCE_EDGES = [0.0] + [10.0 ** (k / 10) for k in range(-40, 31)]  # 1e-4 .. 1e3 eV/Å


@dataclass
class DatasetStats:
    n_bins: int = 20
    length_bins: int = 12
    lengths: Counter = field(default_factory=Counter)
    elements: Counter = field(default_factory=Counter)
    stages: dict = field(default_factory=dict)
    delta_e: ProfileAccumulator = None
    force: ProfileAccumulator = None
    force_hist: list = None
    # per source: [n_frames, sum frame max-force, n_traj, sum traj max-force]
    force_means: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta_e is None:
            self.delta_e = ProfileAccumulator(self.n_bins)
        if self.force is None:
            self.force = ProfileAccumulator(self.n_bins)
        if self.force_hist is None:
            self.force_hist = [0] * (len(FORCE_EDGES) - 1)

    def add(self, traj):
        self.lengths[len(traj.frames)] += 1
        self.elements.update(traj.elements)
        for rn, k in stage_step_counts(traj).items():
            self.stages.setdefault(rn, Counter())[k] += 1
        for f, v in delta_e_points(traj):
            self.delta_e.add(f, v)
        pts = force_points(traj)
        for f, v in pts:
            self.force.add(f, v)
            b = int(np.searchsorted(FORCE_EDGES, v, side="right")) - 1
            self.force_hist[min(max(b, 0), len(self.force_hist) - 1)] += 1
        acc = self.force_means.setdefault(SourceId(traj.source).value, [0, 0.0, 0, 0.0])
        acc[0] += len(pts)
        acc[1] += math.fsum(v for _, v in pts)
        acc[2] += 1
        acc[3] += max(v for _, v in pts)

    def merge(self, other: "DatasetStats"):
        self.lengths.update(other.lengths)
        self.elements.update(other.elements)
        for rn, c in other.stages.items():
            self.stages.setdefault(rn, Counter()).update(c)
        self.delta_e.merge(other.delta_e)
        self.force.merge(other.force)
        self.force_hist = [a + b for a, b in zip(self.force_hist, other.force_hist)]
        for src, vals in other.force_means.items():
            acc = self.force_means.setdefault(src, [0, 0.0, 0, 0.0])
            for i, v in enumerate(vals):
                acc[i] += v
        return self

    def length_histogram(self) -> Histogram:
        return histogram_log10(self.lengths.elements(), self.length_bins)

    def stage_histograms(self) -> dict:
        return {rn: _stage_hist(c) for rn, c in sorted(self.stages.items())}

    def mean_max_force(self) -> dict:
        out = {}
        for src, (nf, sf, nt, st) in sorted(self.force_means.items()):
            out[src] = {"per_frame_mean_max_force": sf / nf if nf else math.nan,
                        "per_trajectory_mean_max_force": st / nt if nt else math.nan,
                        "n_frames": nf, "n_trajectories": nt}
        return out

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram(self.length_histogram(), out / "trajectory_length.csv",
                        {"quantity": "frames per trajectory"})
        write_profile(self.delta_e.curve(), out / "delta_e_profile.csv",
                      {"quantity": "(E_t - E_T)/N_atoms", "unit": "eV/atom"})
        write_profile(self.force.curve(), out / "force_profile.csv",
                      {"quantity": "max_i |F_i| per frame", "unit": "eV/Å"})
        write_histogram(Histogram(FORCE_EDGES, self.force_hist, "log10"),
                        out / "max_force_histogram.csv",
                        {"quantity": "max_i |F_i| per frame", "unit": "eV/Å",
                         "binning": "first bin [0, 1e-4), then 10 log bins per decade"})
        write_rows(out / "element_counts.csv", ["element", "n_trajectories"],
                   sorted(self.elements.items(), key=lambda kv: (-kv[1], kv[0])),
                   {"quantity": "trajectories containing each element"})
        stage_rows = []
        for rn, sh in self.stage_histograms().items():
            h = sh.histogram
            for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
                stage_rows.append((rn, lo, hi, c, sh.n))
        write_rows(out / "relaxation_stage_steps.csv",
                   ["relaxation_number", "bin_lo", "bin_hi", "count", "n"], stage_rows,
                   {"quantity": "frames per relaxation stage", "binning": "[lo, hi)"})
        mm = self.mean_max_force()
        write_rows(out / "mean_max_force.csv",
                   ["source", "per_frame_mean_max_force", "per_trajectory_mean_max_force",
                    "n_frames", "n_trajectories"],
                   [(s, v["per_frame_mean_max_force"], v["per_trajectory_mean_max_force"],
                     v["n_frames"], v["n_trajectories"]) for s, v in mm.items()],
                   {"unit": "eV/Å",
                    "per_frame_mean_max_force": "mean over frames of the frame's max force norm",
                    "per_trajectory_mean_max_force": "mean over trajectories of the largest "
                                                     "frame max force norm"})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_rows(path, header, rows, metadata=None):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    meta = {"columns": list(header), **(metadata or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")


def write_histogram(h: Histogram, path, metadata=None):
    rows = [(lo, hi, c) for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts)]
    write_rows(path, ["bin_lo", "bin_hi", "count"], rows,
               {"scale": h.scale, "total": sum(h.counts), **(metadata or {})})


def write_profile(p: ProfileCurve, path, metadata=None):
    rows = list(zip(p.bin_centers, p.mean, p.std, p.n))
    write_rows(path, ["fraction", "mean", "std", "n"], rows,
               {**PROFILE_METADATA, **(metadata or {})})
