import math
import random
from collections import Counter, defaultdict
from fractions import Fraction

import numpy as np
import pytest

from conftest import make_frame
from trajforge.analysis import (
    DatasetStats,
    MissingForces,
    ProfileAccumulator,
    delta_e_points,
    delta_e_profile,
    element_trajectory_counts,
    force_profile,
    histogram_log10,
    max_force_norm,
    relaxation_stage_histogram,
    trajectory_length_histogram,
)
from trajforge.schema import SourceId, assemble_trajectories, make_trajectory


def trajectory(record, energies, natoms=1, forces=None, stages=None, species=None):
    frames = []
    stages = stages or [1] * len(energies)
    steps = Counter()
    for i, e in enumerate(energies):
        rn = stages[i]
        f = forces[i] if forces is not None else 0.0
        frames.append(make_frame(record=record, rn=rn, step=steps[rn],
                                 species=species or ("Fe",) * natoms, energy=e,
                                 forces=tuple((0.0, 0.0, f) for _ in range(natoms))))
        steps[rn] += 1
    return make_trajectory(frames)


def test_length_histogram_example():
    trajs = [trajectory(f"t{n}", [-1.0] * n) for n in (1, 10, 100)]
    h = trajectory_length_histogram(trajs, 2)
    assert h.bin_edges == [1.0, 10.0, 100.0]
    assert h.counts == [2, 1]
    assert h.scale == "log10"


def test_length_histogram_single_and_empty():
    h = trajectory_length_histogram([trajectory("a", [-1.0, -1.0])], 3)
    assert sorted(h.counts) == [0, 0, 1]
    h = trajectory_length_histogram([], 4)
    assert h.counts == [0, 0, 0, 0] and len(h.bin_edges) == 5


def test_length_histogram_total():
    rnd = random.Random(2)
    lengths = [rnd.randint(1, 300) for _ in range(500)]
    h = histogram_log10(lengths, 7)
    assert sum(h.counts) == 500
    # every value lies inside its bin
    edges = np.array(h.bin_edges)
    for v in lengths:
        i = max(int(np.searchsorted(edges, v, side="left")) - 1, 0)
        assert edges[i] <= v <= edges[i + 1]


def test_max_force_norm():
    assert max_force_norm(make_frame(species=("Fe",), forces=((3.0, 4.0, 0.0),))) == 5.0
    assert max_force_norm(make_frame(forces=((0.0,) * 3, (0.0,) * 3))) == 0.0
    assert max_force_norm(make_frame(forces=((1.0, 0.0, 0.0), (0.0, 2.0, 0.0)))) == 2.0
    with pytest.raises(MissingForces):
        max_force_norm(make_frame(forces=None))


def test_delta_e_points_example():
    t = trajectory("a", [-1.0, -1.5, -1.6], natoms=2)
    pts = delta_e_points(t)
    assert [p[0] for p in pts] == [0.0, 0.5, 1.0]
    assert pts[0][1] == pytest.approx(0.30, abs=1e-15)
    assert pts[1][1] == pytest.approx(0.05, abs=1e-15)
    assert pts[2][1] == 0.0


def test_single_frame_point_at_one():
    assert delta_e_points(trajectory("a", [-2.0])) == [(1.0, 0.0)]


def geometric_corpus(A, r, E_final, lengths, natoms):
    """ΔE_t per atom = A (r^t - r^(T-1)) so the final frame sits exactly at zero."""
    trajs = []
    for k, T in enumerate(lengths):
        energies = [float(E_final + natoms * A * (r ** t - r ** (T - 1))) for t in range(T)]
        trajs.append(trajectory(f"g{k}", energies, natoms=natoms))
    return trajs


def closed_form_bins(A, r, lengths, n_bins):
    """Exact per-bin means with rational arithmetic."""
    sums = defaultdict(Fraction)
    counts = Counter()
    for T in lengths:
        for t in range(T):
            frac = Fraction(1) if T == 1 else Fraction(t, T - 1)
            b = min(math.floor(frac * n_bins), n_bins - 1)
            sums[b] += A * (r ** t - r ** (T - 1))
            counts[b] += 1
    return {b: sums[b] / counts[b] for b in counts}, counts


def test_delta_e_closed_form():
    A, r = Fraction(3, 4), Fraction(1, 2)
    lengths = [1, 2, 3, 5, 8, 13, 21, 40]
    trajs = geometric_corpus(A, r, Fraction(-7, 2), lengths, natoms=4)
    curve = delta_e_profile(trajs, 6)
    exact, counts = closed_form_bins(A, r, lengths, 6)
    for b in range(6):
        assert curve.n[b] == counts.get(b, 0)
        if counts.get(b):
            assert abs(curve.mean[b] - float(exact[b])) <= 1e-12
    assert sum(curve.n) == sum(lengths)
    for t in trajs:
        assert delta_e_points(t)[-1][1] == 0.0


def test_force_profile_monotone_and_zero():
    trajs = [trajectory(f"m{k}", [-1.0] * 10, forces=[2.0 * 0.7 ** t for t in range(10)]) for k in range(5)]
    means = force_profile(trajs, 5).mean
    assert all(a >= b for a, b in zip(means, means[1:]))
    zero = [trajectory(f"z{k}", [-1.0] * 4, forces=[0.0] * 4) for k in range(3)]
    c = force_profile(zero, 4)
    assert c.mean == [0.0] * 4 and c.std == [0.0] * 4


def test_force_profile_two_populations():
    pop_a = [trajectory(f"a{k}", [-1.0] * 3, forces=[0.5] * 3) for k in range(3)]
    pop_b = [trajectory(f"b{k}", [-1.0] * 3, forces=[2.0] * 3) for k in range(1)]
    c = force_profile(pop_a + pop_b, 3)
    # each bin gets 3 points at 0.5 and 1 point at 2.0
    assert c.n == [4, 4, 4]
    assert c.mean == pytest.approx([(3 * 0.5 + 2.0) / 4] * 3, abs=1e-15)
    assert c.std == pytest.approx([math.sqrt(3 * 0.375 ** 2 + 1.125 ** 2) / 2] * 3, abs=1e-15)


def test_accumulator_merge_matches_single_pass():
    rnd = random.Random(5)
    pts = [(rnd.random(), rnd.gauss(0, 1)) for _ in range(2000)]
    whole = ProfileAccumulator(7)
    for p in pts:
        whole.add(*p)
    parts = [ProfileAccumulator(7) for _ in range(4)]
    for i, p in enumerate(pts):
        parts[i % 4].add(*p)
    merged = parts[0].merge(parts[1]).merge(parts[2].merge(parts[3]))
    assert np.array_equal(merged.count, whole.count)
    np.testing.assert_allclose(merged.mean, whole.mean, rtol=0, atol=1e-13)
    np.testing.assert_allclose(merged.m2, whole.m2, rtol=1e-12)
    ref = [np.std([v for f, v in pts if min(int(f * 7), 6) == b]) for b in range(7)]
    np.testing.assert_allclose(merged.curve().std, ref, rtol=1e-12)


def test_element_counts():
    trajs = [trajectory("a", [-1.0], species=("Fe", "O")), trajectory("b", [-1.0], species=("Fe",))]
    counts = element_trajectory_counts(trajs)
    assert counts == {"Fe": 2, "O": 1}
    assert element_trajectory_counts([]) == {}
    assert sum(counts.values()) >= len(trajs)


def test_stage_histogram():
    t = trajectory("a", [-1.0] * 7, stages=[1] * 5 + [2] * 2)
    h = relaxation_stage_histogram([t])
    assert set(h) == {1, 2}
    assert h[1].histogram.counts[4] == 1 and sum(h[1].histogram.counts) == 1
    assert h[2].histogram.counts[1] == 1
    only = relaxation_stage_histogram([trajectory("b", [-1.0] * 3)])
    assert list(only) == [1]


def test_stage_n_recount():
    rnd = random.Random(8)
    frames = []
    for k in range(40):
        for rn in sorted(rnd.sample([1, 2, 3], rnd.randint(1, 3))):
            for s in range(rnd.randint(1, 6)):
                frames.append(make_frame(record=f"s{k}", rn=rn, step=s))
    trajs = assemble_trajectories(frames)
    h = relaxation_stage_histogram(trajs)
    direct = Counter()
    for tid in {f.trajectory_id for f in frames}:
        for rn in {f.relaxation_number for f in frames if f.trajectory_id == tid}:
            direct[rn] += 1
    assert {rn: sh.n for rn, sh in h.items()} == dict(direct)


def test_dataset_stats_order_invariant(tmp_path):
    rnd = random.Random(4)
    trajs = [trajectory(f"d{k}", [-1.0 - 0.1 * rnd.random() for _ in range(n)],
                        forces=[rnd.random() for _ in range(n)])
             for k, n in enumerate(rnd.randint(1, 9) for _ in range(30))]
    a, b = DatasetStats(), DatasetStats()
    for t in trajs:
        a.add(t)
    for t in reversed(trajs):
        b.add(t)
    assert a.length_histogram() == b.length_histogram()
    np.testing.assert_allclose(a.delta_e.mean, b.delta_e.mean, atol=1e-14)
    assert a.force_hist == b.force_hist
    a.write(tmp_path)
    assert (tmp_path / "delta_e_profile.csv").read_text().startswith("fraction,mean,std,n\n")
    assert (tmp_path / "delta_e_profile.json").exists()
    mm = a.mean_max_force()[SourceId.MP.value]
    assert mm["n_trajectories"] == 30
