import dataclasses
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_frame
from trajforge.elements import SYMBOLS, is_element
from trajforge.schema import (
    CompositionMismatch,
    DuplicateKey,
    Frame,
    SchemaError,
    SourceId,
    assemble_trajectories,
    canonical_frame_id,
    dumps_frame,
    loads_frame,
    validate_frame,
)


def test_element_table():
    assert len(SYMBOLS) == len(set(SYMBOLS)) == 118
    assert is_element("Fe") and not is_element("FE") and not is_element("fe")
    assert SYMBOLS[0] == "H" and SYMBOLS[-1] == "Og"


def test_valid_frame_has_empty_report():
    fr = make_frame(species=("Fe", "Cu"))
    assert fr.lattice[0][0] * fr.lattice[1][1] * fr.lattice[2][2] == 64.0
    report = validate_frame(fr)
    assert report.ok
    assert report.violations == ()


def test_force_shape_violation():
    fr = make_frame(species=("Fe", "Cu", "Al"),
                    forces=((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)))
    assert "FORCE_SHAPE" in validate_frame(fr).rule_ids


def test_non_finite_energy():
    fr = make_frame(energy=float("nan"))
    assert "NON_FINITE" in validate_frame(fr).rule_ids
    fr = make_frame(energy=float("inf"))
    assert "NON_FINITE" in validate_frame(fr).rule_ids


@pytest.mark.parametrize("changes, rule", [
    ({"lattice": ((4.0, 0, 0), (0, -4.0, 0), (0, 0, 4.0))}, "CELL_VOLUME"),
    ({"lattice": ((1.0, 0, 0), (2.0, 0, 0), (0, 0, 4.0))}, "CELL_VOLUME"),
    ({"species": ("Fe", "Xx")}, "UNKNOWN_ELEMENT"),
    ({"species": ("Fe", "FE")}, "UNKNOWN_ELEMENT"),
    ({"relaxation_step": -1}, "NEGATIVE_STEP"),
    ({"relaxation_number": 0}, "RELAXATION_NUMBER"),
    ({"positions": ((0.0, 0.0, 0.0),)}, "POSITION_SHAPE"),
    ({"stress": ((1.0, 0.0),)}, "STRESS_SHAPE"),
])
def test_rule_violations(changes, rule):
    fr = dataclasses.replace(make_frame(), **changes)
    assert rule in validate_frame(fr).rule_ids


def test_multiple_violations_all_reported():
    fr = dataclasses.replace(make_frame(), relaxation_step=-3, species=("Fe", "Qq"))
    assert {"NEGATIVE_STEP", "UNKNOWN_ELEMENT"} <= validate_frame(fr).rule_ids


def test_validate_is_pure():
    fr = make_frame(energy=float("nan"))
    assert validate_frame(fr) == validate_frame(fr)


def test_canonical_frame_id():
    assert canonical_frame_id(SourceId.OQMD, "e-123", 2, 0) == "oqmd:e-123:2:0"
    assert canonical_frame_id(SourceId.OQMD, "e-123", 2, 0) == canonical_frame_id(SourceId.OQMD, "e-123", 2, 0)
    assert canonical_frame_id(SourceId.OQMD, "e-123", 1, 0) != canonical_frame_id(SourceId.OQMD, "e-123", 2, 0)


@given(
    st.sampled_from(list(SourceId)), st.text(max_size=6), st.integers(1, 12), st.integers(0, 12),
    st.sampled_from(list(SourceId)), st.text(max_size=6), st.integers(1, 12), st.integers(0, 12),
)
def test_canonical_frame_id_injective(s1, r1, n1, k1, s2, r2, n2, k2):
    a = canonical_frame_id(s1, r1, n1, k1)
    b = canonical_frame_id(s2, r2, n2, k2)
    assert (a == b) == ((s1, r1, n1, k1) == (s2, r2, n2, k2))


def test_assemble_orders_steps():
    frames = [make_frame(step=s) for s in (2, 0, 1)]
    (traj,) = assemble_trajectories(frames)
    assert [(f.relaxation_number, f.relaxation_step) for f in traj.frames] == [(1, 0), (1, 1), (1, 2)]


def test_assemble_orders_relaxation_numbers():
    frames = [make_frame(rn=2, step=0), make_frame(rn=1, step=0)]
    (traj,) = assemble_trajectories(frames)
    assert len(traj) == 2
    assert [f.relaxation_number for f in traj.frames] == [1, 2]


def test_assemble_composition_mismatch():
    with pytest.raises(CompositionMismatch):
        assemble_trajectories([make_frame(species=("Fe",)), make_frame(step=1, species=("Cu",))])


def test_assemble_duplicate_key():
    with pytest.raises(DuplicateKey):
        assemble_trajectories([make_frame(), make_frame()])


@settings(max_examples=50)
@given(st.randoms(use_true_random=False))
def test_assemble_permutation_invariant(rnd):
    frames = [make_frame(record=f"t{t}", rn=rn, step=s)
              for t in range(4) for rn in (1, 2) for s in range(3)]
    ref = assemble_trajectories(frames)
    shuffled = frames[:]
    rnd.shuffle(shuffled)
    assert assemble_trajectories(shuffled) == ref


ADVERSARIAL_FLOATS = [
    0.1, -0.0, 5e-324, 2.2250738585072014e-308, 2.225073858507201e-308,
    1.7976931348623157e308, 2.0 ** -1074, 2.0 ** 52, 2.0 ** 53 + 2, 2.0 ** -30,
    1 / 3, -123456.789e-12, 9007199254740993.0, 1e23, 4.35, 0.30000000000000004,
]


@pytest.mark.parametrize("value", ADVERSARIAL_FLOATS)
def test_json_round_trip_bit_exact(value):
    fr = make_frame(energy=value, forces=((value, -value, 0.0), (1.0, 2.0, value)))
    line = dumps_frame(fr)
    back = loads_frame(line)
    assert back == fr
    assert math.copysign(1.0, back.energy) == math.copysign(1.0, value)
    assert back.energy.hex() == float(value).hex()
    assert dumps_frame(back) == line


def test_absent_optionals_omitted():
    line = dumps_frame(make_frame(energy=None, forces=None))
    assert "energy" not in line and "forces" not in line and "stress" not in line
    assert "null" not in line


def test_loads_rejects_garbage():
    with pytest.raises(SchemaError):
        loads_frame("{not json")
    with pytest.raises(SchemaError):
        loads_frame('{"frame_id": "x"}')


def test_fractional_positions():
    fr = make_frame(species=("Fe",), positions=((2.0, 1.0, 3.0),))
    frac = fr.fractional_positions()
    assert frac.tolist() == [[0.5, 0.25, 0.75]]
