import random

import pytest

from trajforge.schema import Frame, Functional, SourceId, canonical_frame_id, canonical_trajectory_id


def make_frame(record="t1", rn=1, step=0, species=("Fe", "Cu"), energy=-5.0,
               forces="zeros", stress=None, source=SourceId.MP,
               functional=Functional.PBE, lattice=None, positions=None):
    n = len(species)
    if lattice is None:
        lattice = ((4.0, 0.0, 0.0), (0.0, 4.0, 0.0), (0.0, 0.0, 4.0))
    if positions is None:
        positions = tuple((0.5 * i, 0.25 * i, 0.1 * i) for i in range(n))
    if forces == "zeros":
        forces = tuple((0.0, 0.0, 0.0) for _ in range(n))
    return Frame(
        frame_id=canonical_frame_id(source, record, rn, step),
        trajectory_id=canonical_trajectory_id(source, record),
        relaxation_step=step,
        relaxation_number=rn,
        lattice=lattice,
        species=tuple(species),
        positions=positions,
        energy=energy,
        forces=forces,
        stress=stress,
        functional=functional,
        source=source,
        source_record_id=record,
    )


@pytest.fixture
def frame_factory():
    return make_frame


@pytest.fixture
def rng():
    return random.Random(1234)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.failed:
        _ACCEPTANCE[name] = "FAIL"
    elif report.skipped:
        _ACCEPTANCE.setdefault(name, "SKIP")
    elif report.when == "call":
        _ACCEPTANCE.setdefault(name, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    import sys
    mod = sys.modules.get("test_acceptance")
    titles = getattr(mod, "TITLES", {})
    notes = getattr(mod, "NOTES", {})
    terminalreporter.section("acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        n = int(name.split("_")[2])
        detail = notes.get(n, "")
        terminalreporter.write_line(f"criterion {n:2d} {_ACCEPTANCE[name]}  {titles.get(n, name)}"
                                    + (f": {detail}" if detail else ""))
