import json
from pathlib import Path

import numpy as np
import pytest

from rdmesh.mesh import DynamicSequence, StaticMesh

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

ICOSAHEDRON_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
)


def icosahedron() -> StaticMesh:
    p = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=float,
    )
    return StaticMesh(v, ICOSAHEDRON_FACES)


def tetra_clip(rng, T=2):
    faces = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1], [1, 3, 2]])
    frames = rng.normal(size=(T, 4, 3))
    cond = StaticMesh(rng.normal(size=(4, 3)), faces)
    return cond, DynamicSequence(frames, faces)


def load_config(name: str) -> dict:
    return json.loads((CONFIG_DIR / name).read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one pass/fail line per acceptance criterion at the end of the run
_criteria: dict[str, str] = {}
_notes: dict[str, str] = {}


@pytest.fixture
def note(request):
    """Attach measured values to the summary line of the running criterion."""

    def add(text: str) -> None:
        name = request.node.name
        _notes[name] = f"{_notes[name]}; {text}" if name in _notes else text

    return add


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and "::test_criterion_" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
            _criteria[name] = "PASS" if report.outcome == "passed" else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria):
        extra = f"  ({_notes[name]})" if name in _notes else ""
        terminalreporter.write_line(f"{name}: {_criteria[name]}{extra}")
