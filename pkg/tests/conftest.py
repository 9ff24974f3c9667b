import numpy as np
import pytest

from rigidgame import igso3
from rigidgame.structio import AssemblyState, ChainStructure
from rigidgame.toys import random_assembly


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def table():
    return igso3.default_table()


@pytest.fixture
def two_chain(rng):
    return random_assembly((10, 8), rng, separation=9.0)


@pytest.fixture
def three_chain(rng):
    return random_assembly((9, 7, 6), rng, separation=10.0)


def point_assembly(*points, fixed_index=0):
    """One single-residue chain per point."""
    chains = [ChainStructure(chr(65 + k), [p]) for k, p in enumerate(points)]
    return AssemblyState(chains, fixed_index)


def random_rotation(rng):
    from rigidgame.geom import quat_to_matrix, random_rotation_quat

    return quat_to_matrix(random_rotation_quat(rng))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
