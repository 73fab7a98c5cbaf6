import numpy as np
import pytest

from emidg.dg_space import DgSpace, InterfaceSpace
from emidg.mesh import GeometrySpec, build


@pytest.fixture(scope="session")
def plus_mesh():
    return build(GeometrySpec("plus_cell", 8, diagonal="left"))


@pytest.fixture(scope="session")
def two_cell_mesh():
    return build(GeometrySpec("two_cell", 8, diagonal="left"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def space_and_iface(mesh, k):
    space = DgSpace(mesh, k)
    return space, InterfaceSpace(space)


ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict():
    """Record one acceptance line; the test still asserts on its own."""
    def record(name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        ACCEPTANCE[name] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[name])
