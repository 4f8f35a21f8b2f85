import pytest

from vardimwalk.lattice import LatticeParams, build_graphs
from vardimwalk.measures import kernel, measures

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_params():
    return LatticeParams(3, "5/8", 11, 11)


@pytest.fixture(scope="session")
def small_graph(small_params):
    return build_graphs(small_params)


@pytest.fixture(scope="session")
def small_measures(small_graph):
    return measures(small_graph)


@pytest.fixture(scope="session")
def reflected_kernel(small_graph):
    return kernel(small_graph, "reflected")


@pytest.fixture(scope="session")
def full_kernel(small_graph):
    return kernel(small_graph, "full")


@pytest.fixture(scope="session")
def acceptance_lines():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
