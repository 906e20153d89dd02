import pytest

from bpre_lab.environment import FiniteMixture, calibrate_intermediate
from bpre_lab.offspring_law import LinearFractionalLaw

# filled by the acceptance suite, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def single_atom():
    return FiniteMixture.single(0.25, 0.5)


@pytest.fixture(scope="session")
def half_mix():
    return FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.5, 0.5))


@pytest.fixture(scope="session")
def strong_mix():
    return FiniteMixture((LinearFractionalLaw(0.25, 0.5), LinearFractionalLaw(0.5, 0.2)), (0.95, 0.05))


@pytest.fixture(scope="session")
def intermediate_mix():
    return calibrate_intermediate([LinearFractionalLaw(0.05, 0.7), LinearFractionalLaw(0.7, 0.1),
                                   LinearFractionalLaw(0.2, 0.45)])
