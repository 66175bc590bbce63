import numpy as np
import pytest

from nlmemboot.model import (
    INTERCEPT,
    Design,
    ErrorModel,
    ModelSpec,
    PopulationParams,
    Transform,
    design_from_groups,
    sig_emax_spec,
)

TABLE1_OMEGA = np.array([[0.09, 0, 0], [0, 0.49, 0.245], [0, 0.245, 0.49]])
RICH_DOSES = (0, 100, 300, 1000)


def random_intercept_spec(error_model=ErrorModel.CONSTANT):
    return ModelSpec(INTERCEPT, error_model, (Transform.NORMAL,), [[True]])


def balanced_design(n_subjects, n_obs, prefix="s"):
    width = len(str(n_subjects))
    ids = tuple(f"{prefix}{i:0{width}d}" for i in range(n_subjects))
    return Design(ids, tuple([np.zeros(n_obs)] * n_subjects))


def table1_theta(gamma=1.0, sigma=0.1):
    return PopulationParams([5.0, 30.0, 500.0, gamma], TABLE1_OMEGA, [sigma])


@pytest.fixture
def emax_spec():
    return sig_emax_spec()


@pytest.fixture
def rich_design():
    return design_from_groups([RICH_DOSES], [100])


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
