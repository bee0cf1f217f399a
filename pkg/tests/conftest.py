from pathlib import Path

import numpy as np
import pytest

from gnnopf.case_io import bundled_case, bundled_case_path, load_case
from gnnopf.grid import build_grid_model

FIXTURES = Path(__file__).parent / "fixtures"
TWO_BUS = FIXTURES / "two_bus.m"


def raw_matrix(path, section):
    """Rows of ``mpc.<section>`` read line by line, independent of the package parser."""
    rows, inside = [], False
    for line in Path(path).read_text().splitlines():
        line = line.split("%")[0].strip()
        if not inside:
            if line.replace(" ", "").startswith(f"mpc.{section}=["):
                inside = True
            continue
        if line.startswith("]"):
            break
        if line:
            rows.append([float(v) for v in line.rstrip(";").split()])
    return np.array(rows)


@pytest.fixture(scope="session")
def two_bus_case():
    return load_case(TWO_BUS)


@pytest.fixture(scope="session")
def two_bus_model(two_bus_case):
    return build_grid_model(two_bus_case)


@pytest.fixture(scope="session")
def case30():
    return bundled_case("case30")


@pytest.fixture(scope="session")
def case30_model(case30):
    return build_grid_model(case30)


@pytest.fixture(scope="session")
def case30_path():
    return bundled_case_path("case30")
