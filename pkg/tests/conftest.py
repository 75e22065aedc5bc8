import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from hjbfem.cli import builtin_problems, load_any_problem


@pytest.fixture(scope="session")
def problems():
    return {name: load_any_problem(f"builtin:{name}") for name in builtin_problems()}


@pytest.fixture(scope="session")
def heat(problems):
    return problems["HEAT"]


@pytest.fixture(scope="session")
def advect(problems):
    return problems["ADVECT"]


@pytest.fixture(scope="session")
def degen2(problems):
    return problems["DEGEN2"]


@pytest.fixture(scope="session")
def heat_implicit(problems):
    return problems["HEAT_IMPLICIT"]
