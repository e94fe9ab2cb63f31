import asyncio
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).resolve().parent))

from challenges import COMPANY_DDL, EMPLOYEE_DDL  # noqa: E402

from provguard.schema import parse_schema  # noqa: E402

settings.register_profile(
    "repo", deadline=None, derandomize=True, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def employee_schema():
    return parse_schema(EMPLOYEE_DDL)


@pytest.fixture(scope="session")
def company_schema():
    return parse_schema(COMPANY_DDL)


@pytest.fixture
def employee_schema_file(tmp_path):
    p = tmp_path / "employees.sql"
    p.write_text(EMPLOYEE_DDL, encoding="utf-8")
    return p


def run(coro):
    """Drive a coroutine to completion on a fresh loop."""
    return asyncio.run(coro)
