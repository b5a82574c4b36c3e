import json
from pathlib import Path

import pytest

from ppollm.coverage import toolchain_available

FIXTURES = Path(__file__).parent / "fixtures"

needs_toolchain = pytest.mark.skipif(not toolchain_available(), reason="no C compiler/gcov on PATH")


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


def read_fixture(name: str) -> str:
    return (FIXTURES / name).read_text()


def load_json_fixture(name: str):
    return json.loads((FIXTURES / name).read_text())


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
