import sys
from pathlib import Path

import pytest

from trafficsem import ingest, kg
from trafficsem.embed import Encoders
from trafficsem.providers import StubProvider

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(scope="session")
def small_synth():
    return ingest.synth_dataset(4, 60, seed=3)


@pytest.fixture(scope="session")
def stub():
    return StubProvider(seed=0)


@pytest.fixture(scope="session")
def encoders():
    return Encoders.default()


@pytest.fixture(scope="session")
def dos_graph(stub):
    return kg.build_graph("DoS", stub, v=4, n=2)


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict("C3", ok, "detail")``."""
    def record(cid, ok, detail=""):
        ACCEPTANCE[cid] = f"{cid} {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        print(ACCEPTANCE[cid])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
            terminalreporter.write_line(ACCEPTANCE[cid])
