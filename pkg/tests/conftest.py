import numpy as np
import pytest

from echolab.ontology import default_ontology
from echolab.synth import generate_synthetic


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture(scope="session")
def small_corpus(ontology):
    """300 synthetic reports, shared read-only across tests."""
    return generate_synthetic(ontology, 300, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance():
    """Registry of acceptance outcomes: ``record(key, title, ok, detail)``."""
    def record(key, title, ok, detail=""):
        ACCEPTANCE[key] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key} {title}: {detail}")
