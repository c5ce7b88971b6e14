import os

import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.environ.get("MIA_AUDIT_DATA", os.path.join(ROOT, "data", "raw"))


def _have(*names):
    return all(os.path.exists(os.path.join(DATA, n)) for n in names)


HAVE_ADULT = _have("adult.data", "adult.test")
HAVE_COMPAS = _have("compas-scores-two-years.csv")

needs_adult = pytest.mark.skipif(not HAVE_ADULT, reason="ADULT raw files not found")
needs_compas = pytest.mark.skipif(not HAVE_COMPAS, reason="COMPAS raw file not found")


@pytest.fixture(scope="session")
def data_dir():
    return DATA


@pytest.fixture(scope="session")
def compas(data_dir):
    if not HAVE_COMPAS:
        pytest.skip("COMPAS raw file not found")
    from mia_audit.ingest import load_compas
    return load_compas(data_dir)


@pytest.fixture(scope="session")
def adult(data_dir):
    if not HAVE_ADULT:
        pytest.skip("ADULT raw files not found")
    from mia_audit.ingest import load_adult
    return load_adult(data_dir)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
