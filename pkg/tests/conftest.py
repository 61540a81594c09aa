import pytest

from eqcausal.pipeline import load_model, lotka_volterra_model, mass_spring_model


@pytest.fixture
def lv():
    return lotka_volterra_model()


@pytest.fixture
def ms4():
    return mass_spring_model(4, L=5)


@pytest.fixture
def ms2():
    return mass_spring_model(2, L=3)


@pytest.fixture
def cascade():
    return load_model("cascade")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
