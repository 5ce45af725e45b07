import pytest

from hessolve import models


@pytest.fixture
def mm1():
    return models.mm1_generator(1.0, 2.0)


@pytest.fixture
def retrial_spec():
    return models.RetrialSpec(1.0, 1.0, 2, 1.0)


@pytest.fixture
def counterexample():
    return models.counterexample_generator(models.CounterexampleSpec())


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                rows.append((props["criterion"], outcome.upper(), props.get("detail", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num, outcome, detail in sorted(rows):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if outcome == 'PASSED' else 'FAIL'}  {detail}")
