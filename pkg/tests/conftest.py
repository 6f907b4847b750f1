import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from taskfarm.model import AnalysisType, Task
from taskfarm.trace import EventKind, TraceEvent

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_tasks(costs, atype=AnalysisType.d2dUHF):
    """One single-calc task per cost, ids in natural order."""
    return [
        Task(f"{atype.value}-{i:06d}", atype, [f"{atype.value}-{i:07d}"], float(c), f"args/{i}")
        for i, c in enumerate(costs)
    ]


def ev(t, kind, worker=None, task=None, cost=None, **kw):
    return TraceEvent(float(t), EventKind(kind), worker, task, cost, **kw)


@pytest.fixture
def cli_env(tmp_path, monkeypatch):
    """Clean PH_* environment and a scratch cwd for CLI tests."""
    for k in list(os.environ):
        if k.startswith("PH_"):
            monkeypatch.delenv(k)
    monkeypatch.chdir(tmp_path)
    return tmp_path


PYTHON = sys.executable


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    notes = getattr(item, "acceptance_notes", {})
    detail = ", ".join(f"{k}={v}" for k, v in notes.items())
    verdict = "PASS" if rep.passed else "FAIL"
    title = item.function.__doc__.strip().splitlines()[0] if item.function.__doc__ else item.name
    ACCEPTANCE_LINES[number] = f"criterion {number}: {verdict}  {title}" + (f"  [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
