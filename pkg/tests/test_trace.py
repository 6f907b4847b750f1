import io
import json

import pytest

from taskfarm.trace import EventKind, TraceError, TraceEvent, read_trace, validate_trace, write_trace

from conftest import ev


def test_line_format_is_canonical():
    e = ev(1.5, "TASK_DONE", "w0001", "d2dUHF-000001", 12.0, calcs=3)
    assert e.line() == '{"calcs":3,"cost":12.0,"kind":"TASK_DONE","t":1.5,"task":"d2dUHF-000001","worker":"w0001"}\n'
    join = ev(0, "WORKER_JOIN", "w0001", slots=2)
    assert json.loads(join.line()) == {"t": 0.0, "kind": "WORKER_JOIN", "worker": "w0001", "task": None,
                                       "cost": None, "slots": 2}


def test_round_trip(tmp_path):
    events = [
        ev(0, "WORKER_JOIN", "w1", slots=2),
        ev(1, "TASK_ASSIGN", "w1", "t1", 5.0),
        ev(1, "TASK_START", "w1", "t1", 5.0),
        ev(6, "TASK_DONE", "w1", "t1", 5.0, calcs=1),
        ev(7, "WORKER_DRAINED", "w1"),
    ]
    write_trace(events, tmp_path / "t.jsonl")
    assert read_trace(tmp_path / "t.jsonl") == events
    buf = io.StringIO()
    write_trace(events, buf)
    assert buf.getvalue() == (tmp_path / "t.jsonl").read_text()
    validate_trace(events)


def test_plain_five_field_lines_are_accepted(tmp_path):
    (tmp_path / "t.jsonl").write_text(
        '{"t": 0, "kind": "WORKER_JOIN", "worker": "a", "task": null, "cost": null}\n'
        '{"t": 2, "kind": "TASK_ASSIGN", "worker": "a", "task": "x", "cost": 3}\n'
    )
    events = read_trace(tmp_path / "t.jsonl")
    assert events[1] == TraceEvent(2.0, EventKind.TASK_ASSIGN, "a", "x", 3.0)
    validate_trace(events)


@pytest.mark.parametrize(
    "events,index",
    [
        ([ev(5, "WORKER_JOIN", "a"), ev(4, "WORKER_JOIN", "b")], 1),
        ([ev(0, "WORKER_JOIN", "a"), ev(1, "TASK_DONE", "a", "x")], 1),
        ([ev(0, "WORKER_LOST", "a")], 0),
        ([ev(0, "WORKER_JOIN", "a"), ev(0, "WORKER_JOIN", "a")], 1),
        ([ev(0, "WORKER_JOIN", "a"), ev(1, "TASK_ASSIGN", "a", "x"), ev(2, "TASK_ASSIGN", "a", "x")], 2),
        ([ev(0, "WORKER_JOIN", "a"), ev(1, "TASK_ASSIGN", "a", "x"), ev(2, "TASK_DONE", "b", "x")], 2),
        ([ev(0, "TASK_START", "a", "x")], 0),
    ],
)
def test_invalid_trace_names_first_offending_index(events, index):
    with pytest.raises(TraceError) as info:
        validate_trace(events)
    assert info.value.index == index


def test_rejoin_after_loss_is_valid():
    validate_trace([ev(0, "WORKER_JOIN", "a"), ev(1, "WORKER_LOST", "a"), ev(2, "WORKER_JOIN", "a")])
