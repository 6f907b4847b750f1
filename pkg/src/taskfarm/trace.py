"""RunTrace: the timestamped event log of a campaign.

One event per JSON line: ``{t, kind, worker, task, cost}``. WORKER_JOIN events
also carry ``slots`` (default 1) and TASK_DONE events carry ``calcs``, the
number of calculations completed, so the log alone is enough to rebuild the
run summary.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Sequence


class EventKind(str, Enum):
    WORKER_JOIN = "WORKER_JOIN"
    WORKER_LOST = "WORKER_LOST"
    WORKER_DRAINED = "WORKER_DRAINED"
    TASK_ASSIGN = "TASK_ASSIGN"
    TASK_START = "TASK_START"
    TASK_DONE = "TASK_DONE"
    TASK_FAIL = "TASK_FAIL"
    TASK_REQUEUE = "TASK_REQUEUE"


TASK_END_KINDS = frozenset({EventKind.TASK_DONE, EventKind.TASK_FAIL, EventKind.TASK_REQUEUE})
TERMINAL_KINDS = frozenset({EventKind.TASK_DONE, EventKind.TASK_FAIL})
POOL_LEAVE_KINDS = frozenset({EventKind.WORKER_LOST, EventKind.WORKER_DRAINED})


class TraceError(ValueError):
    def __init__(self, message: str, index: int):
        super().__init__(f"event {index}: {message}")
        self.index = index


@dataclass(frozen=True)
class TraceEvent:
    t: float
    kind: EventKind
    worker: str | None = None
    task: str | None = None
    cost: float | None = None
    slots: int | None = None
    calcs: int | None = None

    def to_json(self) -> dict:
        out = {
            "t": self.t,
            "kind": self.kind.value,
            "worker": self.worker,
            "task": self.task,
            "cost": self.cost,
        }
        if self.slots is not None:
            out["slots"] = self.slots
        if self.calcs is not None:
            out["calcs"] = self.calcs
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TraceEvent":
        return cls(
            t=float(obj["t"]),
            kind=EventKind(obj["kind"]),
            worker=obj.get("worker"),
            task=obj.get("task"),
            cost=None if obj.get("cost") is None else float(obj["cost"]),
            slots=None if obj.get("slots") is None else int(obj["slots"]),
            calcs=None if obj.get("calcs") is None else int(obj["calcs"]),
        )

    def line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"


def write_trace(events: Iterable[TraceEvent], dest: str | os.PathLike | IO[str]) -> None:
    if hasattr(dest, "write"):
        for e in events:
            dest.write(e.line())
        return
    with open(dest, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(e.line())


def read_trace(path: str | os.PathLike) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return [TraceEvent.from_json(json.loads(line)) for line in fh if line.strip()]


def validate_trace(events: Sequence[TraceEvent]) -> None:
    """Raise TraceError naming the first event that breaks a trace invariant."""
    last_t = float("-inf")
    joined: set[str] = set()
    active: set[str] = set()
    open_assign: dict[str, str | None] = {}
    for i, e in enumerate(events):
        if e.t < last_t:
            raise TraceError(f"time goes backwards ({e.t} < {last_t})", i)
        last_t = e.t
        if e.kind is EventKind.WORKER_JOIN:
            if e.worker is None:
                raise TraceError("WORKER_JOIN without worker", i)
            if e.worker in active:
                raise TraceError(f"worker {e.worker} joined twice", i)
            joined.add(e.worker)
            active.add(e.worker)
        elif e.kind in POOL_LEAVE_KINDS:
            if e.worker not in joined:
                raise TraceError(f"{e.kind.value} for worker {e.worker} that never joined", i)
            active.discard(e.worker)
        elif e.kind is EventKind.TASK_ASSIGN:
            if e.task is None:
                raise TraceError("TASK_ASSIGN without task", i)
            if e.task in open_assign:
                raise TraceError(f"task {e.task} assigned while already assigned", i)
            open_assign[e.task] = e.worker
        elif e.kind is EventKind.TASK_START:
            if e.task not in open_assign:
                raise TraceError(f"TASK_START for unassigned task {e.task}", i)
        else:  # task end events
            if e.task not in open_assign:
                raise TraceError(f"{e.kind.value} without a matching TASK_ASSIGN for {e.task}", i)
            if open_assign[e.task] != e.worker:
                raise TraceError(f"{e.kind.value} for {e.task} from {e.worker}, assigned to {open_assign[e.task]}", i)
            del open_assign[e.task]
