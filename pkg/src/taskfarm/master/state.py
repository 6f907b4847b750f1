"""The master's scheduling state machine.

Everything that mutates campaign state goes through :class:`MasterState`.
It is deliberately synchronous and clock-agnostic (callers pass ``now``), so
the network server and the discrete-event simulator drive the same code.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Sequence

from taskfarm.model import Ordering, Task, TaskState, order_tasks
from taskfarm.protocol import PROTOCOL_VERSION, Kind, Message
from taskfarm.trace import EventKind, TraceEvent

log = logging.getLogger(__name__)


class MasterError(Exception):
    """A command that cannot be applied to the current state."""


class WorkerState(str, Enum):
    ACTIVE = "ACTIVE"
    LOST = "LOST"
    DRAINED = "DRAINED"


@dataclass
class MasterConfig:
    heartbeat_interval_s: float = 10.0
    lost_timeout_s: float = 30.0
    retry_cap: int = 3
    ordering: Ordering = Ordering.NATURAL
    ordering_seed: int = 0
    target_pool: int | None = None
    host: str = "127.0.0.1"
    port: int = 0
    nowork_retry_s: float = 1.0

    def __post_init__(self) -> None:
        self.ordering = Ordering(self.ordering)
        if self.heartbeat_interval_s <= 0:
            raise ValueError("heartbeat_interval_s must be > 0")
        if self.lost_timeout_s < 2 * self.heartbeat_interval_s:
            raise ValueError("lost_timeout_s must be at least twice heartbeat_interval_s")
        if self.retry_cap < 0:
            raise ValueError("retry_cap must be >= 0")


@dataclass
class WorkerRecord:
    worker_id: str
    slots: int
    speed_hint: float | None = None
    state: WorkerState = WorkerState.ACTIVE
    last_heartbeat: float = 0.0
    assigned: set[str] = field(default_factory=set)
    joined_at: float = 0.0


@dataclass(frozen=True)
class RunSummary:
    n_calc: int
    n_task: int
    t_total: float
    t_worker: float
    n_worker: int
    r_fail: float
    n_done: int = 0
    n_failed: int = 0

    def to_json(self) -> dict:
        return {
            "N_calc": self.n_calc,
            "N_task": self.n_task,
            "t_total": self.t_total,
            "t_worker": self.t_worker,
            "N_worker": self.n_worker,
            "r_fail": self.r_fail,
            "N_done": self.n_done,
            "N_failed": self.n_failed,
        }


@dataclass(frozen=True)
class Snapshot:
    summary: RunSummary
    pool_workers: int
    pool_slots: int
    busy: int
    pending: int
    assigned: int
    running: int
    done: int
    failed: int
    finished: bool
    draining: bool

    def to_json(self) -> dict:
        return {
            "summary": self.summary.to_json(),
            "pool_workers": self.pool_workers,
            "pool_slots": self.pool_slots,
            "busy": self.busy,
            "pending": self.pending,
            "assigned": self.assigned,
            "running": self.running,
            "done": self.done,
            "failed": self.failed,
            "finished": self.finished,
            "draining": self.draining,
        }


@dataclass(frozen=True)
class AcceptedResult:
    t: float
    task_id: str
    worker_id: str
    calc_ids: tuple[str, ...]
    elapsed_s: float | None

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "task_id": self.task_id,
            "worker": self.worker_id,
            "calc_ids": list(self.calc_ids),
            "elapsed_s": self.elapsed_s,
        }


_ALLOWED = {
    (TaskState.PENDING, TaskState.ASSIGNED),
    (TaskState.ASSIGNED, TaskState.RUNNING),
    (TaskState.ASSIGNED, TaskState.PENDING),
    (TaskState.ASSIGNED, TaskState.FAILED),
    (TaskState.RUNNING, TaskState.DONE),
    (TaskState.RUNNING, TaskState.PENDING),
    (TaskState.RUNNING, TaskState.FAILED),
}


class MasterState:
    def __init__(
        self,
        tasks: Sequence[Task],
        config: MasterConfig | None = None,
        on_event: Callable[[TraceEvent], None] | None = None,
        on_result: Callable[[AcceptedResult], None] | None = None,
        keep_events: bool = True,
    ):
        self.config = config or MasterConfig()
        ordered = order_tasks(tasks, self.config.ordering, self.config.ordering_seed)
        self.tasks: dict[str, Task] = {}
        self._rank: dict[str, int] = {}
        for rank, t in enumerate(ordered):
            # the master owns task state; never mutate the caller's objects
            t = replace(
                t,
                calc_ids=list(t.calc_ids),
                state=TaskState.PENDING,
                attempts=0,
                assigned_worker=None,
                assigned=None,
                started=None,
                finished=None,
            )
            if t.task_id in self.tasks:
                raise MasterError(f"duplicate task_id {t.task_id}")
            self.tasks[t.task_id] = t
            self._rank[t.task_id] = rank
        self._queue: list[tuple[int, str]] = [(self._rank[tid], tid) for tid in self.tasks]
        heapq.heapify(self._queue)
        self.workers: dict[str, WorkerRecord] = {}
        self.events: list[TraceEvent] = []
        self.results: list[AcceptedResult] = []
        self._keep_events = keep_events
        self._on_event = on_event
        self._on_result = on_result
        self._next_worker = 1
        self._ever_joined: set[str] = set()
        self.draining = False
        self._busy_time = 0.0
        self._n_calc_done = 0
        self._n_done = 0
        self._n_failed = 0
        self._last_terminal_t = 0.0

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, ev: TraceEvent) -> None:
        if self._keep_events:
            self.events.append(ev)
        if self._on_event is not None:
            self._on_event(ev)

    def _move(self, task: Task, new: TaskState) -> None:
        if (task.state, new) not in _ALLOWED:
            raise MasterError(f"illegal transition {task.state.value}->{new.value} for {task.task_id}")
        task.state = new

    def _worker(self, worker_id: str) -> WorkerRecord:
        try:
            return self.workers[worker_id]
        except KeyError:
            raise MasterError(f"unknown worker {worker_id!r}") from None

    def _end_attempt(self, task: Task, now: float) -> None:
        if task.assigned is not None:
            self._busy_time += now - task.assigned
        w = self.workers.get(task.assigned_worker or "")
        if w is not None:
            w.assigned.discard(task.task_id)

    def _retry_or_fail(self, task: Task, now: float) -> str:
        """Close the current attempt of ``task``; return 'requeued' or 'failed'."""
        worker_id = task.assigned_worker
        self._end_attempt(task, now)
        task.attempts += 1
        task.assigned_worker = None
        task.assigned = task.started = None
        if task.attempts > self.config.retry_cap:
            self._move(task, TaskState.FAILED)
            task.finished = now
            self._n_failed += 1
            self._last_terminal_t = max(self._last_terminal_t, now)
            self._emit(TraceEvent(now, EventKind.TASK_FAIL, worker_id, task.task_id, task.total_cost))
            return "failed"
        self._move(task, TaskState.PENDING)
        heapq.heappush(self._queue, (self._rank[task.task_id], task.task_id))
        self._emit(TraceEvent(now, EventKind.TASK_REQUEUE, worker_id, task.task_id, task.total_cost))
        return "requeued"

    # -- queries -----------------------------------------------------------

    @property
    def finished(self) -> bool:
        return self._n_done + self._n_failed == len(self.tasks)

    @property
    def in_flight(self) -> int:
        return sum(len(w.assigned) for w in self.workers.values())

    def pending_count(self) -> int:
        return sum(1 for t in self.tasks.values() if t.state is TaskState.PENDING)

    def active_workers(self) -> list[WorkerRecord]:
        return [w for w in self.workers.values() if w.state is WorkerState.ACTIVE]

    # -- commands ----------------------------------------------------------

    def register(
        self,
        slots: int,
        now: float,
        worker_id: str | None = None,
        protocol_version: int = PROTOCOL_VERSION,
        speed_hint: float | None = None,
    ) -> Message:
        if protocol_version != PROTOCOL_VERSION:
            return Message(
                Kind.REGISTERED,
                worker_id=worker_id or "",
                error=f"protocol_version {protocol_version} not supported (want {PROTOCOL_VERSION})",
            )
        if slots < 1:
            return Message(Kind.REGISTERED, worker_id=worker_id or "", error="slots must be >= 1")
        if worker_id is not None:
            known = self.workers.get(worker_id)
            if known is not None and known.state is WorkerState.ACTIVE:
                known.last_heartbeat = now
                return Message(Kind.REGISTERED, worker_id=worker_id)
        else:
            while True:
                worker_id = f"w{self._next_worker:04d}"
                self._next_worker += 1
                if worker_id not in self.workers:
                    break
        self.workers[worker_id] = WorkerRecord(
            worker_id, slots, speed_hint, WorkerState.ACTIVE, last_heartbeat=now, joined_at=now
        )
        self._ever_joined.add(worker_id)
        self._emit(TraceEvent(now, EventKind.WORKER_JOIN, worker_id, slots=slots))
        return Message(Kind.REGISTERED, worker_id=worker_id)

    def next_task(self, worker_id: str, now: float) -> Message:
        w = self._worker(worker_id)
        if w.state is not WorkerState.ACTIVE:
            raise MasterError(f"worker {worker_id} is {w.state.value}")
        w.last_heartbeat = now
        if self.draining or self.finished:
            return Message(Kind.DRAIN)
        if len(w.assigned) >= w.slots:
            raise MasterError(f"worker {worker_id} is at slot capacity ({w.slots})")
        while self._queue:
            _, tid = heapq.heappop(self._queue)
            task = self.tasks[tid]
            if task.state is TaskState.PENDING:
                break
        else:
            return Message(Kind.NOWORK, retry_after_s=self.config.nowork_retry_s)
        self._move(task, TaskState.ASSIGNED)
        task.assigned_worker = worker_id
        task.assigned = now
        w.assigned.add(tid)
        self._emit(TraceEvent(now, EventKind.TASK_ASSIGN, worker_id, tid, task.total_cost))
        return Message(
            Kind.ASSIGN,
            worker_id=worker_id,
            task_id=tid,
            calc_ids=tuple(task.calc_ids),
            payload_ref=task.payload_ref,
            cost=task.total_cost,
        )

    def start(self, worker_id: str, task_id: str, now: float) -> bool:
        task = self.tasks.get(task_id)
        if task is None or task.assigned_worker != worker_id or task.state is not TaskState.ASSIGNED:
            return False
        self._move(task, TaskState.RUNNING)
        task.started = now
        self._emit(TraceEvent(now, EventKind.TASK_START, worker_id, task_id, task.total_cost))
        return True

    def heartbeat(self, worker_id: str, now: float, busy_task_ids: Iterable[str] = ()) -> None:
        w = self._worker(worker_id)
        if w.state is not WorkerState.ACTIVE:
            raise MasterError(f"worker {worker_id} is {w.state.value}")
        w.last_heartbeat = now
        for tid in busy_task_ids:
            self.start(worker_id, tid, now)

    def touch(self, worker_id: str, now: float) -> None:
        w = self.workers.get(worker_id)
        if w is not None and w.state is WorkerState.ACTIVE:
            w.last_heartbeat = now

    def record_result(
        self,
        worker_id: str,
        task_id: str,
        status: str,
        now: float,
        elapsed_s: float | None = None,
        reason: str | None = None,
    ) -> Message:
        self.touch(worker_id, now)
        task = self.tasks.get(task_id)
        if task is None:
            return Message(Kind.ACK, task_id=task_id, warning="unknown task", discarded=True)
        live = task.assigned_worker == worker_id and task.state in (TaskState.ASSIGNED, TaskState.RUNNING)
        if not live:
            # duplicate, late (worker already declared lost) or stale: first result wins
            log.info("discarding %s result for %s from %s (task is %s)", status, task_id, worker_id, task.state.value)
            return Message(Kind.ACK, task_id=task_id, discarded=True)
        if task.state is TaskState.ASSIGNED:
            self.start(worker_id, task_id, now)
        if status == "OK":
            self._end_attempt(task, now)
            self._move(task, TaskState.DONE)
            task.finished = now
            self._n_done += 1
            self._n_calc_done += len(task.calc_ids)
            self._last_terminal_t = max(self._last_terminal_t, now)
            self._emit(
                TraceEvent(now, EventKind.TASK_DONE, worker_id, task_id, task.total_cost, calcs=len(task.calc_ids))
            )
            accepted = AcceptedResult(now, task_id, worker_id, tuple(task.calc_ids), elapsed_s)
            self.results.append(accepted)
            if self._on_result is not None:
                self._on_result(accepted)
            return Message(Kind.ACK, task_id=task_id, discarded=False)
        log.info("task %s failed on %s: %s", task_id, worker_id, reason)
        outcome = self._retry_or_fail(task, now)
        return Message(Kind.ACK, task_id=task_id, discarded=False, reason=outcome)

    def mark_lost(self, worker_id: str, now: float) -> list[str]:
        """Declare a worker lost and hand its tasks back to the queue."""
        w = self._worker(worker_id)
        if w.state is not WorkerState.ACTIVE:
            return []
        requeued = []
        for tid in sorted(w.assigned, key=self._rank.__getitem__):
            if self._retry_or_fail(self.tasks[tid], now) == "requeued":
                requeued.append(tid)
        w.assigned.clear()
        w.state = WorkerState.LOST
        self._emit(TraceEvent(now, EventKind.WORKER_LOST, worker_id))
        return requeued

    def detect_lost(self, now: float) -> list[str]:
        requeued: list[str] = []
        for w in list(self.workers.values()):
            if w.state is WorkerState.ACTIVE and now - w.last_heartbeat > self.config.lost_timeout_s:
                log.warning("worker %s silent for %.1fs, declaring it lost", w.worker_id, now - w.last_heartbeat)
                requeued.extend(self.mark_lost(w.worker_id, now))
        return requeued

    def mark_drained(self, worker_id: str, now: float) -> None:
        w = self._worker(worker_id)
        if w.state is not WorkerState.ACTIVE:
            return
        for tid in sorted(w.assigned, key=self._rank.__getitem__):
            self._retry_or_fail(self.tasks[tid], now)
        w.assigned.clear()
        w.state = WorkerState.DRAINED
        self._emit(TraceEvent(now, EventKind.WORKER_DRAINED, worker_id))

    def begin_drain(self) -> None:
        self.draining = True

    # -- reporting ---------------------------------------------------------

    def summary(self) -> RunSummary:
        n_task = len(self.tasks)
        return RunSummary(
            n_calc=self._n_calc_done,
            n_task=n_task,
            t_total=self._last_terminal_t,
            t_worker=self._busy_time,
            n_worker=len(self._ever_joined),
            r_fail=self._n_failed / n_task if n_task else 0.0,
            n_done=self._n_done,
            n_failed=self._n_failed,
        )

    def snapshot(self) -> Snapshot:
        counts = {s: 0 for s in TaskState}
        for t in self.tasks.values():
            counts[t.state] += 1
        active = self.active_workers()
        return Snapshot(
            summary=self.summary(),
            pool_workers=len(active),
            pool_slots=sum(w.slots for w in active),
            busy=counts[TaskState.ASSIGNED] + counts[TaskState.RUNNING],
            pending=counts[TaskState.PENDING],
            assigned=counts[TaskState.ASSIGNED],
            running=counts[TaskState.RUNNING],
            done=counts[TaskState.DONE],
            failed=counts[TaskState.FAILED],
            finished=self.finished,
            draining=self.draining,
        )


def summary_matches(a: RunSummary, b: RunSummary, tol: float = 1e-6) -> bool:
    return (
        a.n_calc == b.n_calc
        and a.n_task == b.n_task
        and a.n_worker == b.n_worker
        and a.n_done == b.n_done
        and a.n_failed == b.n_failed
        and math.isclose(a.t_total, b.t_total, abs_tol=tol)
        and math.isclose(a.t_worker, b.t_worker, rel_tol=tol, abs_tol=tol)
        and math.isclose(a.r_fail, b.r_fail, abs_tol=tol)
    )
