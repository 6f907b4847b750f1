"""Capacity accounting over a RunTrace.

The pool size p(t) and busy count b(t) are measured in slots. Over a campaign
of makespan T with target pool N_w, the capacity C = N_w * T splits into

* L, latency: capacity missing because the pool is below target,
* O, overhead: pool slots idle before the tail phase starts (t < t2),
* I, tail idle: pool slots idle once fewer tasks remain than slots (t >= t2),
* B, busy: slots running a task.

Series are sampled at t_k = k * dt for k = 1..ceil(T / dt). Each sample is the
state just before t_k (events at or after t_k are not yet applied) and stands
for the whole bin ending at t_k, so the areas sum to N_w * ceil(T/dt) * dt and
differ from C by less than one bin.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

from taskfarm.master.state import RunSummary
from taskfarm.trace import (
    POOL_LEAVE_KINDS,
    TASK_END_KINDS,
    TERMINAL_KINDS,
    EventKind,
    TraceEvent,
    validate_trace,
)


class AnalyticsError(ValueError):
    pass


@dataclass(frozen=True)
class Series:
    dt: float
    t: tuple[float, ...]
    pool: tuple[int, ...]
    busy: tuple[int, ...]
    remaining: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.t)


def campaign_end(events: Sequence[TraceEvent]) -> int:
    """Index of the last terminal task event (or of the last event if none).

    Events after it (workers draining away) belong to shutdown, not the run.
    """
    for i in range(len(events) - 1, -1, -1):
        if events[i].kind in TERMINAL_KINDS:
            return i
    return len(events) - 1


def build_series(events: Sequence[TraceEvent], dt: float = 60.0, origin: float = 0.0) -> Series:
    if not dt > 0:
        raise AnalyticsError(f"dt must be > 0, got {dt}")
    validate_trace(events)
    if not events:
        return Series(dt, (), (), (), ())
    end = campaign_end(events)
    horizon = events[end].t - origin
    n_bins = math.ceil(horizon / dt) if horizon > 0 else 0
    slots: dict[str, int] = {}
    n_tasks = len({e.task for e in events[: end + 1] if e.task is not None})
    pool = busy = finished = 0
    ts, ps, bs, rs = [], [], [], []
    i = 0
    for k in range(1, n_bins + 1):
        sample_t = k * dt
        while i <= end and events[i].t - origin < sample_t:
            e = events[i]
            if e.kind is EventKind.WORKER_JOIN:
                slots[e.worker] = e.slots or 1
                pool += slots[e.worker]
            elif e.kind in POOL_LEAVE_KINDS:
                pool -= slots.pop(e.worker, 0)
            elif e.kind is EventKind.TASK_ASSIGN:
                busy += 1
            elif e.kind in TASK_END_KINDS:
                busy -= 1
                if e.kind in TERMINAL_KINDS:
                    finished += 1
            i += 1
        ts.append(origin + sample_t)
        ps.append(pool)
        bs.append(busy)
        rs.append(n_tasks - finished)
    return Series(dt, tuple(ts), tuple(ps), tuple(bs), tuple(rs))


@dataclass(frozen=True)
class PhaseDecomposition:
    n_w: int
    T: float
    t1: float
    t2: float
    L: float
    O: float
    I: float
    B: float
    L_submission: float
    L_main: float
    O_submission: float
    O_main: float
    U_tail: float
    dt: float
    identity_applicable: bool
    identity_residual: float | None

    @property
    def capacity(self) -> float:
        return self.n_w * self.T

    def percentages(self) -> dict[str, float]:
        c = self.capacity
        if c <= 0:
            return {"L": 0.0, "O": 0.0, "I": 0.0, "B": 0.0}
        return {k: 100.0 * getattr(self, k) / c for k in ("L", "O", "I", "B")}

    def to_json(self) -> dict:
        out = asdict(self)
        out["C"] = self.capacity
        out["percent"] = self.percentages()
        return out


def decompose(events: Sequence[TraceEvent], n_w: int, dt: float = 60.0, origin: float = 0.0) -> PhaseDecomposition:
    if n_w <= 0:
        raise AnalyticsError(f"target pool N_w must be > 0, got {n_w}")
    s = build_series(events, dt, origin)
    T = events[campaign_end(events)].t - origin if events else 0.0
    t1 = next((t - origin for t, p in zip(s.t, s.pool) if p >= n_w), T)
    t2 = next((t - origin for t, p, r in zip(s.t, s.pool, s.remaining) if r < p), T)
    L = L_sub = O = O_sub = I = B = 0.0
    tail_busy = tail_pool = 0.0
    w = dt
    for t, p, b in zip(s.t, s.pool, s.busy):
        rel = t - origin
        lat = w * max(0, n_w - p)
        idle = w * (p - b)
        L += lat
        B += w * b
        if rel < t1:
            L_sub += lat
        if rel < t2:
            O += idle
            if rel < t1:
                O_sub += idle
        else:
            I += idle
            tail_busy += w * b
            tail_pool += w * p
    applicable = all(p <= n_w for p in s.pool)
    residual = None
    if applicable and T > 0:
        residual = (L + O + I + B - n_w * T) / (n_w * T)
    return PhaseDecomposition(
        n_w=n_w,
        T=T,
        t1=t1,
        t2=t2,
        L=L,
        O=O,
        I=I,
        B=B,
        L_submission=L_sub,
        L_main=L - L_sub,
        O_submission=O_sub,
        O_main=O - O_sub,
        U_tail=tail_busy / tail_pool if tail_pool > 0 else 0.0,
        dt=dt,
        identity_applicable=applicable,
        identity_residual=residual,
    )


@dataclass(frozen=True)
class ProfilePoint:
    t: float
    ordinal: int
    worker: str
    task: str


def run_profile(events: Sequence[TraceEvent]) -> list[ProfilePoint]:
    """One (completion time, worker ordinal) point per completed task."""
    ordinals: dict[str, int] = {}
    points = []
    for e in events:
        if e.kind is EventKind.WORKER_JOIN and e.worker not in ordinals:
            ordinals[e.worker] = len(ordinals)
        elif e.kind is EventKind.TASK_DONE:
            if e.worker not in ordinals:
                ordinals[e.worker] = len(ordinals)
            points.append(ProfilePoint(e.t, ordinals[e.worker], e.worker, e.task))
    return points


def summary_from_trace(events: Sequence[TraceEvent]) -> RunSummary:
    validate_trace(events)
    tasks: set[str] = set()
    workers: set[str] = set()
    assigned_at: dict[str, float] = {}
    busy = 0.0
    done = failed = calcs = 0
    t_total = 0.0
    for e in events:
        if e.kind is EventKind.WORKER_JOIN:
            workers.add(e.worker)
        elif e.kind is EventKind.TASK_ASSIGN:
            tasks.add(e.task)
            assigned_at[e.task] = e.t
        elif e.kind in TASK_END_KINDS:
            busy += e.t - assigned_at.pop(e.task)
            if e.kind is EventKind.TASK_DONE:
                done += 1
                calcs += e.calcs or 0
                t_total = max(t_total, e.t)
            elif e.kind is EventKind.TASK_FAIL:
                failed += 1
                t_total = max(t_total, e.t)
    n_task = len(tasks)
    return RunSummary(
        n_calc=calcs,
        n_task=n_task,
        t_total=t_total,
        t_worker=busy,
        n_worker=len(workers),
        r_fail=failed / n_task if n_task else 0.0,
        n_done=done,
        n_failed=failed,
    )


# -- work-conservation sanity check ----------------------------------------


@dataclass(frozen=True)
class BoundCheck:
    t_total: float
    t_busy: float
    slots: float
    lower_bound: float
    passed: bool


def check_bounds(rows: Iterable[Mapping[str, float]]) -> list[BoundCheck]:
    """A makespan can never beat total busy time spread over every slot."""
    out = []
    for row in rows:
        slots = float(row["slots"])
        if not slots > 0:
            raise AnalyticsError(f"slots must be > 0, got {slots}")
        lb = float(row["t_busy"]) / slots
        out.append(BoundCheck(float(row["t_total"]), float(row["t_busy"]), slots, lb, float(row["t_total"]) >= lb))
    return out


# -- CSV output --------------------------------------------------------------


def write_series_csv(s: Series, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "pool", "busy", "remaining"])
        for row in zip(s.t, s.pool, s.busy, s.remaining):
            w.writerow(row)


def write_profile_csv(points: Sequence[ProfilePoint], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "worker_ordinal", "worker", "task"])
        for p in points:
            w.writerow([p.t, p.ordinal, p.worker, p.task])
