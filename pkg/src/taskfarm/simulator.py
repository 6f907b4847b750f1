"""Deterministic discrete-event simulation of a campaign.

Scheduling decisions are made by the real :class:`MasterState`; this module
only supplies the clock, worker arrivals, execution times, failures and (in
push mode) dispatch loss. Time is exact event time.
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from taskfarm.analytics import decompose
from taskfarm.master.state import MasterConfig, MasterState, RunSummary
from taskfarm.model import Ordering, Task
from taskfarm.protocol import Kind
from taskfarm.trace import TraceEvent, write_trace


class SimulationError(ValueError):
    pass


class ArrivalKind(str, Enum):
    IMMEDIATE = "IMMEDIATE"
    FIXED_STAGGER = "FIXED_STAGGER"
    SHIFTED_EXPONENTIAL = "SHIFTED_EXPONENTIAL"
    EMPIRICAL = "EMPIRICAL"


class FailureKind(str, Enum):
    NONE = "NONE"
    KILL_AT = "KILL_AT"
    LIFETIME = "LIFETIME"


class Mode(str, Enum):
    PULL = "PULL"
    PUSH = "PUSH"


@dataclass(frozen=True)
class ArrivalModel:
    kind: ArrivalKind = ArrivalKind.IMMEDIATE
    interval_s: float = 0.0
    offset_s: float = 0.0
    mean_s: float = 0.0
    times: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ArrivalKind(self.kind))

    def sample(self, n: int, rng: np.random.Generator) -> list[float]:
        kind = self.kind
        if kind is ArrivalKind.IMMEDIATE:
            return [0.0] * n
        if kind is ArrivalKind.FIXED_STAGGER:
            return [i * self.interval_s for i in range(n)]
        if kind is ArrivalKind.SHIFTED_EXPONENTIAL:
            draws = rng.exponential(self.mean_s, n) if self.mean_s > 0 else np.zeros(n)
            return [self.offset_s + float(x) for x in draws]
        if len(self.times) < n:
            raise SimulationError(f"EMPIRICAL arrivals list has {len(self.times)} times for {n} workers")
        return [float(t) for t in self.times[:n]]


@dataclass(frozen=True)
class FailureModel:
    kind: FailureKind = FailureKind.NONE
    kills: tuple[tuple[float, int], ...] = ()
    mean_lifetime_s: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", FailureKind(self.kind))


@dataclass(frozen=True)
class ClusterSpec:
    n_workers: int
    slots: int = 1
    speeds: float | tuple[float, ...] = 1.0
    arrival: ArrivalModel = field(default_factory=ArrivalModel)
    failure: FailureModel = field(default_factory=FailureModel)
    rtt_s: float = 0.0
    seed: int = 0
    replace_lost_after_s: float | None = None

    def __post_init__(self) -> None:
        if self.n_workers < 1:
            raise SimulationError("cluster needs at least one worker")
        if self.slots < 1:
            raise SimulationError("slots must be >= 1")
        speeds = self.speeds if isinstance(self.speeds, tuple) else (self.speeds,)
        if not speeds or any(not s > 0 for s in speeds):
            raise SimulationError("speeds must be > 0")
        if self.rtt_s < 0:
            raise SimulationError("rtt must be >= 0")

    def speed_of(self, index: int) -> float:
        if isinstance(self.speeds, tuple):
            return self.speeds[index % len(self.speeds)]
        return float(self.speeds)

    @property
    def total_slots(self) -> int:
        return self.n_workers * self.slots


@dataclass(frozen=True)
class PushSpec:
    p_loss: float = 0.0
    dispatch_timeout_s: float = 5.0
    resend_cap: int = 3

    def __post_init__(self) -> None:
        if not 0 <= self.p_loss < 1:
            raise SimulationError("p_loss must be in [0, 1)")
        if self.resend_cap < 0:
            raise SimulationError("resend cap must be >= 0")


@dataclass
class SimResult:
    events: list[TraceEvent]
    summary: RunSummary
    completed: bool

    @property
    def makespan(self) -> float:
        return self.summary.t_total


@dataclass
class _Worker:
    worker_id: str
    index: int
    speed: float
    slots: int
    alive: bool = True
    retired: int = 0


# event codes; ties at equal times resolve in scheduling order
_ARRIVE, _REQUEST, _COMPLETE, _KILL, _DETECT, _DELIVER, _ABANDON = range(7)


class _Sim:
    def __init__(
        self,
        tasks: Sequence[Task],
        cluster: ClusterSpec,
        mode: Mode,
        push: PushSpec | None,
        ordering: Ordering,
        config: MasterConfig | None,
    ):
        if not tasks:
            raise SimulationError("nothing to simulate: zero tasks")
        self.cluster = cluster
        self.mode = Mode(mode)
        self.push = push or PushSpec()
        arrivals_ss, failures_ss, ordering_ss, loss_ss = np.random.SeedSequence(cluster.seed).spawn(4)
        self.rng_arrivals = np.random.default_rng(arrivals_ss)
        self.rng_failures = np.random.default_rng(failures_ss)
        self.rng_loss = np.random.default_rng(loss_ss)
        cfg = replace(config or MasterConfig(), ordering=Ordering(ordering))
        cfg.ordering_seed = int(ordering_ss.generate_state(1)[0])
        self.state = MasterState(tasks, cfg)
        self.config = cfg
        self._heap: list[tuple[float, int, int, tuple]] = []
        self._seq = 0
        self.workers: dict[str, _Worker] = {}
        self._parked: list[tuple[str, int]] = []  # pull: slots that got NOWORK
        self._idle: list[tuple[str, int]] = []  # push: slots waiting for dispatch
        self._n_spawned = 0

    def schedule(self, t: float, code: int, *data: Any) -> None:
        heapq.heappush(self._heap, (t, self._seq, code, data))
        self._seq += 1

    def spawn(self, t: float, index: int) -> None:
        self._n_spawned += 1
        wid = f"w{self._n_spawned:04d}"
        self.schedule(t, _ARRIVE, wid, index)

    def run(self) -> SimResult:
        for i, t in enumerate(self.cluster.arrival.sample(self.cluster.n_workers, self.rng_arrivals)):
            self.spawn(t, i)
        fail = self.cluster.failure
        if fail.kind is FailureKind.KILL_AT:
            # a kill aimed at a worker that has not arrived yet is a no-op
            for t, index in fail.kills:
                if not 0 <= index < self.cluster.n_workers:
                    raise SimulationError(f"kill targets worker index {index} outside the cluster")
                self.schedule(t, _KILL, f"w{index + 1:04d}")
        handlers = {
            _ARRIVE: self.on_arrive,
            _REQUEST: self.on_request,
            _COMPLETE: self.on_complete,
            _KILL: self.on_kill,
            _DETECT: self.on_detect,
            _DELIVER: self.on_deliver,
            _ABANDON: self.on_abandon,
        }
        while self._heap:
            t, _, code, data = heapq.heappop(self._heap)
            handlers[code](t, *data)
        st = self.state
        return SimResult(list(st.events), st.summary(), st.finished)

    # -- workers -------------------------------------------------------------

    def on_arrive(self, now: float, wid: str, index: int) -> None:
        if self.state.finished:
            return
        w = _Worker(wid, index, self.cluster.speed_of(index), self.cluster.slots)
        self.workers[wid] = w
        self.state.register(w.slots, now, worker_id=wid)
        fail = self.cluster.failure
        if fail.kind is FailureKind.LIFETIME and fail.mean_lifetime_s > 0:
            self.schedule(now + float(self.rng_failures.exponential(fail.mean_lifetime_s)), _KILL, wid)
        for slot in range(w.slots):
            self.slot_idle(now, wid, slot)

    def slot_idle(self, now: float, wid: str, slot: int) -> None:
        if self.mode is Mode.PULL:
            self.schedule(now + self.cluster.rtt_s, _REQUEST, wid, slot)
        else:
            self._idle.append((wid, slot))
            self.dispatch(now)

    def retire(self, now: float, w: _Worker) -> None:
        w.retired += 1
        if w.retired == w.slots:
            self.state.mark_drained(w.worker_id, now)

    def on_kill(self, now: float, wid: str) -> None:
        w = self.workers.get(wid)
        if w is None or not w.alive or self.state.finished:
            return
        w.alive = False
        self._parked = [p for p in self._parked if p[0] != wid]
        self._idle = [p for p in self._idle if p[0] != wid]
        # the master only notices once the worker has been silent long enough
        self.schedule(now + self.config.lost_timeout_s, _DETECT, wid)
        if self.cluster.replace_lost_after_s is not None:
            self.spawn(now + self.cluster.replace_lost_after_s, w.index)

    def on_detect(self, now: float, wid: str) -> None:
        requeued = self.state.mark_lost(wid, now)
        self.wake(now, len(requeued))
        if self.state.finished:
            self.finish(now)

    # -- pull ----------------------------------------------------------------

    def on_request(self, now: float, wid: str, slot: int) -> None:
        w = self.workers[wid]
        if not w.alive:
            return
        reply = self.state.next_task(wid, now)
        if reply.kind is Kind.ASSIGN:
            self.state.start(wid, reply.task_id, now)
            self.schedule(now + reply.cost / w.speed, _COMPLETE, wid, slot, reply.task_id)
        elif reply.kind is Kind.NOWORK:
            self._parked.append((wid, slot))
        else:
            self.retire(now, w)

    def wake(self, now: float, n: int) -> None:
        """Re-poll up to ``n`` parked slots; stands in for NOWORK back-off."""
        if self.mode is Mode.PUSH:
            self.dispatch(now)
            return
        woken, self._parked = self._parked[:n], self._parked[n:]
        for wid, slot in woken:
            self.schedule(now + self.cluster.rtt_s, _REQUEST, wid, slot)

    def finish(self, now: float) -> None:
        if self.mode is Mode.PULL:
            self.wake(now, len(self._parked))
        else:
            for wid, w in self.workers.items():
                if w.alive:
                    self.state.mark_drained(wid, now)
            self._idle.clear()

    def on_complete(self, now: float, wid: str, slot: int, task_id: str) -> None:
        w = self.workers[wid]
        if not w.alive:
            return
        self.state.record_result(wid, task_id, "OK", now)
        if self.state.finished:
            self.finish(now)
            if self.mode is Mode.PUSH:
                return
        self.slot_idle(now, wid, slot)

    # -- push ----------------------------------------------------------------

    def dispatch(self, now: float) -> None:
        st = self.state
        while self._idle and not st.finished:
            wid, slot = self._idle.pop(0)
            reply = st.next_task(wid, now)
            if reply.kind is not Kind.ASSIGN:
                self._idle.insert(0, (wid, slot))
                break
            self.schedule(now, _DELIVER, wid, slot, reply.task_id, reply.cost, 0)

    def on_deliver(self, now: float, wid: str, slot: int, task_id: str, cost: float, attempt: int) -> None:
        w = self.workers[wid]
        if not w.alive:
            return
        lost = self.rng_loss.random() < self.push.p_loss
        if not lost:
            self.state.start(wid, task_id, now)
            self.schedule(now + cost / w.speed, _COMPLETE, wid, slot, task_id)
        elif attempt < self.push.resend_cap:
            self.schedule(now + self.push.dispatch_timeout_s, _DELIVER, wid, slot, task_id, cost, attempt + 1)
        else:
            self.schedule(now + self.push.dispatch_timeout_s, _ABANDON, wid, slot, task_id)

    def on_abandon(self, now: float, wid: str, slot: int, task_id: str) -> None:
        w = self.workers[wid]
        if not w.alive:
            return
        self.state.record_result(wid, task_id, "ERROR", now, reason="dispatch lost")
        if self.state.finished:
            self.finish(now)
            return
        self.slot_idle(now, wid, slot)


def simulate(
    tasks: Sequence[Task],
    cluster: ClusterSpec,
    mode: Mode | str = Mode.PULL,
    push: PushSpec | None = None,
    ordering: Ordering | str = Ordering.NATURAL,
    master_config: MasterConfig | None = None,
) -> SimResult:
    """Run one campaign; identical inputs give an identical trace."""
    return _Sim(tasks, cluster, Mode(mode), push, Ordering(ordering), master_config).run()


# -- ordering experiments -----------------------------------------------------


@dataclass(frozen=True)
class ExperimentRow:
    policy: str
    seed: int
    makespan: float
    tail_idle: float
    tail_utilization: float
    r_fail: float


@dataclass
class ExperimentReport:
    rows: list[ExperimentRow]
    dt: float
    n_w: int

    def means(self) -> dict[str, dict[str, float]]:
        out: dict[str, dict[str, float]] = {}
        for policy in dict.fromkeys(r.policy for r in self.rows):
            rs = [r for r in self.rows if r.policy == policy]
            out[policy] = {
                "makespan": float(np.mean([r.makespan for r in rs])),
                "tail_idle": float(np.mean([r.tail_idle for r in rs])),
                "tail_utilization": float(np.mean([r.tail_utilization for r in rs])),
                "runs": len(rs),
            }
        return out

    def to_json(self) -> dict:
        return {
            "dt": self.dt,
            "N_w": self.n_w,
            "policies": self.means(),
            "runs": [r.__dict__ for r in self.rows],
        }


def ordering_experiment(
    tasks: Sequence[Task],
    cluster: ClusterSpec,
    policies: Sequence[Ordering | str],
    seeds: Sequence[int],
    mode: Mode | str = Mode.PULL,
    push: PushSpec | None = None,
    master_config: MasterConfig | None = None,
    dt: float = 60.0,
) -> ExperimentReport:
    """Compare ordering policies over the same seeds. Reports, never asserts."""
    if len(policies) < 2:
        raise SimulationError("an ordering experiment needs at least two policies")
    if not seeds:
        raise SimulationError("an ordering experiment needs at least one seed")
    n_w = cluster.total_slots
    rows = []
    for policy in policies:
        policy = Ordering(policy)
        for seed in seeds:
            res = simulate(tasks, replace(cluster, seed=seed), mode, push, policy, master_config)
            d = decompose(res.events, n_w, dt)
            rows.append(
                ExperimentRow(policy.value, seed, res.makespan, d.I, d.U_tail, res.summary.r_fail)
            )
    return ExperimentReport(rows, dt, n_w)


# -- scenario files -----------------------------------------------------------


def cluster_from_json(obj: Mapping) -> ClusterSpec:
    arr = dict(obj.get("arrival", {}))
    arrival = ArrivalModel(
        kind=ArrivalKind(arr.get("kind", "IMMEDIATE")),
        interval_s=float(arr.get("interval_s", 0.0)),
        offset_s=float(arr.get("offset_s", 0.0)),
        mean_s=float(arr.get("mean_s", 0.0)),
        times=tuple(float(t) for t in arr.get("times", ())),
    )
    fl = dict(obj.get("failure", {}))
    failure = FailureModel(
        kind=FailureKind(fl.get("kind", "NONE")),
        kills=tuple((float(t), int(i)) for t, i in fl.get("kills", ())),
        mean_lifetime_s=float(fl.get("mean_lifetime_s", 0.0)),
    )
    speeds = obj.get("speeds", 1.0)
    speeds = tuple(float(s) for s in speeds) if isinstance(speeds, list) else float(speeds)
    replace_after = obj.get("replace_lost_after_s")
    return ClusterSpec(
        n_workers=int(obj["workers"]),
        slots=int(obj.get("slots", 1)),
        speeds=speeds,
        arrival=arrival,
        failure=failure,
        rtt_s=float(obj.get("rtt_s", 0.0)),
        seed=int(obj.get("seed", 0)),
        replace_lost_after_s=None if replace_after is None else float(replace_after),
    )


def push_from_json(obj: Mapping | None) -> PushSpec | None:
    if obj is None:
        return None
    return PushSpec(
        p_loss=float(obj.get("p_loss", 0.0)),
        dispatch_timeout_s=float(obj.get("dispatch_timeout_s", 5.0)),
        resend_cap=int(obj.get("resend_cap", 3)),
    )


def write_run(result: SimResult, out_dir: str | os.PathLike, n_w: int, dt: float) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(result.events, out / "trace.jsonl")
    if result.completed:
        with open(out / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(result.summary.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    with open(out / "decomposition.json", "w", encoding="utf-8") as fh:
        json.dump(decompose(result.events, n_w, dt).to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
