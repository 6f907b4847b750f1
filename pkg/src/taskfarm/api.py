"""HTTP service: live master metrics and control plus batch analysis endpoints.

When embedded in a running master, handlers execute on the master's event
loop, so reads and the drain command are serialized with worker commands.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, Literal, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from taskfarm import __version__
from taskfarm.analytics import AnalyticsError, check_bounds, decompose, summary_from_trace
from taskfarm.master.state import MasterConfig
from taskfarm.model import ModelError, Ordering, Task, cluster, generate_workload, WorkloadSpec
from taskfarm.simulator import Mode, SimulationError, cluster_from_json, push_from_json, simulate
from taskfarm.trace import TraceError, TraceEvent

if TYPE_CHECKING:
    from taskfarm.master.server import MasterServer


class Health(BaseModel):
    status: str
    version: str
    master: bool


class SummaryModel(BaseModel):
    N_calc: int
    N_task: int
    t_total: float
    t_worker: float
    N_worker: int
    r_fail: float
    N_done: int
    N_failed: int


class Metrics(BaseModel):
    summary: SummaryModel
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


class DrainResponse(BaseModel):
    draining: bool
    in_flight: int


class BoundRow(BaseModel):
    t_total: float
    t_busy: float
    slots: float = Field(gt=0)


class BoundResult(BaseModel):
    t_total: float
    t_busy: float
    slots: float
    lower_bound: float
    passed: bool


class BoundsRequest(BaseModel):
    rows: list[BoundRow]


class BoundsResponse(BaseModel):
    rows: list[BoundResult]
    all_passed: bool


class AnalyzeRequest(BaseModel):
    events: list[dict[str, Any]]
    n_w: int = Field(gt=0)
    dt: float = Field(60.0, gt=0)


class AnalyzeResponse(BaseModel):
    decomposition: dict[str, Any]
    summary: SummaryModel


class SimulateRequest(BaseModel):
    workload: dict[str, Any] = Field(description="workload spec: counts, cost, ordering, seed")
    granularity: dict[str, int] = Field(default_factory=lambda: {"*": 1})
    cluster: dict[str, Any]
    mode: Literal["PULL", "PUSH"] = "PULL"
    push: Optional[dict[str, Any]] = None
    policy: Ordering = Ordering.NATURAL
    seed: int = 0
    dt: float = Field(60.0, gt=0)
    master: dict[str, Any] = Field(default_factory=dict)


class SimulateResponse(BaseModel):
    completed: bool
    summary: SummaryModel
    decomposition: dict[str, Any]


def create_app(master: "MasterServer | None" = None) -> FastAPI:
    app = FastAPI(title="taskfarm", version=__version__)

    def need_master() -> "MasterServer":
        if master is None:
            raise HTTPException(status_code=503, detail="no campaign is being served by this process")
        return master

    @app.get("/health", response_model=Health)
    async def health() -> Health:
        return Health(status="ok", version=__version__, master=master is not None)

    @app.get("/metrics", response_model=Metrics)
    async def metrics() -> dict:
        return need_master().state.snapshot().to_json()

    @app.post("/drain", response_model=DrainResponse)
    async def drain() -> DrainResponse:
        m = need_master()
        m.request_drain()
        return DrainResponse(draining=True, in_flight=m.state.in_flight)

    @app.post("/bounds", response_model=BoundsResponse)
    def bounds(req: BoundsRequest) -> BoundsResponse:
        rows = [BoundResult(**vars(c)) for c in check_bounds(r.model_dump() for r in req.rows)]
        return BoundsResponse(rows=rows, all_passed=all(r.passed for r in rows))

    @app.post("/analyze", response_model=AnalyzeResponse)
    def analyze(req: AnalyzeRequest) -> AnalyzeResponse:
        try:
            events = [TraceEvent.from_json(e) for e in req.events]
            d = decompose(events, req.n_w, req.dt)
            s = summary_from_trace(events)
        except (TraceError, AnalyticsError, KeyError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return AnalyzeResponse(decomposition=d.to_json(), summary=SummaryModel(**s.to_json()))

    @app.post("/simulate", response_model=SimulateResponse)
    def run_simulation(req: SimulateRequest) -> SimulateResponse:
        try:
            spec = WorkloadSpec.from_json(req.workload)
            tasks: list[Task] = cluster(generate_workload(spec), req.granularity, Ordering.NATURAL, spec.seed)
            cl = cluster_from_json({**req.cluster, "seed": req.seed})
            cfg = MasterConfig(**req.master)
            res = simulate(tasks, cl, Mode(req.mode), push_from_json(req.push), req.policy, cfg)
            d = decompose(res.events, cl.total_slots, req.dt)
        except (ModelError, SimulationError, AnalyticsError, KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return SimulateResponse(
            completed=res.completed, summary=SummaryModel(**res.summary.to_json()), decomposition=d.to_json()
        )

    return app
