from taskfarm.master.state import (
    AcceptedResult,
    MasterConfig,
    MasterError,
    MasterState,
    RunSummary,
    Snapshot,
    WorkerRecord,
    WorkerState,
)

__all__ = [
    "AcceptedResult",
    "MasterConfig",
    "MasterError",
    "MasterState",
    "RunSummary",
    "Snapshot",
    "WorkerRecord",
    "WorkerState",
]
