"""Domain types, workload generation, clustering and deployment manifests."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid workload, granularity or cost-model input."""


class AnalysisType(str, Enum):
    d2dUHF = "d2dUHF"
    d2dVHF = "d2dVHF"
    d2oUHF = "d2oUHF"
    d2oVHF = "d2oVHF"
    o2dUHF = "o2dUHF"
    o2dVHF = "o2dVHF"


ANALYSIS_TYPES = tuple(AnalysisType)


class Ordering(str, Enum):
    NATURAL = "NATURAL"
    RANDOM = "RANDOM"
    LONGEST_FIRST = "LONGEST_FIRST"
    SHORTEST_FIRST = "SHORTEST_FIRST"


class TaskState(str, Enum):
    PENDING = "PENDING"
    ASSIGNED = "ASSIGNED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


# Granularity per campaign iteration: (grid pool, dedicated farm).
ITERATION_GRANULARITY: dict[int, tuple[dict[str, int], dict[str, int]]] = {
    1: (
        {"d2dUHF": 3, "d2dVHF": 5, "d2oUHF": 100, "d2oVHF": 100, "o2dUHF": 100, "o2dVHF": 100},
        {"d2dUHF": 3, "d2dVHF": 5, "d2oUHF": 100, "d2oVHF": 100, "o2dUHF": 100, "o2dVHF": 100},
    ),
    2: (
        {"d2dUHF": 4, "d2dVHF": 4, "d2oUHF": 50, "d2oVHF": 50, "o2dUHF": 100, "o2dVHF": 100},
        {"d2dUHF": 3, "d2dVHF": 10, "d2oUHF": 100, "d2oVHF": 100, "o2dUHF": 100, "o2dVHF": 100},
    ),
    3: (
        {"d2dUHF": 2, "d2dVHF": 2, "d2oUHF": 50, "d2oVHF": 50, "o2dUHF": 50, "o2dVHF": 50},
        {"d2dUHF": 3, "d2dVHF": 5, "d2oUHF": 100, "d2oVHF": 100, "o2dUHF": 100, "o2dVHF": 100},
    ),
    4: (
        {"d2dUHF": 2, "d2dVHF": 2, "d2oUHF": 50, "d2oVHF": 50, "o2dUHF": 50, "o2dVHF": 50},
        {"d2dUHF": 3, "d2dVHF": 10, "d2oUHF": 100, "d2oVHF": 100, "o2dUHF": 100, "o2dVHF": 100},
    ),
}


@dataclass(frozen=True)
class AtomicCalculation:
    calc_id: str
    analysis_type: AnalysisType
    cost: float
    payload_ref: str = ""

    def __post_init__(self) -> None:
        if not self.cost > 0:
            raise ModelError(f"calculation {self.calc_id}: cost must be > 0, got {self.cost}")

    def to_json(self) -> dict:
        return {
            "calc_id": self.calc_id,
            "type": self.analysis_type.value,
            "cost_s": self.cost,
            "payload_ref": self.payload_ref,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "AtomicCalculation":
        return cls(
            calc_id=str(obj["calc_id"]),
            analysis_type=AnalysisType(obj["type"]),
            cost=float(obj["cost_s"]),
            payload_ref=str(obj.get("payload_ref", "")),
        )


@dataclass
class Task:
    """A cluster of calculations of one analysis type, scheduled as a unit.

    Timestamps are seconds since campaign start on the master clock.
    """

    task_id: str
    analysis_type: AnalysisType
    calc_ids: list[str]
    total_cost: float
    payload_ref: str = ""
    state: TaskState = TaskState.PENDING
    attempts: int = 0
    assigned_worker: str | None = None
    created: float = 0.0
    assigned: float | None = None
    started: float | None = None
    finished: float | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "type": self.analysis_type.value,
            "calc_ids": list(self.calc_ids),
            "total_cost_s": self.total_cost,
            "payload_ref": self.payload_ref,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Task":
        return cls(
            task_id=str(obj["task_id"]),
            analysis_type=AnalysisType(obj["type"]),
            calc_ids=[str(c) for c in obj["calc_ids"]],
            total_cost=float(obj["total_cost_s"]),
            payload_ref=str(obj.get("payload_ref", "")),
        )


@dataclass(frozen=True)
class CostModel:
    family: str = "exponential"
    mean_s: float = 86.0
    min_s: float = 1.0
    max_s: float = 1000.0

    def validate(self) -> None:
        if self.family not in ("exponential", "loguniform"):
            raise ModelError(f"unknown cost distribution family {self.family!r}")
        if not self.mean_s > 0:
            raise ModelError(f"mean must be > 0, got {self.mean_s}")
        if not 0 < self.min_s < self.max_s:
            raise ModelError(f"need 0 < min < max, got min={self.min_s} max={self.max_s}")


@dataclass(frozen=True)
class WorkloadSpec:
    counts: Mapping[str, int]
    cost: CostModel = field(default_factory=CostModel)
    ordering: Ordering = Ordering.NATURAL
    seed: int = 0

    @classmethod
    def from_json(cls, obj: Mapping) -> "WorkloadSpec":
        counts = {str(k): int(v) for k, v in obj.get("counts", {}).items()}
        cost = CostModel(**obj.get("cost", {}))
        return cls(
            counts=counts,
            cost=cost,
            ordering=Ordering(obj.get("ordering", "NATURAL")),
            seed=int(obj.get("seed", 0)),
        )

    def to_json(self) -> dict:
        return {
            "counts": dict(self.counts),
            "cost": {
                "family": self.cost.family,
                "mean_s": self.cost.mean_s,
                "min_s": self.cost.min_s,
                "max_s": self.cost.max_s,
            },
            "ordering": self.ordering.value,
            "seed": self.seed,
        }


def calc_id_for(analysis_type: AnalysisType | str, index: int) -> str:
    return f"{AnalysisType(analysis_type).value}-{index:07d}"


def task_id_for(analysis_type: AnalysisType | str, index: int) -> str:
    return f"{AnalysisType(analysis_type).value}-{index:06d}"


def sample_costs(cost: CostModel, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` costs from the configured family, truncated to [min, max].

    Truncation is done by inverse-CDF sampling, so no draws are rejected.
    """
    cost.validate()
    u = rng.random(n)
    lo, hi = cost.min_s, cost.max_s
    if cost.family == "loguniform":
        return np.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
    m = cost.mean_s
    a, b = math.exp(-lo / m), math.exp(-hi / m)
    x = -m * np.log(a - u * (a - b))
    return np.clip(x, lo, hi)


def generate_workload(spec: WorkloadSpec) -> list[AtomicCalculation]:
    spec.cost.validate()
    for name, n in spec.counts.items():
        AnalysisType(name)
        if n < 0:
            raise ModelError(f"negative count for {name}: {n}")
    rng = np.random.default_rng(spec.seed)
    calcs: list[AtomicCalculation] = []
    for atype in ANALYSIS_TYPES:
        n = int(spec.counts.get(atype.value, 0))
        if n == 0:
            continue
        for i, c in enumerate(sample_costs(spec.cost, n, rng)):
            cid = calc_id_for(atype, i)
            calcs.append(AtomicCalculation(cid, atype, float(c), f"args/{cid}"))
    return calcs


def resolve_granularity(g: Mapping[str, int], atype: AnalysisType) -> int:
    if atype.value in g:
        size = int(g[atype.value])
    elif "*" in g:
        size = int(g["*"])
    else:
        raise ModelError(f"no granularity entry for analysis type {atype.value}")
    if size < 1:
        raise ModelError(f"granularity for {atype.value} must be >= 1, got {size}")
    return size


def order_tasks(tasks: Sequence[Task], ordering: Ordering | str, seed: int = 0) -> list[Task]:
    """Return ``tasks`` re-sequenced by ``ordering``; never changes the multiset."""
    ordering = Ordering(ordering)
    tasks = list(tasks)
    if ordering is Ordering.NATURAL:
        return tasks
    if ordering is Ordering.RANDOM:
        perm = np.random.default_rng(seed).permutation(len(tasks))
        return [tasks[i] for i in perm]
    # sorted() is stable, so equal costs keep natural order
    return sorted(tasks, key=lambda t: t.total_cost, reverse=ordering is Ordering.LONGEST_FIRST)


def cluster(
    calcs: Sequence[AtomicCalculation],
    g: Mapping[str, int],
    ordering: Ordering | str = Ordering.NATURAL,
    seed: int = 0,
) -> list[Task]:
    """Group calculations into tasks of at most G members of a single type.

    Natural task order follows the input position of each task's first member.
    """
    groups: dict[AnalysisType, list[tuple[int, AtomicCalculation]]] = {}
    for pos, c in enumerate(calcs):
        groups.setdefault(c.analysis_type, []).append((pos, c))

    keyed: list[tuple[int, Task]] = []
    for atype, members in groups.items():
        size = resolve_granularity(g, atype)
        for j in range(0, len(members), size):
            chunk = members[j : j + size]
            keyed.append(
                (
                    chunk[0][0],
                    Task(
                        task_id=task_id_for(atype, j // size),
                        analysis_type=atype,
                        calc_ids=[c.calc_id for _, c in chunk],
                        total_cost=math.fsum(c.cost for _, c in chunk),
                        payload_ref=";".join(c.payload_ref for _, c in chunk if c.payload_ref),
                    ),
                )
            )
    keyed.sort(key=lambda kt: kt[0])
    return order_tasks([t for _, t in keyed], ordering, seed)


def makespan_lower_bound(tasks: Iterable[Task | float], speeds: Sequence[float]) -> float:
    """max(total work / total speed, longest task / fastest slot)."""
    if not speeds:
        raise ModelError("at least one slot is required")
    if any(not s > 0 for s in speeds):
        raise ModelError("slot speeds must be > 0")
    costs = [t.total_cost if isinstance(t, Task) else float(t) for t in tasks]
    if not costs:
        return 0.0
    return max(math.fsum(costs) / math.fsum(speeds), max(costs) / max(speeds))


# -- JSON Lines I/O ---------------------------------------------------------


def _dumps(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_workload(calcs: Iterable[AtomicCalculation], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for c in calcs:
            fh.write(_dumps(c.to_json()) + "\n")


def read_workload(path: str | os.PathLike) -> list[AtomicCalculation]:
    calcs = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            c = AtomicCalculation.from_json(json.loads(line))
            if c.calc_id in seen:
                raise ModelError(f"{path}:{lineno}: duplicate calc_id {c.calc_id}")
            seen.add(c.calc_id)
            calcs.append(c)
    return calcs


def write_tasks(tasks: Iterable[Task], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tasks:
            fh.write(_dumps(t.to_json()) + "\n")


def read_tasks(path: str | os.PathLike) -> list[Task]:
    with open(path, encoding="utf-8") as fh:
        return [Task.from_json(json.loads(line)) for line in fh if line.strip()]


def read_granularity(path: str | os.PathLike) -> dict[str, int]:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    g = {str(k): int(v) for k, v in raw.items()}
    for k, v in g.items():
        if k != "*":
            AnalysisType(k)
        if v < 1:
            raise ModelError(f"granularity for {k} must be >= 1")
    return g


# -- deployment manifests ---------------------------------------------------

DIGEST_FAMILY = "sha256"


class ManifestError(Exception):
    """The manifest root cannot be read at all."""


class FileStatus(str, Enum):
    OK = "OK"
    MISSING = "MISSING"
    SIZE_MISMATCH = "SIZE_MISMATCH"
    DIGEST_MISMATCH = "DIGEST_MISMATCH"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    bytes: int
    digest: str


@dataclass(frozen=True)
class Manifest:
    package_version: str
    files: tuple[ManifestEntry, ...]
    digest_family: str = DIGEST_FAMILY

    def to_json(self) -> dict:
        return {
            "package_version": self.package_version,
            "digest": self.digest_family,
            "files": [{"path": f.path, "bytes": f.bytes, "digest": f.digest} for f in self.files],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Manifest":
        family = obj.get("digest", DIGEST_FAMILY)
        if family not in hashlib.algorithms_guaranteed:
            raise ModelError(f"unsupported digest family {family!r}")
        width = hashlib.new(family).digest_size * 2
        files = []
        for f in obj["files"]:
            digest = str(f["digest"]).lower()
            if len(digest) != width or any(ch not in "0123456789abcdef" for ch in digest):
                raise ModelError(f"{f['path']}: digest is not {width} hex characters")
            files.append(ManifestEntry(str(f["path"]), int(f["bytes"]), digest))
        return cls(str(obj["package_version"]), tuple(files), family)


@dataclass(frozen=True)
class ManifestReport:
    entries: tuple[tuple[str, FileStatus], ...]

    @property
    def ok(self) -> bool:
        return all(s is FileStatus.OK for _, s in self.entries)

    def to_json(self) -> dict:
        return {"pass": self.ok, "files": [{"path": p, "status": s.value} for p, s in self.entries]}


def file_digest(path: str | os.PathLike, family: str = DIGEST_FAMILY) -> str:
    h = hashlib.new(family)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(root: str | os.PathLike, package_version: str, family: str = DIGEST_FAMILY) -> Manifest:
    root = Path(root)
    entries = []
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        rel = p.relative_to(root).as_posix()
        entries.append(ManifestEntry(rel, p.stat().st_size, file_digest(p, family)))
    return Manifest(package_version, tuple(entries), family)


def verify_manifest(manifest: Manifest, root: str | os.PathLike) -> ManifestReport:
    root = Path(root)
    if not root.is_dir() or not os.access(root, os.R_OK | os.X_OK):
        raise ManifestError(f"manifest root {root} is not a readable directory")
    results = []
    for entry in manifest.files:
        p = root / entry.path
        if not p.is_file():
            status = FileStatus.MISSING
        elif p.stat().st_size != entry.bytes:
            status = FileStatus.SIZE_MISMATCH
        elif file_digest(p, manifest.digest_family) != entry.digest:
            status = FileStatus.DIGEST_MISMATCH
        else:
            status = FileStatus.OK
        results.append((entry.path, status))
    return ManifestReport(tuple(results))
