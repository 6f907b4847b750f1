"""Pull-model worker agent.

The agent registers with the master, keeps up to ``slots`` tasks running,
heartbeats, and exits after DRAIN once its in-flight work is reported.
"""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import os
import shlex
import signal
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from taskfarm.protocol import FrameDecoder, Kind, Message, ProtocolError, encode_frame

log = logging.getLogger(__name__)


class ExecMode(str, Enum):
    COMMAND = "COMMAND"
    SIMULATED = "SIMULATED"


@dataclass
class ExecutorSpec:
    mode: ExecMode = ExecMode.SIMULATED
    command: str = ""
    speed: float = 1.0
    timeout_s: float | None = None
    workdir: Path | None = None

    def __post_init__(self) -> None:
        self.mode = ExecMode(self.mode)
        if self.mode is ExecMode.COMMAND and not self.command.strip():
            raise ValueError("COMMAND mode needs a non-empty command template")
        if not self.speed > 0:
            raise ValueError("speed must be > 0")
        if self.timeout_s is not None and not self.timeout_s > 0:
            raise ValueError("timeout must be > 0")


@dataclass
class AgentConfig:
    host: str = "127.0.0.1"
    port: int = 0
    slots: int = 2
    heartbeat_interval_s: float = 10.0
    backoff_initial_s: float = 1.0
    backoff_max_s: float = 30.0
    connect_attempts: int = 10
    connect_delay_s: float = 0.5
    worker_id: str | None = None
    log_path: Path | None = None
    collector: tuple[str, int] | None = None
    cluster: str = "workers"

    def __post_init__(self) -> None:
        if self.slots < 1:
            raise ValueError("slots must be >= 1")


@dataclass(frozen=True)
class ExecResult:
    status: str
    elapsed_s: float
    reason: str | None = None


@dataclass
class AgentReport:
    exit_code: int
    worker_id: str | None = None
    tasks_run: int = 0
    ok: int = 0
    errors: int = 0
    max_concurrent: int = 0
    busy_s: float = 0.0
    reason: str = ""
    task_ids: list[str] = field(default_factory=list)


async def _kill_group(proc: asyncio.subprocess.Process) -> None:
    if proc.returncode is not None:
        return
    with contextlib.suppress(ProcessLookupError, PermissionError):
        os.killpg(proc.pid, signal.SIGKILL)
    with contextlib.suppress(Exception):
        await proc.wait()


async def execute(assign: Message, spec: ExecutorSpec) -> ExecResult:
    """Run one assigned task and report its outcome. Never raises on task failure."""
    start = time.monotonic()
    if spec.mode is ExecMode.SIMULATED:
        await asyncio.sleep((assign.cost or 0.0) / spec.speed)
        return ExecResult("OK", time.monotonic() - start)

    workdir = Path(spec.workdir) if spec.workdir is not None else Path.cwd()
    calc_file = workdir / f"{assign.task_id}.calcs"
    try:
        workdir.mkdir(parents=True, exist_ok=True)
        calc_file.write_text("".join(f"{c}\n" for c in assign.calc_ids or ()), encoding="utf-8")
    except OSError as exc:
        return ExecResult("ERROR", time.monotonic() - start, f"spawn failed: {exc}")
    values = {
        "task_id": shlex.quote(assign.task_id or ""),
        "payload_ref": shlex.quote(assign.payload_ref or ""),
        "calc_ids_file": shlex.quote(str(calc_file)),
    }
    try:
        cmd = spec.command.format_map(values)
    except (KeyError, IndexError, ValueError) as exc:
        return ExecResult("ERROR", 0.0, f"bad command template: {exc}")
    proc = None
    try:
        proc = await asyncio.create_subprocess_shell(cmd, cwd=workdir, start_new_session=True)
        try:
            code = await asyncio.wait_for(proc.wait(), spec.timeout_s)
        except asyncio.TimeoutError:
            await _kill_group(proc)
            return ExecResult("ERROR", time.monotonic() - start, f"timeout after {spec.timeout_s}s")
    except asyncio.CancelledError:
        if proc is not None:
            await _kill_group(proc)
        raise
    except OSError as exc:
        return ExecResult("ERROR", time.monotonic() - start, f"spawn failed: {exc}")
    finally:
        with contextlib.suppress(OSError):
            calc_file.unlink()
    elapsed = time.monotonic() - start
    if code == 0:
        return ExecResult("OK", elapsed)
    return ExecResult("ERROR", elapsed, f"exit_code={code}")


class _Agent:
    def __init__(self, cfg: AgentConfig, spec: ExecutorSpec):
        self.cfg = cfg
        self.spec = spec
        self.report = AgentReport(exit_code=0, worker_id=cfg.worker_id)
        self._log_fh = open(cfg.log_path, "a", encoding="utf-8") if cfg.log_path else None
        self._sensor = None
        if cfg.collector is not None:
            from taskfarm.telemetry import Sensor

            self._sensor = Sensor(cfg.collector, cfg.cluster, cfg.worker_id or f"pid{os.getpid()}")

    def _log_task(self, task_id: str, started: float, finished: float, status: str) -> None:
        if self._log_fh is not None:
            rec = {"task_id": task_id, "started": started, "finished": finished, "status": status}
            self._log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self._log_fh.flush()

    def _emit(self, *params) -> None:
        if self._sensor is not None:
            from taskfarm.telemetry import host_load_params

            self._sensor.emit([*params, *host_load_params()])

    async def _connect(self):
        for attempt in range(1, self.cfg.connect_attempts + 1):
            try:
                return await asyncio.open_connection(self.cfg.host, self.cfg.port)
            except OSError as exc:
                log.info("connect attempt %d/%d failed: %s", attempt, self.cfg.connect_attempts, exc)
                await asyncio.sleep(self.cfg.connect_delay_s)
        return None

    async def run(self) -> AgentReport:
        try:
            while True:
                conn = await self._connect()
                if conn is None:
                    self.report.exit_code = 1
                    self.report.reason = "master unreachable"
                    break
                outcome = await self._session(*conn)
                if outcome in ("drained", "rejected"):
                    break
                log.warning("session ended (%s); reconnecting", outcome)
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
            if self._sensor is not None:
                self._sensor.close()
        return self.report

    async def _session(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> str:
        loop = asyncio.get_running_loop()
        inbox: asyncio.Queue = asyncio.Queue()
        decoder = FrameDecoder()

        def send(msg: Message) -> None:
            if not writer.is_closing():
                writer.write(encode_frame(msg))

        async def pump() -> None:
            try:
                while True:
                    data = await reader.read(1 << 16)
                    if not data:
                        break
                    for m in decoder.feed(data):
                        await inbox.put(("msg", m))
            except (ProtocolError, ConnectionError, OSError) as exc:
                log.warning("connection to master failed: %s", exc)
            await inbox.put(("eof", None))

        running: dict[str, asyncio.Task] = {}

        async def heartbeat() -> None:
            while True:
                await asyncio.sleep(self.cfg.heartbeat_interval_s)
                send(Message(Kind.HEARTBEAT, worker_id=self.report.worker_id, busy_task_ids=tuple(running)))
                with contextlib.suppress(ConnectionError):
                    await writer.drain()

        async def run_one(assign: Message) -> None:
            started = time.time()
            self._emit(_param_str("task_start", assign.task_id))
            try:
                res = await execute(assign, self.spec)
            except asyncio.CancelledError:
                raise
            except Exception as exc:  # executor bug: report, do not kill the agent
                log.exception("executor crashed on %s", assign.task_id)
                res = ExecResult("ERROR", time.time() - started, f"executor error: {exc}")
            self._log_task(assign.task_id, started, time.time(), res.status)
            await inbox.put(("done", (assign.task_id, res)))

        pump_task = asyncio.create_task(pump())
        hb_task = None
        try:
            send(Message(Kind.REGISTER, slots=self.cfg.slots, worker_id=self.report.worker_id))
            await writer.drain()
            kind, msg = await inbox.get()
            if kind != "msg" or msg.kind is not Kind.REGISTERED:
                return "connection lost"
            if msg.error:
                log.error("registration rejected: %s", msg.error)
                self.report.exit_code = 1
                self.report.reason = msg.error
                return "rejected"
            self.report.worker_id = msg.worker_id
            log.info("registered as %s with %d slots", msg.worker_id, self.cfg.slots)
            hb_task = asyncio.create_task(heartbeat())

            outstanding = 0
            draining = False
            backoff = self.cfg.backoff_initial_s
            next_request_at = 0.0
            while True:
                if draining and not running:
                    await writer.drain()
                    return "drained"
                free = self.cfg.slots - len(running) - outstanding
                now = loop.time()
                if not draining and free > 0 and now >= next_request_at:
                    for _ in range(free):
                        send(Message(Kind.REQUEST, worker_id=self.report.worker_id))
                    outstanding += free
                    free = 0
                await writer.drain()
                timeout = None
                if not draining and free > 0:
                    timeout = max(0.0, next_request_at - now)
                try:
                    kind, payload = await asyncio.wait_for(inbox.get(), timeout)
                except asyncio.TimeoutError:
                    continue
                if kind == "eof":
                    return "connection lost"
                if kind == "done":
                    task_id, res = payload
                    running.pop(task_id, None)
                    self.report.tasks_run += 1
                    self.report.busy_s += res.elapsed_s
                    if res.status == "OK":
                        self.report.ok += 1
                    else:
                        self.report.errors += 1
                    self._emit(_param_str("task_done", f"{task_id}:{res.status}"))
                    send(
                        Message(
                            Kind.RESULT,
                            worker_id=self.report.worker_id,
                            task_id=task_id,
                            status=res.status,
                            elapsed_s=res.elapsed_s,
                            reason=res.reason,
                        )
                    )
                    continue
                m: Message = payload
                if m.kind is Kind.ASSIGN:
                    outstanding = max(0, outstanding - 1)
                    backoff = self.cfg.backoff_initial_s
                    running[m.task_id] = asyncio.create_task(run_one(m))
                    self.report.task_ids.append(m.task_id)
                    self.report.max_concurrent = max(self.report.max_concurrent, len(running))
                elif m.kind is Kind.NOWORK:
                    outstanding = max(0, outstanding - 1)
                    if loop.time() >= next_request_at:
                        delay = max(backoff, 0.0)
                        next_request_at = loop.time() + delay
                        backoff = min(backoff * 2, self.cfg.backoff_max_s)
                elif m.kind is Kind.DRAIN:
                    draining = True
                    outstanding = 0
                elif m.kind is Kind.SHUTDOWN:
                    log.warning("master sent SHUTDOWN: %s", m.error or m.reason)
                    if m.reason == "lost":
                        return "declared lost"
                    self.report.exit_code = 1
                    self.report.reason = m.error or "shutdown"
                    return "rejected"
                elif m.kind is Kind.ACK:
                    if m.warning:
                        log.warning("master: %s (%s)", m.warning, m.task_id)
                else:
                    log.warning("unexpected %s from master", m.kind.value)
        finally:
            for t in running.values():
                t.cancel()
            for t in running.values():
                with contextlib.suppress(asyncio.CancelledError, Exception):
                    await t
            if hb_task is not None:
                hb_task.cancel()
                with contextlib.suppress(asyncio.CancelledError):
                    await hb_task
            pump_task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await pump_task
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()


def _param_str(name: str, value: str):
    from taskfarm.telemetry import Param

    return Param.string(name, value)


async def run_agent(cfg: AgentConfig, spec: ExecutorSpec) -> AgentReport:
    return await _Agent(cfg, spec).run()
