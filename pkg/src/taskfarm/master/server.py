"""Network face of the master: framed TCP for workers, optional HTTP metrics."""

from __future__ import annotations

import asyncio
import contextlib
import json
import logging
import os
import signal
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from taskfarm.master.state import AcceptedResult, MasterConfig, MasterError, MasterState, WorkerState
from taskfarm.model import Task
from taskfarm.protocol import FrameDecoder, Kind, Message, ProtocolError, encode_frame
from taskfarm.trace import TraceEvent

log = logging.getLogger(__name__)


@dataclass(eq=False)
class _Conn:
    writer: asyncio.StreamWriter
    peer: str
    worker_id: str | None = None
    drained: bool = False

    def send(self, msg: Message) -> None:
        if not self.writer.is_closing():
            self.writer.write(encode_frame(msg))


class MasterServer:
    """Serves one campaign.

    All state mutations happen on the event loop thread, one command at a
    time, so :class:`MasterState` needs no locking.
    """

    def __init__(
        self,
        tasks: Sequence[Task],
        config: MasterConfig | None = None,
        run_dir: str | os.PathLike | None = None,
        http_port: int | None = None,
        collector: tuple[str, int] | None = None,
        telemetry_interval_s: float = 5.0,
        drain_grace_s: float = 10.0,
    ):
        self.config = config or MasterConfig()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.http_port = http_port
        self.collector = collector
        self.telemetry_interval_s = telemetry_interval_s
        self.drain_grace_s = drain_grace_s
        self._trace_fh = None
        self._results_fh = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._trace_fh = open(self.run_dir / "trace.jsonl", "w", encoding="utf-8", newline="\n")
            self._results_fh = open(self.run_dir / "results.jsonl", "w", encoding="utf-8", newline="\n")
        self.state = MasterState(tasks, self.config, on_event=self._write_event, on_result=self._write_result)
        self._conns: set[_Conn] = set()
        self._t0: float | None = None
        self._stop = asyncio.Event()
        self._done = asyncio.Event()
        self.address: tuple[str, int] | None = None
        self.http_address: tuple[str, int] | None = None
        self.ready = asyncio.Event()

    # -- clock and sinks ---------------------------------------------------

    def now(self) -> float:
        loop = asyncio.get_running_loop()
        if self._t0 is None:
            self._t0 = loop.time()
        return round(loop.time() - self._t0, 6)

    def _write_event(self, ev: TraceEvent) -> None:
        if self._trace_fh is not None:
            self._trace_fh.write(ev.line())

    def _write_result(self, r: AcceptedResult) -> None:
        if self._results_fh is not None:
            self._results_fh.write(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n")

    # -- command handling --------------------------------------------------

    def _check_progress(self) -> None:
        st = self.state
        if st.finished or (st.draining and st.in_flight == 0):
            if not self._done.is_set():
                log.info("campaign %s", "complete" if st.finished else "drained")
                self._done.set()
                for c in list(self._conns):
                    if c.worker_id is not None and not c.drained:
                        c.drained = True
                        c.send(Message(Kind.DRAIN))

    def handle(self, msg: Message, conn: _Conn) -> Message | None:
        now = self.now()
        st = self.state
        if msg.kind is Kind.REGISTER:
            if conn.worker_id is not None:
                w = st.workers.get(conn.worker_id)
                if w is not None and w.state is WorkerState.ACTIVE:
                    return Message(Kind.REGISTERED, worker_id=conn.worker_id)
            reply = st.register(msg.slots, now, msg.worker_id, msg.protocol_version)
            if reply.error is None:
                conn.worker_id = reply.worker_id
                conn.drained = False
            return reply
        if conn.worker_id is None:
            return Message(Kind.SHUTDOWN, error="not registered")
        if msg.worker_id is not None and msg.worker_id != conn.worker_id:
            return Message(Kind.SHUTDOWN, error=f"connection belongs to {conn.worker_id}")
        try:
            if msg.kind is Kind.REQUEST:
                reply = st.next_task(conn.worker_id, now)
                if reply.kind is Kind.DRAIN:
                    conn.drained = True
                return reply
            if msg.kind is Kind.RESULT:
                return st.record_result(conn.worker_id, msg.task_id, msg.status, now, msg.elapsed_s, msg.reason)
            if msg.kind is Kind.HEARTBEAT:
                st.heartbeat(conn.worker_id, now, msg.busy_task_ids or ())
                return None
        except MasterError as exc:
            w = st.workers.get(conn.worker_id)
            if w is not None and w.state is WorkerState.LOST:
                return Message(Kind.SHUTDOWN, reason="lost", error=str(exc))
            return Message(Kind.SHUTDOWN, error=str(exc))
        log.warning("ignoring unexpected %s from %s", msg.kind.value, conn.peer)
        return None

    async def _serve_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = str(writer.get_extra_info("peername"))
        conn = _Conn(writer, peer)
        self._conns.add(conn)
        decoder = FrameDecoder()
        try:
            while True:
                data = await reader.read(1 << 16)
                if not data:
                    break
                for msg in decoder.feed(data):
                    reply = self.handle(msg, conn)
                    if reply is not None:
                        conn.send(reply)
                        if reply.kind is Kind.REGISTERED and reply.error:
                            return
                    # after the reply, so the ACK for a final result precedes DRAIN
                    self._check_progress()
                await writer.drain()
        except ProtocolError as exc:
            log.warning("protocol error from %s: %s; dropping connection", peer, exc)
        except (ConnectionError, OSError) as exc:
            log.info("connection %s lost: %s", peer, exc)
        finally:
            self._conns.discard(conn)
            if conn.worker_id is not None:
                now = self.now()
                w = self.state.workers.get(conn.worker_id)
                if w is not None and w.state is WorkerState.ACTIVE:
                    if conn.drained and not w.assigned:
                        self.state.mark_drained(conn.worker_id, now)
                    else:
                        log.warning("worker %s disconnected mid-campaign", conn.worker_id)
                        self.state.mark_lost(conn.worker_id, now)
                    self._check_progress()
            writer.close()
            with contextlib.suppress(Exception):
                await writer.wait_closed()

    async def _scan_timeouts(self) -> None:
        period = min(1.0, self.config.heartbeat_interval_s / 2)
        while not self._stop.is_set():
            try:
                await asyncio.wait_for(self._stop.wait(), period)
            except asyncio.TimeoutError:
                pass
            if self.state.detect_lost(self.now()):
                self._check_progress()

    def request_drain(self) -> None:
        """Operator drain (SIGTERM, HTTP): stop assigning, finish in-flight work."""
        log.info("drain requested")
        self.state.begin_drain()
        self._check_progress()

    # -- lifecycle ---------------------------------------------------------

    def _write_endpoint(self) -> None:
        if self.run_dir is None:
            return
        info = {"host": self.address[0], "port": self.address[1]}
        if self.http_address is not None:
            info["http_port"] = self.http_address[1]
        tmp = self.run_dir / "master.json.tmp"
        tmp.write_text(json.dumps(info))
        tmp.replace(self.run_dir / "master.json")

    async def _start_http(self):
        import uvicorn

        from taskfarm.api import create_app

        class _Embedded(uvicorn.Server):
            @contextlib.contextmanager
            def capture_signals(self):  # the master owns signal handling
                yield

        cfg = uvicorn.Config(
            create_app(self), host=self.config.host, port=self.http_port, log_level="warning", lifespan="off"
        )
        server = _Embedded(cfg)
        task = asyncio.create_task(server.serve())
        while not server.started:
            if task.done():
                task.result()
            await asyncio.sleep(0.01)
        sock = server.servers[0].sockets[0]
        self.http_address = sock.getsockname()[:2]
        return server, task

    async def serve(self) -> None:
        self.now()
        server = await asyncio.start_server(self._serve_conn, self.config.host, self.config.port)
        self.address = server.sockets[0].getsockname()[:2]
        http = None
        if self.http_port is not None:
            http = await self._start_http()
        self._write_endpoint()
        log.info("master listening on %s:%d with %d tasks", *self.address, len(self.state.tasks))

        loop = asyncio.get_running_loop()
        with contextlib.suppress(NotImplementedError, RuntimeError):
            loop.add_signal_handler(signal.SIGTERM, self.request_drain)

        aux = [asyncio.create_task(self._scan_timeouts())]
        sensor = None
        if self.collector is not None:
            from taskfarm.telemetry import Sensor, master_params, sensor_emit

            sensor = Sensor(self.collector, "master", os.uname().nodename)
            aux.append(
                asyncio.create_task(
                    sensor_emit(sensor, lambda: master_params(self.state.snapshot()), self.telemetry_interval_s, self._stop)
                )
            )
        self.ready.set()
        self._check_progress()
        try:
            await self._done.wait()
            if self.state.finished:
                self._write_summary()
            # give live workers a chance to receive DRAIN and disconnect cleanly
            deadline = loop.time() + self.drain_grace_s
            while loop.time() < deadline and any(
                c.worker_id and self.state.workers[c.worker_id].state is WorkerState.ACTIVE for c in self._conns
            ):
                await asyncio.sleep(0.05)
        finally:
            self._stop.set()
            with contextlib.suppress(NotImplementedError, RuntimeError):
                loop.remove_signal_handler(signal.SIGTERM)
            server.close()
            for c in list(self._conns):
                c.writer.close()
            await server.wait_closed()
            for t in aux:
                await t
            if sensor is not None:
                sensor.close()
            if http is not None:
                http[0].should_exit = True
                await http[1]
            self._close_files()

    def _write_summary(self) -> None:
        if self.run_dir is None:
            return
        with open(self.run_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump(self.state.summary().to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def _close_files(self) -> None:
        for fh in (self._trace_fh, self._results_fh):
            if fh is not None:
                fh.close()
        self._trace_fh = self._results_fh = None


def run_master(tasks: Sequence[Task], config: MasterConfig, run_dir, **kwargs) -> MasterState:
    server = MasterServer(tasks, config, run_dir, **kwargs)
    asyncio.run(server.serve())
    return server.state
