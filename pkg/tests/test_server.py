import asyncio
import json
import os
import signal
import subprocess
import sys
import time

import httpx
import pytest

from taskfarm.agent import AgentConfig, ExecutorSpec, run_agent
from taskfarm.analytics import summary_from_trace
from taskfarm.master.server import MasterServer
from taskfarm.master.state import MasterConfig
from taskfarm.model import write_tasks
from taskfarm.protocol import FrameDecoder, Kind, Message, encode_frame
from taskfarm.trace import EventKind, read_trace

from conftest import make_tasks


class Raw:
    """A hand-driven worker connection."""

    def __init__(self, reader, writer):
        self.reader, self.writer = reader, writer
        self.decoder = FrameDecoder()
        self.buffer: list[Message] = []

    @classmethod
    async def open(cls, addr):
        return cls(*await asyncio.open_connection(*addr))

    async def send(self, msg: Message) -> None:
        self.writer.write(encode_frame(msg))
        await self.writer.drain()

    async def recv(self, timeout=5.0) -> Message | None:
        while not self.buffer:
            data = await asyncio.wait_for(self.reader.read(1 << 16), timeout)
            if not data:
                return None
            self.buffer += self.decoder.feed(data)
        return self.buffer.pop(0)

    async def call(self, msg: Message) -> Message | None:
        await self.send(msg)
        return await self.recv()

    async def register(self, slots=1) -> str:
        reply = await self.call(Message(Kind.REGISTER, slots=slots))
        assert reply.kind is Kind.REGISTERED and reply.error is None
        return reply.worker_id

    def close(self):
        self.writer.close()


FAST = MasterConfig(heartbeat_interval_s=0.1, lost_timeout_s=0.3)


async def start(tasks, config=FAST, **kw):
    kw.setdefault("drain_grace_s", 0.5)
    server = MasterServer(tasks, config, **kw)
    serve = asyncio.create_task(server.serve())
    await server.ready.wait()
    return server, serve


def test_duplicate_result_is_discarded():
    async def main():
        server, serve = await start(make_tasks([1.0]))
        c = await Raw.open(server.address)
        wid = await c.register()
        a = await c.call(Message(Kind.REQUEST, worker_id=wid))
        assert a.kind is Kind.ASSIGN and a.task_id == "d2dUHF-000000"
        result = Message(Kind.RESULT, worker_id=wid, task_id=a.task_id, status="OK", elapsed_s=1.0)
        first = await c.call(result)
        assert first.kind is Kind.ACK and first.discarded is False
        await c.send(result)
        replies = [await c.recv(), await c.recv()]
        kinds = {m.kind for m in replies}
        assert kinds == {Kind.ACK, Kind.DRAIN}
        assert next(m for m in replies if m.kind is Kind.ACK).discarded is True
        c.close()
        await asyncio.wait_for(serve, 5)
        return server

    server = asyncio.run(main())
    s = server.state.summary()
    assert s.n_done == 1 and len(server.state.results) == 1


def test_version_mismatch_rejected_and_connection_closed():
    async def main():
        server, serve = await start(make_tasks([1.0]))
        c = await Raw.open(server.address)
        reply = await c.call(Message(Kind.REGISTER, slots=1, protocol_version=2))
        assert reply.kind is Kind.REGISTERED and "protocol_version" in reply.error
        assert await c.recv() is None
        assert not server.state.workers
        u = await Raw.open(server.address)
        reply = await u.call(Message(Kind.REQUEST, worker_id="w9999"))
        assert reply.kind is Kind.SHUTDOWN and reply.error == "not registered"
        u.close()
        server.request_drain()
        await asyncio.wait_for(serve, 5)

    asyncio.run(main())


def test_late_result_after_loss_is_discarded():
    async def main():
        server, serve = await start(make_tasks([1.0]))
        a = await Raw.open(server.address)
        wa = await a.register()
        got = await a.call(Message(Kind.REQUEST, worker_id=wa))
        # worker a goes silent past the lost timeout
        await asyncio.sleep(0.8)
        assert server.state.workers[wa].state.value == "LOST"
        b = await Raw.open(server.address)
        wb = await b.register()
        again = await b.call(Message(Kind.REQUEST, worker_id=wb))
        assert again.task_id == got.task_id
        late = await a.call(Message(Kind.RESULT, worker_id=wa, task_id=got.task_id, status="OK"))
        assert late.kind is Kind.ACK and late.discarded is True
        hb = await a.call(Message(Kind.HEARTBEAT, worker_id=wa, busy_task_ids=()))
        assert hb.kind is Kind.SHUTDOWN and hb.reason == "lost"
        ok = await b.call(Message(Kind.RESULT, worker_id=wb, task_id=got.task_id, status="OK"))
        assert ok.discarded is False
        a.close()
        b.close()
        await asyncio.wait_for(serve, 5)
        return server

    server = asyncio.run(main())
    assert [r.worker_id for r in server.state.results] == ["w0002"]


def test_disconnect_mid_task_requeues_immediately():
    async def main():
        server, serve = await start(make_tasks([1.0, 1.0]), MasterConfig(heartbeat_interval_s=10, lost_timeout_s=30))
        a = await Raw.open(server.address)
        wa = await a.register()
        await a.call(Message(Kind.REQUEST, worker_id=wa))
        a.close()
        for _ in range(100):
            if server.state.workers[wa].state.value == "LOST":
                break
            await asyncio.sleep(0.01)
        events = [e.kind for e in server.state.events]
        assert EventKind.TASK_REQUEUE in events and EventKind.WORKER_LOST in events
        server.request_drain()
        await asyncio.wait_for(serve, 5)

    asyncio.run(main())


def test_full_campaign_writes_consistent_artifacts(tmp_path):
    tasks = make_tasks([0.05 * (1 + i % 5) for i in range(40)])

    async def main():
        server, serve = await start(tasks, MasterConfig(heartbeat_interval_s=0.5, lost_timeout_s=2), run_dir=tmp_path)
        host, port = server.address
        agents = [
            run_agent(AgentConfig(host, port, slots=2, heartbeat_interval_s=0.5, backoff_initial_s=0.05,
                                  backoff_max_s=0.2), ExecutorSpec(speed=2.0))
            for _ in range(3)
        ]
        reports = await asyncio.wait_for(asyncio.gather(*agents), 30)
        await asyncio.wait_for(serve, 10)
        return reports

    reports = asyncio.run(main())
    assert all(r.exit_code == 0 for r in reports)
    assert sum(r.ok for r in reports) == 40
    events = read_trace(tmp_path / "trace.jsonl")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary_from_trace(events).to_json() == summary
    assert summary["N_task"] == 40 and summary["r_fail"] == 0
    endpoint = json.loads((tmp_path / "master.json").read_text())
    assert endpoint["port"] > 0
    calc_ids = [c for line in (tmp_path / "results.jsonl").read_text().splitlines()
                for c in json.loads(line)["calc_ids"]]
    expected = [c for t in tasks for c in t.calc_ids]
    assert sorted(calc_ids) == sorted(expected) and len(set(calc_ids)) == len(calc_ids)
    assert sum(1 for e in events if e.kind is EventKind.WORKER_DRAINED) == 3


def test_http_metrics_and_drain():
    async def main():
        server, serve = await start(make_tasks([1.0, 1.0, 1.0]), http_port=0)
        base = "http://%s:%d" % server.http_address
        c = await Raw.open(server.address)
        wid = await c.register()
        got = await c.call(Message(Kind.REQUEST, worker_id=wid))
        hb = asyncio.create_task(heartbeats(c, wid))
        async with httpx.AsyncClient(base_url=base) as http:
            health = (await http.get("/health")).json()
            assert health["status"] == "ok" and health["master"] is True
            m = (await http.get("/metrics")).json()
            assert (m["busy"], m["pending"], m["pool_slots"], m["finished"]) == (1, 2, 1, False)
            d = (await http.post("/drain")).json()
            assert d == {"draining": True, "in_flight": 1}
            nowork = await c.call(Message(Kind.REQUEST, worker_id=wid))
            assert nowork.kind is Kind.DRAIN
        hb.cancel()
        ack = await c.call(Message(Kind.RESULT, worker_id=wid, task_id=got.task_id, status="OK"))
        assert ack.discarded is False
        c.close()
        await asyncio.wait_for(serve, 5)
        return server

    server = asyncio.run(main())
    assert not server.state.finished and server.state.summary().n_done == 1


async def heartbeats(c, wid):
    while True:
        await c.send(Message(Kind.HEARTBEAT, worker_id=wid, busy_task_ids=()))
        await asyncio.sleep(0.05)


def test_sigterm_drains_master_process(tmp_path):
    write_tasks(make_tasks([1.0, 1.0]), tmp_path / "tasks.jsonl")
    run_dir = tmp_path / "run"
    proc = subprocess.Popen(
        [sys.executable, "-m", "taskfarm.cli", "master", "--tasks", str(tmp_path / "tasks.jsonl"),
         "--run-dir", str(run_dir), "--drain-grace", "0.5", "--json"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        env={**os.environ, "PYTHONUNBUFFERED": "1"},
    )
    try:
        deadline = time.monotonic() + 20
        while not (run_dir / "master.json").exists():
            assert time.monotonic() < deadline and proc.poll() is None
            time.sleep(0.05)
        info = json.loads((run_dir / "master.json").read_text())

        async def main():
            c = await Raw.open((info["host"], info["port"]))
            wid = await c.register()
            got = await c.call(Message(Kind.REQUEST, worker_id=wid))
            proc.send_signal(signal.SIGTERM)
            await asyncio.sleep(0.3)
            assert proc.poll() is None  # in-flight work keeps it alive
            drain = await c.call(Message(Kind.REQUEST, worker_id=wid))
            assert drain.kind is Kind.DRAIN
            await c.call(Message(Kind.RESULT, worker_id=wid, task_id=got.task_id, status="OK"))
            c.close()

        asyncio.run(main())
        out, _ = proc.communicate(timeout=20)
    finally:
        if proc.poll() is None:
            proc.kill()
    assert proc.returncode == 1  # stopped before completion
    doc = json.loads(out)
    assert doc["finished"] is False and doc["summary"]["N_done"] == 1
    assert not (run_dir / "summary.json").exists()
    assert len(read_trace(run_dir / "trace.jsonl")) > 0


@pytest.mark.parametrize("kind", [Kind.REQUEST, Kind.RESULT])
def test_foreign_worker_id_on_connection_rejected(kind):
    async def main():
        server, serve = await start(make_tasks([1.0]))
        c = await Raw.open(server.address)
        await c.register()
        msg = Message(kind, worker_id="w9999", task_id="x", status="OK")
        reply = await c.call(msg)
        assert reply.kind is Kind.SHUTDOWN and "belongs to" in reply.error
        c.close()
        server.request_drain()
        await asyncio.wait_for(serve, 5)

    asyncio.run(main())
