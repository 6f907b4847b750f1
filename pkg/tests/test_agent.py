import asyncio
import json
import subprocess
import time

import pytest

from taskfarm.agent import AgentConfig, ExecMode, ExecutorSpec, execute, run_agent
from taskfarm.master.server import MasterServer
from taskfarm.master.state import MasterConfig
from taskfarm.protocol import FrameDecoder, Kind, Message, encode_frame

from conftest import make_tasks


def assign(task_id="t1", cost=1.0, calc_ids=("c1",), payload_ref=""):
    return Message(Kind.ASSIGN, task_id=task_id, calc_ids=calc_ids, payload_ref=payload_ref, cost=cost)


def run(coro):
    return asyncio.run(coro)


def test_simulated_sleeps_cost_over_speed():
    res = run(execute(assign(cost=0.2), ExecutorSpec()))
    assert res.status == "OK" and 0.19 <= res.elapsed_s < 0.4


def test_speed_ratio_within_five_percent():
    res = run(execute(assign(cost=2.0), ExecutorSpec(speed=1.3)))
    assert res.elapsed_s == pytest.approx(2.0 / 1.3, rel=0.05)


def test_command_exit_code_reported(tmp_path):
    res = run(execute(assign(), ExecutorSpec(ExecMode.COMMAND, "exit 3", workdir=tmp_path)))
    assert res.status == "ERROR" and res.reason == "exit_code=3"
    ok = run(execute(assign(), ExecutorSpec(ExecMode.COMMAND, "true", workdir=tmp_path)))
    assert ok.status == "OK" and ok.reason is None


def test_calc_ids_file_and_placeholders(tmp_path):
    cmd = "cat {calc_ids_file} > out-{task_id}.txt && echo {payload_ref} >> out-{task_id}.txt"
    res = run(execute(assign("t9", calc_ids=("a", "b", "c"), payload_ref="x y"), ExecutorSpec("COMMAND", cmd,
                                                                                               workdir=tmp_path)))
    assert res.status == "OK"
    assert (tmp_path / "out-t9.txt").read_text() == "a\nb\nc\nx y\n"
    assert not (tmp_path / "t9.calcs").exists()


def test_bad_template_is_an_error_result(tmp_path):
    res = run(execute(assign(), ExecutorSpec("COMMAND", "echo {nope}", workdir=tmp_path)))
    assert res.status == "ERROR" and "template" in res.reason


def test_spawn_failure_is_an_error_result(tmp_path):
    spec = ExecutorSpec("COMMAND", "true", workdir=tmp_path / "missing")
    (tmp_path / "missing").write_text("a file, not a directory")
    res = run(execute(assign(), spec))
    assert res.status == "ERROR"


def orphans(marker):
    out = subprocess.run(["pgrep", "-f", marker], capture_output=True, text=True)
    return out.stdout.split()


def test_timeout_kills_whole_process_group(tmp_path):
    marker = "sleep 47.123"
    spec = ExecutorSpec("COMMAND", f"{marker} & {marker}; wait", timeout_s=0.3, workdir=tmp_path)
    t0 = time.monotonic()
    res = run(execute(assign(), spec))
    assert res.status == "ERROR" and "timeout" in res.reason
    assert time.monotonic() - t0 < 5
    time.sleep(0.1)
    assert orphans(marker) == []


def test_cancellation_kills_children(tmp_path):
    marker = "sleep 48.321"

    async def main():
        task = asyncio.create_task(execute(assign(), ExecutorSpec("COMMAND", marker, workdir=tmp_path)))
        await asyncio.sleep(0.3)
        task.cancel()
        with pytest.raises(asyncio.CancelledError):
            await task

    run(main())
    time.sleep(0.1)
    assert orphans(marker) == []


def test_spec_validation():
    with pytest.raises(ValueError):
        ExecutorSpec("COMMAND", "  ")
    with pytest.raises(ValueError):
        ExecutorSpec(speed=0)
    with pytest.raises(ValueError):
        ExecutorSpec(timeout_s=0)
    with pytest.raises(ValueError):
        AgentConfig(slots=0)


async def with_master(tasks, agents, config=None, **server_kw):
    """Serve ``tasks`` and run each (AgentConfig, ExecutorSpec) pair against it."""
    server = MasterServer(tasks, config or MasterConfig(heartbeat_interval_s=0.5, lost_timeout_s=2.0),
                          drain_grace_s=2.0, **server_kw)
    serve = asyncio.create_task(server.serve())
    await server.ready.wait()
    host, port = server.address
    jobs = []
    for cfg, spec in agents:
        cfg.host, cfg.port = host, port
        jobs.append(asyncio.create_task(run_agent(cfg, spec)))
    reports = await asyncio.wait_for(asyncio.gather(*jobs), 30)
    await asyncio.wait_for(serve, 30)
    return server, reports


def fast_cfg(**kw):
    kw.setdefault("heartbeat_interval_s", 0.5)
    return AgentConfig(backoff_initial_s=0.05, backoff_max_s=0.2, **kw)


def test_slot_cap_respected_and_all_tasks_run():
    tasks = make_tasks([0.2] * 5)
    server, (rep,) = run(with_master(tasks, [(fast_cfg(slots=2), ExecutorSpec())]))
    assert rep.exit_code == 0 and rep.ok == 5 and rep.max_concurrent == 2
    assert server.state.finished and server.state.summary().n_done == 5


async def scripted_master(replies):
    """Answer each incoming frame kind with the frames in ``replies[kind]``."""
    seen = []

    async def handle(reader, writer):
        dec = FrameDecoder()
        while data := await reader.read(1 << 16):
            for m in dec.feed(data):
                seen.append(m)
                for r in replies.get(m.kind, ()):
                    writer.write(encode_frame(r))
        writer.close()

    server = await asyncio.start_server(handle, "127.0.0.1", 0)
    return server, seen


def test_drain_with_no_tasks_exits_cleanly():
    async def main():
        server, seen = await scripted_master({
            Kind.REGISTER: [Message(Kind.REGISTERED, worker_id="w0042")],
            Kind.REQUEST: [Message(Kind.DRAIN)],
        })
        cfg = fast_cfg(slots=3, port=server.sockets[0].getsockname()[1])
        rep = await asyncio.wait_for(run_agent(cfg, ExecutorSpec()), 10)
        server.close()
        return rep, seen

    rep, seen = run(main())
    assert rep.exit_code == 0 and rep.tasks_run == 0 and rep.worker_id == "w0042"
    assert seen[0].kind is Kind.REGISTER and seen[0].slots == 3
    assert [m.kind for m in seen[1:4]] == [Kind.REQUEST] * 3


def test_rejected_registration_exits_nonzero():
    async def main():
        server, _ = await scripted_master({Kind.REGISTER: [Message(Kind.REGISTERED, worker_id="", error="nope")]})
        rep = await run_agent(fast_cfg(port=server.sockets[0].getsockname()[1]), ExecutorSpec())
        server.close()
        return rep

    rep = run(main())
    assert rep.exit_code == 1 and rep.reason == "nope"


def test_error_results_flow_to_master_and_log(tmp_path):
    log_path = tmp_path / "agent.log"
    cfg = MasterConfig(heartbeat_interval_s=0.5, lost_timeout_s=2.0, retry_cap=1)
    spec = ExecutorSpec("COMMAND", "exit 3", workdir=tmp_path)
    server, (rep,) = run(with_master(make_tasks([1.0, 1.0]), [(fast_cfg(slots=1, log_path=log_path), spec)], cfg))
    s = server.state.summary()
    assert s.n_failed == 2 and s.r_fail == 1.0
    assert rep.errors == 4  # one retry each
    lines = [json.loads(x) for x in log_path.read_text().splitlines()]
    assert len(lines) == 4 and {x["status"] for x in lines} == {"ERROR"}
    assert all(x["finished"] >= x["started"] for x in lines)


def test_unreachable_master_exits_nonzero():
    async def main():
        cfg = AgentConfig(port=9, connect_attempts=2, connect_delay_s=0.01)
        return await run_agent(cfg, ExecutorSpec())

    rep = run(main())
    assert rep.exit_code == 1 and rep.reason == "master unreachable"
