"""Command-line entry point.

Exit codes: 0 success, 1 domain error (bad input data, failed check, campaign
not completed), 2 usage error. Settings resolve as flag > ``PH_<NAME>``
environment variable > ``--config`` JSON file > built-in default.
"""

from __future__ import annotations

import argparse
import asyncio
import csv
import json
import logging
import os
import re
import signal
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from taskfarm import __version__
from taskfarm.master.state import MasterConfig, MasterError
from taskfarm.model import (
    ManifestError,
    Manifest,
    Ordering,
    WorkloadSpec,
    build_manifest,
    cluster,
    generate_workload,
    read_granularity,
    read_tasks,
    read_workload,
    verify_manifest,
    write_tasks,
    write_workload,
)
from taskfarm.protocol import ProtocolError

log = logging.getLogger("taskfarm")

_DURATION = re.compile(r"^\s*(?:(?P<h>\d+(?:\.\d+)?)h)?\s*(?:(?P<m>\d+(?:\.\d+)?)m)?\s*(?:(?P<s>\d+(?:\.\d+)?)s?)?\s*$")


def parse_duration(value: Any) -> float:
    """Seconds from a number or a string such as ``90``, ``1.5h``, ``6h40m``, ``30s``."""
    if isinstance(value, (int, float)):
        return float(value)
    text = str(value).strip()
    m = _DURATION.match(text)
    if not text or m is None or not any(m.groupdict().values()):
        raise ValueError(f"not a duration: {value!r}")
    h, mi, s = (float(m.group(k) or 0) for k in ("h", "m", "s"))
    return h * 3600 + mi * 60 + s


def _duration_arg(value: str) -> float:
    try:
        return parse_duration(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


class _Settings:
    """Resolves one setting through flag, environment and config file."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file: dict[str, Any] = {}
        if getattr(args, "config", None):
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
            if not isinstance(raw, dict):
                raise ValueError("config file must hold a JSON object")
            section = raw.get(args.command, {})
            self.file = {k: v for k, v in raw.items() if not isinstance(v, dict)}
            if isinstance(section, dict):
                self.file.update(section)

    def get(self, name: str, default: Any = None, conv: Callable[[Any], Any] = lambda v: v) -> Any:
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        env = os.environ.get("PH_" + name.upper())
        if env is not None:
            return conv(env)
        if name in self.file:
            return conv(self.file[name])
        return default


def _out(args: argparse.Namespace, obj: Any, text: str) -> None:
    if args.json:
        print(json.dumps(obj, sort_keys=True))
    else:
        print(text)


def _address(value: str) -> tuple[str, int]:
    from taskfarm.telemetry import parse_address

    return parse_address(value)


# -- gen / cluster -------------------------------------------------------------


def cmd_gen(args, st: _Settings) -> int:
    with open(args.spec, encoding="utf-8") as fh:
        spec = WorkloadSpec.from_json(json.load(fh))
    seed = st.get("seed", None, int)
    if seed is not None:
        spec = WorkloadSpec(spec.counts, spec.cost, spec.ordering, seed)
    calcs = generate_workload(spec)
    write_workload(calcs, args.out)
    total = float(sum(c.cost for c in calcs))
    _out(args, {"path": str(args.out), "n_calc": len(calcs), "total_cost_s": total},
         f"wrote {len(calcs)} calculations ({total / 3600:.2f} h of cost) to {args.out}")
    return 0


def _load_tasks(args, st: _Settings):
    if getattr(args, "tasks", None):
        return read_tasks(args.tasks), None
    if not getattr(args, "workload", None) or not getattr(args, "granularity", None):
        raise ValueError("need --tasks, or --workload together with --granularity")
    calcs = read_workload(args.workload)
    ordering = Ordering(st.get("ordering", "NATURAL", str))
    tasks = cluster(calcs, read_granularity(args.granularity), ordering, st.get("seed", 0, int))
    return tasks, calcs


def cmd_cluster(args, st: _Settings) -> int:
    tasks, _ = _load_tasks(args, st)
    write_tasks(tasks, args.out)
    _out(args, {"path": str(args.out), "n_task": len(tasks)}, f"wrote {len(tasks)} tasks to {args.out}")
    return 0


# -- master / worker / run-local -------------------------------------------------


def _master_config(st: _Settings) -> MasterConfig:
    target = st.get("target_pool", None, int)
    return MasterConfig(
        heartbeat_interval_s=st.get("heartbeat", 10.0, parse_duration),
        lost_timeout_s=st.get("lost_timeout", 30.0, parse_duration),
        retry_cap=st.get("retry_cap", 3, int),
        ordering=Ordering(st.get("ordering", "NATURAL", str)),
        ordering_seed=st.get("ordering_seed", 0, int),
        target_pool=target,
        host=st.get("host", "127.0.0.1", str),
        port=st.get("port", 0, int),
    )


def _server_kwargs(st: _Settings) -> dict:
    collector = st.get("collector", None, str)
    return {
        "http_port": st.get("http_port", None, int),
        "collector": _address(collector) if collector else None,
        "drain_grace_s": st.get("drain_grace", 10.0, parse_duration),
    }


def _campaign_report(args, run_dir: Path, state) -> int:
    snap = state.snapshot()
    summary = snap.summary.to_json()
    _out(
        args,
        {"run_dir": str(run_dir), "finished": snap.finished, "summary": summary},
        f"campaign {'complete' if snap.finished else 'stopped before completion'}: "
        f"{summary['N_done']}/{summary['N_task']} tasks done, r_fail={summary['r_fail']:.4g}, "
        f"t_total={summary['t_total']:.1f}s",
    )
    return 0 if snap.finished else 1


def cmd_master(args, st: _Settings) -> int:
    from taskfarm.master.server import MasterServer

    tasks, calcs = _load_tasks(args, st)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if calcs is not None:
        write_workload(calcs, run_dir / "workload.jsonl")
    write_tasks(tasks, run_dir / "tasks.jsonl")
    server = MasterServer(tasks, _master_config(st), run_dir, **_server_kwargs(st))

    async def main() -> None:
        loop = asyncio.get_running_loop()
        loop.add_signal_handler(signal.SIGINT, server.request_drain)
        await server.serve()

    asyncio.run(main())
    return _campaign_report(args, run_dir, server.state)


def _agent_parts(st: _Settings, args):
    from taskfarm.agent import AgentConfig, ExecMode, ExecutorSpec

    master = st.get("master", None, str)
    if master is None and getattr(args, "run_dir", None):
        info = json.loads((Path(args.run_dir) / "master.json").read_text())
        master = f"{info['host']}:{info['port']}"
    if master is None:
        raise ValueError("need --master host:port (or --run-dir of a running master)")
    host, port = _address(master)
    collector = st.get("collector", None, str)
    log_path = st.get("log", None, str)
    timeout = st.get("timeout", None, parse_duration)
    cfg = AgentConfig(
        host=host,
        port=port,
        slots=st.get("slots", 2, int),
        heartbeat_interval_s=st.get("heartbeat", 10.0, parse_duration),
        backoff_initial_s=st.get("backoff_initial", 1.0, parse_duration),
        backoff_max_s=st.get("backoff_max", 30.0, parse_duration),
        connect_attempts=st.get("connect_attempts", 10, int),
        worker_id=st.get("worker_id", None, str),
        log_path=Path(log_path) if log_path else None,
        collector=_address(collector) if collector else None,
    )
    workdir = st.get("workdir", None, str)
    spec = ExecutorSpec(
        mode=ExecMode(st.get("mode", "SIMULATED", str).upper()),
        command=st.get("command", "", str),
        speed=st.get("speed", 1.0, float),
        timeout_s=timeout,
        workdir=Path(workdir) if workdir else None,
    )
    return cfg, spec


def cmd_worker(args, st: _Settings) -> int:
    from taskfarm.agent import run_agent

    cfg, spec = _agent_parts(st, args)
    report = asyncio.run(run_agent(cfg, spec))
    _out(
        args,
        {k: v for k, v in vars(report).items() if k != "task_ids"},
        f"worker {report.worker_id}: {report.tasks_run} tasks ({report.ok} ok, {report.errors} error), "
        f"exit {report.exit_code}{' (' + report.reason + ')' if report.reason else ''}",
    )
    return report.exit_code


async def _run_local(args, st: _Settings, tasks, run_dir: Path):
    from taskfarm.master.server import MasterServer

    n_workers = st.get("workers", 4, int)
    slots = st.get("slots", 2, int)
    if n_workers < 1:
        raise ValueError("--workers must be >= 1")
    cfg = _master_config(st)
    if cfg.target_pool is None:
        cfg.target_pool = n_workers * slots
    server = MasterServer(tasks, cfg, run_dir, **_server_kwargs(st))
    serve_task = asyncio.create_task(server.serve())
    ready = asyncio.create_task(server.ready.wait())
    await asyncio.wait({serve_task, ready}, return_when=asyncio.FIRST_COMPLETED)
    if serve_task.done():
        serve_task.result()
    host, port = server.address
    loop = asyncio.get_running_loop()
    loop.add_signal_handler(signal.SIGINT, server.request_drain)

    logs = run_dir / "workers"
    logs.mkdir(exist_ok=True)
    base = [
        sys.executable, "-m", "taskfarm.cli", "worker",
        "--master", f"{host}:{port}",
        "--slots", str(slots),
        "--heartbeat", str(cfg.heartbeat_interval_s),
        "--speed", str(st.get("speed", 1.0, float)),
        "--mode", st.get("mode", "SIMULATED", str),
        "--backoff-initial", str(st.get("backoff_initial", 0.2, parse_duration)),
        "--backoff-max", str(st.get("backoff_max", 2.0, parse_duration)),
    ]
    command = st.get("command", None, str)
    if command:
        base += ["--command", command, "--workdir", str(run_dir / "work")]
    collector = st.get("collector", None, str)
    if collector:
        base += ["--collector", collector]
    procs = []
    for i in range(n_workers):
        argv = base + ["--log", str(logs / f"worker-{i:03d}.jsonl")]
        procs.append(await asyncio.create_subprocess_exec(*argv, stdout=asyncio.subprocess.DEVNULL))

    killed: list[int] = []
    fraction = st.get("kill_fraction", 0.0, float)
    if fraction > 0:
        n_kill = min(n_workers, max(1, round(fraction * n_workers)))
        rng = np.random.default_rng(st.get("kill_seed", 0, int))
        victims = sorted(int(v) for v in rng.choice(n_workers, n_kill, replace=False))
        kill_at = st.get("kill_at", 5.0, parse_duration)

        async def killer() -> None:
            # count from full registration, so slow interpreter start-up cannot
            # turn a mid-run kill into a kill before the worker ever joined
            while len(server.state.workers) < n_workers:
                await asyncio.sleep(0.05)
            await asyncio.sleep(kill_at)
            for v in victims:
                if procs[v].returncode is None:
                    procs[v].kill()
                    killed.append(v)
            log.warning("killed workers %s at t=%.1fs", killed, kill_at)

        kill_task = asyncio.create_task(killer())
    else:
        kill_task = None

    try:
        await serve_task
    finally:
        if kill_task is not None:
            kill_task.cancel()
        for p in procs:
            try:
                await asyncio.wait_for(p.wait(), 10.0)
            except asyncio.TimeoutError:
                p.kill()
                await p.wait()
        loop.remove_signal_handler(signal.SIGINT)
    return server, killed


def cmd_run_local(args, st: _Settings) -> int:
    tasks, calcs = _load_tasks(args, st)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if calcs is not None:
        write_workload(calcs, run_dir / "workload.jsonl")
    write_tasks(tasks, run_dir / "tasks.jsonl")
    server, killed = asyncio.run(_run_local(args, st, tasks, run_dir))
    if killed:
        (run_dir / "killed.json").write_text(json.dumps(killed) + "\n")
    return _campaign_report(args, run_dir, server.state)


# -- sim / analyze ---------------------------------------------------------------


def _scenario_tasks(scn: dict, base: Path):
    wl = scn.get("workload")
    if "tasks" in scn:
        return read_tasks(base / scn["tasks"])
    if wl is None:
        raise ValueError("scenario needs 'workload' or 'tasks'")
    if "path" in wl:
        calcs = read_workload(base / wl["path"])
    else:
        calcs = generate_workload(WorkloadSpec.from_json(wl.get("spec", wl)))
    g = scn.get("granularity", {"*": 1})
    if isinstance(g, str):
        g = read_granularity(base / g)
    return cluster(calcs, g, Ordering.NATURAL, int(scn.get("workload_seed", 0)))


def cmd_sim(args, st: _Settings) -> int:
    from taskfarm.simulator import (
        cluster_from_json,
        ordering_experiment,
        push_from_json,
        simulate,
        write_run,
    )

    path = Path(args.scenario)
    scn = json.loads(path.read_text(encoding="utf-8"))
    tasks = _scenario_tasks(scn, path.parent)
    cl = cluster_from_json(scn["cluster"])
    mode = str(scn.get("mode", "PULL")).upper()
    push = push_from_json(scn.get("push"))
    mcfg = MasterConfig(**scn.get("master", {}))
    seeds = [int(s) for s in scn.get("seeds", [0])]
    dt = float(scn.get("dt", 60.0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policies = scn.get("policies") or [scn.get("policy", "NATURAL")]
    runs = []
    for policy in policies:
        for seed in seeds:
            res = simulate(tasks, replace(cl, seed=seed), mode, push, policy, mcfg)
            sub = out / (f"{policy}-seed-{seed}" if len(policies) > 1 else f"seed-{seed}")
            write_run(res, sub, cl.total_slots, dt)
            runs.append({"policy": policy, "seed": seed, "dir": sub.name, "completed": res.completed,
                         **res.summary.to_json()})
    report: dict[str, Any] = {"runs": runs}
    if len(policies) > 1:
        report["experiment"] = ordering_experiment(tasks, cl, policies, seeds, mode, push, mcfg, dt).to_json()
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    lines = [f"{r['dir']}: t_total={r['t_total']:.1f}s r_fail={r['r_fail']:.4g}" for r in runs]
    _out(args, report, "\n".join(lines))
    return 0


def cmd_analyze(args, st: _Settings) -> int:
    from taskfarm.analytics import (
        build_series,
        decompose,
        run_profile,
        summary_from_trace,
        write_profile_csv,
        write_series_csv,
    )
    from taskfarm.trace import EventKind, read_trace

    events = read_trace(args.trace)
    dt = st.get("dt", 60.0, parse_duration)
    n_w = st.get("n_w", None, int)
    if n_w is None:
        # default to the largest pool actually reached
        pool = peak = 0
        sizes: dict[str, int] = {}
        for e in events:
            if e.kind is EventKind.WORKER_JOIN:
                sizes[e.worker] = e.slots or 1
                pool += sizes[e.worker]
                peak = max(peak, pool)
            elif e.kind in (EventKind.WORKER_LOST, EventKind.WORKER_DRAINED):
                pool -= sizes.pop(e.worker, 0)
        n_w = max(peak, 1)
    out = Path(args.out)
    (out / "series").mkdir(parents=True, exist_ok=True)
    d = decompose(events, n_w, dt)
    summary = summary_from_trace(events)
    write_series_csv(build_series(events, dt), out / "series" / "pool_busy.csv")
    write_profile_csv(run_profile(events), out / "profile.csv")
    (out / "decomposition.json").write_text(json.dumps(d.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2, sort_keys=True) + "\n")
    pct = d.percentages()
    _out(
        args,
        {"decomposition": d.to_json(), "summary": summary.to_json()},
        f"T={d.T:.1f}s N_w={n_w} L={pct['L']:.1f}% O={pct['O']:.1f}% I={pct['I']:.1f}% "
        f"B={pct['B']:.1f}% U_tail={d.U_tail:.3f}",
    )
    return 0


# -- collector / verify / bounds / status / drain ----------------------------------


def cmd_collector(args, st: _Settings) -> int:
    from taskfarm.telemetry import SeriesStore, run_collector

    host, port = _address(st.get("bind", "0.0.0.0:8884", str))
    duration = st.get("duration", None, parse_duration)
    store = SeriesStore()

    async def main() -> None:
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        if duration is not None:
            loop.call_later(duration, stop.set)
        await run_collector(host, port, args.out, stop, st.get("flush_interval", 5.0, parse_duration), store)

    asyncio.run(main())
    stats = {f"{c}/{n}": {"received": s.received, "gaps": s.gaps, "duplicates": s.duplicates, "resets": s.resets}
             for (c, n), s in store.sensors.items()}
    _out(args, {"sensors": stats, "undecodable": store.undecodable},
         f"{len(stats)} sensors, {store.undecodable} undecodable datagrams")
    return 0


def cmd_verify(args, st: _Settings) -> int:
    if args.build:
        m = build_manifest(args.root, args.package_version or __version__)
        Path(args.manifest).write_text(json.dumps(m.to_json(), indent=2) + "\n")
        _out(args, m.to_json(), f"wrote manifest of {len(m.files)} files to {args.manifest}")
        return 0
    m = Manifest.from_json(json.loads(Path(args.manifest).read_text(encoding="utf-8")))
    report = verify_manifest(m, args.root)
    bad = [f"{path}: {status.value}" for path, status in report.entries if status.value != "OK"]
    _out(args, report.to_json(), "manifest OK" if report.ok else "manifest FAILED\n" + "\n".join(bad))
    return 0 if report.ok else 1


def read_bound_rows(path: str | os.PathLike) -> list[dict[str, float]]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.append({
                    "t_total": parse_duration(row["t_total"]),
                    "t_busy": parse_duration(row["t_busy"]),
                    "slots": float(row["slots"]),
                })
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{i}: bad row ({exc})") from None
    return rows


def cmd_bounds(args, st: _Settings) -> int:
    from taskfarm.analytics import check_bounds

    checks = check_bounds(read_bound_rows(args.rows))
    ok = all(c.passed for c in checks)
    lines = [
        f"{'pass' if c.passed else 'FAIL'}: t_busy/slots = {c.lower_bound / 3600:.3f} h "
        f"{'<=' if c.passed else '>'} t_total = {c.t_total / 3600:.3f} h"
        for c in checks
    ]
    _out(args, {"all_passed": ok, "rows": [vars(c) for c in checks]}, "\n".join(lines))
    return 0 if ok else 1


def _http_base(args, st: _Settings) -> str:
    url = st.get("url", None, str)
    if url:
        return url.rstrip("/")
    if getattr(args, "run_dir", None):
        info = json.loads((Path(args.run_dir) / "master.json").read_text())
        if "http_port" not in info:
            raise ValueError("that master was started without --http-port")
        return f"http://{info['host']}:{info['http_port']}"
    raise ValueError("need --url or --run-dir")


def _http(method: str, url: str) -> dict:
    import urllib.error
    import urllib.request

    req = urllib.request.Request(url, method=method, data=b"" if method == "POST" else None)
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return json.loads(resp.read())
    except urllib.error.URLError as exc:
        raise OSError(f"{url}: {exc}") from None


def cmd_status(args, st: _Settings) -> int:
    snap = _http("GET", _http_base(args, st) + "/metrics")
    s = snap["summary"]
    _out(args, snap, f"pool {snap['pool_slots']} slots, busy {snap['busy']}, pending {snap['pending']}, "
                     f"done {s['N_done']}/{s['N_task']}, failed {s['N_failed']}")
    return 0


def cmd_drain(args, st: _Settings) -> int:
    res = _http("POST", _http_base(args, st) + "/drain")
    _out(args, res, f"drain requested; {res['in_flight']} tasks in flight")
    return 0


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    common.add_argument("--config", help="JSON config file (top-level keys or a section per subcommand)")
    common.add_argument("--log-level", default="WARNING")

    p = argparse.ArgumentParser(prog="taskfarm", description="Master/worker task farm toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, fn, help_: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def tasks_input(sp) -> None:
        sp.add_argument("--tasks", help="tasks JSONL")
        sp.add_argument("--workload", help="workload JSONL (clustered with --granularity)")
        sp.add_argument("--granularity", help="granularity JSON {type: G}")
        sp.add_argument("--ordering", choices=[o.value for o in Ordering])
        sp.add_argument("--seed", type=int, help="seed for RANDOM clustering order")

    def master_flags(sp) -> None:
        sp.add_argument("--run-dir", required=True)
        sp.add_argument("--host")
        sp.add_argument("--port", type=int)
        sp.add_argument("--http-port", type=int, help="serve /metrics and /drain over HTTP")
        sp.add_argument("--heartbeat", type=_duration_arg)
        sp.add_argument("--lost-timeout", type=_duration_arg)
        sp.add_argument("--retry-cap", type=int)
        sp.add_argument("--ordering-seed", type=int)
        sp.add_argument("--target-pool", type=int)
        sp.add_argument("--collector", help="telemetry collector host:port")
        sp.add_argument("--drain-grace", type=_duration_arg)

    def executor_flags(sp) -> None:
        sp.add_argument("--slots", type=int)
        sp.add_argument("--mode", choices=["SIMULATED", "COMMAND", "simulated", "command"])
        sp.add_argument("--command", help="template with {task_id} {payload_ref} {calc_ids_file}")
        sp.add_argument("--speed", type=float, help="simulated speed factor")
        sp.add_argument("--timeout", type=_duration_arg, help="per-task ceiling (default none)")
        sp.add_argument("--backoff-initial", type=_duration_arg)
        sp.add_argument("--backoff-max", type=_duration_arg)

    sp = add("gen", cmd_gen, "generate a workload from a spec")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, help="override the seed in the workload spec file")

    sp = add("cluster", cmd_cluster, "cluster a workload into tasks")
    tasks_input(sp)
    sp.add_argument("--out", required=True)

    sp = add("master", cmd_master, "serve a campaign to pull workers")
    tasks_input(sp)
    master_flags(sp)

    sp = add("worker", cmd_worker, "run a worker agent")
    sp.add_argument("--master", help="master host:port")
    sp.add_argument("--run-dir", help="read the master endpoint from RUN_DIR/master.json")
    executor_flags(sp)
    sp.add_argument("--heartbeat", type=_duration_arg)
    sp.add_argument("--connect-attempts", type=int)
    sp.add_argument("--worker-id")
    sp.add_argument("--workdir")
    sp.add_argument("--log", help="JSONL task log")
    sp.add_argument("--collector", help="telemetry collector host:port")

    sp = add("run-local", cmd_run_local, "run a master and N local workers until done")
    tasks_input(sp)
    master_flags(sp)
    executor_flags(sp)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--kill-fraction", type=float, help="SIGKILL this fraction of workers mid-run")
    sp.add_argument("--kill-at", type=_duration_arg, help="when to kill, counted from all workers registered (default 5s)")
    sp.add_argument("--kill-seed", type=int)

    sp = add("sim", cmd_sim, "simulate a scenario file")
    sp.add_argument("--scenario", required=True)
    sp.add_argument("--out", required=True)

    sp = add("analyze", cmd_analyze, "decompose a run trace")
    sp.add_argument("--trace", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-w", type=int, help="target pool in slots (default: peak pool)")
    sp.add_argument("--dt", type=_duration_arg)

    sp = add("collector", cmd_collector, "run the telemetry collector")
    sp.add_argument("--bind", help="host:port (default 0.0.0.0:8884)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--flush-interval", type=_duration_arg)
    sp.add_argument("--duration", type=_duration_arg, help="stop after this long")

    sp = add("verify", cmd_verify, "check (or --build) a deployment manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--root", required=True)
    sp.add_argument("--build", action="store_true", help="write a manifest instead of checking")
    sp.add_argument("--package-version")

    sp = add("bounds", cmd_bounds, "work-conservation check on summary rows")
    sp.add_argument("--rows", required=True, help="CSV with t_total,t_busy,slots")

    for name, fn, help_ in (("status", cmd_status, "show live master metrics"),
                            ("drain", cmd_drain, "ask a live master to drain")):
        sp = add(name, fn, help_)
        sp.add_argument("--url", help="master HTTP base URL")
        sp.add_argument("--run-dir")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        st = _Settings(args)
        return args.fn(args, st)
    except (ValueError, OSError, KeyError, MasterError, ManifestError, ProtocolError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        if args.json:
            print(json.dumps({"error": msg}))
        print(f"taskfarm {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
