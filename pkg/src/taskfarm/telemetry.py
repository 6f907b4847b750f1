"""UDP monitoring datagrams in XDR encoding, plus the collector side.

Datagram layout (all integers big-endian, strings are u32 length + bytes +
zero padding to a 4-byte boundary)::

    version_tag:string  cluster:string  node:string  seq:u32  nparams:u32
    nparams x { name:string  type:u32  value }

Type codes: 1 = INT32, 2 = REAL64 (IEEE-754 double), 3 = STRING.
"""

from __future__ import annotations

import asyncio
import csv
import logging
import os
import re
import socket
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Sequence, Union

log = logging.getLogger(__name__)

VERSION_TAG = "PH1"
MAX_DATAGRAM = 1400

_U32 = struct.Struct(">I")
_I32 = struct.Struct(">i")
_F64 = struct.Struct(">d")


class ParamType(IntEnum):
    INT32 = 1
    REAL64 = 2
    STRING = 3


Value = Union[int, float, str]


class TelemetryError(ValueError):
    """A datagram that cannot be encoded."""


class DecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass(frozen=True)
class Param:
    name: str
    type: ParamType
    value: Value

    @classmethod
    def int32(cls, name: str, value: int) -> "Param":
        return cls(name, ParamType.INT32, int(value))

    @classmethod
    def real64(cls, name: str, value: float) -> "Param":
        return cls(name, ParamType.REAL64, float(value))

    @classmethod
    def string(cls, name: str, value: str) -> "Param":
        return cls(name, ParamType.STRING, value)


@dataclass(frozen=True)
class MonDatagram:
    cluster: str
    node: str
    seq: int
    params: tuple[Param, ...] = ()
    version_tag: str = VERSION_TAG


def _pack_string(out: bytearray, s: str) -> None:
    try:
        raw = s.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise TelemetryError(f"string {s!r} is not valid UTF-8: {exc}") from None
    out += _U32.pack(len(raw))
    out += raw
    out += b"\0" * (-len(raw) % 4)


def encode_datagram(d: MonDatagram) -> bytes:
    if not 0 <= d.seq <= 0xFFFFFFFF:
        raise TelemetryError(f"seq {d.seq} does not fit in u32")
    out = bytearray()
    _pack_string(out, d.version_tag)
    _pack_string(out, d.cluster)
    _pack_string(out, d.node)
    out += _U32.pack(d.seq)
    out += _U32.pack(len(d.params))
    for p in d.params:
        _pack_string(out, p.name)
        ptype = ParamType(p.type)
        out += _U32.pack(ptype)
        if ptype is ParamType.INT32:
            if isinstance(p.value, bool) or not isinstance(p.value, int) or not -(2**31) <= p.value < 2**31:
                raise TelemetryError(f"param {p.name}: {p.value!r} is not an INT32")
            out += _I32.pack(p.value)
        elif ptype is ParamType.REAL64:
            out += _F64.pack(float(p.value))
        else:
            if not isinstance(p.value, str):
                raise TelemetryError(f"param {p.name}: {p.value!r} is not a string")
            _pack_string(out, p.value)
        if len(out) > MAX_DATAGRAM:
            break
    if len(out) > MAX_DATAGRAM:
        raise TelemetryError(f"datagram exceeds {MAX_DATAGRAM} bytes")
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def u32(self, what: str) -> int:
        if self.pos + 4 > len(self.buf):
            raise DecodeError(f"truncated buffer reading {what}", self.pos)
        (v,) = _U32.unpack_from(self.buf, self.pos)
        self.pos += 4
        return v

    def i32(self, what: str) -> int:
        if self.pos + 4 > len(self.buf):
            raise DecodeError(f"truncated buffer reading {what}", self.pos)
        (v,) = _I32.unpack_from(self.buf, self.pos)
        self.pos += 4
        return v

    def f64(self, what: str) -> float:
        if self.pos + 8 > len(self.buf):
            raise DecodeError(f"truncated buffer reading {what}", self.pos)
        (v,) = _F64.unpack_from(self.buf, self.pos)
        self.pos += 8
        return v

    def string(self, what: str) -> str:
        start = self.pos
        n = self.u32(f"{what} length")
        padded = n + (-n % 4)
        if n > len(self.buf) - self.pos or padded > len(self.buf) - self.pos:
            raise DecodeError(f"{what} length {n} exceeds buffer", start)
        raw = bytes(self.buf[self.pos : self.pos + n])
        pad = self.buf[self.pos + n : self.pos + padded]
        if any(pad):
            raise DecodeError(f"non-zero padding after {what}", self.pos + n)
        try:
            s = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError(f"{what} is not valid UTF-8", start) from None
        self.pos += padded
        return s


def decode_datagram(buf: bytes) -> MonDatagram:
    if len(buf) > MAX_DATAGRAM:
        raise DecodeError(f"datagram of {len(buf)} bytes exceeds {MAX_DATAGRAM}", 0)
    r = _Reader(buf)
    tag = r.string("version_tag")
    cluster = r.string("cluster")
    node = r.string("node")
    seq = r.u32("seq")
    count_at = r.pos
    count = r.u32("param count")
    # every param needs at least 12 bytes (name length, type, 4-byte value)
    if count * 12 > len(buf) - r.pos:
        raise DecodeError(f"param count {count} exceeds buffer", count_at)
    params = []
    for i in range(count):
        name = r.string(f"param {i} name")
        code_at = r.pos
        code = r.u32(f"param {i} type")
        if code == ParamType.INT32:
            params.append(Param(name, ParamType.INT32, r.i32(f"param {i} value")))
        elif code == ParamType.REAL64:
            params.append(Param(name, ParamType.REAL64, r.f64(f"param {i} value")))
        elif code == ParamType.STRING:
            params.append(Param(name, ParamType.STRING, r.string(f"param {i} value")))
        else:
            raise DecodeError(f"unknown type code {code}", code_at)
    if r.pos != len(buf):
        raise DecodeError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return MonDatagram(cluster, node, seq, tuple(params), tag)


# -- sensors ---------------------------------------------------------------


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {addr!r}")
    return host, int(port)


class Sensor:
    """Fire-and-forget UDP emitter with a per-sensor sequence counter.

    Socket errors are logged and swallowed; emission never blocks.
    """

    def __init__(self, collector: tuple[str, int] | None, cluster: str, node: str):
        self.collector = collector
        self.cluster = cluster
        self.node = node
        self.seq = 0
        self.sent = 0
        self.errors = 0
        self._sock: socket.socket | None = None
        if collector is not None:
            try:
                self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
                self._sock.setblocking(False)
            except OSError as exc:
                log.warning("telemetry socket unavailable: %s", exc)

    def emit(self, params: Sequence[Param]) -> MonDatagram | None:
        self.seq = self.seq % 0xFFFFFFFF + 1
        d = MonDatagram(self.cluster, self.node, self.seq, tuple(params))
        try:
            data = encode_datagram(d)
        except TelemetryError as exc:
            log.warning("dropping telemetry datagram: %s", exc)
            self.errors += 1
            return None
        if self._sock is not None and self.collector is not None:
            try:
                self._sock.sendto(data, self.collector)
                self.sent += 1
            except OSError as exc:
                self.errors += 1
                log.debug("telemetry send failed: %s", exc)
        return d

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None


def master_params(snapshot) -> list[Param]:
    return [
        Param.int32("pool", snapshot.pool_slots),
        Param.int32("busy", snapshot.busy),
        Param.int32("workers", snapshot.pool_workers),
        Param.int32("pending", snapshot.pending),
        Param.int32("done", snapshot.done),
        Param.int32("failed", snapshot.failed),
    ]


def host_load_params() -> list[Param]:
    try:
        load1 = os.getloadavg()[0]
    except OSError:
        return []
    return [Param.real64("load1", load1)]


async def sensor_emit(
    sensor: Sensor,
    source: Callable[[], Sequence[Param]],
    interval_s: float,
    stop: asyncio.Event,
) -> None:
    """Emit ``source()`` every ``interval_s`` until ``stop`` is set."""
    while not stop.is_set():
        try:
            sensor.emit(source())
        except Exception:  # a broken source must not take the host process down
            log.exception("telemetry source failed")
        try:
            await asyncio.wait_for(stop.wait(), interval_s)
        except asyncio.TimeoutError:
            pass


# -- collector -------------------------------------------------------------


@dataclass
class SensorStats:
    last_seq: int
    gaps: int = 0
    received: int = 1
    duplicates: int = 0
    resets: int = 0


@dataclass
class SeriesStore:
    series: dict[tuple[str, str, str], list[tuple[float, Value]]] = field(default_factory=dict)
    sensors: dict[tuple[str, str], SensorStats] = field(default_factory=dict)
    undecodable: int = 0
    rows: list[tuple[float, str, str, str, Value]] = field(default_factory=list)

    def gap_count(self, cluster: str, node: str) -> int:
        return self.sensors[(cluster, node)].gaps

    def ingest(self, data: bytes, recv_time: float) -> bool:
        """Apply one datagram; returns False if it was dropped."""
        try:
            d = decode_datagram(data)
        except DecodeError as exc:
            log.debug("undecodable datagram: %s", exc)
            self.undecodable += 1
            return False
        if d.version_tag != VERSION_TAG:
            self.undecodable += 1
            return False
        key = (d.cluster, d.node)
        stats = self.sensors.get(key)
        if stats is None:
            self.sensors[key] = SensorStats(last_seq=d.seq)
        elif d.seq == stats.last_seq:
            stats.duplicates += 1
            return False
        elif d.seq > stats.last_seq:
            stats.gaps += d.seq - stats.last_seq - 1
            stats.last_seq = d.seq
            stats.received += 1
        else:
            # regression: sensor restarted (or reordering); new baseline
            stats.resets += 1
            stats.last_seq = d.seq
            stats.received += 1
        for p in d.params:
            points = self.series.setdefault((d.cluster, d.node, p.name), [])
            t = max(recv_time, points[-1][0]) if points else recv_time
            points.append((t, p.value))
            self.rows.append((t, d.cluster, d.node, p.name, p.value))
        return True


_UNSAFE = re.compile(r"[^A-Za-z0-9_.-]+")


class CsvSink:
    """Append-only CSV, one file per (cluster, node, param)."""

    COLUMNS = ("recv_time_s", "cluster", "node", "param", "value")

    def __init__(self, out_dir: str | os.PathLike):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path_for(self, cluster: str, node: str, param: str) -> Path:
        name = "__".join(_UNSAFE.sub("_", part) for part in (cluster, node, param))
        return self.out_dir / f"{name}.csv"

    def flush(self, store: SeriesStore) -> int:
        rows, store.rows = store.rows, []
        by_file: dict[Path, list] = {}
        for row in rows:
            by_file.setdefault(self.path_for(*row[1:4]), []).append(row)
        for path, chunk in by_file.items():
            new = not path.exists()
            with open(path, "a", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                if new:
                    w.writerow(self.COLUMNS)
                w.writerows(chunk)
        return len(rows)


class _CollectorProtocol(asyncio.DatagramProtocol):
    def __init__(self, store: SeriesStore, clock: Callable[[], float]):
        self.store = store
        self.clock = clock

    def datagram_received(self, data: bytes, addr) -> None:
        self.store.ingest(data, self.clock())


async def run_collector(
    host: str,
    port: int,
    out_dir: str | os.PathLike,
    stop: asyncio.Event,
    flush_interval_s: float = 5.0,
    store: SeriesStore | None = None,
    on_bound: Callable[[tuple[str, int]], None] | None = None,
) -> SeriesStore:
    loop = asyncio.get_running_loop()
    store = store or SeriesStore()
    sink = CsvSink(out_dir)
    t0 = loop.time()
    transport, _ = await loop.create_datagram_endpoint(
        lambda: _CollectorProtocol(store, lambda: round(loop.time() - t0, 6)), local_addr=(host, port)
    )
    if on_bound is not None:
        on_bound(transport.get_extra_info("sockname")[:2])
    try:
        while not stop.is_set():
            try:
                await asyncio.wait_for(stop.wait(), flush_interval_s)
            except asyncio.TimeoutError:
                pass
            sink.flush(store)
    finally:
        transport.close()
        sink.flush(store)
    return store


__all__ = [
    "VERSION_TAG",
    "MAX_DATAGRAM",
    "ParamType",
    "Param",
    "MonDatagram",
    "TelemetryError",
    "DecodeError",
    "encode_datagram",
    "decode_datagram",
    "Sensor",
    "sensor_emit",
    "master_params",
    "host_load_params",
    "SeriesStore",
    "CsvSink",
    "run_collector",
    "parse_address",
]
