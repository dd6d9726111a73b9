"""Compute-node receiver: reassembly, aggregation, queue, feedback.

Fragments arrive keyed by (tick, channel).  Each buffer tracks the
exact byte intervals received, so duplicates and overlaps from the
network are detected rather than trusted; a completed buffer covers
[0, total) with no holes.  When every expected channel of a tick has
completed, the event enters a bounded FIFO queue; under overflow the
oldest event is evicted because fresher data is worth more than stale
data to a live analysis.

Queue fill feeds a small PID controller whose output rides fill
reports to the control plane, closing the loop that sizes this node's
share of the slot table.

Every ingested packet lands in exactly one of four counters (applied,
duplicate, stale, malformed), which keeps accounting losslessly
reconcilable against sender and balancer counters.
"""

from __future__ import annotations

import logging
import socket
import threading
from collections import deque
from dataclasses import dataclass, field

from . import netutil, wire
from .controlplane import FillReport
from .sender import Event

__all__ = [
    "REASSEMBLY_TIMEOUT_S",
    "TICK_WINDOW",
    "QUEUE_CAPACITY_DEFAULT",
    "PidController",
    "ReassemblyBuffer",
    "Receiver",
    "UdpReceiver",
]

log = logging.getLogger(__name__)

REASSEMBLY_TIMEOUT_S = 2.0
TICK_WINDOW = 64
QUEUE_CAPACITY_DEFAULT = 256


class PidController:
    """Queue-fill regulator; output is clamped to [-1, 1].

    Positive output asks for more traffic (queue under the setpoint),
    negative output sheds it.  The integral term is clamped so a long
    saturation cannot wind up an unrecoverable backlog of correction.
    """

    def __init__(
        self,
        kp: float = 0.8,
        ki: float = 0.05,
        kd: float = 0.1,
        setpoint: float = 0.5,
        integral_limit: float = 2.0,
        period_s: float = 1.0,
    ):
        self.kp, self.ki, self.kd = kp, ki, kd
        self.setpoint = setpoint
        self.integral_limit = integral_limit
        self.period_s = period_s
        self.integral = 0.0
        self.prev_error = 0.0

    def step(self, fill: float) -> float:
        error = self.setpoint - fill
        self.integral = max(
            -self.integral_limit, min(self.integral_limit, self.integral + error * self.period_s)
        )
        derivative = (error - self.prev_error) / self.period_s
        self.prev_error = error
        out = self.kp * error + self.ki * self.integral + self.kd * derivative
        return max(-1.0, min(1.0, out))

    def reset(self):
        self.integral = 0.0
        self.prev_error = 0.0


@dataclass
class ReassemblyBuffer:
    """One (tick, channel) in flight: received intervals plus bytes."""

    tick: int
    channel: int
    total_length: int
    first_seen_ns: int
    data: bytearray = field(default_factory=bytearray)
    intervals: list = field(default_factory=list)  # sorted disjoint [start, end)
    poisoned: bool = False
    got_zero: bool = False

    def __post_init__(self):
        if not self.data:
            self.data = bytearray(self.total_length)

    def insert(self, offset: int, chunk: bytes) -> str:
        """Apply one fragment; returns applied, duplicate, or mismatch."""
        if self.total_length == 0:
            if self.got_zero:
                return "duplicate"
            self.got_zero = True
            return "applied"
        start, end = offset, offset + len(chunk)
        overlap_equal = True
        overlaps = False
        for s, e in self.intervals:
            lo, hi = max(s, start), min(e, end)
            if lo < hi:
                overlaps = True
                if self.data[lo:hi] != chunk[lo - start : hi - start]:
                    overlap_equal = False
                    break
        if overlaps:
            if not overlap_equal:
                self.poisoned = True
                return "mismatch"
            return "duplicate"
        self.data[start:end] = chunk
        self.intervals.append((start, end))
        self.intervals.sort()
        merged = [self.intervals[0]]
        for s, e in self.intervals[1:]:
            if s == merged[-1][1]:
                merged[-1] = (merged[-1][0], e)
            else:
                merged.append((s, e))
        self.intervals = merged
        return "applied"

    @property
    def complete(self) -> bool:
        if self.poisoned:
            return False
        if self.total_length == 0:
            return self.got_zero
        return self.intervals == [(0, self.total_length)]

    def payload(self) -> bytes:
        return bytes(self.data)


class _BoundedQueue:
    """FIFO of completed events; overflow evicts the oldest."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: deque = deque()
        self._lock = threading.Lock()
        self._ready = threading.Condition(self._lock)

    def push(self, event: Event):
        with self._ready:
            evicted = None
            if len(self._items) >= self.capacity:
                evicted = self._items.popleft()
            self._items.append(event)
            self._ready.notify()
            return evicted

    def pop(self, block: bool = False, timeout: float | None = None):
        with self._ready:
            if block:
                self._ready.wait_for(lambda: self._items, timeout=timeout)
            return self._items.popleft() if self._items else None

    def __len__(self):
        with self._lock:
            return len(self._items)


class Receiver:
    """Reassembly, aggregation, and feedback state for one member."""

    def __init__(
        self,
        expected_channels,
        queue_capacity: int = QUEUE_CAPACITY_DEFAULT,
        pid: PidController | None = None,
        reassembly_timeout_s: float = REASSEMBLY_TIMEOUT_S,
        tick_window: int = TICK_WINDOW,
    ):
        self.expected_channels = frozenset(expected_channels)
        if not self.expected_channels:
            raise ValueError("expected_channels must be non-empty")
        self.queue = _BoundedQueue(queue_capacity)
        self.pid = pid or PidController()
        self.timeout_ns = int(reassembly_timeout_s * 1e9)
        self.tick_window = tick_window

        self.buffers: dict = {}  # (tick, channel) -> ReassemblyBuffer
        self.tick_first_seen: dict = {}  # tick -> ns
        self.tick_channels: dict = {}  # tick -> {channel: payload}
        self.delivered_ticks: set = set()
        self.newest_completed: int | None = None

        self.session_id: int | None = None
        self.ready = True
        self.draining = False

        self.counters = {
            "ingested": 0,
            "applied": 0,
            "duplicate": 0,
            "stale": 0,
            "malformed": 0,
            "overlap_mismatch": 0,
            "completed_buffers": 0,
            "events": 0,
            "evicted": 0,
            "timeouts": 0,
            "popped": 0,
            "stale_buffers": 0,
        }
        self.on_event = None  # callable(tick, Event)
        self.on_evicted = None  # callable(tick)
        self.on_timeout = None  # callable(tick)

    # --- ingest -----------------------------------------------------------

    def ingest_packet(self, datagram: bytes, now_ns: int):
        """Apply one balancer-forwarded datagram (reassembly header + slice).

        Returns the completed (tick, channel, payload) when this packet
        finishes a buffer, else None.
        """
        c = self.counters
        c["ingested"] += 1
        try:
            header = wire.decode_re_header(datagram)
        except wire.WireError:
            c["malformed"] += 1
            return None
        body = datagram[wire.RE_HEADER_SIZE :]
        tick, channel = header.tick, header.channel
        if channel not in self.expected_channels:
            c["malformed"] += 1
            return None
        if header.total_length == 0:
            if header.offset != 0 or body:
                c["malformed"] += 1
                return None
        elif header.offset + len(body) > header.total_length or not body:
            c["malformed"] += 1
            return None
        if self.newest_completed is not None and tick < self.newest_completed - self.tick_window:
            c["stale"] += 1
            return None
        if tick in self.delivered_ticks:
            c["duplicate"] += 1
            return None
        key = (tick, channel)
        buf = self.buffers.get(key)
        if buf is None and channel in self.tick_channels.get(tick, ()):
            c["duplicate"] += 1  # channel already completed for this tick
            return None
        if buf is None:
            buf = ReassemblyBuffer(
                tick=tick, channel=channel, total_length=header.total_length, first_seen_ns=now_ns
            )
            self.buffers[key] = buf
            self.tick_first_seen.setdefault(tick, now_ns)
        if buf.total_length != header.total_length:
            buf.poisoned = True
            c["overlap_mismatch"] += 1
            c["malformed"] += 1
            return None
        verdict = buf.insert(header.offset, body)
        if verdict == "duplicate":
            c["duplicate"] += 1
            return None
        if verdict == "mismatch":
            c["overlap_mismatch"] += 1
            c["malformed"] += 1
            return None
        c["applied"] += 1
        if not buf.complete:
            return None
        c["completed_buffers"] += 1
        payload = buf.payload()
        del self.buffers[key]
        self.tick_channels.setdefault(tick, {})[channel] = payload
        if self.newest_completed is None or tick > self.newest_completed:
            self.newest_completed = tick
            self._evict_below_window()
        if set(self.tick_channels[tick]) == self.expected_channels:
            self._deliver(tick)
        return (tick, channel, payload)

    def _deliver(self, tick: int):
        event = Event(tick=tick, channels=self.tick_channels.pop(tick))
        self.tick_first_seen.pop(tick, None)
        self.delivered_ticks.add(tick)
        evicted = self.queue.push(event)
        self.counters["events"] += 1
        if evicted is not None:
            self.counters["evicted"] += 1
            if self.on_evicted is not None:
                self.on_evicted(evicted.tick)
        if self.on_event is not None:
            self.on_event(tick, event)

    def _evict_below_window(self):
        floor = self.newest_completed - self.tick_window
        for tick, ch in [k for k in self.buffers if k[0] < floor]:
            del self.buffers[(tick, ch)]
            self.counters["stale_buffers"] += 1
        for tick in [t for t in self.tick_channels if t < floor]:
            del self.tick_channels[tick]
            self.tick_first_seen.pop(tick, None)
            self.counters["stale_buffers"] += 1
        self.delivered_ticks = {t for t in self.delivered_ticks if t >= floor}
        for tick in [t for t in self.tick_first_seen if t < floor]:
            self.tick_first_seen.pop(tick, None)

    def expire(self, now_ns: int) -> list:
        """Abandon ticks stuck past the reassembly timeout."""
        expired = [
            t for t, seen in self.tick_first_seen.items() if now_ns - seen >= self.timeout_ns
        ]
        for tick in expired:
            self.tick_first_seen.pop(tick, None)
            self.tick_channels.pop(tick, None)
            for key in [k for k in self.buffers if k[0] == tick]:
                del self.buffers[key]
            self.counters["timeouts"] += 1
            if self.on_timeout is not None:
                self.on_timeout(tick)
            log.debug("tick %d abandoned after reassembly timeout", tick)
        return expired

    # --- queue and feedback --------------------------------------------------

    def pop_event(self, block: bool = False, timeout: float | None = None):
        event = self.queue.pop(block=block, timeout=timeout)
        if event is not None:
            self.counters["popped"] += 1
        return event

    @property
    def queue_fill(self) -> float:
        return len(self.queue) / self.queue.capacity

    def drain(self):
        self.draining = True

    def make_report(self, now_ns: int) -> FillReport:
        fill = self.queue_fill
        return FillReport(
            session_id=self.session_id if self.session_id is not None else 0,
            queue_fill=fill,
            control_signal=self.pid.step(fill),
            ready=self.ready and not self.draining,
            wallclock_ns=now_ns,
        )


class UdpReceiver:
    """Socket front end: one port per channel group, shared Receiver."""

    def __init__(self, core: Receiver, listen_ip: str, base_port: int, port_count: int, rcvbuf: int = 8 << 20):
        if port_count < 1 or port_count & (port_count - 1):
            raise ValueError(f"port_count {port_count} is not a power of two")
        self.core = core
        self.socks = []
        for i in range(port_count):
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            netutil.request_buffer(s, "recv", rcvbuf)
            s.bind((listen_ip, base_port + i if base_port else 0))
            self.socks.append(s)
        self.base_port = self.socks[0].getsockname()[1]
        self._stop = threading.Event()
        self._threads = []
        self._lock = threading.Lock()  # one ingest at a time into the core

    @property
    def ports(self) -> list:
        return [s.getsockname()[1] for s in self.socks]

    def start(self):
        import time as _time

        for s in self.socks:
            t = threading.Thread(target=self._ingest_loop, args=(s, _time.time_ns), daemon=True)
            t.start()
            self._threads.append(t)
        t = threading.Thread(target=self._housekeeping, args=(_time.time_ns,), daemon=True)
        t.start()
        self._threads.append(t)

    def _ingest_loop(self, sock, clock):
        sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                datagram = sock.recv(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            with self._lock:
                self.core.ingest_packet(datagram, clock())

    def _housekeeping(self, clock):
        while not self._stop.wait(0.25):
            with self._lock:
                self.core.expire(clock())

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2.0)
        for s in self.socks:
            s.close()
