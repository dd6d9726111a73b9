"""Loopback fabric over real sockets: throughput, not simulation.

Wires a real UDP data plane, one receiver per member, and a paced
sender on 127.0.0.1, then measures what actually got through.  The
virtual-clock harness answers "is the protocol right"; this one
answers "how fast is this implementation", so it refuses impairment
profiles: shaping traffic here would only measure the shaper.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field

from ..controlplane import ControlPlane
from ..dataplane import UdpDataPlane
from ..receiver import Receiver, UdpReceiver
from ..sender import stream_events, synth_events
from .impair import ImpairmentProfile

__all__ = ["RealtimeResult", "run_realtime"]

log = logging.getLogger(__name__)


@dataclass
class MemberResult:
    events: int = 0
    payload_octets: int = 0
    counters: dict = field(default_factory=dict)


@dataclass
class RealtimeResult:
    events_sent: int
    fragments_sent: int
    wire_octets_sent: int
    send_duration_s: float
    wall_duration_s: float
    events_delivered: int
    payload_octets_delivered: int
    dp_counters: dict
    members: dict  # name -> MemberResult

    @property
    def goodput_mbps(self) -> float:
        if self.wall_duration_s <= 0:
            return 0.0
        return self.payload_octets_delivered * 8 / self.wall_duration_s / 1e6

    @property
    def offered_mbps(self) -> float:
        if self.send_duration_s <= 0:
            return 0.0
        return self.wire_octets_sent * 8 / self.send_duration_s / 1e6

    @property
    def delivered_fraction(self) -> float:
        return self.events_delivered / self.events_sent if self.events_sent else 0.0

    @property
    def dp_drop_fraction(self) -> float:
        received = self.dp_counters.get("received", 0)
        dropped = self.dp_counters.get("dropped", 0)
        return dropped / received if received else 0.0

    def to_dict(self) -> dict:
        return {
            "events_sent": self.events_sent,
            "fragments_sent": self.fragments_sent,
            "wire_octets_sent": self.wire_octets_sent,
            "send_duration_s": round(self.send_duration_s, 6),
            "wall_duration_s": round(self.wall_duration_s, 6),
            "events_delivered": self.events_delivered,
            "payload_octets_delivered": self.payload_octets_delivered,
            "goodput_mbps": round(self.goodput_mbps, 3),
            "offered_mbps": round(self.offered_mbps, 3),
            "delivered_fraction": round(self.delivered_fraction, 6),
            "dp_drop_fraction": round(self.dp_drop_fraction, 8),
            "dp_counters": self.dp_counters,
            "members": {
                n: {"events": m.events, "payload_octets": m.payload_octets, "counters": m.counters}
                for n, m in self.members.items()
            },
        }


class _Consumer(threading.Thread):
    """Pops a receiver's queue as fast as it can and keeps score."""

    def __init__(self, name: str, rx: Receiver):
        super().__init__(name=f"consume-{name}", daemon=True)
        self.rx = rx
        self.result = MemberResult()
        self._halt = threading.Event()  # Thread.join uses a private _stop

    def run(self):
        while not self._halt.is_set():
            event = self.rx.pop_event(block=True, timeout=0.1)
            if event is None:
                continue
            self.result.events += 1
            self.result.payload_octets += sum(len(p) for p in event.channels.values())

    def stop(self):
        self._halt.set()
        self.join(timeout=2.0)


def run_realtime(
    count: int,
    size: int,
    rate_hz: float = 0.0,
    channels: int = 1,
    mtu: int = 1400,
    members: list | None = None,  # (name, weight, queue_capacity) triples
    seed: int = 0,
    source_id: int = 1,
    drain_timeout_s: float = 10.0,
    rcvbuf: int = 32 << 20,
    impairment: ImpairmentProfile | None = None,
) -> RealtimeResult:
    """Push a synthetic stream through a loopback fabric and measure it."""
    if impairment is not None and not impairment.is_identity:
        raise ValueError("real-time runs measure the implementation; impairment only works on the virtual clock")
    members = members or [("m1", 1.0, 65536)]

    cp = ControlPlane()
    iid = cp.reserve_instance(listen=("127.0.0.1", 0))
    dp = UdpDataPlane(cp.instances[iid], rcvbuf=rcvbuf)

    fronts, consumers, cores = [], [], {}
    try:
        for name, weight, capacity in members:
            rx = Receiver(expected_channels=range(channels), queue_capacity=capacity)
            front = UdpReceiver(rx, "127.0.0.1", base_port=0, port_count=1, rcvbuf=rcvbuf)
            rx.session_id = cp.register_member(
                iid, "127.0.0.1", front.ports[0], 1, initial_weight=weight
            )
            fronts.append(front)
            cores[name] = rx
            consumers.append(_Consumer(name, rx))
        cp.control_tick()  # static schedule before any traffic

        dp.start()
        for front in fronts:
            front.start()
        for consumer in consumers:
            consumer.start()

        t0 = time.monotonic()
        stats = stream_events(
            synth_events(count, channels, size, seed=seed), dp.address, rate_hz, mtu
        )

        deadline = time.monotonic() + drain_timeout_s
        seen, last_change = -1, time.monotonic()
        while time.monotonic() < deadline:
            total = sum(rx.counters["events"] for rx in cores.values())
            if total != seen:
                seen, last_change = total, time.monotonic()
            elif total >= count or time.monotonic() - last_change > 1.0:
                break
            time.sleep(0.05)
        wall = time.monotonic() - t0
    finally:
        for consumer in consumers:
            consumer.stop()
        for front in fronts:
            front.stop()
        dp.stop()

    results = {}
    for consumer, (name, _, _) in zip(consumers, members):
        consumer.result.counters = dict(cores[name].counters)
        results[name] = consumer.result
    return RealtimeResult(
        events_sent=stats.events,
        fragments_sent=stats.fragments,
        wire_octets_sent=stats.octets,
        send_duration_s=stats.duration_s,
        wall_duration_s=wall,
        events_delivered=sum(m.events for m in results.values()),
        payload_octets_delivered=sum(m.payload_octets for m in results.values()),
        dp_counters=cp.instances[iid].counters(),
        members=results,
    )
