"""Deterministic in-process network: nodes, ordered channels, timers.

Single-threaded discrete-event simulation. Every delivery, accept, close,
and timer is an entry in one priority queue ordered by (time, tie, seq);
the tie key is drawn per channel (or per timer) from the run seed, so equal
seeds replay identical traces while different seeds may interleave unrelated
channels differently. Per-channel FIFO always holds.

Connecting allocates an ephemeral port m on the source node and a fresh
per-session port l on the destination node; the acceptor learns the peer
endpoint and any connect metadata, the connector learns l.
"""

from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Callable, NamedTuple

EPHEMERAL_START = 40000
EPHEMERAL_END = 65535


class Endpoint(NamedTuple):
    addr: str
    port: int

    def __str__(self) -> str:
        return f"{self.addr}:{self.port}"


@dataclass(frozen=True)
class NetEvent:
    seq: int
    time_ms: int
    kind: str  # connect | accept | deliver | close | drop
    src: Endpoint | None
    dst: Endpoint | None
    detail: str = ""

    def render(self) -> str:
        src = str(self.src) if self.src else "-"
        dst = str(self.dst) if self.dst else "-"
        out = f"t={self.time_ms} {self.kind} {src} -> {dst}"
        if self.detail:
            out += f" {self.detail}"
        return out


class TransportError(Exception):
    pass


class PortInUse(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class NodeDown(TransportError):
    pass


class ChannelClosed(TransportError):
    pass


class AcceptInfo(NamedTuple):
    peer: Endpoint          # (source address, plug port m)
    listener_port: int      # k
    session_port: int       # l
    meta: dict


class Channel:
    """One end of an ordered reliable duplex byte stream."""

    def __init__(self, net: SimNetwork, local: Endpoint, remote: Endpoint,
                 kind: str, tie: float):
        self._net = net
        self.local = local
        self.remote = remote
        self.kind = kind  # control | data | external
        self._tie = tie
        self._peer: Channel | None = None
        self._floor = 0
        self._open = True
        self.on_data: Callable[[Channel, bytes], None] | None = None
        self.on_close: Callable[[Channel], None] | None = None
        self._inbox: list[bytes] = []
        self._pending_close = False

    @property
    def is_open(self) -> bool:
        return self._open

    def set_handlers(self, on_data, on_close) -> None:
        self.on_data = on_data
        self.on_close = on_close
        while self._inbox:
            self.on_data(self, self._inbox.pop(0))
        if self._pending_close:
            self._pending_close = False
            self._fire_close()

    def send(self, data: bytes) -> None:
        if not self._open:
            raise ChannelClosed(f"{self.local} -> {self.remote}")
        self._net._send(self, data)

    def close(self) -> None:
        """Close both ends; the peer is notified after one hop of latency."""
        if not self._open:
            return
        self._open = False
        self._net._release_port(self.local)
        self._net._event("close", self.local, self.remote)
        peer = self._peer
        if peer is not None and peer._open:
            self._net._after_channel(self, lambda: peer._close_from_peer())

    def _close_from_peer(self) -> None:
        if not self._open:
            return
        self._open = False
        self._net._release_port(self.local)
        if self.on_close is None and self.on_data is None:
            self._pending_close = True
        else:
            self._fire_close()

    def _fire_close(self) -> None:
        if self.on_close is not None:
            self.on_close(self)

    def _deliver(self, data: bytes) -> None:
        if not self._open:
            self._net._event("drop", self.remote, self.local, f"len={len(data)}")
            return
        self._net._event("deliver", self.remote, self.local, f"len={len(data)}")
        if self.on_data is None:
            self._inbox.append(data)
        else:
            self.on_data(self, data)


class Listener:
    def __init__(self, net: SimNetwork, endpoint: Endpoint, on_accept, kind: str):
        self.endpoint = endpoint
        self.on_accept = on_accept
        self.kind = kind
        self._net = net
        self.open = True

    def close(self) -> None:
        if self.open:
            self.open = False
            self._net._listeners.pop(self.endpoint, None)


class Timer:
    def __init__(self) -> None:
        self.alive = True

    def cancel(self) -> None:
        self.alive = False


class _Node:
    def __init__(self, addr: str):
        self.addr = addr
        self.up = True
        self.next_ephemeral = EPHEMERAL_START


class SimNetwork:
    """The simulated cluster fabric and the global event loop."""

    def __init__(self, seed: int = 0, hop_latency_ms: int = 1,
                 latency_fn: Callable[[random.Random], int] | None = None):
        self._rng = random.Random(seed)
        self.hop_latency_ms = hop_latency_ms
        # Optional latency distribution, drawn per hop from the run seed;
        # the constant default keeps tight choreography timings.
        self._latency_fn = latency_fn
        self._now = 0
        self._seq = 0
        self._queue: list[tuple[int, float, int, object]] = []
        self._nodes: dict[str, _Node] = {}
        self._listeners: dict[Endpoint, Listener] = {}
        self._channels: list[Channel] = []
        self._broken: set[frozenset[str]] = set()
        self.events: list[NetEvent] = []
        self.horizon_ms: int | None = None
        self.on_send: Callable[[Channel, bytes], None] | None = None

    # -- clock & queue ------------------------------------------------------

    def now_ms(self) -> int:
        return self._now

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _event(self, kind: str, src, dst, detail: str = "") -> NetEvent:
        ev = NetEvent(self._next_seq(), self._now, kind, src, dst, detail)
        self.events.append(ev)
        return ev

    def _push(self, time_ms: int, tie: float, entry) -> None:
        heapq.heappush(self._queue, (time_ms, tie, self._next_seq(), entry))

    def _hop_latency(self) -> int:
        if self._latency_fn is not None:
            return max(1, int(self._latency_fn(self._rng)))
        return self.hop_latency_ms

    def _after(self, tie: float, fn, tag: str) -> Timer:
        timer = Timer()
        self._push(self._now + self._hop_latency(), tie,
                   _QueueEntry(fn, timer, tag))
        return timer

    def _after_channel(self, ch: Channel, fn, tag: str = "net") -> Timer:
        """Channel events keep send order even under drawn latencies."""
        timer = Timer()
        time_ms = max(self._now + self._hop_latency(), ch._floor)
        ch._floor = time_ms
        self._push(time_ms, ch._tie, _QueueEntry(fn, timer, tag))
        return timer

    def schedule(self, delay_ms: int, fn, tag: str = "timer") -> Timer:
        timer = Timer()
        self._push(self._now + delay_ms, self._rng.random(),
                   _QueueEntry(fn, timer, tag))
        return timer

    def schedule_abs(self, time_ms: int, fn, tag: str = "timeline") -> Timer:
        """Run at an absolute time, before same-time network events, in
        scheduling order (tie below the [0, 1) range used elsewhere)."""
        timer = Timer()
        self._push(time_ms, -1.0, _QueueEntry(fn, timer, tag))
        return timer

    def schedule_repeating(self, period_ms: int, fn, tag: str = "tick") -> Timer:
        timer = Timer()

        def fire():
            if not timer.alive:
                return
            fn()
            nxt = self._now + period_ms
            if timer.alive and (self.horizon_ms is None or nxt <= self.horizon_ms):
                self._push(nxt, tie, _QueueEntry(fire, timer, tag))

        tie = self._rng.random()
        first = self._now + period_ms
        if self.horizon_ms is None or first <= self.horizon_ms:
            self._push(first, tie, _QueueEntry(fire, timer, tag))
        return timer

    def step(self) -> bool:
        """Execute the next queued entry; False when the queue is drained."""
        while self._queue:
            time_ms, _tie, _seq, entry = heapq.heappop(self._queue)
            if not entry.timer.alive:
                continue
            self._now = max(self._now, time_ms)
            entry.fn()
            return True
        return False

    def run(self, until_ms: int | None = None) -> None:
        while self._queue:
            if until_ms is not None and self._queue[0][0] > until_ms:
                return
            self.step()

    def pending_tags(self) -> set[str]:
        return {e.tag for _, _, _, e in self._queue if e.timer.alive}

    # -- topology -----------------------------------------------------------

    def add_node(self, addr: str) -> None:
        if addr not in self._nodes:
            self._nodes[addr] = _Node(addr)

    def node_up(self, addr: str) -> bool:
        node = self._nodes.get(addr)
        return node is not None and node.up

    def _link_ok(self, a: str, b: str) -> bool:
        return frozenset((a, b)) not in self._broken

    def kill_node(self, addr: str) -> None:
        """Node dies: listeners vanish, channels close, connects refuse."""
        node = self._nodes.get(addr)
        if node is None or not node.up:
            return
        node.up = False
        for ep in [ep for ep in self._listeners if ep.addr == addr]:
            self._listeners.pop(ep)
        for ch in self._channels:
            if ch.is_open and ch.local.addr == addr:
                ch._open = False
                self._event("close", ch.local, ch.remote, "node_down")
                peer = ch._peer
                if peer is not None and peer._open:
                    self._after_channel(ch, peer._close_from_peer)

    def break_link(self, a: str, b: str) -> None:
        self._broken.add(frozenset((a, b)))

    def heal_link(self, a: str, b: str) -> None:
        self._broken.discard(frozenset((a, b)))

    def port_in_use(self, addr: str, port: int) -> bool:
        if Endpoint(addr, port) in self._listeners:
            return True
        return any(ch.is_open and ch.local == Endpoint(addr, port)
                   for ch in self._channels)

    def _alloc_ephemeral(self, addr: str) -> int:
        node = self._nodes[addr]
        port = node.next_ephemeral
        while self.port_in_use(addr, port):
            port += 1
        if port > EPHEMERAL_END:
            raise TransportError(f"ephemeral ports exhausted on {addr}")
        node.next_ephemeral = port + 1
        return port

    def _release_port(self, ep: Endpoint) -> None:
        pass  # ports stay burned within a run; desk-scale pools never wrap

    # -- connectivity -------------------------------------------------------

    def listen(self, addr: str, port: int, on_accept, kind: str = "data") -> Listener:
        if not self.node_up(addr):
            raise NodeDown(addr)
        ep = Endpoint(addr, port)
        if self.port_in_use(addr, port):
            raise PortInUse(str(ep))
        lst = Listener(self, ep, on_accept, kind)
        self._listeners[ep] = lst
        return lst

    def connect(self, src_addr: str, dst: Endpoint, kind: str = "data",
                meta: dict | None = None) -> tuple[Channel, int, int]:
        """Dial a listener; returns (channel, local port m, peer session port l)."""
        if not self.node_up(src_addr):
            raise NodeDown(src_addr)
        if not self.node_up(dst.addr):
            raise NodeDown(dst.addr)
        if not self._link_ok(src_addr, dst.addr):
            raise NodeDown(f"link {src_addr} <-> {dst.addr} broken")
        lst = self._listeners.get(dst)
        if lst is None or not lst.open:
            raise ConnectionRefused(str(dst))
        m = self._alloc_ephemeral(src_addr)
        l = self._alloc_ephemeral(dst.addr)
        tie = self._rng.random()
        near = Channel(self, Endpoint(src_addr, m), Endpoint(dst.addr, l), kind, tie)
        far = Channel(self, Endpoint(dst.addr, l), Endpoint(src_addr, m), kind, tie)
        near._peer, far._peer = far, near
        self._channels += [near, far]
        self._event("connect", near.local, dst, f"l={l}")
        info = AcceptInfo(near.local, dst.port, l, dict(meta or {}))

        def do_accept():
            if not far._open or not lst.open:
                return
            self._event("accept", near.local, far.local)
            lst.on_accept(far, info)

        self._after_channel(near, do_accept)
        return near, m, l

    def _send(self, ch: Channel, data: bytes) -> None:
        if self.on_send is not None:
            self.on_send(ch, data)
        if not self._link_ok(ch.local.addr, ch.remote.addr) \
                or not self.node_up(ch.remote.addr):
            # Broken path: both ends observe a close instead of a delivery.
            self._event("drop", ch.local, ch.remote, f"len={len(data)}")
            peer = ch._peer
            ch._open = False
            self._event("close", ch.local, ch.remote, "link_broken")
            if peer is not None and peer._open:
                self._after_channel(ch, peer._close_from_peer)
            raise ChannelClosed(f"link down {ch.local} -> {ch.remote}")
        peer = ch._peer
        self._after_channel(ch, lambda: peer._deliver(data))

    def open_data_channels(self) -> list[Channel]:
        """One entry per live connection (near end only), data kind."""
        out = []
        seen = set()
        for ch in self._channels:
            if not ch.is_open or ch.kind != "data":
                continue
            key = frozenset((ch.local, ch.remote))
            if key in seen:
                continue
            seen.add(key)
            out.append(ch)
        return out

    def listener_endpoints(self) -> list[Endpoint]:
        return sorted(self._listeners)


class _QueueEntry:
    __slots__ = ("fn", "timer", "tag")

    def __init__(self, fn, timer: Timer, tag: str):
        self.fn = fn
        self.timer = timer
        self.tag = tag
