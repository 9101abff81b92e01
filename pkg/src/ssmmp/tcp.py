"""Loopback-TCP transport: the same actor contract over real sockets.

Every logical node address maps to a distinct loopback IP; connections bind
their node's IP so the peer's logical identity is recoverable. Real TCP does
not expose a per-session listener port, so the acceptor allocates a logical
one and announces it in a one-line preamble; the connector's preamble carries
the connect metadata the simulated fabric passes natively (plug name or
instance identity). Runs are wall-clock and excluded from determinism
guarantees.
"""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass

from .transport import (AcceptInfo, ChannelClosed, ConnectionRefused, Endpoint,
                        NodeDown, PortInUse)


class ActorLoop:
    """One thread per actor; every callback for that actor runs here."""

    def __init__(self, name: str):
        self._queue: queue.Queue = queue.Queue()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self.running = True
        self.errors: list[str] = []
        self._thread.start()

    def post(self, fn) -> None:
        self._queue.put(fn)

    def _run(self) -> None:
        while True:
            fn = self._queue.get()
            if fn is None:
                return
            try:
                fn()
            except Exception as e:  # keep the loop alive; surface in errors
                self.errors.append(f"{type(e).__name__}: {e}")

    def stop(self) -> None:
        self.running = False
        self._queue.put(None)


class TcpChannel:
    def __init__(self, sock: socket.socket, loop: ActorLoop,
                 local: Endpoint, remote: Endpoint, kind: str,
                 initial: bytes = b""):
        self._sock = sock
        self._loop = loop
        self.local = local
        self.remote = remote
        self.kind = kind
        self._send_lock = threading.Lock()
        self._open = True
        self.on_data = None
        self.on_close = None
        self._inbox: list[bytes] = []
        self._pending_close = False
        self._reader = threading.Thread(
            target=self._read_loop, args=(initial,), daemon=True)

    def start_reader(self) -> None:
        self._reader.start()

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
            if self.on_close is not None:
                self.on_close(self)

    def send(self, data: bytes) -> None:
        if not self._open:
            raise ChannelClosed(str(self.remote))
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as e:
            self._open = False
            raise ChannelClosed(str(e)) from e

    def close(self) -> None:
        if not self._open:
            return
        self._open = False
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def _read_loop(self, initial: bytes) -> None:
        if initial:
            self._loop.post(lambda: self._deliver(initial))
        while True:
            try:
                data = self._sock.recv(65536)
            except OSError:
                data = b""
            if not data:
                break
            self._loop.post(lambda d=data: self._deliver(d))
        self._loop.post(self._closed_by_peer)

    def _deliver(self, data: bytes) -> None:
        if self.on_data is None:
            self._inbox.append(data)
        else:
            self.on_data(self, data)

    def _closed_by_peer(self) -> None:
        if not self._open:
            return
        self._open = False
        if self.on_close is None:
            self._pending_close = True
        else:
            self.on_close(self)


class _RepeatingTimer:
    def __init__(self, period_s: float, post, fn):
        self.alive = True

        def fire():
            if not self.alive:
                return
            post(fn)
            self._timer = threading.Timer(period_s, fire)
            self._timer.daemon = True
            self._timer.start()

        self._timer = threading.Timer(period_s, fire)
        self._timer.daemon = True
        self._timer.start()

    def cancel(self) -> None:
        self.alive = False
        self._timer.cancel()


class _OneShotTimer:
    def __init__(self, delay_s: float, post, fn):
        self.alive = True

        def fire():
            if self.alive:
                post(fn)

        self._timer = threading.Timer(delay_s, fire)
        self._timer.daemon = True
        self._timer.start()

    def cancel(self) -> None:
        self.alive = False
        self._timer.cancel()


def _encode_meta(meta: dict | None) -> bytes:
    items = " ".join(f"{k}={v}" for k, v in sorted((meta or {}).items()))
    return f"connect {items}".strip().encode() + b"\n"


def _read_line(sock: socket.socket) -> tuple[bytes, bytes]:
    """First LF-terminated line and whatever binary data followed it."""
    buf = b""
    while b"\n" not in buf:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionRefused("peer closed during preamble")
        buf += chunk
    line, _, rest = buf.partition(b"\n")
    return line, rest


_SUBNET_SEQ = [0]
_SUBNET_LOCK = threading.Lock()


def _fresh_subnet() -> str:
    with _SUBNET_LOCK:
        _SUBNET_SEQ[0] += 1
        return f"127.31.{_SUBNET_SEQ[0] % 250}"


class TcpFabric:
    """Loopback address mapping plus per-node logical session ports."""

    def __init__(self, subnet: str | None = None):
        self._subnet = subnet or _fresh_subnet()
        self._addr_to_ip: dict[str, str] = {}
        self._ip_to_addr: dict[str, str] = {}
        self._session_ports: dict[str, int] = {}
        self._lock = threading.Lock()
        self._listeners: list[socket.socket] = []
        self._channels: list[TcpChannel] = []
        self._loops: list[ActorLoop] = []
        self._t0 = time.monotonic()

    def add_node(self, addr: str) -> None:
        with self._lock:
            if addr in self._addr_to_ip:
                return
            ip = f"{self._subnet}.{len(self._addr_to_ip) + 1}"
            self._addr_to_ip[addr] = ip
            self._ip_to_addr[ip] = addr
            self._session_ports[addr] = 40000

    def ip(self, addr: str) -> str:
        if addr not in self._addr_to_ip:
            raise NodeDown(addr)
        return self._addr_to_ip[addr]

    def logical(self, ip: str) -> str:
        return self._ip_to_addr.get(ip, ip)

    def alloc_session_port(self, addr: str) -> int:
        with self._lock:
            port = self._session_ports[addr]
            self._session_ports[addr] = port + 1
            return port

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def new_loop(self, name: str) -> ActorLoop:
        loop = ActorLoop(name)
        self._loops.append(loop)
        return loop

    def shutdown(self) -> None:
        for sock in self._listeners:
            try:
                sock.close()
            except OSError:
                pass
        for channel in self._channels:
            channel.close()
        for loop in self._loops:
            loop.stop()


class TcpEnv:
    """Node- and actor-bound environment over the TCP fabric."""

    def __init__(self, fabric: TcpFabric, addr: str, loop: ActorLoop):
        self.fabric = fabric
        self.addr = addr
        self.loop = loop

    def now_ms(self) -> int:
        return self.fabric.now_ms()

    def schedule(self, delay_ms, fn, tag="timer"):
        return _OneShotTimer(delay_ms / 1000.0, self.loop.post, fn)

    def schedule_repeating(self, period_ms, fn, tag="tick"):
        return _RepeatingTimer(period_ms / 1000.0, self.loop.post, fn)

    def port_in_use(self, port: int) -> bool:
        probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        try:
            probe.bind((self.fabric.ip(self.addr), port))
            return False
        except OSError:
            return True
        finally:
            probe.close()

    def listen(self, port: int, on_accept, kind: str = "data"):
        ip = self.fabric.ip(self.addr)
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((ip, port))
        except OSError as e:
            sock.close()
            raise PortInUse(f"{self.addr}:{port}") from e
        sock.listen(16)
        self.fabric._listeners.append(sock)

        def accept_loop():
            while True:
                try:
                    conn, peer = sock.accept()
                except OSError:
                    return
                threading.Thread(target=handshake, args=(conn, peer),
                                 daemon=True).start()

        def handshake(conn, peer):
            try:
                line, rest = _read_line(conn)
            except (ConnectionRefused, OSError):
                conn.close()
                return
            parts = line.decode().split()
            meta = dict(p.split("=", 1) for p in parts[1:])
            session_port = self.fabric.alloc_session_port(self.addr)
            try:
                conn.sendall(f"session {session_port}\n".encode())
            except OSError:
                conn.close()
                return
            peer_ep = Endpoint(self.fabric.logical(peer[0]), peer[1])
            channel = TcpChannel(conn, self.loop,
                                 Endpoint(self.addr, session_port), peer_ep,
                                 kind, initial=rest)
            self.fabric._channels.append(channel)
            info = AcceptInfo(peer_ep, port, session_port, meta)
            self.loop.post(lambda: on_accept(channel, info))
            channel.start_reader()

        threading.Thread(target=accept_loop, daemon=True).start()

        class _Listener:
            endpoint = Endpoint(self.addr, port)

            @staticmethod
            def close():
                try:
                    sock.close()
                except OSError:
                    pass

        return _Listener()

    def connect(self, dst: Endpoint, kind: str = "data", meta=None):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.bind((self.fabric.ip(self.addr), 0))
        try:
            sock.connect((self.fabric.ip(dst.addr), dst.port))
        except OSError as e:
            sock.close()
            raise ConnectionRefused(str(dst)) from e
        sock.sendall(_encode_meta(meta))
        line, rest = _read_line(sock)
        session_port = int(line.decode().split()[1])
        m = sock.getsockname()[1]
        channel = TcpChannel(sock, self.loop, Endpoint(self.addr, m),
                             Endpoint(dst.addr, session_port), kind,
                             initial=rest)
        self.fabric._channels.append(channel)
        channel.start_reader()
        return channel, m, session_port


@dataclass
class TcpClusterHandle:
    fabric: TcpFabric
    manager: object
    agents: dict
    runtimes: dict

    def post_manager(self, fn) -> None:
        self.manager_loop.post(fn)

    def shutdown(self) -> None:
        self.fabric.shutdown()


def build_tcp_cluster(graphs, manager_addr, nodes,
                      manager_config=None, agent_config=None):
    """Assemble the same actors as the simulation, threaded over loopback."""
    from .agent import Agent, AgentConfig, SpawnError
    from .graph import outgoing_connections
    from .manager import Manager, ManagerConfig
    from .service_runtime import InstanceConfig, ServiceRuntime, make_behavior
    from .agent import RepositoryEntry

    fabric = TcpFabric()
    fabric.add_node(manager_addr)
    for node in nodes:
        fabric.add_node(node.addr)

    def graph_of(service):
        for g in graphs:
            if g.has_service(service):
                return g
        raise KeyError(service)

    manager_loop = fabric.new_loop("manager")
    manager = Manager(TcpEnv(fabric, manager_addr, manager_loop), graphs,
                      manager_config or ManagerConfig())
    handle = TcpClusterHandle(fabric, manager, {}, {})
    handle.manager_loop = manager_loop

    def make_spawn(node_addr):
        def spawn(service, instance_id, sockets, plugs, bytecode):
            g = graph_of(service)
            plug_sockets = {e.plug: e.socket
                            for e in outgoing_connections(g, service)}
            config = InstanceConfig(
                service_name=service, instance_id=instance_id,
                node_addr=node_addr, socket_ports=tuple(sockets),
                plug_targets=tuple(plugs), plug_sockets=plug_sockets,
                agent_addr=node_addr)
            loop = fabric.new_loop(f"rt-{service}.{instance_id}")
            rt = ServiceRuntime(TcpEnv(fabric, node_addr, loop), config,
                                make_behavior(bytecode))
            rt._loop = loop
            try:
                rt.start()
            except PortInUse as e:
                raise SpawnError(str(e)) from e
            handle.runtimes[(service, instance_id)] = rt
            return rt

        return spawn

    for node in nodes:
        repo = {}
        for name in node.repo:
            spec = graph_of(name).service(name)
            repo[name] = RepositoryEntry(name, spec.sockets, spec.plugs,
                                         node.behavior)
        loop = fabric.new_loop(f"agent-{node.addr}")
        agent = Agent(TcpEnv(fabric, node.addr, loop), node.addr, manager_addr,
                      repo, make_spawn(node.addr),
                      agent_config or AgentConfig())
        agent._loop = loop
        handle.agents[node.addr] = agent

    manager_loop.post(manager.start)
    for agent in handle.agents.values():
        agent._loop.post(agent.start)
    return handle
