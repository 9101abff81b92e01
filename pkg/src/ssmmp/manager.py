"""The control plane: agent registry, instance DB, session table, DNS.

One logical state machine; every inbound message and timer tick runs to
completion before the next. Flows that need a remote step first (spawning a
destination instance, draining sessions before a graceful shutdown) are kept
as pending correlation entries and resumed by the matching response.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

from . import wire
from .graph import AbstractGraph, ServiceKind, outgoing_connections
from .transport import ChannelClosed
from .wire import Message, MessageType as MT, SubType as ST


class AgentStatus(Enum):
    UP = "up"
    ISOLATED = "isolated"


class InstanceState(Enum):
    STARTING = "starting"
    RUNNING = "running"
    DRAINING = "draining"
    CLOSED = "closed"


class SessionState(Enum):
    PENDING = "pending"
    ESTABLISHED = "established"
    CLOSED = "closed"


@dataclass
class AgentRecord:
    node_address: str
    repository: list[str]
    status: AgentStatus = AgentStatus.UP


@dataclass
class InstanceRecord:
    service: str
    instance_id: int
    node_address: str
    socket_ports: dict[str, int]
    plug_config: dict[str, str]
    state: InstanceState = InstanceState.STARTING
    last_activity: int = 0
    is_gateway: bool = False
    is_baas: bool = False

    @property
    def key(self) -> tuple[str, int]:
        return (self.service, self.instance_id)

    @property
    def canonical_name(self) -> str:
        return f"{self.service}.{self.instance_id}"


@dataclass
class SessionRecord:
    """All eleven session parameters plus lifecycle state."""

    source_service_name: str
    source_address: str
    source_instance_id: int
    plug_name: str
    plug_port: int | None  # m, learned from the ack
    dest_service_name: str
    dest_address: str
    dest_instance_id: int
    socket_name: str
    socket_port: int  # k
    session_port: int | None  # l, learned from the ack
    state: SessionState = SessionState.PENDING
    close_reason: str = ""

    def key(self) -> tuple[str, int | None, str, int, int | None]:
        return (self.source_address, self.plug_port,
                self.dest_address, self.socket_port, self.session_port)

    def touches(self, instance: InstanceRecord) -> bool:
        return ((self.source_service_name, self.source_instance_id) == instance.key
                or (self.dest_service_name, self.dest_instance_id) == instance.key)

    def touches_node(self, addr: str) -> bool:
        return self.source_address == addr or self.dest_address == addr

    def complete(self) -> bool:
        return self.plug_port is not None and self.session_port is not None


class NameNotFound(KeyError):
    pass


class DnsTable:
    """A records per canonical instance name; CNAME alias round-robin."""

    def __init__(self) -> None:
        self.a_records: dict[str, str] = {}
        self.cname_records: dict[str, list[str]] = {}
        self._cursors: dict[str, int] = {}

    def add_instance(self, alias: str, canonical: str, addr: str) -> None:
        self.a_records[canonical] = addr
        self.cname_records.setdefault(alias, []).append(canonical)

    def remove_instance(self, alias: str, canonical: str) -> None:
        self.a_records.pop(canonical, None)
        targets = self.cname_records.get(alias, [])
        if canonical in targets:
            targets.remove(canonical)

    def targets(self, alias: str) -> list[str]:
        return list(self.cname_records.get(alias, []))

    def resolve(self, alias: str) -> str:
        targets = self.cname_records.get(alias)
        if not targets:
            raise NameNotFound(alias)
        cursor = self._cursors.get(alias, 0)
        name = targets[cursor % len(targets)]
        self._cursors[alias] = cursor + 1
        return self.a_records[name]


class PortPool:
    """Per-node listener ports from 20000 up; freed ports are reused last."""

    def __init__(self, start: int = 20000, end: int = 39999):
        self._next = start
        self._end = end
        self._freed: list[int] = []
        self.allocated: set[int] = set()

    def alloc(self) -> int:
        if self._next <= self._end:
            port = self._next
            self._next += 1
        else:
            port = self._freed.pop(0)
        self.allocated.add(port)
        return port

    def free(self, port: int) -> None:
        if port in self.allocated:
            self.allocated.discard(port)
            self._freed.append(port)


@dataclass
class ManagerConfig:
    manager_port: int = 7000
    idle_timeout_ms: int = 30_000
    idle_poll_ms: int = 1_000
    request_timeout_ms: int = 5_000
    port_pool_start: int = 20_000
    # hook(service_name, status) for 429 reports; policy left pluggable
    scale_hook: Callable[[str, int], None] | None = None
    # destination choice among running instances; None = least open sessions,
    # ties to the lowest (node address, instance id)
    selection_policy: Callable[[list, Callable], object] | None = None


@dataclass
class _PendingExec:
    record: InstanceRecord
    agent_addr: str
    parked: list[tuple[str, Message]] = field(default_factory=list)
    timer: object | None = None


@dataclass
class _PendingClose:
    session: SessionRecord
    side: str  # source | dest
    timer: object | None = None


@dataclass
class _PendingShutdown:
    instance: InstanceRecord
    kind: str  # graceful | hard
    timer: object | None = None


class Manager:
    def __init__(self, env, graphs: Iterable[AbstractGraph],
                 config: ManagerConfig | None = None,
                 journal_sink: Callable[[int, str, str], None] | None = None):
        self.env = env
        self.config = config or ManagerConfig()
        self.journal_sink = journal_sink
        self.knowledge_base: list[AbstractGraph] = list(graphs)
        self.agents: dict[str, AgentRecord] = {}
        self.instances: dict[tuple[str, int], InstanceRecord] = {}
        self.sessions: list[SessionRecord] = []
        self.dns = DnsTable()
        self.journal: list[tuple[int, str, str]] = []
        self._ids = wire.IdCounter()
        self._instance_ids: dict[str, int] = {}
        self._channels: dict[str, object] = {}       # agent addr -> channel
        self._channel_addr: dict[int, str] = {}      # id(channel) -> addr
        self._pools: dict[str, PortPool] = {}
        self._pending_exec: dict[int, _PendingExec] = {}
        self._pending_close: dict[int, _PendingClose] = {}
        self._pending_shutdown: dict[int, _PendingShutdown] = {}
        self._pending_sessions: dict[tuple[str, int], SessionRecord] = {}
        self._session_timers: dict[tuple[str, int], object] = {}

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        self.env.listen(self.config.manager_port, self._on_agent_connect,
                        kind="control")
        self.env.schedule_repeating(self.config.idle_poll_ms, self.idle_tick,
                                    tag="tick")

    def start_app(self) -> None:
        """Boot one instance of every gateway, per the knowledge base."""
        self._decision("start_app", "")
        for g in self.knowledge_base:
            for v in g.vertices:
                if v.kind is ServiceKind.GATEWAY:
                    self.execute_instance(v.name)

    def has_pending(self) -> bool:
        return bool(self._pending_exec or self._pending_close
                    or self._pending_shutdown or self._pending_sessions)

    # -- plumbing ---------------------------------------------------------

    def _log(self, what: str) -> None:
        self.journal.append((self.env.now_ms(), "log", what))
        if self.journal_sink is not None:
            self.journal_sink(self.env.now_ms(), "log", what)

    def _decision(self, kind: str, detail: str) -> None:
        text = f"{kind} {detail}".strip()
        self.journal.append((self.env.now_ms(), "decision", text))
        if self.journal_sink is not None:
            self.journal_sink(self.env.now_ms(), "decision", text)

    def _pool(self, addr: str) -> PortPool:
        if addr not in self._pools:
            self._pools[addr] = PortPool(self.config.port_pool_start)
        return self._pools[addr]

    def _graph_of(self, service: str) -> AbstractGraph | None:
        for g in self.knowledge_base:
            if g.has_service(service):
                return g
        return None

    def _send(self, agent_addr: str, msg: Message) -> bool:
        ch = self._channels.get(agent_addr)
        if ch is None or not ch.is_open:
            return False
        try:
            ch.send(wire.serialize_message(msg))
            return True
        except ChannelClosed:
            # The link died under us; the agent is unreachable right now.
            self._log(f"send to {agent_addr} failed, probing")
            self._probe_agent(agent_addr)
            return False

    def _on_agent_connect(self, channel, info) -> None:
        reader = wire.MessageReader()

        def on_data(ch, data):
            for msg in reader.feed(data):
                self._dispatch(ch, msg)

        channel.set_handlers(on_data, self._on_agent_channel_close)

    def _on_agent_channel_close(self, channel) -> None:
        addr = self._channel_addr.pop(id(channel), None)
        if addr is None:
            return
        if self._channels.get(addr) is channel:
            del self._channels[addr]
            rec = self.agents.get(addr)
            if rec is not None and rec.status is AgentStatus.UP:
                self._log(f"agent channel lost {addr}")
                self.isolate_node(addr)

    # -- inbound dispatch ---------------------------------------------------

    def _dispatch(self, channel, msg: Message) -> None:
        if msg.msg_type is MT.INITIATION_REQUEST:
            self.handle_initiation_request(channel, msg)
            return
        addr = self._channel_addr.get(id(channel))
        if addr is None:
            self._log(f"message from unregistered channel dropped: {msg.msg_type.value}")
            return
        handler = {
            MT.EXECUTION_RESPONSE: self.handle_execution_response,
            MT.SESSION_REQUEST: self.handle_session_request,
            MT.SESSION_ACK: self.handle_session_ack,
            MT.SOURCE_SESSION_CLOSE_INFO: self.handle_close_info,
            MT.DEST_SESSION_CLOSE_INFO: self.handle_close_info,
            MT.SOURCE_SESSION_CLOSE_RESPONSE: self.handle_close_response,
            MT.DEST_SESSION_CLOSE_RESPONSE: self.handle_close_response,
            MT.GRACEFUL_SHUTDOWN_RESPONSE: self.handle_shutdown_response,
            MT.HARD_SHUTDOWN_RESPONSE: self.handle_shutdown_response,
            MT.HEALTH_CONTROL_RESPONSE: self.handle_health_response,
        }.get(msg.msg_type)
        if handler is None:
            self._log(f"unexpected message type {msg.msg_type.value} from {addr}")
            return
        handler(addr, msg)

    # -- registration ---------------------------------------------------------

    def handle_initiation_request(self, channel, msg: Message) -> None:
        addr = msg.get("agent_network_address")
        try:
            repo = wire.parse_name_list(msg.get("service_repository"))
        except wire.WireSyntaxError:
            channel.send(wire.serialize_message(wire.make_message(
                MT.INITIATION_RESPONSE, msg.message_id, status=wire.MALFORMED)))
            return
        seen: list[str] = []
        for name in repo:
            if name not in seen:
                seen.append(name)
        self.agents[addr] = AgentRecord(addr, seen, AgentStatus.UP)
        self._channels[addr] = channel
        self._channel_addr[id(channel)] = addr
        channel.send(wire.serialize_message(wire.make_message(
            MT.INITIATION_RESPONSE, msg.message_id, status=wire.OK)))

    # -- instance execution -----------------------------------------------

    def _select_node(self, service: str, preferred: str | None) -> str | None:
        capable = [a for a in self.agents.values()
                   if a.status is AgentStatus.UP and service in a.repository
                   and a.node_address in self._channels]
        if preferred is not None:
            capable = [a for a in capable if a.node_address == preferred]
        if not capable:
            return None

        def load(a: AgentRecord) -> tuple[int, str]:
            running = sum(1 for r in self.instances.values()
                          if r.node_address == a.node_address
                          and r.state in (InstanceState.STARTING,
                                          InstanceState.RUNNING,
                                          InstanceState.DRAINING))
            return (running, a.node_address)

        return min(capable, key=load).node_address

    def execute_instance(self, service: str,
                         preferred_node: str | None = None) -> int | None:
        """Plan and dispatch one instance execution; None with a logged
        reason when no placement is possible. Returns the message id."""
        g = self._graph_of(service)
        if g is None:
            self._log(f"execute: unknown service {service}")
            return None
        spec = g.service(service)
        if spec.kind is ServiceKind.BAAS:
            existing = [r for r in self.instances.values()
                        if r.service == service and r.state is not InstanceState.CLOSED]
            if existing:
                self._log(f"execute: baas {service} already has an instance")
                return None
        node = self._select_node(service, preferred_node)
        if node is None:
            self._log(f"execute: no capable agent for {service}")
            return None
        iid = self._instance_ids.get(service, 0) + 1
        self._instance_ids[service] = iid
        if spec.kind is ServiceKind.GATEWAY:
            ports = {s: p for s, p in spec.fixed_ports}
        else:
            pool = self._pool(node)
            ports = {s: pool.alloc() for s in spec.sockets}
        plug_config = {e.plug: e.dest for e in outgoing_connections(g, service)}
        record = InstanceRecord(
            service, iid, node, ports, plug_config,
            state=InstanceState.STARTING, last_activity=self.env.now_ms(),
            is_gateway=spec.kind is ServiceKind.GATEWAY,
            is_baas=spec.kind is ServiceKind.BAAS)
        self.instances[record.key] = record
        mid = self._ids.next()
        msg = wire.make_message(
            MT.EXECUTION_REQUEST, mid,
            agent_network_address=node,
            service_name=service,
            service_instance_id=iid,
            socket_configuration=wire.format_pair_list(
                [(s, ports[s]) for s in spec.sockets]),
            plug_configuration=wire.format_pair_list(
                sorted(plug_config.items())))
        pending = _PendingExec(record, node)
        pending.timer = self.env.schedule(
            self.config.request_timeout_ms,
            lambda: self._exec_timeout(mid), tag="timeout")
        self._pending_exec[mid] = pending
        if not self._send(node, msg):
            if mid in self._pending_exec:  # a probe may have resolved it
                self._resolve_exec(mid, wire.UNREACHABLE)
            return None
        return mid

    def _exec_timeout(self, mid: int) -> None:
        if mid in self._pending_exec:
            self._log(f"execution request {mid} timed out")
            addr = self._pending_exec[mid].agent_addr
            self._resolve_exec(mid, wire.TIMEOUT)
            self._probe_agent(addr)

    def _probe_agent(self, addr: str) -> None:
        ch = self._channels.get(addr)
        if ch is None or not ch.is_open:
            rec = self.agents.get(addr)
            if rec is not None and rec.status is AgentStatus.UP:
                self.isolate_node(addr)

    def handle_execution_response(self, addr: str, msg: Message) -> None:
        if msg.message_id not in self._pending_exec:
            self._log(f"execution_response with unknown id {msg.message_id}")
            return
        self._resolve_exec(msg.message_id, msg.status)

    def _resolve_exec(self, mid: int, status: int) -> None:
        pending = self._pending_exec.pop(mid)
        if pending.timer is not None:
            pending.timer.cancel()
        record = pending.record
        if wire.is_success(status):
            record.state = InstanceState.RUNNING
            record.last_activity = self.env.now_ms()
            if record.is_gateway:
                self.dns.add_instance(record.service, record.canonical_name,
                                      record.node_address)
        else:
            self._log(f"execution of {record.canonical_name} failed: {status}")
            self._free_instance_ports(record)
            del self.instances[record.key]
        for agent_addr, parked in pending.parked:
            if wire.is_success(status):
                self.handle_session_request(agent_addr, parked)
            else:
                fail = wire.NO_BYTECODE if status != wire.TIMEOUT else wire.TIMEOUT
                self._respond_session(agent_addr, parked.message_id, fail)

    def _free_instance_ports(self, record: InstanceRecord) -> None:
        if record.is_gateway:
            return
        pool = self._pool(record.node_address)
        for port in record.socket_ports.values():
            pool.free(port)

    # -- session establishment ----------------------------------------------

    def _respond_session(self, agent_addr: str, mid: int, status: int,
                         dest_addr: str | None = None, k: int | None = None) -> None:
        # A failure response still needs template-complete fields; the
        # requester ignores them on a non-2xx status.
        msg = wire.make_message(
            MT.SESSION_RESPONSE, mid, ST.MANAGER_TO_AGENT,
            status=status,
            dest_service_instance_network_address=dest_addr or agent_addr,
            dest_socket_port=k or 65535)
        self._send(agent_addr, msg)

    def _session_load(self, record: InstanceRecord) -> int:
        return sum(1 for s in self.sessions
                   if s.state is not SessionState.CLOSED and s.touches(record))

    def handle_session_request(self, addr: str, msg: Message) -> None:
        mid = msg.message_id
        source_addr = msg.get("agent_network_address")
        a, i = msg.get("source_service_name"), msg.get_int("source_service_instance_id")
        p = msg.get("source_plug_name")
        b, s = msg.get("dest_service_name"), msg.get("dest_socket_name")
        key = (source_addr, mid)
        if key in self._pending_sessions:
            self._log(f"session id conflict for {key}")
            self._respond_session(source_addr, mid, wire.CONFLICT)
            return
        g = self._graph_of(a)
        source = self.instances.get((a, i))
        if (g is None or not g.has_edge(a, p, b, s) or source is None
                or source.plug_config.get(p) != b):
            self._respond_session(source_addr, mid, wire.NOT_FOUND)
            return

        running = [r for r in self.instances.values()
                   if r.service == b and r.state is InstanceState.RUNNING]
        if not running:
            starting = [x for x in self._pending_exec.values()
                        if x.record.service == b]
            if starting:
                starting[0].parked.append((source_addr, msg))
                return
            exec_mid = self.execute_instance(b)
            if exec_mid is None:
                self._respond_session(source_addr, mid, wire.NO_BYTECODE)
                return
            self._pending_exec[exec_mid].parked.append((source_addr, msg))
            return

        if self.config.selection_policy is not None:
            dest = self.config.selection_policy(running, self._session_load)
        else:
            dest = min(running, key=lambda r: (self._session_load(r),
                                               r.node_address, r.instance_id))
        k = dest.socket_ports[s]
        record = SessionRecord(
            source_service_name=a, source_address=source_addr,
            source_instance_id=i, plug_name=p, plug_port=None,
            dest_service_name=b, dest_address=dest.node_address,
            dest_instance_id=dest.instance_id, socket_name=s,
            socket_port=k, session_port=None)
        self._pending_sessions[key] = record
        self._session_timers[key] = self.env.schedule(
            self.config.request_timeout_ms,
            lambda: self._expire_pending_session(key), tag="timeout")
        self._respond_session(source_addr, mid, wire.OK, dest.node_address, k)

    def _expire_pending_session(self, key: tuple[str, int]) -> None:
        if self._pending_sessions.pop(key, None) is not None:
            self._session_timers.pop(key, None)
            self._log(f"pending session {key} expired without ack")

    def handle_session_ack(self, addr: str, msg: Message) -> None:
        key = (addr, msg.message_id)
        record = self._pending_sessions.pop(key, None)
        if record is None:
            self._log(f"ack without pending session {key} (duplicate or late): "
                      f"{wire.ALREADY_CLOSED}")
            return
        timer = self._session_timers.pop(key, None)
        if timer is not None:
            timer.cancel()
        if not wire.is_success(msg.status):
            self._log(f"session establishment failed with {msg.status} for {key}")
            return
        record.plug_port = msg.get_int("source_plug_port")
        record.session_port = msg.get_int("dest_socket_new_port")
        dup = [s for s in self.sessions
               if s.state is not SessionState.CLOSED and s.key() == record.key()]
        if dup:
            self._log(f"session key collision ignored: {record.key()}")
            return
        record.state = SessionState.ESTABLISHED
        self.sessions.append(record)
        self._touch_session_instances(record)

    def _touch_session_instances(self, record: SessionRecord) -> None:
        now = self.env.now_ms()
        for key in ((record.source_service_name, record.source_instance_id),
                    (record.dest_service_name, record.dest_instance_id)):
            inst = self.instances.get(key)
            if inst is not None:
                inst.last_activity = now

    # -- session close ----------------------------------------------------

    def _find_session(self, na_i: str, m: int, na_j: str, k: int, l: int
                      ) -> SessionRecord | None:
        for s in self.sessions:
            if s.state is not SessionState.CLOSED \
                    and s.key() == (na_i, m, na_j, k, l):
                return s
        return None

    def _close_session(self, record: SessionRecord, reason: str) -> None:
        if record.state is SessionState.CLOSED:
            return
        record.state = SessionState.CLOSED
        record.close_reason = reason
        self._touch_session_instances(record)
        for key in ((record.source_service_name, record.source_instance_id),
                    (record.dest_service_name, record.dest_instance_id)):
            inst = self.instances.get(key)
            if inst is not None and inst.state is InstanceState.DRAINING:
                self._maybe_finish_drain(inst)

    def handle_close_info(self, addr: str, msg: Message) -> None:
        key = (msg.get("source_service_instance_network_address"),
               msg.get_int("source_plug_port"),
               msg.get("dest_service_instance_network_address"),
               msg.get_int("dest_socket_port"),
               msg.get_int("dest_socket_new_port"))
        record = self._find_session(*key)
        if record is not None:
            self._close_session(record, "reported")
            return
        if any(s.key() == key for s in self.sessions):
            return  # the other side already reported this close
        self._log(f"close_info matched no session: {wire.NOT_FOUND}")

    def request_session_close(self, record: SessionRecord, side: str) -> int | None:
        """Ask one side's instance (via its agent) to close; 410-style no-op
        when already closed. Returns the message id actually sent."""
        if record.state is SessionState.CLOSED:
            return None
        if not record.complete():
            # Never acknowledged; nothing is open at the instances.
            self._close_session(record, "expired")
            return None
        addr = record.source_address if side == "source" else record.dest_address
        agent = self.agents.get(addr)
        if agent is None or agent.status is not AgentStatus.UP:
            return None
        mid = self._ids.next()
        if side == "source":
            msg = wire.make_message(
                MT.SOURCE_SESSION_CLOSE_REQUEST, mid, ST.MANAGER_TO_AGENT,
                source_service_name=record.source_service_name,
                source_service_instance_network_address=record.source_address,
                source_service_instance_id=record.source_instance_id,
                source_plug_name=record.plug_name,
                source_plug_port=record.plug_port,
                dest_service_name=record.dest_service_name,
                dest_service_instance_network_address=record.dest_address,
                dest_socket_name=record.socket_name,
                dest_socket_port=record.socket_port,
                dest_socket_new_port=record.session_port)
        else:
            msg = wire.make_message(
                MT.DEST_SESSION_CLOSE_REQUEST, mid, ST.MANAGER_TO_AGENT,
                source_service_instance_network_address=record.source_address,
                source_plug_name=record.plug_name,
                source_plug_port=record.plug_port,
                dest_service_name=record.dest_service_name,
                dest_service_instance_network_address=record.dest_address,
                dest_service_instance_id=record.dest_instance_id,
                dest_socket_name=record.socket_name,
                dest_socket_port=record.socket_port,
                dest_socket_new_port=record.session_port)
        pending = _PendingClose(record, side)
        pending.timer = self.env.schedule(
            self.config.request_timeout_ms,
            lambda: self._close_timeout(mid), tag="timeout")
        self._pending_close[mid] = pending
        if not self._send(addr, msg):
            if mid in self._pending_close:  # a probe may have resolved it
                self._resolve_close(mid, wire.UNREACHABLE)
            return None
        return mid

    def _close_timeout(self, mid: int) -> None:
        if mid in self._pending_close:
            pending = self._pending_close[mid]
            addr = (pending.session.source_address if pending.side == "source"
                    else pending.session.dest_address)
            self._log(f"close request {mid} timed out")
            self._resolve_close(mid, wire.TIMEOUT)
            self._probe_agent(addr)

    def handle_close_response(self, addr: str, msg: Message) -> None:
        if msg.message_id not in self._pending_close:
            self._log(f"close_response with unknown id {msg.message_id}")
            return
        self._resolve_close(msg.message_id, msg.status)

    def _resolve_close(self, mid: int, status: int) -> None:
        pending = self._pending_close.pop(mid)
        if pending.timer is not None:
            pending.timer.cancel()
        if wire.is_success(status) or status == wire.ALREADY_CLOSED:
            self._close_session(pending.session, "requested")
        else:
            self._close_session(pending.session, f"close_failed_{status}")

    # -- shutdown ----------------------------------------------------------

    def open_session_count(self, instance: InstanceRecord) -> int:
        return self._session_load(instance)

    def request_graceful_shutdown(self, instance: InstanceRecord) -> None:
        if instance.state not in (InstanceState.RUNNING, InstanceState.DRAINING):
            return
        open_sessions = [s for s in self.sessions
                         if s.state is not SessionState.CLOSED and s.touches(instance)]
        if open_sessions:
            instance.state = InstanceState.DRAINING
            for s in open_sessions:
                # The close request goes to the source side; when that side
                # is unreachable the mirrored dest-side request is used.
                if (self.request_session_close(s, "source") is None
                        and s.state is not SessionState.CLOSED):
                    self.request_session_close(s, "dest")
            return
        instance.state = InstanceState.DRAINING
        self._send_shutdown(instance, "graceful")

    def _maybe_finish_drain(self, instance: InstanceRecord) -> None:
        if instance.state is not InstanceState.DRAINING:
            return
        if any(s.state is not SessionState.CLOSED and s.touches(instance)
               for s in self.sessions):
            return
        if any(p.instance is instance for p in self._pending_shutdown.values()):
            return
        self._send_shutdown(instance, "graceful")

    def request_hard_shutdown(self, instance: InstanceRecord) -> None:
        if instance.state is InstanceState.CLOSED:
            return
        self._send_shutdown(instance, "hard")

    def _send_shutdown(self, instance: InstanceRecord, kind: str) -> None:
        mid = self._ids.next()
        mt = (MT.GRACEFUL_SHUTDOWN_REQUEST if kind == "graceful"
              else MT.HARD_SHUTDOWN_REQUEST)
        msg = wire.make_message(
            mt, mid, ST.MANAGER_TO_AGENT,
            service_name=instance.service,
            service_instance_id=instance.instance_id)
        pending = _PendingShutdown(instance, kind)
        pending.timer = self.env.schedule(
            self.config.request_timeout_ms,
            lambda: self._shutdown_timeout(mid), tag="timeout")
        self._pending_shutdown[mid] = pending
        if not self._send(instance.node_address, msg):
            if mid in self._pending_shutdown:  # a probe may have resolved it
                self._resolve_shutdown(mid, wire.UNREACHABLE)

    def _shutdown_timeout(self, mid: int) -> None:
        if mid in self._pending_shutdown:
            addr = self._pending_shutdown[mid].instance.node_address
            self._log(f"shutdown request {mid} timed out")
            self._resolve_shutdown(mid, wire.TIMEOUT)
            self._probe_agent(addr)

    def handle_shutdown_response(self, addr: str, msg: Message) -> None:
        if msg.message_id not in self._pending_shutdown:
            self._log(f"shutdown response with unknown id {msg.message_id}")
            return
        self._resolve_shutdown(msg.message_id, msg.status)

    def _resolve_shutdown(self, mid: int, status: int) -> None:
        pending = self._pending_shutdown.pop(mid)
        if pending.timer is not None:
            pending.timer.cancel()
        instance = pending.instance
        if pending.kind == "graceful":
            if wire.is_success(status):
                self._mark_instance_closed(instance, "graceful")
            else:
                instance.state = InstanceState.RUNNING
                self._log(f"graceful shutdown of {instance.canonical_name} "
                          f"refused: {status}")
                if status in (wire.UNREACHABLE, wire.TIMEOUT):
                    self._probe_agent(instance.node_address)
            return
        # Hard: 2xx killed, 404 already gone; both mean the process is dead.
        if wire.is_success(status) or status == wire.NOT_FOUND:
            self._mark_instance_closed(instance, "hard")
            for s in self.sessions:
                if s.state is not SessionState.CLOSED and s.touches(instance):
                    side = ("dest" if (s.source_service_name, s.source_instance_id)
                            == instance.key else "source")
                    self.request_session_close(s, side)
                    self._close_session(s, "peer_killed")
        else:
            self._log(f"hard shutdown of {instance.canonical_name} failed: {status}")

    def _mark_instance_closed(self, instance: InstanceRecord, reason: str) -> None:
        if instance.state is InstanceState.CLOSED:
            return
        instance.state = InstanceState.CLOSED
        self._free_instance_ports(instance)
        if instance.is_gateway:
            self.dns.remove_instance(instance.service, instance.canonical_name)
        self._decision("instance_closed", f"{instance.canonical_name} {reason}")

    # -- failures ------------------------------------------------------------

    def isolate_node(self, addr: str) -> None:
        agent = self.agents.get(addr)
        if agent is None or agent.status is AgentStatus.ISOLATED:
            return
        agent.status = AgentStatus.ISOLATED
        self._decision("isolate_node", addr)
        ch = self._channels.pop(addr, None)
        if ch is not None:
            self._channel_addr.pop(id(ch), None)
            if ch.is_open:
                ch.close()
        # Sessions touching the node: ask the surviving side to close, then
        # regard them as closed here regardless.
        for s in list(self.sessions):
            if s.state is SessionState.CLOSED or not s.touches_node(addr):
                continue
            if s.source_address == addr and s.dest_address != addr:
                self.request_session_close(s, "dest")
            elif s.dest_address == addr and s.source_address != addr:
                self.request_session_close(s, "source")
            self._close_session(s, "node_isolated")
        drop = [k for k, r in self._pending_sessions.items()
                if r.touches_node(addr)]
        for k in drop:
            self._log(f"pending session {k} dropped by isolation")
            self._pending_sessions.pop(k)
            timer = self._session_timers.pop(k, None)
            if timer is not None:
                timer.cancel()
        for inst in self.instances.values():
            if inst.node_address == addr and inst.state is not InstanceState.CLOSED:
                self._mark_instance_closed(inst, "node_isolated")
        for mid in [m for m, p in self._pending_exec.items()
                    if p.agent_addr == addr]:
            self._resolve_exec(mid, wire.UNREACHABLE)
        for mid in [m for m, p in self._pending_shutdown.items()
                    if p.instance.node_address == addr]:
            self._resolve_shutdown(mid, wire.UNREACHABLE)
        for mid in [m for m, p in self._pending_close.items()
                    if (p.session.source_address if p.side == "source"
                        else p.session.dest_address) == addr]:
            self._resolve_close(mid, wire.UNREACHABLE)

    # -- health ------------------------------------------------------------

    def handle_health_response(self, addr: str, msg: Message) -> None:
        instance = self.instances.get(
            (msg.get("service_name"), msg.get_int("service_instance_id")))
        status = msg.status
        if instance is None or instance.state is InstanceState.CLOSED:
            self._log(f"health report for unknown instance: {status}")
            return
        self._log(f"abnormal health {status} for {instance.canonical_name}")
        if status == wire.OVERLOADED:
            if self.config.scale_hook is not None:
                self.config.scale_hook(instance.service, status)
            return
        if wire.status_class(status) is wire.StatusClass.RESPONDENT_ERROR:
            self.request_hard_shutdown(instance)

    # -- reaping -------------------------------------------------------------

    def idle_tick(self) -> list[InstanceRecord]:
        now = self.env.now_ms()
        reaped = []
        for inst in self.instances.values():
            if inst.state is not InstanceState.RUNNING or inst.is_gateway:
                continue
            if self.open_session_count(inst) > 0:
                continue
            if now - inst.last_activity > self.config.idle_timeout_ms:
                reaped.append(inst)
        for inst in reaped:
            self.request_graceful_shutdown(inst)
        return reaped

    # -- queries -------------------------------------------------------------

    def dns_resolve(self, alias: str) -> str:
        return self.dns.resolve(alias)

    def running_instances(self, service: str) -> list[InstanceRecord]:
        return [r for r in self.instances.values()
                if r.service == service and r.state is InstanceState.RUNNING]

    def established_sessions(self) -> list[SessionRecord]:
        return [s for s in self.sessions if s.state is SessionState.ESTABLISHED]
