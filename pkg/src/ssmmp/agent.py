"""Per-node intermediary: registers, executes instances, relays messages.

The agent owns a repository of executable services, spawns runtimes on the
control plane's request, and forwards messages in both directions, rewriting
only the route tag (and inserting its own address where the upstream template
adds it). It polls instance health and reports abnormal results upward.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from . import wire
from .transport import ChannelClosed, ConnectionRefused, Endpoint, NodeDown
from .wire import Message, MessageType as MT, SubType as ST


@dataclass(frozen=True)
class RepositoryEntry:
    service_name: str
    socket_names: tuple[str, ...]
    plug_names: tuple[str, ...]
    bytecode: str  # behavior identifier resolved by the runtime


@dataclass
class LocalInstance:
    service_name: str
    instance_id: int
    handle: object            # process handle: .alive / .kill()
    channel: object | None = None
    health: int = wire.OK
    state: str = "running"    # running | killed | exited

    @property
    def key(self) -> tuple[str, int]:
        return (self.service_name, self.instance_id)


@dataclass
class AgentConfig:
    agent_port: int = 7070
    manager_port: int = 7000
    health_poll_ms: int = 2_000
    instance_timeout_ms: int = 5_000
    register_retry_ms: int = 1_000


class SpawnError(Exception):
    pass


# Relay rewrite map: (type, inbound sub_type) -> outbound sub_type.
_RELAY = {
    (MT.SESSION_REQUEST, ST.SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.SESSION_ACK, ST.SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.SESSION_RESPONSE, ST.MANAGER_TO_AGENT): ST.AGENT_TO_SERVICE,
    (MT.SOURCE_SESSION_CLOSE_INFO, ST.SOURCE_SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.DEST_SESSION_CLOSE_INFO, ST.DEST_SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.SOURCE_SESSION_CLOSE_REQUEST, ST.MANAGER_TO_AGENT): ST.AGENT_TO_SOURCE_SERVICE,
    (MT.SOURCE_SESSION_CLOSE_RESPONSE, ST.SOURCE_SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.DEST_SESSION_CLOSE_REQUEST, ST.MANAGER_TO_AGENT): ST.AGENT_TO_DEST_SERVICE,
    (MT.DEST_SESSION_CLOSE_RESPONSE, ST.DEST_SERVICE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.GRACEFUL_SHUTDOWN_REQUEST, ST.MANAGER_TO_AGENT): ST.AGENT_TO_SERVICE_INSTANCE,
    (MT.GRACEFUL_SHUTDOWN_RESPONSE, ST.SERVICE_INSTANCE_TO_AGENT): ST.AGENT_TO_MANAGER,
    (MT.HEALTH_CONTROL_RESPONSE, ST.SERVICE_INSTANCE_TO_AGENT): ST.AGENT_TO_MANAGER,
}


def rewrite_for_relay(msg: Message, agent_address: str) -> Message:
    """Sub_type rewritten per template pair; other fields copied verbatim.

    The upstream session_request template carries the agent's address as its
    first field; everything else is preserved exactly.
    """
    out_sub = _RELAY[(msg.msg_type, msg.sub_type)]
    fields = msg.fields
    if msg.msg_type is MT.SESSION_REQUEST and msg.sub_type is ST.SERVICE_TO_AGENT:
        fields = (("agent_network_address", agent_address),) + fields
    return Message(msg.msg_type, msg.message_id, out_sub, fields)


class Agent:
    def __init__(self, env, node_addr: str, manager_addr: str,
                 repository: dict[str, RepositoryEntry],
                 spawn_fn: Callable, config: AgentConfig | None = None):
        self.env = env
        self.node_addr = node_addr
        self.manager_addr = manager_addr
        self.repository = repository
        self.spawn_fn = spawn_fn
        self.config = config or AgentConfig()
        self.instances: dict[tuple[str, int], LocalInstance] = {}
        self.registered = False
        self.alive = True
        self.log: list[str] = []
        self._ids = wire.IdCounter()
        self._manager_ch = None
        self._instance_by_channel: dict[int, LocalInstance] = {}
        self._session_routes: dict[int, LocalInstance] = {}
        # Correlation discipline: message ids are per originator, so two local
        # instances may reuse one id. Establishment replies and acks carry no
        # originator identity; only one flow per id may be outstanding at a
        # time, later ones wait here until the current one terminates.
        self._held_requests: dict[int, deque] = {}
        self._awaiting_ack: set[int] = set()
        self._flow_timers: dict[int, object] = {}
        self._pending_health: dict[int, tuple[LocalInstance, object]] = {}
        self._timers: list[object] = []

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        self.env.listen(self.config.agent_port, self._on_runtime_connect,
                        kind="control")
        self.register()
        self._timers.append(self.env.schedule_repeating(
            self.config.health_poll_ms, self.health_poll_tick, tag="tick"))

    def mark_dead(self) -> None:
        self.alive = False
        for t in self._timers:
            t.cancel()
        for li in self.instances.values():
            if li.handle is not None and li.handle.alive:
                li.handle.kill()

    # -- registration ---------------------------------------------------------

    def register(self) -> None:
        if not self.alive:
            return
        try:
            ch, _m, _l = self.env.connect(
                Endpoint(self.manager_addr, self.config.manager_port),
                kind="control")
        except (NodeDown, ConnectionRefused):
            self.env.schedule(self.config.register_retry_ms, self.register,
                              tag="retry")
            return
        self._manager_ch = ch
        reader = wire.MessageReader()

        def on_data(channel, data):
            for msg in reader.feed(data):
                self._from_manager(msg)

        ch.set_handlers(on_data, self._on_manager_close)
        msg = wire.make_message(
            MT.INITIATION_REQUEST, self._ids.next(),
            agent_network_address=self.node_addr,
            service_repository=wire.format_name_list(sorted(self.repository)))
        ch.send(wire.serialize_message(msg))

    def _on_manager_close(self, channel) -> None:
        if channel is not self._manager_ch:
            return
        self._manager_ch = None
        self.registered = False
        if self.alive:
            self.env.schedule(self.config.register_retry_ms, self.register,
                              tag="retry")

    def _to_manager(self, msg: Message) -> bool:
        if self._manager_ch is None or not self._manager_ch.is_open:
            self.log.append(f"manager unreachable, dropping {msg.msg_type.value}")
            return False
        try:
            self._manager_ch.send(wire.serialize_message(msg))
            return True
        except ChannelClosed:
            self.log.append(f"manager channel died sending {msg.msg_type.value}")
            return False

    # -- channels from runtimes -----------------------------------------------

    def _on_runtime_connect(self, channel, info) -> None:
        key = (info.meta.get("service", ""), int(info.meta.get("instance", 0)))
        li = self.instances.get(key)
        if li is None:
            channel.close()
            return
        li.channel = channel
        self._instance_by_channel[id(channel)] = li
        reader = wire.MessageReader()

        def on_data(ch, data):
            for msg in reader.feed(data):
                self._from_instance(li, msg)

        channel.set_handlers(on_data, self._on_runtime_close)

    def _on_runtime_close(self, channel) -> None:
        li = self._instance_by_channel.pop(id(channel), None)
        if li is not None and li.channel is channel:
            li.channel = None
            if li.state == "running" and not li.handle.alive:
                # Unexpected death: tell the control plane now rather than
                # waiting for the next poll to find the corpse.
                li.state = "exited"
                self._report_health(li, wire.INTERNAL_ERROR)

    def _to_instance(self, li: LocalInstance, msg: Message) -> bool:
        if li.channel is None or not li.channel.is_open:
            return False
        try:
            li.channel.send(wire.serialize_message(msg))
            return True
        except ChannelClosed:
            return False

    # -- messages from Manager --------------------------------------------

    def _from_manager(self, msg: Message) -> None:
        if msg.msg_type is MT.INITIATION_RESPONSE:
            if wire.is_success(msg.status):
                self.registered = True
            else:
                self.env.schedule(self.config.register_retry_ms, self.register,
                                  tag="retry")
            return
        if msg.msg_type is MT.EXECUTION_REQUEST:
            self.handle_execution_request(msg)
            return
        if msg.msg_type is MT.SESSION_RESPONSE:
            mid = msg.message_id
            li = self._session_routes.pop(mid, None)
            if li is None or not self._to_instance(li, rewrite_for_relay(
                    msg, self.node_addr)):
                self.log.append(f"session_response {mid} undeliverable")
                self._session_flow_done(mid)
            elif wire.is_success(msg.status):
                self._awaiting_ack.add(mid)  # flow open until the ack passes
            else:
                self._session_flow_done(mid)
            return
        if msg.msg_type is MT.HARD_SHUTDOWN_REQUEST:
            self.handle_hard_shutdown_request(msg)
            return
        if msg.msg_type in (MT.SOURCE_SESSION_CLOSE_REQUEST,
                            MT.DEST_SESSION_CLOSE_REQUEST,
                            MT.GRACEFUL_SHUTDOWN_REQUEST):
            self._forward_to_instance(msg)
            return
        self.log.append(f"unexpected message from manager: {msg.msg_type.value}")

    def _target_of(self, msg: Message) -> LocalInstance | None:
        if msg.msg_type is MT.SOURCE_SESSION_CLOSE_REQUEST:
            key = (msg.get("source_service_name"),
                   msg.get_int("source_service_instance_id"))
        elif msg.msg_type is MT.DEST_SESSION_CLOSE_REQUEST:
            key = (msg.get("dest_service_name"),
                   msg.get_int("dest_service_instance_id"))
        else:
            key = (msg.get("service_name"), msg.get_int("service_instance_id"))
        return self.instances.get(key)

    _FAILURE_RESPONSE = {
        MT.SOURCE_SESSION_CLOSE_REQUEST:
            (MT.SOURCE_SESSION_CLOSE_RESPONSE, ST.AGENT_TO_MANAGER),
        MT.DEST_SESSION_CLOSE_REQUEST:
            (MT.DEST_SESSION_CLOSE_RESPONSE, ST.AGENT_TO_MANAGER),
        MT.GRACEFUL_SHUTDOWN_REQUEST:
            (MT.GRACEFUL_SHUTDOWN_RESPONSE, ST.AGENT_TO_MANAGER),
    }

    def _forward_to_instance(self, msg: Message) -> None:
        li = self._target_of(msg)
        delivered = (li is not None and li.state == "running"
                     and self._to_instance(li, rewrite_for_relay(msg, self.node_addr)))
        if not delivered:
            # Dead or missing instance: answer for it so the flow resolves.
            mt, sub = self._FAILURE_RESPONSE[msg.msg_type]
            self._to_manager(wire.make_message(
                mt, msg.message_id, sub, status=wire.UNREACHABLE))

    # -- messages from instances ----------------------------------------------

    def _from_instance(self, li: LocalInstance, msg: Message) -> None:
        key = (msg.msg_type, msg.sub_type)
        if key not in _RELAY:
            self.log.append(f"unexpected message from {li.key}: {msg.msg_type.value}")
            return
        if msg.msg_type is MT.HEALTH_CONTROL_RESPONSE:
            self._on_health_response(li, msg)
            return
        if msg.msg_type is MT.SESSION_REQUEST:
            mid = msg.message_id
            if (mid in self._session_routes or mid in self._awaiting_ack
                    or self._held_requests.get(mid)):
                self._held_requests.setdefault(mid, deque()).append((li, msg))
                return
            self._start_session_flow(li, msg)
            return
        if msg.msg_type is MT.GRACEFUL_SHUTDOWN_RESPONSE \
                and wire.is_success(msg.status):
            li.state = "exited"
        self._to_manager(rewrite_for_relay(msg, self.node_addr))
        if msg.msg_type is MT.SESSION_ACK \
                and msg.message_id in self._awaiting_ack:
            self._awaiting_ack.discard(msg.message_id)
            self._session_flow_done(msg.message_id)

    def _start_session_flow(self, li: LocalInstance, msg: Message) -> None:
        mid = msg.message_id
        if not self._to_manager(rewrite_for_relay(msg, self.node_addr)):
            # Upstream dead: fail the open instead of letting it hang.
            self._to_instance(li, wire.make_message(
                MT.SESSION_RESPONSE, mid, ST.AGENT_TO_SERVICE,
                status=wire.UNREACHABLE,
                dest_service_instance_network_address=self.node_addr,
                dest_socket_port=65535))
            self._release_held(mid)
            return
        self._session_routes[mid] = li
        # Safety valve: past the upstream's own expiry window the flow is
        # abandoned and the next same-id request may proceed.
        self._flow_timers[mid] = self.env.schedule(
            self.config.instance_timeout_ms + 200,
            lambda: self._session_flow_timeout(mid), tag="timeout")

    def _session_flow_timeout(self, mid: int) -> None:
        if mid in self._session_routes or mid in self._awaiting_ack:
            self._session_routes.pop(mid, None)
            self._awaiting_ack.discard(mid)
            self._flow_timers.pop(mid, None)
            self._release_held(mid)

    def _session_flow_done(self, mid: int) -> None:
        timer = self._flow_timers.pop(mid, None)
        if timer is not None:
            timer.cancel()
        self._release_held(mid)

    def _release_held(self, mid: int) -> None:
        held = self._held_requests.get(mid)
        while held:
            li, msg = held.popleft()
            if li.state == "running" and li.handle.alive:
                self._start_session_flow(li, msg)
                return
        self._held_requests.pop(mid, None)

    # -- execution ----------------------------------------------------------

    def handle_execution_request(self, msg: Message) -> None:
        def respond(status: int) -> None:
            self._to_manager(wire.make_message(
                MT.EXECUTION_RESPONSE, msg.message_id, status=status))

        service = msg.get("service_name")
        entry = self.repository.get(service)
        if entry is None:
            respond(wire.NO_BYTECODE)
            return
        try:
            sockets = wire.parse_socket_config(msg.get("socket_configuration"))
            plugs = wire.parse_plug_config(msg.get("plug_configuration"))
        except wire.WireSyntaxError:
            respond(wire.MALFORMED)
            return
        if ({s for s, _ in sockets} != set(entry.socket_names)
                or {p for p, _ in plugs} != set(entry.plug_names)):
            respond(wire.MALFORMED)
            return
        for _name, port in sockets:
            if self.env.port_in_use(port):
                respond(wire.CONFLICT)
                return
        iid = msg.get_int("service_instance_id")
        li = LocalInstance(service, iid, handle=None)
        self.instances[(service, iid)] = li
        try:
            li.handle = self.spawn_fn(service, iid, sockets, plugs, entry.bytecode)
        except SpawnError as e:
            del self.instances[(service, iid)]
            self.log.append(f"spawn of {service}.{iid} failed: {e}")
            respond(wire.INTERNAL_ERROR)
            return
        respond(wire.EXECUTED)

    # -- shutdown -----------------------------------------------------------

    def handle_hard_shutdown_request(self, msg: Message) -> None:
        key = (msg.get("service_name"), msg.get_int("service_instance_id"))
        li = self.instances.get(key)
        if li is None or li.state != "running" or not li.handle.alive:
            status = wire.NOT_FOUND
        else:
            li.handle.kill()
            li.state = "killed"
            status = wire.OK
        self._to_manager(wire.make_message(
            MT.HARD_SHUTDOWN_RESPONSE, msg.message_id, ST.AGENT_TO_MANAGER,
            status=status))

    # -- health -------------------------------------------------------------

    def health_poll_tick(self) -> None:
        if not self.alive or not self.registered:
            return
        for li in list(self.instances.values()):
            if li.state != "running":
                continue
            if not li.handle.alive or li.channel is None or not li.channel.is_open:
                li.state = "exited"
                self._report_health(li, wire.INTERNAL_ERROR)
                continue
            mid = self._ids.next()
            sent = self._to_instance(li, wire.make_message(
                MT.HEALTH_CONTROL_REQUEST, mid, ST.AGENT_TO_SERVICE_INSTANCE,
                service_name=li.service_name,
                service_instance_id=li.instance_id))
            if not sent:
                li.state = "exited"
                self._report_health(li, wire.INTERNAL_ERROR)
                continue
            timer = self.env.schedule(
                self.config.instance_timeout_ms,
                lambda m=mid: self._health_timeout(m), tag="timeout")
            self._pending_health[mid] = (li, timer)

    def _health_timeout(self, mid: int) -> None:
        entry = self._pending_health.pop(mid, None)
        if entry is None:
            return
        li, _timer = entry
        self.log.append(f"instance {li.key} silent, synthesizing 500")
        self._report_health(li, wire.INTERNAL_ERROR)

    def _on_health_response(self, li: LocalInstance, msg: Message) -> None:
        entry = self._pending_health.pop(msg.message_id, None)
        if entry is not None:
            entry[1].cancel()
        li.health = msg.status
        if msg.status != wire.OK:
            self._to_manager(rewrite_for_relay(msg, self.node_addr))

    def _report_health(self, li: LocalInstance, status: int) -> None:
        li.health = status
        self._to_manager(wire.make_message(
            MT.HEALTH_CONTROL_RESPONSE, self._ids.next(), ST.AGENT_TO_MANAGER,
            service_name=li.service_name,
            service_instance_id=li.instance_id,
            status=status))
