"""Global protocol invariants checked at quiescent points.

Includes the independent replay oracle: the session table is rebuilt purely
from the message trace (plus isolation decisions) and compared, record for
record, with the control plane's actual table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import wire
from ..manager import AgentStatus, InstanceState, Manager, SessionState
from ..wire import Message, MessageType as MT, SubType as ST
from .report import TraceRecord, Verdict

_SOURCE_SIDE_TYPES = {
    MT.SESSION_RESPONSE,
    MT.SOURCE_SESSION_CLOSE_INFO,
    MT.SOURCE_SESSION_CLOSE_REQUEST,
}
_DEST_SIDE_TYPES = {
    MT.DEST_SESSION_CLOSE_INFO,
    MT.DEST_SESSION_CLOSE_REQUEST,
}


def check_knowledge_asymmetry(records: list[TraceRecord],
                              cluster) -> Verdict:
    """No source-side artifact carries the dest instance id; no dest-side
    artifact carries the source instance id or source service name."""
    for rec in records:
        if rec.kind != "msg":
            continue
        msg = rec.message()
        names = set(msg.field_names())
        if msg.msg_type in _SOURCE_SIDE_TYPES and "dest_service_instance_id" in names:
            return Verdict(False, "knowledge_asymmetry",
                           f"dest id leaked in {rec.render()}")
        if msg.msg_type in _DEST_SIDE_TYPES and (
                "source_service_instance_id" in names
                or "source_service_name" in names):
            return Verdict(False, "knowledge_asymmetry",
                           f"source identity leaked in {rec.render()}")
    for rt in cluster.live_runtimes():
        for h in rt.source_handles:
            if h.role == "source" and "dest_service_instance_id" in h.params:
                return Verdict(False, "knowledge_asymmetry",
                               f"source handle of {rt.config.service_name} "
                               "holds dest id")
        for h in rt.dest_handles:
            if h.role == "dest" and (
                    "source_service_instance_id" in h.params
                    or "source_service_name" in h.params):
                return Verdict(False, "knowledge_asymmetry",
                               f"dest handle of {rt.config.service_name} "
                               "holds source identity")
    return Verdict(True, "knowledge_asymmetry")


def check_conservation(manager: Manager, cluster, net) -> Verdict:
    established = len(manager.established_sessions())
    source_open = sum(
        1 for rt in cluster.live_runtimes()
        for h in rt.source_handles if h.state == "open")
    dest_open = sum(
        1 for rt in cluster.live_runtimes()
        for h in rt.dest_handles if h.state == "open" and h.role == "dest")
    channels = len(net.open_data_channels())
    if established == source_open == dest_open == channels:
        return Verdict(True, "session_conservation", f"n={established}")
    return Verdict(False, "session_conservation",
                   f"manager={established} plugs={source_open} "
                   f"sockets={dest_open} channels={channels}")


def check_port_exclusivity(manager: Manager, cluster) -> Verdict:
    seen: dict[tuple[str, int], str] = {}
    for inst in manager.instances.values():
        if inst.state is InstanceState.CLOSED:
            continue
        for port in inst.socket_ports.values():
            key = (inst.node_address, port)
            if key in seen:
                return Verdict(False, "port_exclusivity",
                               f"{key} used by {seen[key]} and "
                               f"{inst.canonical_name}")
            seen[key] = inst.canonical_name
    return Verdict(True, "port_exclusivity", f"n={len(seen)}")


def check_dns_soundness(manager: Manager) -> Verdict:
    running = {inst.canonical_name: inst.node_address
               for inst in manager.instances.values()
               if inst.is_gateway and inst.state is InstanceState.RUNNING}
    for alias, targets in manager.dns.cname_records.items():
        for canonical in targets:
            addr = manager.dns.a_records.get(canonical)
            if addr is None:
                return Verdict(False, "dns_soundness",
                               f"{alias}: {canonical} has no A record")
            if running.get(canonical) != addr:
                return Verdict(False, "dns_soundness",
                               f"{alias}: {canonical} -> {addr} is not a "
                               "running gateway instance")
    return Verdict(True, "dns_soundness")


def check_isolation(manager: Manager) -> Verdict:
    for addr, agent in manager.agents.items():
        if agent.status is not AgentStatus.ISOLATED:
            continue
        for inst in manager.instances.values():
            if inst.node_address == addr and inst.state is not InstanceState.CLOSED:
                return Verdict(False, "isolation_completeness",
                               f"{inst.canonical_name} still open on {addr}")
        for s in manager.sessions:
            if s.state is not SessionState.CLOSED and s.touches_node(addr):
                return Verdict(False, "isolation_completeness",
                               f"session {s.key()} still touches {addr}")
    return Verdict(True, "isolation_completeness")


_RESPONSE_OF = {
    MT.INITIATION_RESPONSE: MT.INITIATION_REQUEST,
    MT.EXECUTION_RESPONSE: MT.EXECUTION_REQUEST,
    MT.SESSION_RESPONSE: MT.SESSION_REQUEST,
    MT.SOURCE_SESSION_CLOSE_RESPONSE: MT.SOURCE_SESSION_CLOSE_REQUEST,
    MT.DEST_SESSION_CLOSE_RESPONSE: MT.DEST_SESSION_CLOSE_REQUEST,
    MT.GRACEFUL_SHUTDOWN_RESPONSE: MT.GRACEFUL_SHUTDOWN_REQUEST,
    MT.HARD_SHUTDOWN_RESPONSE: MT.HARD_SHUTDOWN_REQUEST,
}


def check_correlation(records: list[TraceRecord]) -> Verdict:
    """Every response in the trace answers a request with the same id that
    previously travelled the reverse hop."""
    seen_requests: set[tuple[str, str, int, MT]] = set()
    for rec in records:
        if rec.kind != "msg":
            continue
        msg = rec.message()
        request_type = _RESPONSE_OF.get(msg.msg_type)
        if request_type is None:
            seen_requests.add((rec.src, rec.dst, msg.message_id, msg.msg_type))
            continue
        if (rec.dst, rec.src, msg.message_id, request_type) not in seen_requests:
            return Verdict(False, "correlation",
                           f"unmatched response {rec.render()}")
    return Verdict(True, "correlation")


def check_wire_grammar(records: list[TraceRecord]) -> Verdict:
    for rec in records:
        if rec.kind != "msg":
            continue
        try:
            rec.message()
        except wire.MessageError as e:
            return Verdict(False, "wire_grammar", f"{rec.render()}: {e}")
    return Verdict(True, "wire_grammar")


# ---------------------------------------------------------------------------
# Replay oracle

@dataclass
class _ReplaySession:
    a: str
    i: int
    na_i: str
    p: str
    b: str
    na_j: str
    j: int
    s: str
    k: int
    m: int | None = None
    l: int | None = None
    state: str = "pending"

    def key(self):
        return (self.na_i, self.m, self.na_j, self.k, self.l)

    def row(self):
        return (self.a, self.i, self.na_i, self.p, self.m,
                self.b, self.j, self.na_j, self.s, self.k, self.l, self.state)


@dataclass
class _ReplayInstance:
    service: str
    iid: int
    node: str
    socket_ports: dict[str, int]
    state: str = "starting"


class ReplayOracle:
    """Rebuilds the session table from agent<->Manager messages alone."""

    def __init__(self) -> None:
        self.instances: dict[tuple[str, int], _ReplayInstance] = {}
        self.sessions: list[_ReplaySession] = []
        self._pending_exec: dict[int, _ReplayInstance] = {}
        self._pending_open: dict[tuple[str, int], _ReplaySession] = {}
        self._open_requests: dict[tuple[str, int], Message] = {}
        self._pending_close: dict[int, tuple] = {}

    def feed(self, rec: TraceRecord) -> None:
        if rec.kind == "decision":
            if rec.text.startswith("isolate_node "):
                self._isolate(rec.text.split()[1])
            return
        if rec.kind != "msg":
            return
        msg = rec.message()
        mt = msg.msg_type
        if mt is MT.EXECUTION_REQUEST:
            ports = dict(wire.parse_socket_config(msg.get("socket_configuration")))
            inst = _ReplayInstance(msg.get("service_name"),
                                   msg.get_int("service_instance_id"),
                                   msg.get("agent_network_address"), ports)
            self._pending_exec[msg.message_id] = inst
        elif mt is MT.EXECUTION_RESPONSE:
            inst = self._pending_exec.pop(msg.message_id, None)
            if inst is not None and wire.is_success(msg.status):
                inst.state = "running"
                self.instances[(inst.service, inst.iid)] = inst
        elif mt is MT.SESSION_REQUEST and msg.sub_type is ST.AGENT_TO_MANAGER:
            self._open_requests[(rec.src, msg.message_id)] = msg
        elif mt is MT.SESSION_RESPONSE and msg.sub_type is ST.MANAGER_TO_AGENT:
            req = self._open_requests.pop((rec.dst, msg.message_id), None)
            if req is None or not wire.is_success(msg.status):
                return
            na_j = msg.get("dest_service_instance_network_address")
            k = msg.get_int("dest_socket_port")
            b = req.get("dest_service_name")
            s = req.get("dest_socket_name")
            j = self._resolve_instance(b, na_j, s, k)
            self._pending_open[(rec.dst, msg.message_id)] = _ReplaySession(
                a=req.get("source_service_name"),
                i=req.get_int("source_service_instance_id"),
                na_i=req.get("agent_network_address"),
                p=req.get("source_plug_name"),
                b=b, na_j=na_j, j=j, s=s, k=k)
        elif mt is MT.SESSION_ACK and msg.sub_type is ST.AGENT_TO_MANAGER:
            sess = self._pending_open.pop((rec.src, msg.message_id), None)
            if sess is None or not wire.is_success(msg.status):
                return
            sess.m = msg.get_int("source_plug_port")
            sess.l = msg.get_int("dest_socket_new_port")
            if any(x.state != "closed" and x.key() == sess.key()
                   for x in self.sessions):
                return
            sess.state = "established"
            self.sessions.append(sess)
        elif mt in (MT.SOURCE_SESSION_CLOSE_INFO, MT.DEST_SESSION_CLOSE_INFO) \
                and msg.sub_type is ST.AGENT_TO_MANAGER:
            self._close_key(
                (msg.get("source_service_instance_network_address"),
                 msg.get_int("source_plug_port"),
                 msg.get("dest_service_instance_network_address"),
                 msg.get_int("dest_socket_port"),
                 msg.get_int("dest_socket_new_port")))
        elif mt in (MT.SOURCE_SESSION_CLOSE_REQUEST, MT.DEST_SESSION_CLOSE_REQUEST) \
                and msg.sub_type is ST.MANAGER_TO_AGENT:
            self._pending_close[msg.message_id] = (
                msg.get("source_service_instance_network_address"),
                msg.get_int("source_plug_port"),
                msg.get("dest_service_instance_network_address"),
                msg.get_int("dest_socket_port"),
                msg.get_int("dest_socket_new_port"))
        elif mt in (MT.SOURCE_SESSION_CLOSE_RESPONSE, MT.DEST_SESSION_CLOSE_RESPONSE):
            key = self._pending_close.pop(msg.message_id, None)
            if key is not None and (wire.is_success(msg.status)
                                    or msg.status == wire.ALREADY_CLOSED):
                self._close_key(key)
        elif mt is MT.HARD_SHUTDOWN_REQUEST:
            self._pending_close[-msg.message_id] = (
                "hard", msg.get("service_name"), msg.get_int("service_instance_id"))
        elif mt is MT.HARD_SHUTDOWN_RESPONSE:
            entry = self._pending_close.pop(-msg.message_id, None)
            if entry is None:
                return
            _tag, service, iid = entry
            if wire.is_success(msg.status) or msg.status == wire.NOT_FOUND:
                self.instances.pop((service, iid), None)
                for sess in self.sessions:
                    if sess.state != "closed" and (
                            (sess.a, sess.i) == (service, iid)
                            or (sess.b, sess.j) == (service, iid)):
                        sess.state = "closed"

    def _resolve_instance(self, service: str, node: str, socket: str,
                          port: int) -> int:
        for inst in self.instances.values():
            if (inst.service == service and inst.node == node
                    and inst.socket_ports.get(socket) == port):
                return inst.iid
        return 0

    def _close_key(self, key) -> None:
        for sess in self.sessions:
            if sess.state != "closed" and sess.key() == key:
                sess.state = "closed"
                return

    def _isolate(self, addr: str) -> None:
        for sess in self.sessions:
            if sess.state != "closed" and addr in (sess.na_i, sess.na_j):
                sess.state = "closed"
        for key, inst in list(self.instances.items()):
            if inst.node == addr:
                del self.instances[key]

    def table(self) -> list[tuple]:
        return sorted(s.row() for s in self.sessions)


def check_replay(records: list[TraceRecord], manager: Manager) -> Verdict:
    oracle = ReplayOracle()
    for rec in records:
        oracle.feed(rec)
    actual = sorted(
        (s.source_service_name, s.source_instance_id, s.source_address,
         s.plug_name, s.plug_port, s.dest_service_name, s.dest_instance_id,
         s.dest_address, s.socket_name, s.socket_port, s.session_port,
         s.state.value)
        for s in manager.sessions)
    expected = oracle.table()
    if actual == expected:
        return Verdict(True, "replay_equivalence", f"n={len(actual)}")
    missing = [r for r in expected if r not in actual]
    extra = [r for r in actual if r not in expected]
    return Verdict(False, "replay_equivalence",
                   f"missing={missing[:2]} extra={extra[:2]}")


def sweep(records: list[TraceRecord], manager: Manager, cluster, net
          ) -> list[Verdict]:
    return [
        check_conservation(manager, cluster, net),
        check_port_exclusivity(manager, cluster),
        check_knowledge_asymmetry(records, cluster),
        check_dns_soundness(manager),
        check_isolation(manager),
        check_correlation(records),
        check_wire_grammar(records),
        check_replay(records, manager),
    ]
