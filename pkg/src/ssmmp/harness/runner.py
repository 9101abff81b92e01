"""Scenario execution: boot the cluster, drive the timeline, check everything.

Timeline events run at their scheduled simulated times. Whenever the run
reaches a quiescent point (only maintenance ticks and future timeline events
queued, no pending correlations anywhere) the full invariant sweep runs;
any violation fails the run. The report is a pure function of
(scenario, seed), byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .. import wire
from ..cluster import Cluster
from ..manager import InstanceState, SessionState
from ..service_runtime import FrameReader, frame
from ..transport import (ConnectionRefused, Endpoint, NodeDown, SimNetwork)
from ..wire import MessageType as MT, SubType as ST
from . import invariants
from .report import TraceRecord, TraceReport, Verdict, manager_snapshot
from .scenario import Scenario, ScenarioEvent

USER_NODE = "fd00::ee"
BOOT_APP_AT_MS = 50
MAINTENANCE_TAGS = {"tick", "timeline", "retry"}


class Collector:
    """Turns transport activity and control decisions into trace records."""

    def __init__(self, net: SimNetwork):
        self.net = net
        self.records: list[TraceRecord] = []
        self._net_cursor = 0

    def on_send(self, channel, data: bytes) -> None:
        self.drain_net_events()
        if channel.kind != "control":
            return
        msg = wire.parse_message(data)
        self.records.append(TraceRecord(
            self.net._next_seq(), self.net.now_ms(), "msg",
            str(channel.local), str(channel.remote), wire.message_summary(msg)))

    def decision(self, time_ms: int, kind: str, text: str) -> None:
        if kind != "decision":
            return
        self.drain_net_events()
        self.records.append(TraceRecord(
            self.net._next_seq(), time_ms, "decision", text=text))

    def drain_net_events(self) -> None:
        while self._net_cursor < len(self.net.events):
            ev = self.net.events[self._net_cursor]
            self._net_cursor += 1
            self.records.append(TraceRecord(
                ev.seq, ev.time_ms, "net",
                text=f"{ev.kind} {ev.src or '-'} -> {ev.dst or '-'}"
                     + (f" {ev.detail}" if ev.detail else "")))

    def messages(self) -> list[TraceRecord]:
        return [r for r in self.records if r.kind == "msg"]


@dataclass
class RunContext:
    scenario: Scenario
    net: SimNetwork
    cluster: Cluster
    collector: Collector
    user_replies: list[bytes] = field(default_factory=list)
    user_failures: list[str] = field(default_factory=list)
    held: dict[tuple[str, int, str], list] = field(default_factory=dict)
    open_failures: list[tuple[str, str, int]] = field(default_factory=list)
    expects: list[Verdict] = field(default_factory=list)

    @property
    def manager(self):
        return self.cluster.manager


def _pick_instance(ctx: RunContext, spec: str):
    service, _, iid = spec.partition(".")
    if iid:
        return service, int(iid)
    running = sorted(r.instance_id
                     for r in ctx.manager.running_instances(service))
    if not running:
        raise KeyError(f"no running instance of {service}")
    return service, running[0]


def _gateway_port(ctx: RunContext, alias: str) -> int:
    spec = ctx.scenario.graph.service(alias)
    return spec.fixed_ports[0][1]


def _user_request(ctx: RunContext, alias: str) -> None:
    try:
        addr = ctx.manager.dns_resolve(alias)
    except KeyError:
        ctx.user_failures.append(f"dns miss for {alias}")
        return
    try:
        ch, _m, _l = ctx.net.connect(
            USER_NODE, Endpoint(addr, _gateway_port(ctx, alias)),
            kind="external")
    except (NodeDown, ConnectionRefused) as e:
        ctx.user_failures.append(f"connect to {alias} failed: {e}")
        return
    reader = FrameReader()

    def on_data(channel, data):
        for payload in reader.feed(data):
            ctx.user_replies.append(payload)
            if channel.is_open:
                channel.close()

    ch.set_handlers(on_data, lambda channel: None)
    ch.send(frame(b"task:user"))


def _execute_event(ctx: RunContext, ev: ScenarioEvent) -> None:
    try:
        _execute_event_inner(ctx, ev)
    except Exception as e:  # a bad event fails the run, not the process
        ctx.expects.append(Verdict(
            False, f"at={ev.at_ms} event {ev.kind}", f"{type(e).__name__}: {e}"))


def _execute_event_inner(ctx: RunContext, ev: ScenarioEvent) -> None:
    kind, args = ev.kind, ev.args
    if kind == "user_request":
        _user_request(ctx, args[0])
    elif kind == "open_session":
        service, iid = _pick_instance(ctx, args[0])
        plug = args[1]
        rt = ctx.cluster.runtime(service, iid)
        key = (service, iid, plug)

        def on_established(_rt, handle, key=key):
            ctx.held.setdefault(key, []).append(handle)

        def on_failed(_rt, _plug, status, key=key):
            ctx.open_failures.append((key[0], key[2], status))

        rt.open_session(plug, hold=True, on_established=on_established,
                        on_failed=on_failed)
    elif kind == "close_session":
        service, iid = _pick_instance(ctx, args[0])
        handles = ctx.held.get((service, iid, args[1]), [])
        if handles:
            ctx.cluster.runtime(service, iid).close_session(handles.pop(0))
    elif kind == "exec_instance":
        preferred = args[1] if len(args) > 1 else None
        ctx.manager.execute_instance(args[0], preferred)
    elif kind == "kill_instance":
        service, iid = args[0], int(args[1])
        rt = ctx.cluster.runtimes.get((service, iid))
        if rt is not None:
            rt.kill()
    elif kind == "kill_agent":
        ctx.cluster.kill_node(args[0])
    elif kind == "break_link":
        ctx.net.break_link(args[0], args[1])
    elif kind == "heal_link":
        ctx.net.heal_link(args[0], args[1])
    elif kind == "set_health":
        service, iid = _pick_instance(ctx, args[0])
        behavior = ctx.cluster.runtime(service, iid).behavior
        behavior.faulted = args[1] == "faulted"
        behavior.mute = args[1] == "muted"
    elif kind == "advance_time":
        pass  # horizon extension only; computed up front
    elif kind == "expect":
        ok, detail = _evaluate_expect(ctx, args[0], args[1:])
        ctx.expects.append(Verdict(
            ok, f"at={ev.at_ms} {args[0]} {' '.join(args[1:])}".rstrip(), detail))


# ---------------------------------------------------------------------------
# Expect checks

def _find_session(ctx: RunContext, a: str, p: str, b: str, s: str):
    for sess in ctx.manager.sessions:
        if (sess.source_service_name, sess.plug_name,
                sess.dest_service_name, sess.socket_name) == (a, p, b, s):
            return sess
    return None


def _check_choreography(ctx: RunContext, a: str, p: str, b: str, s: str
                        ) -> tuple[bool, str]:
    ctx.collector.drain_net_events()
    msgs = ctx.collector.messages()
    req1 = next((r for r in msgs
                 if (m := r.message()).msg_type is MT.SESSION_REQUEST
                 and m.sub_type is ST.SERVICE_TO_AGENT
                 and m.get("source_service_name") == a
                 and m.get("source_plug_name") == p
                 and m.get("dest_service_name") == b
                 and m.get("dest_socket_name") == s), None)
    if req1 is None:
        return False, "no session_request from the source instance"
    mid = req1.message().message_id
    req2 = next((r for r in msgs
                 if r.seq > req1.seq
                 and (m := r.message()).msg_type is MT.SESSION_REQUEST
                 and m.sub_type is ST.AGENT_TO_MANAGER
                 and m.message_id == mid
                 and m.get("source_plug_name") == p), None)
    if req2 is None:
        return False, "request was not forwarded upward"
    hop1 = {req1.src, req1.dst}
    hop2 = {req2.src, req2.dst}
    session_types = (MT.SESSION_REQUEST, MT.SESSION_RESPONSE, MT.SESSION_ACK)
    related = [r for r in msgs
               if r.message().message_id == mid
               and r.message().msg_type in session_types
               and ({r.src, r.dst} == hop1 or {r.src, r.dst} == hop2)]
    want = [
        (MT.SESSION_REQUEST, ST.SERVICE_TO_AGENT),
        (MT.SESSION_REQUEST, ST.AGENT_TO_MANAGER),
        (MT.SESSION_RESPONSE, ST.MANAGER_TO_AGENT),
        (MT.SESSION_RESPONSE, ST.AGENT_TO_SERVICE),
        (MT.SESSION_ACK, ST.SERVICE_TO_AGENT),
        (MT.SESSION_ACK, ST.AGENT_TO_MANAGER),
    ]
    # Later chains may legally reuse the id (scope is per originator); the
    # establishment itself must be exactly the six-message prefix.
    got = [(r.message().msg_type, r.message().sub_type) for r in related[:6]]
    if got != want:
        return False, "sequence was " + str(
            [(t.value, st.value if st else None) for t, st in got])
    related = related[:6]
    ack = related[4].message()
    m_port = ack.get_int("source_plug_port")
    connect_seen = any(
        rec for rec in ctx.collector.records
        if rec.kind == "net" and rec.text.startswith("connect")
        and f":{m_port} ->" in rec.text
        and related[3].seq < rec.seq < related[4].seq)
    if not connect_seen:
        return False, "no transport connect between response and ack"
    sess = _find_session(ctx, a, p, b, s)
    if sess is None or not sess.complete():
        return False, "manager record incomplete"
    return True, f"message_id={mid}"


def _session_row_complete(sess) -> bool:
    return (sess is not None and sess.complete()
            and all(v not in (None, "") for v in (
                sess.source_service_name, sess.source_address,
                sess.source_instance_id, sess.plug_name, sess.plug_port,
                sess.dest_service_name, sess.dest_address,
                sess.dest_instance_id, sess.socket_name, sess.socket_port,
                sess.session_port)))


def _evaluate_expect(ctx: RunContext, check: str, args: tuple[str, ...]
                     ) -> tuple[bool, str]:
    manager = ctx.manager
    if check == "choreography":
        return _check_choreography(ctx, *args)
    if check == "session_complete":
        sess = _find_session(ctx, *args)
        return _session_row_complete(sess), ""
    if check == "user_replies":
        n = len(ctx.user_replies)
        return n == int(args[0]), f"got {n}"
    if check == "agent_isolated":
        rec = manager.agents.get(args[0])
        ok = rec is not None and rec.status.value == "isolated"
        return ok, rec.status.value if rec else "unknown agent"
    if check == "no_session_touching":
        open_ = [s for s in manager.sessions
                 if s.state is not SessionState.CLOSED and s.touches_node(args[0])]
        return not open_, f"{len(open_)} open"
    if check == "dns_targets":
        n = len(manager.dns.targets(args[0]))
        return n == int(args[1]), f"got {n}"
    if check == "instance_state":
        inst = manager.instances.get((args[0], int(args[1])))
        if inst is None:
            return False, "unknown instance"
        return inst.state.value == args[2], f"state={inst.state.value}"
    if check == "instance_running":
        n = len(manager.running_instances(args[0]))
        return n == int(args[1]), f"got {n}"
    if check == "session_count":
        n = sum(1 for s in manager.sessions if s.state.value == args[0])
        return n == int(args[1]), f"got {n}"
    if check == "replay_matches":
        ctx.collector.drain_net_events()
        verdict = invariants.check_replay(ctx.collector.records, manager)
        return verdict.ok, verdict.detail
    if check == "open_failed":
        want = (args[0], args[1], int(args[2]))
        return want in ctx.open_failures, f"failures={ctx.open_failures}"
    if check == "reap_window":
        inst = manager.instances.get((args[0], int(args[1])))
        if inst is None:
            return False, "unknown instance"
        if inst.state is not InstanceState.CLOSED:
            return False, f"state={inst.state.value}"
        closed_at = next(
            (t for t, kind, text in manager.journal
             if kind == "decision"
             and text == f"instance_closed {args[0]}.{args[1]} graceful"), None)
        if closed_at is None:
            return False, "not gracefully closed"
        delta = closed_at - inst.last_activity
        lo, hi = int(args[2]), int(args[3])
        return lo < delta <= hi, f"delta={delta}"
    return False, f"unknown check {check}"


# ---------------------------------------------------------------------------
# Main loop

def _is_quiescent(ctx: RunContext) -> bool:
    if ctx.net.pending_tags() - MAINTENANCE_TAGS:
        return False
    return not ctx.cluster.has_pending()


def run_scenario(scenario: Scenario, seed: int) -> TraceReport:
    latency_fn = None
    if scenario.latency_range is not None:
        lo, hi = scenario.latency_range
        latency_fn = lambda rng: rng.randint(lo, hi)
    net = SimNetwork(seed, latency_fn=latency_fn)
    collector = Collector(net)
    from ..agent import AgentConfig
    from ..manager import ManagerConfig
    cluster = Cluster(net, [scenario.graph], scenario.manager_addr,
                      scenario.nodes,
                      manager_config=ManagerConfig(
                          manager_port=scenario.manager_port),
                      agent_config=AgentConfig(
                          manager_port=scenario.manager_port),
                      journal_sink=collector.decision)
    net.on_send = collector.on_send
    net.add_node(USER_NODE)
    net.horizon_ms = scenario.horizon_ms()
    ctx = RunContext(scenario, net, cluster, collector)

    cluster.start()
    net.schedule_abs(BOOT_APP_AT_MS, cluster.manager.start_app)
    for ev in scenario.events:
        net.schedule_abs(ev.at_ms, lambda e=ev: _execute_event(ctx, e))

    sweeps: list[Verdict] = []
    failed_sweep: list[Verdict] = []
    sweep_count = 0
    last_sweep_mark = -1
    while True:
        progressed = net.step()
        if not progressed:
            break
        mark = net._seq
        if _is_quiescent(ctx) and mark != last_sweep_mark:
            last_sweep_mark = mark
            collector.drain_net_events()
            verdicts = invariants.sweep(collector.records, cluster.manager,
                                        cluster, net)
            sweep_count += 1
            bad = [v for v in verdicts if not v.ok]
            if bad and not failed_sweep:
                failed_sweep = [
                    Verdict(v.ok, v.name,
                            f"t={net.now_ms()} {v.detail}".strip())
                    for v in verdicts]

    collector.drain_net_events()
    final = invariants.sweep(collector.records, cluster.manager, cluster, net)
    if failed_sweep:
        final = failed_sweep
    report = TraceReport(scenario.name, seed)
    report.records = collector.records
    report.manager_lines = manager_snapshot(cluster.manager)
    report.invariants = [
        Verdict(v.ok, v.name,
                f"sweeps={sweep_count} {v.detail}".strip()
                if v.name == "session_conservation" else v.detail)
        for v in final]
    report.expects = ctx.expects
    return report


def run_scenario_file(path: str | Path, seed: int) -> TraceReport:
    from .scenario import load_scenario
    return run_scenario(load_scenario(path), seed)
