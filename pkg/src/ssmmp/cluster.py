"""Wiring: a Manager, agents, and runtimes assembled over one network.

The actors only see a small node-bound environment (listen/connect/timers),
so the same actor code runs over the simulated fabric and over loopback TCP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .agent import Agent, AgentConfig, RepositoryEntry, SpawnError
from .graph import AbstractGraph, outgoing_connections
from .manager import Manager, ManagerConfig
from .service_runtime import (InstanceConfig, ServiceRuntime, make_behavior)
from .transport import Endpoint, PortInUse, SimNetwork


class SimEnv:
    """Node-bound view of the simulated network."""

    def __init__(self, net: SimNetwork, addr: str):
        self._net = net
        self.addr = addr

    def now_ms(self) -> int:
        return self._net.now_ms()

    def schedule(self, delay_ms, fn, tag="timer"):
        return self._net.schedule(delay_ms, fn, tag=tag)

    def schedule_repeating(self, period_ms, fn, tag="tick"):
        return self._net.schedule_repeating(period_ms, fn, tag=tag)

    def listen(self, port, on_accept, kind="data"):
        return self._net.listen(self.addr, port, on_accept, kind=kind)

    def connect(self, dst: Endpoint, kind="data", meta=None):
        return self._net.connect(self.addr, dst, kind=kind, meta=meta)

    def port_in_use(self, port) -> bool:
        return self._net.port_in_use(self.addr, port)


@dataclass
class NodeDef:
    addr: str
    repo: list[str] = field(default_factory=list)
    behavior: str = "cascade"


class Cluster:
    def __init__(self, net: SimNetwork, graphs: list[AbstractGraph],
                 manager_addr: str, nodes: list[NodeDef],
                 manager_config: ManagerConfig | None = None,
                 agent_config: AgentConfig | None = None,
                 journal_sink=None):
        self.net = net
        self.graphs = graphs
        self.manager_addr = manager_addr
        self.nodes = nodes
        net.add_node(manager_addr)
        self.manager = Manager(SimEnv(net, manager_addr), graphs,
                               manager_config or ManagerConfig(),
                               journal_sink=journal_sink)
        self.agents: dict[str, Agent] = {}
        self.runtimes: dict[tuple[str, int], ServiceRuntime] = {}
        self._behavior_names: dict[str, str] = {}
        for node in nodes:
            net.add_node(node.addr)
            repo = {name: self._repo_entry(name, node.behavior)
                    for name in node.repo}
            self.agents[node.addr] = Agent(
                SimEnv(net, node.addr), node.addr, manager_addr, repo,
                self._make_spawn(node.addr),
                agent_config or AgentConfig())

    def _graph_of(self, service: str) -> AbstractGraph:
        for g in self.graphs:
            if g.has_service(service):
                return g
        raise KeyError(service)

    def _repo_entry(self, service: str, behavior: str) -> RepositoryEntry:
        spec = self._graph_of(service).service(service)
        return RepositoryEntry(service, spec.sockets, spec.plugs, behavior)

    def _make_spawn(self, node_addr: str):
        def spawn(service, instance_id, sockets, plugs, bytecode):
            g = self._graph_of(service)
            plug_sockets = {e.plug: e.socket
                            for e in outgoing_connections(g, service)}
            config = InstanceConfig(
                service_name=service,
                instance_id=instance_id,
                node_addr=node_addr,
                socket_ports=tuple(sockets),
                plug_targets=tuple(plugs),
                plug_sockets=plug_sockets,
                agent_addr=node_addr)
            rt = ServiceRuntime(SimEnv(self.net, node_addr), config,
                                make_behavior(bytecode))
            try:
                rt.start()
            except PortInUse as e:
                raise SpawnError(f"bind failed: {e}") from e
            self.runtimes[(service, instance_id)] = rt
            return rt

        return spawn

    def start(self) -> None:
        self.manager.start()
        for agent in self.agents.values():
            agent.start()

    def kill_node(self, addr: str) -> None:
        self.net.kill_node(addr)
        agent = self.agents.get(addr)
        if agent is not None:
            agent.mark_dead()
        for rt in self.runtimes.values():
            if rt.config.node_addr == addr:
                rt.kill()

    def runtime(self, service: str, instance_id: int) -> ServiceRuntime:
        return self.runtimes[(service, instance_id)]

    def live_runtimes(self) -> list[ServiceRuntime]:
        return [rt for rt in self.runtimes.values() if rt.state == "running"]

    def has_pending(self) -> bool:
        if self.manager.has_pending():
            return True
        for agent in self.agents.values():
            if agent.alive and (agent._pending_health
                                or agent._session_routes
                                or agent._awaiting_ack
                                or any(agent._held_requests.values())):
                return True
        for rt in self.live_runtimes():
            if rt._pending_opens:
                return True
        return False
