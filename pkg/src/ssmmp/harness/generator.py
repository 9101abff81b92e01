"""Seeded random scenarios: graphs, node layouts, and event timelines.

Two profiles: "establish_close" drives session opens and closes only;
"mixed" adds explicit scaling, user requests through the gateway, small time
jumps, and (sometimes) a node failure at the end. Everything is a pure
function of the seed.
"""

from __future__ import annotations

import random

from ..cluster import NodeDef
from ..graph import (AbstractConnection, AbstractGraph, ServiceKind,
                     ServiceSpec, build_graph)
from .scenario import Scenario, ScenarioEvent


def random_graph(rng: random.Random, max_services: int = 8) -> AbstractGraph:
    n = rng.randint(3, max_services)
    n_baas = 1 if n < 5 else rng.randint(1, 2)
    n_regular = n - 1 - n_baas
    names = (["G1"] + [f"R{i}" for i in range(1, n_regular + 1)]
             + [f"D{i}" for i in range(1, n_baas + 1)])
    kinds = ([ServiceKind.GATEWAY] + [ServiceKind.REGULAR] * n_regular
             + [ServiceKind.BAAS] * n_baas)
    plugs: dict[str, list[str]] = {name: [] for name in names}
    edges: list[AbstractConnection] = []
    plug_seq = 0
    # Every non-gateway vertex gets one edge from an earlier non-baas vertex,
    # then a few extra forward edges (parallel ones included).
    for idx in range(1, n):
        src_idx = rng.randrange(0, min(idx, 1 + n_regular))
        plug_seq += 1
        plug = f"P{plug_seq}"
        plugs[names[src_idx]].append(plug)
        edges.append(AbstractConnection(
            names[src_idx], plug, names[idx], f"S{names[idx]}"))
    for _ in range(rng.randint(0, n)):
        src_idx = rng.randrange(0, 1 + n_regular)
        dst_idx = rng.randrange(max(src_idx + 1, 1), n)
        plug_seq += 1
        plug = f"P{plug_seq}"
        plugs[names[src_idx]].append(plug)
        edges.append(AbstractConnection(
            names[src_idx], plug, names[dst_idx], f"S{names[dst_idx]}"))
    specs = []
    for name, kind in zip(names, kinds):
        fixed = (((f"S{name}", 80),) if kind is ServiceKind.GATEWAY else ())
        specs.append(ServiceSpec(name, kind, (f"S{name}",),
                                 tuple(plugs[name]), fixed))
    return build_graph(specs, edges)


def _layout(rng: random.Random, graph: AbstractGraph) -> list[NodeDef]:
    n_nodes = rng.randint(1, 3)
    nodes = [NodeDef(f"fd00::a{i}", []) for i in range(1, n_nodes + 1)]
    for name in graph.service_names():
        hosts = rng.sample(nodes, rng.randint(1, n_nodes))
        for node in hosts:
            node.repo.append(name)
    return nodes


def generate_scenario(seed: int, profile: str = "mixed",
                      max_sessions: int = 20) -> Scenario:
    rng = random.Random(seed)
    graph = random_graph(rng)
    nodes = _layout(rng, graph)
    events: list[ScenarioEvent] = []
    t = 100

    sources = [v.name for v in graph.vertices
               if v.plugs and v.kind is not ServiceKind.BAAS]
    started: list[str] = []
    for name in rng.sample(sources, rng.randint(1, len(sources))):
        events.append(ScenarioEvent(t, "exec_instance", (name,)))
        started.append(name)
        t += 50

    open_counts: dict[tuple[str, str], int] = {}
    n_opens = rng.randint(3, max_sessions)
    for _ in range(n_opens):
        t += rng.randint(20, 80)
        roll = rng.random()
        if profile == "mixed" and roll < 0.10:
            events.append(ScenarioEvent(
                t, "advance_time", (str(rng.randint(500, 3000)),)))
            continue
        if profile == "mixed" and roll < 0.22 and graph.vertices[0].name in sum(
                (n.repo for n in nodes), []):
            events.append(ScenarioEvent(t, "user_request",
                                        (graph.vertices[0].name,)))
            continue
        if open_counts and roll < 0.45:
            key = rng.choice(sorted(open_counts))
            events.append(ScenarioEvent(t, "close_session", key))
            open_counts[key] -= 1
            if open_counts[key] == 0:
                del open_counts[key]
            continue
        service = rng.choice(started)
        plug = rng.choice(graph.service(service).plugs)
        events.append(ScenarioEvent(t, "open_session", (service, plug)))
        open_counts[(service, plug)] = open_counts.get((service, plug), 0) + 1

    if profile == "mixed" and rng.random() < 0.25 and len(nodes) > 1:
        t += 200
        victim = rng.choice(nodes[1:]).addr
        events.append(ScenarioEvent(t, "kill_agent", (victim,)))
        t += 600
        events.append(ScenarioEvent(t, "expect", ("agent_isolated", victim)))
        events.append(ScenarioEvent(
            t, "expect", ("no_session_touching", victim)))

    t += 500
    events.append(ScenarioEvent(t, "expect", ("replay_matches",)))
    return Scenario(f"gen-{profile}-{seed}", graph, "<generated>",
                    "fd00::1", nodes, events)
