import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ssmmp.cluster import Cluster, NodeDef
from ssmmp.graph import parse_graph_file
from ssmmp.transport import SimNetwork

FIXTURES = Path(__file__).parent.parent / "fixtures"

FIG1_TEXT = (FIXTURES / "fig1.graph").read_text()


@pytest.fixture
def fig1_graph():
    return parse_graph_file(FIG1_TEXT)


def make_cluster(graph, nodes, seed=1, horizon_ms=120_000, **kwargs):
    """Booted cluster with registered agents; caller drives the rest."""
    net = SimNetwork(seed=seed)
    net.horizon_ms = horizon_ms
    cluster = Cluster(net, [graph], "fd00::1",
                      [NodeDef(addr, repo) for addr, repo in nodes], **kwargs)
    cluster.start()
    net.run(until_ms=20)
    return net, cluster
