"""Simulated fabric tests: ordering, determinism, failures, port rules."""

import pytest

from ssmmp.transport import (ChannelClosed, ConnectionRefused, Endpoint,
                             NodeDown, PortInUse, SimNetwork)


def _two_nodes(seed=1):
    net = SimNetwork(seed=seed)
    net.add_node("fd00::a")
    net.add_node("fd00::b")
    return net


def _echo_listener(net, addr, port, inbox):
    def on_accept(channel, info):
        channel.set_handlers(
            lambda ch, data: inbox.append(data),
            lambda ch: inbox.append(b"<closed>"))
    return net.listen(addr, port, on_accept)


def test_delivery_in_order_exactly_once():
    net = _two_nodes()
    inbox = []
    _echo_listener(net, "fd00::b", 9000, inbox)
    ch, m, l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    for i in range(20):
        ch.send(bytes([i]))
    net.run()
    assert inbox == [bytes([i]) for i in range(20)]


def test_connect_allocates_distinct_session_ports():
    net = _two_nodes()
    _echo_listener(net, "fd00::b", 9000, [])
    ls = set()
    for _ in range(100):
        _ch, m, l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
        assert l != 9000
        ls.add(l)
    assert len(ls) == 100


def test_connect_errors():
    net = _two_nodes()
    with pytest.raises(ConnectionRefused):
        net.connect("fd00::a", Endpoint("fd00::b", 9000))
    net.kill_node("fd00::b")
    with pytest.raises(NodeDown):
        net.connect("fd00::a", Endpoint("fd00::b", 9000))


def test_listen_port_conflict():
    net = _two_nodes()
    net.listen("fd00::b", 9000, lambda ch, info: None)
    with pytest.raises(PortInUse):
        net.listen("fd00::b", 9000, lambda ch, info: None)
    assert net.port_in_use("fd00::b", 9000)


def test_kill_node_closes_channels_and_listeners():
    net = _two_nodes()
    inbox = []
    closed = []
    _echo_listener(net, "fd00::b", 9000, inbox)
    ch, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    ch.set_handlers(lambda c, d: None, lambda c: closed.append("a-side"))
    net.run()
    net.kill_node("fd00::b")
    net.run()
    assert closed == ["a-side"]
    assert not ch.is_open
    with pytest.raises(ChannelClosed):
        ch.send(b"x")


def test_break_link_closes_on_send_and_heals():
    net = _two_nodes()
    inbox = []
    _echo_listener(net, "fd00::b", 9000, inbox)
    ch, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    net.run()
    net.break_link("fd00::a", "fd00::b")
    with pytest.raises(ChannelClosed):
        ch.send(b"x")
    net.run()
    assert inbox[-1] == b"<closed>"
    with pytest.raises(NodeDown):
        net.connect("fd00::a", Endpoint("fd00::b", 9000))
    net.heal_link("fd00::a", "fd00::b")
    ch2, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    ch2.send(b"y")
    net.run()
    assert b"y" in inbox


def _scripted_run(seed):
    net = _two_nodes(seed)
    inbox = []
    _echo_listener(net, "fd00::b", 9000, inbox)
    for i in range(3):
        ch, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
        ch.send(f"hello-{i}".encode())
    net.run()
    return [(e.kind, str(e.src), str(e.dst), e.detail) for e in net.events]


def test_equal_seeds_equal_traces():
    assert _scripted_run(5) == _scripted_run(5)
    # a different seed is allowed to differ, but must deliver the same bytes
    assert len(_scripted_run(5)) == len(_scripted_run(6))


def test_timers_fire_in_order_and_cancel():
    net = SimNetwork(seed=0)
    fired = []
    net.schedule(10, lambda: fired.append("b"))
    net.schedule(5, lambda: fired.append("a"))
    t = net.schedule(20, lambda: fired.append("never"))
    t.cancel()
    net.run()
    assert fired == ["a", "b"]


def test_repeating_timer_respects_horizon():
    net = SimNetwork(seed=0)
    net.horizon_ms = 50
    fired = []
    net.schedule_repeating(10, lambda: fired.append(net.now_ms()))
    net.run()
    assert fired == [10, 20, 30, 40, 50]


def test_schedule_abs_runs_before_same_time_net_events():
    net = _two_nodes()
    order = []
    _echo_listener(net, "fd00::b", 9000, [])

    def timeline():
        order.append("timeline")

    ch, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    ch.send(b"x")  # delivery event lands at t=1
    net.schedule_abs(1, timeline)
    net.step()
    assert order == ["timeline"]


def test_accept_before_first_delivery():
    # data sent immediately after connect must not outrun the accept
    net = _two_nodes()
    order = []

    def on_accept(channel, info):
        order.append("accept")
        channel.set_handlers(lambda ch, d: order.append("data"),
                             lambda ch: None)

    net.listen("fd00::b", 9000, on_accept)
    ch, _m, _l = net.connect("fd00::a", Endpoint("fd00::b", 9000))
    ch.send(b"x")
    net.run()
    assert order == ["accept", "data"]
