import pytest
from hypothesis import given
from hypothesis import strategies as st

from icn5gc.engine import (Link, Metrics, NoLink, Node, Role, Simulator, TimeTravel, Topology, node_sort_key)


class Recorder(Node):
    def __init__(self, node_id):
        super().__init__(node_id)
        self.seen = []

    def on_message(self, src, msg):
        self.seen.append((self.sim.clock, src, msg))

    def on_timer(self, tag, data):
        self.seen.append((self.sim.clock, "timer", tag))

    def on_action(self, action):
        self.seen.append((self.sim.clock, "action", action["do"]))


def two_nodes(latency=5, loss=0.0, seed=0):
    topo = Topology()
    topo.add_node("a", Role.RAN)
    topo.add_node("b", Role.ULCL)
    topo.add_link(Link("a", "b", latency, loss))
    sim = Simulator(topo, seed)
    return sim, sim.add(Recorder("a")), sim.add(Recorder("b"))


def test_empty_run():
    sim = Simulator(Topology())
    summary = sim.run_to_quiescence()
    assert summary.final_clock == 0 and summary.quiescent and summary.counters == {}


def test_link_latency():
    sim, a, b = two_nodes(5)
    a.send("b", "hello")
    sim.run_to_quiescence()
    assert b.seen == [(5, "a", "hello")]


def test_send_from_later_clock():
    sim, a, b = two_nodes(3)
    sim.at(10, "a", "action", {"do": "x"})
    sim.run_to_quiescence()
    sim.send("a", "b", "m")
    sim.run_to_quiescence()
    assert b.seen[-1][0] == 13


def test_missing_link():
    sim, a, b = two_nodes()
    sim.topology.add_node("c", Role.ULCL)
    with pytest.raises(NoLink):
        sim.send("a", "c", "m")


def test_total_loss():
    sim, a, b = two_nodes(loss=1.0)
    for _ in range(3):
        a.send("b", "m")
    sim.run_to_quiescence()
    assert b.seen == [] and sim.lost == 3
    assert sim.metrics.total("link_drops") == 3


def test_time_travel_rejected():
    sim, a, b = two_nodes()
    sim.at(10, "a", "action", {"do": "x"})
    sim.run_to_quiescence()
    with pytest.raises(TimeTravel):
        sim.at(9, "a", "action", {"do": "y"})


def test_same_time_fifo_and_now_runs_after_queued():
    sim, a, b = two_nodes()

    class Chain(Recorder):
        def on_action(self, action):
            super().on_action(action)
            if action["do"] == "first":
                self.sim.at(self.sim.clock, "a", "action", {"do": "spawned"})

    chain = sim.add(Chain("a"))
    for tag in ("first", "second", "third"):
        sim.at(0, "a", "action", {"do": tag})
    sim.run_to_quiescence()
    assert [s[2] for s in chain.seen] == ["first", "second", "third", "spawned"]


def test_max_time_leaves_nonquiescent():
    sim, a, b = two_nodes()
    sim.at(50, "a", "action", {"do": "late"})
    summary = sim.run_to_quiescence(max_time=10)
    assert not summary.quiescent and summary.pending == 1
    assert sim.metrics.total("nonquiescent") == 1


def test_timers():
    sim, a, b = two_nodes()
    sim.at(4, "a", "action", {"do": "x"})
    sim.run_to_quiescence()
    sim.set_timer("a", 6, "tick")
    sim.run_to_quiescence()
    assert a.seen[-1] == (10, "timer", "tick")


def test_node_must_be_in_topology():
    sim = Simulator(Topology())
    with pytest.raises(KeyError):
        sim.add(Recorder("ghost"))


def test_link_validation():
    with pytest.raises(ValueError):
        Link("a", "b", -1)
    with pytest.raises(ValueError):
        Link("a", "b", 1, 1.5)
    topo = Topology()
    topo.add_node("a", Role.RAN)
    with pytest.raises(KeyError):
        topo.add_link(Link("a", "zz", 1))


def test_metrics():
    m = Metrics()
    m.inc("x", node="a")
    m.inc("x", 2, node="b")
    assert m.total("x") == 3 and m.total("x", node="b") == 2
    assert m.records() == [("x", "node=a", 1), ("x", "node=b", 2)]
    with pytest.raises(ValueError):
        m.inc("x", -1)


def test_natural_sort():
    assert sorted(["ul-cl-10", "ul-cl-2", "ul-cl-1"], key=node_sort_key) == ["ul-cl-1", "ul-cl-2", "ul-cl-10"]


def chain_topology():
    topo = Topology()
    for n, r in [("ue", Role.UE), ("ran", Role.RAN), ("u1", Role.ULCL), ("u2", Role.ULCL),
                 ("ap", Role.ICN_AP), ("smf", Role.SMF)]:
        topo.add_node(n, r)
    for a, b in [("ue", "ran"), ("ran", "u1"), ("ran", "u2"), ("u1", "ap"), ("u2", "ap")]:
        topo.add_link(Link(a, b, 1))
    topo.add_link(Link("smf", "ap", 1, plane="control"))
    return topo


def test_hop_count_and_next_hop():
    topo = chain_topology()
    assert topo.hop_count("ran", "ap") == 2
    # control links are not part of the data graph
    assert topo.hop_count("smf", "ap") is None
    # two equal paths: lowest id wins
    assert topo.next_hop("ran", "ap", {Role.ULCL}) == "u1"
    assert topo.next_hop("ran", "ap", {Role.RAN}) is None
    assert topo.neighbours("ran") == ["u1", "u2", "ue"]
    assert topo.neighbours("ap", plane="control") == ["smf"]


def _random_run(seed, latencies):
    topo = Topology()
    names = [f"n{i}" for i in range(len(latencies) + 1)]
    for n in names:
        topo.add_node(n, Role.DN_ROUTER)
    for i, lat in enumerate(latencies):
        topo.add_link(Link(names[i], names[i + 1], lat, loss_rate=0.3))

    class Relay(Node):
        def on_message(self, src, msg):
            nxt = f"n{int(self.node_id[1:]) + 1}"
            if self.sim.topology.has_link(self.node_id, nxt):
                self.send(nxt, msg)

        def on_action(self, action):
            self.send("n1", action["do"])

    sim = Simulator(topo, seed)
    for n in names:
        sim.add(Relay(n))
    for t in range(5):
        sim.at(t, "n0", "action", {"do": f"m{t}"})
    sim.run_to_quiescence()
    return sim.trace


@given(st.integers(0, 2**32), st.lists(st.integers(0, 9), min_size=1, max_size=5))
def test_same_seed_same_trace(seed, latencies):
    assert _random_run(seed, latencies) == _random_run(seed, latencies)


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 3)), max_size=30))
def test_events_run_in_time_then_insertion_order(plan):
    sim, a, b = two_nodes()
    for i, (t, _) in enumerate(plan):
        sim.at(t, "a", "action", {"do": i})
    sim.run_to_quiescence()
    order = [s[2] for s in a.seen]
    assert order == sorted(range(len(plan)), key=lambda i: (plan[i][0], i))
