import copy

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import default_run
from icn5gc.forwarder import FaceKind, Forwarder
from icn5gc.names import (Data, FiveTuple, Interest, IpPacket, Nack, Protocol, RadioFrame, TunneledPacket,
                          addr, as_name, encapsulate)
from icn5gc.userplane import (DL, UL, ClassifierRule, DanglingTunnel, IcnApState, N4Delta, NoMatch,
                              NoSessionTunnel, NotAttached, RanState, RuleMatch, UlClState, icnap_uplink,
                              n4_update, process_nack, ran_relay, ulcl_classify)


def ip(dst, src="10.0.0.1", dport=80, proto=Protocol.UDP):
    return IpPacket(FiveTuple(addr(src), addr(dst), 1000, dport, proto))


def ulcl_with(*rules, tunnels=("T-icn", "T-ip", "T1", "T2")):
    state = UlClState()
    n4_update(N4Delta(add_tunnels={t: "peer" for t in tunnels},
                      add_rules=[(d, r) for d, r in rules]), state)
    return state


def test_classify_equality_match():
    state = ulcl_with((UL, ClassifierRule(RuleMatch(dst_addr=addr("10.0.0.5")), "T-icn")))
    assert ulcl_classify(ip("10.0.0.5"), UL, state) == "T-icn"
    with pytest.raises(NoMatch):
        ulcl_classify(ip("10.0.0.9"), UL, state)
    # direction matters
    with pytest.raises(NoMatch):
        ulcl_classify(ip("10.0.0.5"), DL, state)


def test_classify_priority_wins():
    state = ulcl_with((UL, ClassifierRule(RuleMatch(dst_addr=addr("10.0.0.5")), "T1", priority=5)),
                      (UL, ClassifierRule(RuleMatch(dst_port=80), "T2", priority=9)))
    assert ulcl_classify(ip("10.0.0.5"), UL, state) == "T2"


def test_classify_uses_outer_header_of_tunneled_icn():
    state = ulcl_with((DL, ClassifierRule(RuleMatch(dst_addr=addr("10.1.0.7"), dst_port=6363), "T1")))
    outer = FiveTuple(addr("10.1.0.1"), addr("10.1.0.7"), 6363, 6363)
    tp = TunneledPacket("T9", Interest(as_name("/a"), 1), outer)
    assert ulcl_classify(tp, DL, state) == "T1"
    with pytest.raises(NoMatch):
        ulcl_classify(TunneledPacket("T9", Interest(as_name("/a"), 1)), DL, state)


def test_n4_tunnel_before_rule():
    state = UlClState()
    n4_update(N4Delta(add_tunnels={"T2": "ap"}), state)
    n4_update(N4Delta(add_rules=[(UL, ClassifierRule(RuleMatch(), "T2"))]), state)
    assert ulcl_classify(ip("1.2.3.4"), UL, state) == "T2"


def test_n4_dangling_leaves_state_unchanged():
    state = ulcl_with((UL, ClassifierRule(RuleMatch(), "T1", session="s1")))
    before = copy.deepcopy(state.__dict__)
    with pytest.raises(DanglingTunnel):
        n4_update(N4Delta(add_tunnels={"T3": "x"},
                          add_rules=[(UL, ClassifierRule(RuleMatch(dst_port=1), "T9"))]), state)
    assert state.__dict__ == before
    # removing a tunnel that a rule still uses is rejected too
    with pytest.raises(DanglingTunnel):
        n4_update(N4Delta(remove_tunnels=["T1"]), state)


def test_n4_remove_session():
    state = ulcl_with((UL, ClassifierRule(RuleMatch(), "T1", session="s1")),
                      (DL, ClassifierRule(RuleMatch(), "T2", session="s1")),
                      (UL, ClassifierRule(RuleMatch(dst_port=9), "T2", session="s2")))
    n4_update(N4Delta(remove_rules_of=["s1"], remove_tunnels=["T1"]), state)
    assert state.rules_for_session("s1") == []
    assert len(state.rules_for_session("s2")) == 1
    assert "T1" not in state.tunnels


ft_strategy = st.builds(FiveTuple, st.integers(1, 3), st.integers(1, 3), st.integers(0, 2), st.integers(0, 2),
                        st.sampled_from(list(Protocol)))
match_strategy = st.builds(RuleMatch, st.none() | st.integers(1, 3), st.none() | st.integers(1, 3),
                           st.none() | st.integers(0, 2), st.none() | st.integers(0, 2),
                           st.none() | st.sampled_from(list(Protocol)))


@given(st.lists(st.tuples(match_strategy, st.sampled_from(["T1", "T2"]), st.integers(0, 3)), max_size=8),
       ft_strategy)
def test_classify_matches_brute_force(rules, ft):
    state = ulcl_with(*[(UL, ClassifierRule(m, t, p)) for m, t, p in rules])
    # reference: the surviving rule per (match, priority) is the last one added, ordered by first insertion
    survivors = {}
    for i, (m, t, p) in enumerate(rules):
        first = survivors.get((m, p), (i, None))[0]
        survivors[(m, p)] = (first, t)
    hits = [(-p, first, t) for (m, p), (first, t) in survivors.items()
            if all(w is None or w == g for w, g in zip(
                (m.src_addr, m.dst_addr, m.src_port, m.dst_port, m.protocol),
                (ft.src_addr, ft.dst_addr, ft.src_port, ft.dst_port, ft.protocol)))]
    pkt = IpPacket(ft)
    if not hits:
        with pytest.raises(NoMatch):
            ulcl_classify(pkt, UL, state)
    else:
        assert ulcl_classify(pkt, UL, state) == min(hits)[2]


def anchor(cs=4):
    fwd = Forwarder("icn-ap-1", cs_capacity=cs, is_anchor=True)
    n6 = fwd.add_face(FaceKind.LINK, "dn-router")
    fwd.add_route(as_name("/traffic"), n6)
    state = IcnApState(fwd)
    n4_update(N4Delta(add_tunnels={"T1": "ul-cl-1", "T2": "ul-cl-1"}), state)
    return state, n6


def test_anchor_miss_goes_to_n6_then_back_on_tunnel():
    state, n6 = anchor()
    act = icnap_uplink(encapsulate(Interest(as_name("/traffic/seg1"), 1), "T1"), state, 0)
    assert act.outcome == "forwarded" and act.upstream[0][0] == n6
    back = state.forwarder.process_data(Data(as_name("/traffic/seg1")), n6, 5)
    assert [(f.kind, f.ref) for f, _ in back.send] == [(FaceKind.TUNNEL, "T1")]


def test_anchor_cache_hit_answers_on_same_tunnel():
    state, n6 = anchor()
    icnap_uplink(encapsulate(Interest(as_name("/traffic/seg1"), 1), "T1"), state, 0)
    state.forwarder.process_data(Data(as_name("/traffic/seg1")), n6, 5)
    act = icnap_uplink(encapsulate(Interest(as_name("/traffic/seg1"), 2), "T2"), state, 6)
    assert act.outcome == "cs_hit"
    assert [(f.ref, type(p).__name__) for f, p in act.send] == [("T2", "Data")]


def test_anchor_removing_tunnel_drops_its_face():
    state, _ = anchor()
    icnap_uplink(encapsulate(Interest(as_name("/traffic/x"), 1), "T1"), state, 0)
    n4_update(N4Delta(remove_tunnels=["T1"]), state)
    assert state.forwarder.face_for(FaceKind.TUNNEL, "T1") is None
    assert not state.forwarder.pit
    with pytest.raises(DanglingTunnel):
        n4_update(N4Delta(dl_tunnels={"s1": "T7"}), state)


def test_anchor_rejects_non_icn():
    state, _ = anchor()
    with pytest.raises(TypeError):
        icnap_uplink(encapsulate(ip("1.1.1.1"), "T1"), state, 0)


def test_nack_fans_out_to_downstream():
    state, n6 = anchor()
    i1 = Interest(as_name("/traffic/none"), 1)
    icnap_uplink(encapsulate(i1, "T1"), state, 0)
    icnap_uplink(encapsulate(Interest(as_name("/traffic/none"), 2), "T2"), state, 1)
    act = process_nack(state.forwarder, Nack(i1), n6, 2)
    assert act.outcome == "nacked"
    assert [(f.ref, i.nonce) for f, i in act.nack] == [("T1", 1), ("T2", 2)]
    assert process_nack(state.forwarder, Nack(i1), n6, 3).outcome == "unsolicited"


def test_ran_relay():
    state = RanState()
    state.attached_ues.add("car1")
    state.install("car1", "s1", "T-ran1", "ul-cl-1", None)
    pdu = Interest(as_name("/traffic/a"), 1)
    assert ran_relay(pdu, "car1", "s1", UL, state) == TunneledPacket("T-ran1", pdu)
    assert ran_relay(pdu, "car1", "s1", DL, state) == RadioFrame("car1", "s1", pdu)
    with pytest.raises(NotAttached):
        ran_relay(pdu, "car9", "s1", UL, state)
    with pytest.raises(NoSessionTunnel):
        ran_relay(pdu, "car1", "s2", UL, state)
    state.install("car1", "s1", "T-ran2", "ul-cl-2", None)
    assert ran_relay(pdu, "car1", "s1", UL, state).tunnel_id == "T-ran2"
    assert "T-ran1" not in state.tunnel_peer
    assert state.remove("car1", "s1") == "T-ran2"


def test_target_ran_relays_to_new_ulcl_after_handover():
    sim = default_run("handover").sim
    t_ran = sim.nodes["t-ran"].state
    tid = t_ran.ue_tunnels[("car1", "s1")]
    assert t_ran.tunnel_peer[tid] == "ul-cl-2"
    assert not sim.nodes["s-ran"].state.ue_tunnels
    assert sim.nodes["ul-cl-1"].state.rules_for_session("s1") == []


def test_old_anchor_label_live_during_handover():
    run = default_run("handover")
    trace = run.sim.trace
    # consumer Interests that reached icn-ap-1 while the label was up went to icn-ap-2
    labelled = [line.split()[6] for line in trace if line.split()[2] == "icn-ap-1" and "outcome=label" in line]
    assert labelled
    redirected = {line.split()[6][5:] for line in trace
                  if " icn-ap-2 recv from=icn-ap-1 Interest " in line}
    assert set(labelled) <= redirected
