import ipaddress
from collections import Counter

import pytest

import oracles
from conftest import RANDOM_SEEDS, bundled_cfg, default_run, randomized_run
from icn5gc.control import (NoCandidate, NoSlice, SessionState, SliceDescriptor, SubscriptionProfile, Unresolved,
                            nrs_resolve, nssf_select_slice, smf_select_target_path)
from icn5gc.engine import Link, Role, Topology
from icn5gc.names import as_name
from icn5gc.scenario import run_scenario

CATALOG = {s: SliceDescriptor(s, ("ap",), ("ul",)) for s in ("S1", "S2")}


def test_nssf_selection():
    assert nssf_select_slice("S1", {"S1", "S2"}, CATALOG).slice_id == "S1"
    with pytest.raises(NoSlice):
        nssf_select_slice("S3", {"S1"}, CATALOG)
    assert nssf_select_slice(None, {"S1"}, CATALOG).slice_id == "S1"
    with pytest.raises(NoSlice):
        nssf_select_slice(None, {"S1", "S2"}, CATALOG)
    # allowed but not offered by the NSSF
    with pytest.raises(NoSlice):
        nssf_select_slice("S9", {"S9"}, CATALOG)


def test_slice_needs_candidates():
    with pytest.raises(ValueError):
        SliceDescriptor("S1", (), ("ul",))


def topo(links, roles):
    t = Topology()
    for n, r in roles.items():
        t.add_node(n, r)
    for a, b in links:
        t.add_link(Link(a, b, 1))
    return t


def test_target_path_follows_adjacency():
    t = topo([("t-ran", "ul-cl-2"), ("s-ran", "ul-cl-1"), ("ul-cl-1", "icn-ap-1"), ("ul-cl-2", "icn-ap-2"),
              ("icn-ap-1", "icn-ap-2")],
             {"t-ran": Role.RAN, "s-ran": Role.RAN, "ul-cl-1": Role.ULCL, "ul-cl-2": Role.ULCL,
              "icn-ap-1": Role.ICN_AP, "icn-ap-2": Role.ICN_AP})
    s = SliceDescriptor("S1", ("icn-ap-1", "icn-ap-2"), ("ul-cl-1", "ul-cl-2"))
    assert smf_select_target_path(t, "t-ran", s) == ("ul-cl-2", "icn-ap-2")
    assert smf_select_target_path(t, "s-ran", s) == ("ul-cl-1", "icn-ap-1")


def test_target_path_tie_goes_to_lowest_id():
    t = topo([("ran", "ul-cl-7"), ("ran", "ul-cl-4"), ("ul-cl-4", "ap"), ("ul-cl-7", "ap")],
             {"ran": Role.RAN, "ul-cl-4": Role.ULCL, "ul-cl-7": Role.ULCL, "ap": Role.ICN_AP})
    s = SliceDescriptor("S1", ("ap",), ("ul-cl-7", "ul-cl-4"))
    assert smf_select_target_path(t, "ran", s) == ("ul-cl-4", "ap")


def test_target_path_natural_order_tie():
    t = topo([("ran", "ul-cl-10"), ("ran", "ul-cl-9"), ("ul-cl-10", "ap"), ("ul-cl-9", "ap")],
             {"ran": Role.RAN, "ul-cl-10": Role.ULCL, "ul-cl-9": Role.ULCL, "ap": Role.ICN_AP})
    s = SliceDescriptor("S1", ("ap",), ("ul-cl-10", "ul-cl-9"))
    assert smf_select_target_path(t, "ran", s)[0] == "ul-cl-9"


def test_target_path_unreachable():
    t = topo([("ul-cl-1", "ap")], {"ran": Role.RAN, "ul-cl-1": Role.ULCL, "ap": Role.ICN_AP})
    with pytest.raises(NoCandidate):
        smf_select_target_path(t, "ran", SliceDescriptor("S1", ("ap",), ("ul-cl-1",)))
    t2 = topo([("ran", "ul-cl-1")], {"ran": Role.RAN, "ul-cl-1": Role.ULCL, "ap": Role.ICN_AP})
    with pytest.raises(NoCandidate):
        smf_select_target_path(t2, "ran", SliceDescriptor("S1", ("ap",), ("ul-cl-1",)))


def test_nrs_resolve():
    table = {as_name("/ue7"): "icn-ap-1"}
    assert nrs_resolve(table, "/ue7/live") == "icn-ap-1"
    assert nrs_resolve(table, "/ue7") == nrs_resolve(table, "/ue7")
    with pytest.raises(Unresolved):
        nrs_resolve(table, "/other")


def test_nrs_points_to_new_anchor_after_handover():
    before = run_scenario(bundled_cfg("handover"), max_time=3999)
    assert before.sim.nodes["nrs"].nrs_resolve("/car1/stream/1") == "icn-ap-1"
    after = default_run("handover")
    assert after.sim.nodes["nrs"].nrs_resolve("/car1/stream/1") == "icn-ap-2"


def test_registration_and_activation():
    sim = default_run("handover").sim
    ctx = sim.nodes["amf"].contexts["car1"]
    assert ctx.icn_authorized and ctx.serving_ran == "t-ran"
    rec = sim.nodes["smf"].records["s1"]
    assert rec.state is SessionState.ACTIVE
    assert (rec.serving_ulcl, rec.serving_icn_ap) == ("ul-cl-2", "icn-ap-2")
    assert len(rec.tunnel_chain) == 2


def test_establishment_message_counts():
    run = run_scenario(bundled_cfg("mec_icn").with_fleet(1))
    tags = Counter(d["tag"] for d in oracles.control_deliveries(run.sim.trace))
    assert tags["NssfQuery"] == 1
    assert tags["N4Update"] == 2 and tags["N4Ack"] == 2
    assert tags["IcnSessionUpdate"] == 1 and tags["IcnSessionAck"] == 1
    assert tags["SessionEstablishAccept"] == 1
    rec = run.sim.nodes["smf"].records["s1"]
    assert rec.state is SessionState.ACTIVE
    # both tunnels exist at RAN, UL-CL and anchor
    ran_t, core_t = rec.tunnel_chain
    assert ran_t in run.sim.nodes["ran-1"].state.tunnel_peer
    assert {ran_t, core_t} <= set(run.sim.nodes["ul-cl-1"].state.tunnels)
    assert core_t in run.sim.nodes["icn-ap-1"].state.tunnels


def test_unknown_subscriber_is_refused():
    run = run_scenario(bundled_cfg("handover").variant(subscriptions=[]))
    deliveries = oracles.control_deliveries(run.sim.trace)
    assert any(d["tag"] == "SubscriptionResponse" and d["nack"] == "NotSubscribed" for d in deliveries)
    assert not run.sim.nodes["amf"].contexts["car1"].icn_authorized
    assert run.report.sessions_refused == 1
    assert not oracles.tunnel_icn_pdus(run.sim.trace)


def test_policy_push_enables_icn_before_registration():
    cfg = bundled_cfg("unauthorized").with_fleet(1)
    push = {"at": 0, "node": "icn-af", "do": "policy_push", "profiles": {"car1": {"icn": True}}}
    run = run_scenario(cfg.variant(workload=[push] + list(cfg.workload)))
    assert run.sim.nodes["amf"].contexts["car1"].icn_authorized
    assert run.report.sessions_refused == 0


def test_policy_push_adds_slice():
    cfg = bundled_cfg("mec_icn").with_fleet(1)
    fleet = dict(cfg.fleet, slice="S2")
    push = {"at": 0, "node": "icn-af", "do": "policy_push",
            "profiles": {"car1": {"slices": ["S2"]}},
            "slices": [{"id": "S2", "ulcl": ["ul-cl-1"], "ap": ["icn-ap-1"]}]}
    run = run_scenario(cfg.variant(fleet=fleet, workload=[push] + list(cfg.workload)))
    assert run.sim.nodes["smf"].records["s1"].slice_id == "S2"
    assert run.report.requests_satisfied == 1


def test_empty_policy_push_changes_nothing():
    cfg = bundled_cfg("mec_icn").with_fleet(1)
    push = {"at": 0, "node": "icn-af", "do": "policy_push", "profiles": {}}
    run = run_scenario(cfg.variant(workload=[push] + list(cfg.workload)))
    base = run_scenario(cfg)
    assert run.sim.nodes["pcf-udm"].profiles == base.sim.nodes["pcf-udm"].profiles
    assert isinstance(next(iter(run.sim.nodes["pcf-udm"].profiles.values())), SubscriptionProfile)


def test_slice_not_offered():
    subs = [{"ue": "car1", "icn": True, "slices": ["S9"]}]
    run = run_scenario(bundled_cfg("handover").variant(subscriptions=subs))
    deliveries = oracles.control_deliveries(run.sim.trace)
    assert any(d["tag"] == "NssfResponse" and d["nack"] == "NoSlice" for d in deliveries)
    assert "s1" not in run.sim.nodes["smf"].records or \
        run.sim.nodes["smf"].records["s1"].state is SessionState.RELEASED


def _with_nack(name, node_id, tag):
    cfg = bundled_cfg(name)
    nodes = [dict(n, nack=[tag]) if n["id"] == node_id else n for n in cfg.nodes]
    return run_scenario(cfg.variant(nodes=nodes))


@pytest.mark.parametrize("node_id,tag", [("icn-ap-2", "IcnSessionUpdate@6"), ("icn-ap-1", "IcnSessionUpdate@6"),
                                         ("ul-cl-2", "N4Update@4"), ("ul-cl-2", "TunnelSetup@8")])
def test_handover_abort_keeps_source_path(node_id, tag):
    run = _with_nack("handover", node_id, tag)
    rep = run.report
    assert rep.handover.outcome == "aborted"
    assert rep.interests_lost == 0 and rep.requests_satisfied == rep.requests_issued
    rec = run.sim.nodes["smf"].records["s1"]
    assert (rec.serving_ulcl, rec.serving_icn_ap, rec.state) == ("ul-cl-1", "icn-ap-1", SessionState.ACTIVE)
    assert run.sim.nodes["amf"].contexts["car1"].serving_ran == "s-ran"
    # nothing prepared on the target side survives the rollback
    assert run.sim.nodes["ul-cl-2"].state.rules_for_session("s1") == []
    assert not run.sim.nodes["ul-cl-2"].state.tunnels
    assert not run.sim.nodes["icn-ap-2"].state.tunnels
    assert not run.sim.nodes["icn-ap-1"].forwarder.labels
    assert not run.sim.nodes["t-ran"].state.ue_tunnels
    assert 10 not in rep.handover.step_sequence()


def test_same_anchor_installs_no_label():
    run = default_run("handover_same_ulcl")
    steps = run.report.handover.golden()
    assert not [s for s in steps if s[0] == 6]
    assert not any("outcome=label" in line for line in run.sim.trace)
    rec = run.sim.nodes["smf"].records["s1"]
    assert (rec.serving_ulcl, rec.serving_icn_ap) == ("ul-cl-1", "icn-ap-1")


def test_handover_message_count_stable_across_seeds():
    counts = {name: {randomized_run(name, s).report.handover.messages for s in RANDOM_SEEDS[:20]}
              for name in ("handover", "handover_same_ulcl", "handover_colocated")}
    assert counts == {"handover": {32}, "handover_same_ulcl": {20}, "handover_colocated": {32}}


def test_ip_handover_moves_address_and_dns():
    run = default_run("handover_ip")
    rec = run.sim.nodes["smf"].records["s1"]
    assert rec.kind == "ip" and rec.serving_icn_ap == "icn-ap-2"
    assert ipaddress.IPv4Address(rec.addr) in ipaddress.ip_network("10.2.0.0/24")
    dns = run.sim.nodes["dns"]
    assert "car1" in dns.dns_records
    assert not run.sim.nodes["icn-ap-1"].state.ip_hosts
