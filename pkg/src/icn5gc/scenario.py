"""Scenario files: loading, validation, building a simulation and running it.

A scenario is a YAML document (extension ``.scenario``). See the README
for the schema; the bundled fixtures under ``icn5gc/scenarios`` are
complete examples.
"""

from __future__ import annotations

import copy
import ipaddress
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple

import yaml

from .control import (
    AmfNode, IcnAfNode, IcnSmfNode, NrsNode, NssfNode, PcfUdmNode, SliceDescriptor, SmfNode,
    SubscriptionProfile,
)
from .engine import Link, Role, Simulator, Topology, node_sort_key
from .hosts import AppServerNode, UeNode
from .messages import ControlMessage
from .names import addr, as_name
from .report import HandoverReport, Report, StepRecord
from .userplane import DN_ROLES, DnRouterNode, IcnApNode, IcnNode, RanNode, UlClNode

MODES = ("IP_MEC", "ICN_MEC", "HANDOVER")

DEFAULTS = {"latency": 2, "control_latency": 1, "lifetime": 4000, "cs_capacity": 0, "alg_delay": 1}

# action -> roles allowed to perform it
ACTIONS = {
    "ue_attach": (Role.UE,),
    "request": (Role.UE, Role.APP_SERVER),
    "stream": (Role.APP_SERVER,),
    "trigger_handover": (Role.UE,),
    "detach": (Role.UE,),
    "sensor": (Role.APP_SERVER,),
    "policy_push": (Role.ICN_AF,),
}

SINGLETONS = (Role.AMF, Role.SMF, Role.ICN_SMF, Role.NSSF, Role.PCF_UDM, Role.NRS)


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, message: str, location: str = ""):
        super().__init__(f"{location}: {message}" if location else message)
        self.location = location


@dataclass
class ScenarioConfig:
    name: str
    mode: str
    seed: int = 0
    max_time: int = 60000
    session_kind: str = "icn"
    defaults: Dict = field(default_factory=lambda: dict(DEFAULTS))
    randomize_latency: Optional[Tuple[int, int]] = None
    colocated_ran_ulcl: bool = False
    auto_control: bool = True
    dns: Optional[str] = None
    nodes: List[dict] = field(default_factory=list)
    links: List[dict] = field(default_factory=list)
    subscriptions: List[dict] = field(default_factory=list)
    slices: List[dict] = field(default_factory=list)
    workload: List[dict] = field(default_factory=list)
    fleet: Optional[dict] = None
    source: Optional[str] = None

    def with_fleet(self, count: int) -> "ScenarioConfig":
        cfg = copy.deepcopy(self)
        if cfg.fleet is None:
            raise ValidationError("scenario has no fleet section", "fleet")
        cfg.fleet["count"] = count
        return cfg

    def variant(self, **changes) -> "ScenarioConfig":
        cfg = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(cfg, k, v)
        return cfg


# loading ------------------------------------------------------------------

def bundled(name: str) -> str:
    """Filesystem path of a bundled scenario fixture."""
    return str(resources.files("icn5gc") / "scenarios" / name)


def load_scenario(path: str) -> ScenarioConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return parse_scenario(text, source=path)


def parse_scenario(text: str, source: str = "<string>") -> ScenarioConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark else source
        raise ParseError(f"{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{source}: top level must be a mapping")
    known = {"name", "mode", "seed", "max_time", "session_kind", "defaults", "randomize_latency",
             "colocated_ran_ulcl", "control", "dns", "nodes", "links", "subscriptions", "slices",
             "workload", "fleet"}
    for key in doc:
        if key not in known:
            raise ValidationError(f"unknown key {key!r}", key)
    defaults = dict(DEFAULTS)
    defaults.update(doc.get("defaults") or {})
    rl = doc.get("randomize_latency")
    cfg = ScenarioConfig(
        name=str(doc.get("name", source)),
        mode=str(doc.get("mode", "")),
        seed=doc.get("seed", 0),
        max_time=doc.get("max_time", 60000),
        session_kind=doc.get("session_kind", "icn"),
        defaults=defaults,
        randomize_latency=tuple(rl) if rl is not None else None,
        colocated_ran_ulcl=bool(doc.get("colocated_ran_ulcl", False)),
        auto_control=doc.get("control", "auto") == "auto",
        dns=doc.get("dns"),
        nodes=[dict(n) for n in doc.get("nodes") or []],
        links=[_link_entry(l, i) for i, l in enumerate(doc.get("links") or [])],
        subscriptions=[dict(s) for s in doc.get("subscriptions") or []],
        slices=[dict(s) for s in doc.get("slices") or []],
        workload=[dict(w) for w in doc.get("workload") or []],
        fleet=dict(doc["fleet"]) if doc.get("fleet") else None,
        source=source,
    )
    validate(cfg)
    return cfg


def _link_entry(entry, i: int) -> dict:
    if isinstance(entry, (list, tuple)):
        if len(entry) not in (2, 3):
            raise ValidationError("link list form is [a, b] or [a, b, latency]", f"links[{i}]")
        out = {"a": entry[0], "b": entry[1]}
        if len(entry) == 3:
            out["latency"] = entry[2]
        return out
    if isinstance(entry, dict):
        return dict(entry)
    raise ValidationError("link must be a list or mapping", f"links[{i}]")


# fleet expansion ------------------------------------------------------------

def resolve(cfg: ScenarioConfig):
    """Return (nodes, links, subscriptions, workload) with the fleet expanded."""
    nodes = [dict(n) for n in cfg.nodes]
    links = [dict(l) for l in cfg.links]
    subs = [dict(s) for s in cfg.subscriptions]
    workload = [dict(w) for w in cfg.workload]
    fleet = cfg.fleet
    if fleet:
        kind = fleet.get("kind", "ip" if cfg.mode == "IP_MEC" else "icn")
        req = fleet.get("request") or {}
        for i in range(1, int(fleet.get("count", 0)) + 1):
            ue = str(fleet.get("id", "car{i}")).format(i=i)
            node = {"id": ue, "role": "UE", "sessions": [{"kind": kind, "slice": fleet.get("slice")}],
                    "produce": False}
            nodes.append(node)
            links.append({"a": ue, "b": fleet["ran"]})
            subs.append({"ue": ue, "icn": fleet.get("icn", True),
                         "slices": [fleet["slice"]] if fleet.get("slice") else []})
            workload.append({"at": int(fleet.get("attach_at", 0)), "node": ue, "do": "ue_attach",
                             "ran": fleet["ran"]})
            if req:
                action = {"at": int(req.get("at", 0)) + (i - 1) * int(req.get("spacing", 0)),
                          "node": ue, "do": "request", "name": req["name"], "via": kind}
                if req.get("service"):
                    action["service"] = req["service"]
                workload.append(action)
    workload.sort(key=lambda w: w.get("at", 0))  # stable: file order breaks ties
    return nodes, links, subs, workload


# validation -----------------------------------------------------------------

def _check_addr(value, location, network=False):
    try:
        if network:
            ipaddress.ip_network(value)
        else:
            ipaddress.IPv4Address(value)
    except ValueError as exc:
        raise ValidationError(str(exc), location) from None


def validate(cfg: ScenarioConfig):
    if cfg.mode not in MODES:
        raise ValidationError(f"mode must be one of {', '.join(MODES)}", "mode")
    if not isinstance(cfg.seed, int):
        raise ValidationError("seed must be an integer", "seed")
    if not isinstance(cfg.max_time, int) or cfg.max_time <= 0:
        raise ValidationError("max_time must be a positive integer", "max_time")
    if cfg.session_kind not in ("icn", "ip"):
        raise ValidationError("session_kind must be icn or ip", "session_kind")
    for key in ("latency", "control_latency"):
        if cfg.defaults.get(key, 0) < 0:
            raise ValidationError("negative latency", f"defaults.{key}")
    if cfg.randomize_latency is not None:
        lo, hi = cfg.randomize_latency
        if lo < 0 or hi < lo:
            raise ValidationError("need 0 <= lo <= hi", "randomize_latency")
    if cfg.fleet is not None:
        for key in ("ran",):
            if key not in cfg.fleet:
                raise ValidationError(f"missing {key}", f"fleet.{key}")

    nodes, links, subs, workload = resolve(cfg)
    roles: Dict[str, Role] = {}
    for i, n in enumerate(nodes):
        loc = f"nodes[{i}]"
        if "id" not in n or "role" not in n:
            raise ValidationError("node needs id and role", loc)
        if n["id"] in roles:
            raise ValidationError(f"duplicate node id {n['id']!r}", loc)
        try:
            roles[n["id"]] = Role(n["role"])
        except ValueError:
            raise ValidationError(f"unknown role {n['role']!r}", loc) from None
        if n.get("address") is not None:
            _check_addr(n["address"], f"{loc}.address")
        if n.get("pool") is not None:
            _check_addr(n["pool"], f"{loc}.pool", network=True)
        if roles[n["id"]] == Role.ICN_AP and (n.get("address") is None or n.get("pool") is None):
            raise ValidationError("ICN-AP needs address and pool", loc)

    def need(node_id, loc, allowed=None):
        if node_id not in roles:
            raise ValidationError(f"undefined node {node_id!r}", loc)
        if allowed is not None and roles[node_id] not in allowed:
            raise ValidationError(f"{node_id!r} has role {roles[node_id].value}", loc)

    for i, l in enumerate(links):
        loc = f"links[{i}]"
        need(l.get("a"), f"{loc}.a")
        need(l.get("b"), f"{loc}.b")
        if l.get("latency", 0) < 0:
            raise ValidationError("negative latency", f"{loc}.latency")
        if not 0 <= l.get("loss_rate", 0) <= 1:
            raise ValidationError("loss_rate outside [0, 1]", f"{loc}.loss_rate")
    for i, n in enumerate(nodes):
        for key in ("resolver", "pipeline_next", "gateway"):
            if n.get(key) is not None:
                need(n[key], f"nodes[{i}].{key}")
        for name, target in (n.get("dns_records") or {}).items():
            if target not in roles:
                _check_addr(target, f"nodes[{i}].dns_records.{name}")
    for i, s in enumerate(subs):
        need(s.get("ue"), f"subscriptions[{i}].ue", (Role.UE,))
    for i, s in enumerate(cfg.slices):
        if not s.get("ulcl") or not s.get("ap"):
            raise ValidationError("slice needs ulcl and ap candidates", f"slices[{i}]")
        for c in s["ulcl"]:
            need(c, f"slices[{i}].ulcl", (Role.ULCL,))
        for c in s["ap"]:
            need(c, f"slices[{i}].ap", (Role.ICN_AP,))
    if cfg.dns is not None:
        need(cfg.dns, "dns", (Role.APP_SERVER,))
    for i, w in enumerate(workload):
        loc = f"workload[{i}]"
        if w.get("at", 0) < 0:
            raise ValidationError("negative time", f"{loc}.at")
        do = w.get("do")
        if do not in ACTIONS:
            raise ValidationError(f"unknown action {do!r}", f"{loc}.do")
        need(w.get("node"), f"{loc}.node", ACTIONS[do])
        for key in ("ran", "target"):
            if key in w:
                need(w[key], f"{loc}.{key}", (Role.RAN,))
        if do in ("request", "stream") and "name" not in w:
            raise ValidationError("missing name", f"{loc}.name")
    if any(r == Role.UE for r in roles.values()):
        for role in SINGLETONS:
            if role not in roles.values():
                raise ValidationError(f"scenario with UEs needs a {role.value} node", "nodes")


# building -------------------------------------------------------------------

class HandoverRecorder:
    """Collects every step-tagged control message as it is sent and delivered."""

    def __init__(self):
        self.report = HandoverReport()

    def on_send(self, sim, src, dst, msg):
        if isinstance(msg, ControlMessage) and msg.step is not None:
            self.report.records.append(StepRecord(msg.step, src, dst, msg.tag, sim.clock, msg.kind, msg.ok))
            start, end = self.report.step_times.get(msg.step, (sim.clock, sim.clock))
            self.report.step_times[msg.step] = (min(start, sim.clock), end)

    def on_delivery(self, sim, event):
        msg = event.payload
        if event.kind == "msg" and isinstance(msg, ControlMessage) and msg.step is not None:
            start, end = self.report.step_times[msg.step]
            self.report.step_times[msg.step] = (start, max(end, sim.clock))

    def finish(self, sim) -> HandoverReport:
        rep = self.report
        for time, kind, info in sim.marks:
            if kind == "handover_start" and rep.started is None:
                rep.started = time
            elif kind == "handover_complete":
                rep.finished = time
                rep.outcome = "complete"
            elif kind in ("handover_abort", "handover_aborted"):
                rep.outcome = "aborted"
            elif kind == "release" and rep.release_time is None:
                rep.release_time = time
        return rep


@dataclass
class ScenarioRun:
    cfg: ScenarioConfig
    sim: Simulator
    recorder: HandoverRecorder
    summary: object = None
    report: Optional[Report] = None

    def trace_text(self) -> str:
        return "\n".join(self.sim.trace) + "\n"

    def metrics_text(self) -> str:
        return "".join(f"{n} {lab} {v}\n" for n, lab, v in self.sim.metrics.records())


def _first(roles: Dict[str, Role], role: Role) -> Optional[str]:
    ids = sorted((n for n, r in roles.items() if r == role), key=node_sort_key)
    return ids[0] if ids else None


def _control_pairs(topo: Topology, cfg: ScenarioConfig) -> List[Tuple[str, str]]:
    roles = topo.roles
    by = {r: topo.nodes_with_role(r) for r in Role}
    one = {r: _first(roles, r) for r in Role}
    pairs = []

    def link_all(a, others):
        if a is None:
            return
        pairs.extend((a, o) for o in others if o is not None and o != a)

    link_all(one[Role.AMF], by[Role.UE] + by[Role.RAN] + [one[Role.SMF], one[Role.PCF_UDM]])
    link_all(one[Role.SMF], [one[Role.NSSF], one[Role.ICN_SMF]] + by[Role.ULCL] + by[Role.ICN_AP]
             + ([cfg.dns] if cfg.dns else []))
    link_all(one[Role.ICN_SMF], by[Role.ICN_AP] + [one[Role.NRS]])
    link_all(one[Role.NRS], by[Role.DN_ROUTER])
    link_all(one[Role.ICN_AF], [one[Role.PCF_UDM], one[Role.NSSF]])
    return pairs


def build_simulation(cfg: ScenarioConfig, seed: Optional[int] = None) -> ScenarioRun:
    nodes, links, subs, workload = resolve(cfg)
    d = cfg.defaults
    topo = Topology()
    for n in nodes:
        topo.add_node(n["id"], Role(n["role"]))
    for l in links:
        topo.add_link(Link(l["a"], l["b"], int(l.get("latency", d["latency"])),
                           float(l.get("loss_rate", 0.0)), l.get("plane", "data")))
    if cfg.auto_control:
        for a, b in _control_pairs(topo, cfg):
            if not topo.has_link(a, b):
                topo.add_link(Link(a, b, int(d["control_latency"]), 0.0, "control"))
    sim = Simulator(topo, cfg.seed if seed is None else seed)
    if cfg.randomize_latency is not None:
        lo, hi = cfg.randomize_latency
        for key in sorted(topo.links):
            topo.links[key].latency = sim.rng.randint(lo, hi)
    if cfg.colocated_ran_ulcl:
        for link in topo.links.values():
            if {topo.roles[link.a], topo.roles[link.b]} == {Role.RAN, Role.ULCL}:
                link.latency = 0

    roles = topo.roles
    one = {r: _first(roles, r) for r in Role}
    lifetime = int(d["lifetime"])
    addresses = {n["id"]: addr(n["address"]) for n in nodes if n.get("address") is not None}
    aps = {n["id"]: (addr(n["address"]), n["pool"]) for n in nodes if Role(n["role"]) == Role.ICN_AP}

    for n in nodes:
        nid, role, nack = n["id"], Role(n["role"]), n.get("nack", ())
        if role == Role.UE:
            sessions = n.get("sessions") or [{"kind": cfg.session_kind}]
            node = UeNode(nid, one[Role.AMF], n.get("prefix"), sessions, n.get("produce", True),
                          n.get("payload_size", 1024), lifetime, nack)
        elif role == Role.RAN:
            node = RanNode(nid, one[Role.AMF], nack)
        elif role == Role.ULCL:
            node = UlClNode(nid, nack)
        elif role == Role.ICN_AP:
            dn_side = [topo.link(nid, o).latency for o in topo.neighbours(nid, "data")
                       if roles[o] in DN_ROLES]
            node = IcnApNode(nid, addresses[nid], n["pool"], n.get("cs_capacity", d["cs_capacity"]),
                             linger=max(dn_side, default=0), nack_tags=nack)
        elif role == Role.DN_ROUTER:
            node = DnRouterNode(nid, n.get("cs_capacity", d["cs_capacity"]), nack)
        elif role == Role.APP_SERVER:
            records = n.get("dns_records")
            if records is not None:
                records = {k: addresses[v] if v in addresses else addr(v) for k, v in records.items()}
            alg = int(d["alg_delay"]) if n.get("alg") and cfg.mode == "IP_MEC" else 0
            node = AppServerNode(nid, addresses.get(nid), n.get("gateway"), n.get("serves", ()),
                                 n.get("payload_size", 1024), records,
                                 addresses.get(n.get("resolver")), n.get("pipeline_next"), alg,
                                 lifetime, nack)
        elif role == Role.AMF:
            node = AmfNode(nid, one[Role.SMF], one[Role.PCF_UDM], nack)
        elif role == Role.SMF:
            dns = (cfg.dns, addresses[cfg.dns]) if cfg.dns else None
            node = SmfNode(nid, one[Role.NSSF], one[Role.ICN_SMF], aps, dns, nack)
        elif role == Role.ICN_SMF:
            node = IcnSmfNode(nid, one[Role.NRS], nack)
        elif role == Role.NRS:
            node = NrsNode(nid, nack_tags=nack)
        elif role == Role.NSSF:
            node = NssfNode(nid, [SliceDescriptor(s["id"], tuple(s["ap"]), tuple(s["ulcl"]))
                                  for s in cfg.slices], nack)
        elif role == Role.PCF_UDM:
            node = PcfUdmNode(nid, [SubscriptionProfile(s["ue"], bool(s.get("icn", False)),
                                                        frozenset(s.get("slices") or ()))
                                    for s in subs], nack)
        else:
            node = IcnAfNode(nid, one[Role.PCF_UDM], one[Role.NSSF], nack)
        sim.add(node)

    _install_routes(sim, nodes, addresses, aps)

    recorder = HandoverRecorder()
    sim.observers.append(recorder.on_send)
    sim.delivery_observers.append(recorder.on_delivery)
    for w in workload:
        action = {k: v for k, v in w.items() if k not in ("at", "node")}
        if action["do"] == "policy_push":
            action = _policy_action(action)
        sim.at(int(w.get("at", 0)), w["node"], "action", action)
    return ScenarioRun(cfg, sim, recorder)


def _policy_action(action: dict) -> dict:
    profiles = {}
    for ue, p in (action.get("profiles") or {}).items():
        change = {}
        if "icn" in p:
            change["icn_service_enabled"] = bool(p["icn"])
        if "slices" in p:
            change["allowed_slices"] = list(p["slices"])
        profiles[ue] = change
    slices = [SliceDescriptor(s["id"], tuple(s["ap"]), tuple(s["ulcl"])) for s in action.get("slices") or []]
    return {"do": "policy_push", "profiles": profiles, "slices": slices}


def _install_routes(sim: Simulator, nodes: List[dict], addresses: Dict[str, int], aps):
    topo = sim.topology
    destinations = [(pool, ap) for ap, (_, pool) in sorted(aps.items())]
    destinations += [(f"{ipaddress.IPv4Address(a)}/32", nid) for nid, a in sorted(addresses.items())
                     if topo.roles[nid] == Role.APP_SERVER]
    producers = [(p, n["id"]) for n in nodes if topo.roles[n["id"]] == Role.APP_SERVER
                 for p in n.get("serves", ())]
    for nid in sorted(sim.nodes, key=node_sort_key):
        node = sim.nodes[nid]
        if not isinstance(node, IcnNode):
            continue
        for network, target in destinations:
            if target == nid:
                continue
            hop = topo.next_hop(nid, target, DN_ROLES)
            if hop is not None:
                node.add_ip_route(network, hop)
        for prefix, server in producers:
            hop = topo.next_hop(nid, server, DN_ROLES)
            if hop is not None:
                node.forwarder.add_route(as_name(prefix), node.link_face(hop))


# running --------------------------------------------------------------------

def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None,
                 max_time: Optional[int] = None) -> ScenarioRun:
    run = build_simulation(cfg, seed)
    sim = run.sim
    run.summary = sim.run_to_quiescence(max_time if max_time is not None else cfg.max_time)
    for nid in sorted(sim.nodes, key=node_sort_key):
        node = sim.nodes[nid]
        if isinstance(node, IcnNode):
            for line in node.forwarder.dump():
                sim.log(nid, "state", line)
        sim.log(nid, "digest", node.digest())
    run.report = make_report(run)
    return run


def make_report(run: ScenarioRun) -> Report:
    sim, cfg = run.sim, run.cfg
    m = sim.metrics
    rep = Report(cfg.name, cfg.mode, sim.seed)
    rep.upstream_fetches = m.total("upstream_fetch") + m.total("produced")
    rep.cache_hits = m.total("icn_cs_hit")
    rep.pit_aggregations = m.total("icn_aggregated")
    rep.signaling_messages = m.total("signaling")
    rep.dns_lookups = m.total("dns_lookups")
    rep.session_reestablishments = m.total("session_reestablishments")
    rep.alg_translations = m.total("alg_translations")
    rep.sessions_refused = m.total("sessions_refused")
    for nid in sorted(sim.nodes, key=node_sort_key):
        tracker = getattr(sim.nodes[nid], "requests", None)
        if tracker is None:
            continue
        rep.requests_issued += len(tracker.issued)
        rep.requests_satisfied += len(tracker.satisfied)
        rep.interests_lost += tracker.lost
        rep.duplicates += tracker.duplicates
        rep.latencies.extend(tracker.latencies)
    handover = run.recorder.finish(sim)
    if cfg.mode == "HANDOVER" or handover.records:
        rep.handover = handover
    rep.quiescent = run.summary.quiescent
    rep.final_clock = run.summary.final_clock
    return rep


def run_mec_scenario(cfg: ScenarioConfig, **kw) -> Report:
    if cfg.mode not in ("IP_MEC", "ICN_MEC"):
        raise ValidationError("not a MEC scenario", "mode")
    return run_scenario(cfg, **kw).report


def run_handover_scenario(cfg: ScenarioConfig, **kw) -> Report:
    if cfg.mode != "HANDOVER":
        raise ValidationError("not a handover scenario", "mode")
    return run_scenario(cfg, **kw).report
