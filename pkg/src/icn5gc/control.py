"""Control-plane network functions: AMF, SMF, ICN-SMF, ICN-AF, NSSF, PCF-UDM and NRS.

Multi-step procedures are written as generators driven by
``SignalingNode.spawn``: each ``yield call(...)`` sends a request and
resumes with the correlated reply.
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .engine import Role, Topology, node_sort_key
from .messages import SignalingNode, call
from .names import FiveTuple, Name, Protocol, as_name, is_prefix_of
from .userplane import DL, ICN_PORT, UL, ClassifierRule, N4Delta, RuleMatch


class NoSlice(LookupError):
    pass


class NoCandidate(LookupError):
    pass


class Unresolved(LookupError):
    pass


class NotSubscribed(LookupError):
    pass


class SessionState(enum.Enum):
    ESTABLISHING = "ESTABLISHING"
    ACTIVE = "ACTIVE"
    HANDOVER_PREPARING = "HANDOVER_PREPARING"
    HANDOVER_EXECUTING = "HANDOVER_EXECUTING"
    RELEASED = "RELEASED"


@dataclass(frozen=True)
class SubscriptionProfile:
    ue_id: str
    icn_service_enabled: bool = False
    allowed_slices: frozenset = frozenset()

    def __str__(self):
        return (f"profile({self.ue_id} icn={self.icn_service_enabled} "
                f"slices={','.join(sorted(self.allowed_slices))})")


@dataclass(frozen=True)
class SliceDescriptor:
    slice_id: str
    icn_ap_candidates: Tuple[str, ...]
    ulcl_candidates: Tuple[str, ...]

    def __post_init__(self):
        if not self.icn_ap_candidates or not self.ulcl_candidates:
            raise ValueError(f"slice {self.slice_id} needs UL-CL and ICN-AP candidates")
        object.__setattr__(self, "icn_ap_candidates", tuple(self.icn_ap_candidates))
        object.__setattr__(self, "ulcl_candidates", tuple(self.ulcl_candidates))

    def __str__(self):
        return self.slice_id


@dataclass
class UeContext:
    ue_id: str
    icn_authorized: bool
    serving_ran: str
    sessions: Set[str] = field(default_factory=set)
    ue_name_prefix: Optional[Name] = None
    allowed_slices: Set[str] = field(default_factory=set)


@dataclass
class PduSessionRecord:
    session_id: str
    ue_id: str
    slice_id: str
    serving_ulcl: str
    serving_icn_ap: str
    tunnel_chain: Tuple[str, str]
    state: SessionState = SessionState.ESTABLISHING
    kind: str = "icn"
    addr: Optional[int] = None
    serving_ran: Optional[str] = None
    prefix: Optional[str] = None
    move: Optional[dict] = None


# pure decision functions -------------------------------------------------

def nssf_select_slice(hint: Optional[str], allowed: Iterable[str],
                      catalog: Dict[str, SliceDescriptor]) -> SliceDescriptor:
    allowed = sorted(set(allowed))
    if hint is None:
        if len(allowed) != 1:
            raise NoSlice(f"no hint and {len(allowed)} allowed slices")
        hint = allowed[0]
    if hint not in allowed or hint not in catalog:
        raise NoSlice(str(hint))
    return catalog[hint]


def _closest(topology: Topology, origin: str, candidates: Iterable[str]) -> Optional[str]:
    scored = []
    for c in candidates:
        hops = topology.hop_count(origin, c)
        if hops is not None:
            scored.append((hops, node_sort_key(c), c))
    return min(scored)[2] if scored else None


def smf_select_target_path(topology: Topology, target_ran: str,
                           slice_desc: SliceDescriptor) -> Tuple[str, str]:
    """Nearest UL-CL to the RAN, then the nearest ICN-AP to that UL-CL.

    Distance is data-plane hop count; ties go to the lowest node id.
    """
    ulcl = _closest(topology, target_ran, slice_desc.ulcl_candidates)
    if ulcl is None:
        raise NoCandidate(f"no UL-CL reachable from {target_ran}")
    ap = _closest(topology, ulcl, slice_desc.icn_ap_candidates)
    if ap is None:
        raise NoCandidate(f"no ICN-AP reachable from {ulcl}")
    return ulcl, ap


def nrs_resolve(table: Dict[Name, str], prefix) -> str:
    name = as_name(prefix)
    for p in name.prefixes():
        if p in table:
            return table[p]
    raise Unresolved(str(name))


def _icn_outer(ue_addr: int, anchor_addr: int) -> FiveTuple:
    return FiveTuple(ue_addr, anchor_addr, ICN_PORT, ICN_PORT, Protocol.UDP)


# subscriber data ----------------------------------------------------------

class PcfUdmNode(SignalingNode):
    role = Role.PCF_UDM

    def __init__(self, node_id: str, profiles: Iterable[SubscriptionProfile] = (), nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.profiles: Dict[str, SubscriptionProfile] = {p.ue_id: p for p in profiles}

    def apply_policy(self, deltas: Dict[str, dict]):
        for ue in sorted(deltas):
            change = dict(deltas[ue])
            if "allowed_slices" in change:
                change["allowed_slices"] = frozenset(change["allowed_slices"])
            current = self.profiles.get(ue, SubscriptionProfile(ue))
            self.profiles[ue] = dataclasses.replace(current, **change)

    def ctl_SubscriptionQuery(self, msg):
        profile = self.profiles.get(msg.get("ue"))
        if profile is None:
            self.respond(msg, ok=False, reason="NotSubscribed")
        else:
            self.respond(msg, profile=profile)


class NssfNode(SignalingNode):
    role = Role.NSSF

    def __init__(self, node_id: str, slices: Iterable[SliceDescriptor] = (), nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.catalog: Dict[str, SliceDescriptor] = {s.slice_id: s for s in slices}

    def ctl_NssfQuery(self, msg):
        try:
            desc = nssf_select_slice(msg.get("hint"), msg.get("allowed") or (), self.catalog)
        except NoSlice:
            self.respond(msg, ok=False, reason="NoSlice")
            return
        self.respond(msg, slice=desc)


class IcnAfNode(SignalingNode):
    """Pushes subscriber and slice policy into PCF/UDM and NSSF tables.

    The push is a synchronous table write, so it takes effect before any
    later registration reads the profile.
    """

    role = Role.ICN_AF

    def __init__(self, node_id: str, pcf_udm: str = "pcf-udm", nssf: str = "nssf", nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.pcf_udm = pcf_udm
        self.nssf = nssf

    def icnaf_push_policy(self, profiles: Optional[Dict[str, dict]] = None,
                          slices: Iterable[SliceDescriptor] = ()):
        profiles = profiles or {}
        slices = list(slices)
        if profiles:
            self.sim.nodes[self.pcf_udm].apply_policy(profiles)
        if slices:
            nssf = self.sim.nodes[self.nssf]
            for s in slices:
                nssf.catalog[s.slice_id] = s
        self.log("policy", f"profiles={sorted(profiles)} slices={[s.slice_id for s in slices]}")

    def on_action(self, action):
        if action.get("do") == "policy_push":
            self.icnaf_push_policy(action.get("profiles"), action.get("slices", ()))
        else:
            super().on_action(action)


class NrsNode(SignalingNode):
    role = Role.NRS

    def __init__(self, node_id: str, routers: Optional[List[str]] = None, nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.table: Dict[Name, str] = {}
        self.routers = routers

    def nrs_resolve(self, prefix) -> str:
        return nrs_resolve(self.table, prefix)

    def ctl_NrsUpdate(self, msg):
        self.spawn(self._update(msg))

    def _update(self, msg):
        prefix, anchor = msg.get("prefix"), msg.get("anchor")
        self.table[as_name(prefix)] = anchor
        routers = self.routers
        if routers is None:
            routers = self.sim.topology.nodes_with_role(Role.DN_ROUTER)
        replies = yield [call(r, "RouteUpdate", msg.step, prefix=prefix, anchor=anchor) for r in routers]
        failed = [r.sender for r in replies if not r.ok]
        if failed:
            self.respond(msg, ok=False, reason="RouteUpdateFailed", routers=failed)
        else:
            self.respond(msg)

    def digest(self):
        return " ".join(f"{p}>{a}" for p, a in sorted(self.table.items()))


# AMF ----------------------------------------------------------------------

class AmfNode(SignalingNode):
    role = Role.AMF

    def __init__(self, node_id: str, smf: str = "smf", pcf_udm: str = "pcf-udm", nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.smf = smf
        self.pcf_udm = pcf_udm
        self.contexts: Dict[str, UeContext] = {}
        self.handovers: Dict[str, dict] = {}

    def ctl_RegistrationRequest(self, msg):
        self.spawn(self.amf_register_ue(msg))

    def amf_register_ue(self, msg):
        ue = msg.sender
        reply = yield call(self.pcf_udm, "SubscriptionQuery", ue=ue)
        prefix = msg.get("prefix")
        ctx = UeContext(ue, False, msg.get("ran"), ue_name_prefix=as_name(prefix) if prefix else None)
        cause = ""
        if reply.ok:
            profile = reply.get("profile")
            ctx.icn_authorized = profile.icn_service_enabled
            ctx.allowed_slices = set(profile.allowed_slices)
        else:
            cause = reply.reason
        self.contexts[ue] = ctx
        self.log("registration", f"ue={ue} icn_authorized={ctx.icn_authorized} {cause}".rstrip())
        self.respond(msg, icn_authorized=ctx.icn_authorized, cause=cause)

    def ctl_SessionEstablishRequest(self, msg):
        self.spawn(self.establish_icn_session(msg))

    def establish_icn_session(self, msg):
        ue = msg.sender
        kind = msg.get("kind", "icn")
        ctx = self.contexts.get(ue)
        if ctx is None:
            self.respond(msg, ok=False, reason="NotRegistered")
            return
        if kind == "icn" and not ctx.icn_authorized:
            self.count("sessions_refused")
            self.sim.mark("session_refused", node=self.node_id, ue=ue)
            self.respond(msg, ok=False, reason="NotAuthorized")
            return
        created = yield call(self.smf, "SessionCreate", ue=ue, kind=kind, slice_hint=msg.get("slice"),
                             allowed=sorted(ctx.allowed_slices), ran=ctx.serving_ran,
                             prefix=str(ctx.ue_name_prefix) if kind == "icn" and ctx.ue_name_prefix else None)
        if not created.ok:
            self.respond(msg, ok=False, reason=created.reason)
            return
        sess = created.get("session")
        setup = yield call(ctx.serving_ran, "RanSessionSetup", ue=ue, session=sess,
                           tunnel=created.get("tunnel"), ulcl=created.get("ulcl"),
                           outer=created.get("outer"))
        if not setup.ok:
            yield call(self.smf, "SmContextUpdate", session=sess, op="release")
            self.respond(msg, ok=False, reason="ProvisioningFailed")
            return
        yield call(self.smf, "SmContextUpdate", session=sess, op="activate")
        ctx.sessions.add(sess)
        # the accept doubles as the UE's ICN-layer default route (which RAN to use)
        self.respond(msg, session=sess, kind=kind, addr=created.get("addr"), ran=ctx.serving_ran,
                     dns=created.get("dns"))

    def ctl_HandoverRequired(self, msg):
        self.spawn(self.run_handover(msg))

    def _abort(self, msg, ue: str, reason: str):
        self.count("handover_aborts")
        self.sim.mark("handover_abort", node=self.node_id, ue=ue, reason=reason)
        self.respond(msg, ok=False, reason=reason, dst=ue, step=9)

    def run_handover(self, msg):
        """Steps 2 to 9 as seen by the AMF; steps 11 and 12 follow HandoverNotify."""
        ue, s_ran, t_ran = msg.get("ue"), msg.get("s_ran"), msg.get("t_ran")
        sessions = list(msg.get("sessions") or ())
        ctx = self.contexts.get(ue)
        if ctx is None or not sessions or any(s not in ctx.sessions for s in sessions):
            self._abort(msg, ue, "UnknownSession")
            return
        if len(sessions) != 1:
            self._abort(msg, ue, "MultiSession")
            return
        if ue in self.handovers:
            self._abort(msg, ue, "HandoverInProgress")
            return
        sess = sessions[0]
        ho = self.handovers[ue] = {"session": sess, "s_ran": s_ran, "t_ran": t_ran}
        modified = yield call(self.smf, "SessionModify", 3, op="handover", ue=ue, session=sess,
                              s_ran=s_ran, t_ran=t_ran)
        if not modified.ok:
            del self.handovers[ue]
            self._abort(msg, ue, modified.reason)
            return
        ho["drain"] = bool(modified.get("drain"))
        switched = yield call(t_ran, "PathSwitchCommand", 8, ue=ue, session=sess,
                              tunnel=modified.get("tunnel"), ulcl=modified.get("ulcl"),
                              outer=modified.get("outer"))
        if not switched.ok:
            yield call(self.smf, "SessionModify", op="rollback", ue=ue, session=sess)
            del self.handovers[ue]
            self._abort(msg, ue, switched.reason or "PathSwitchFailed")
            return
        self.respond(msg, dst=ue, step=9, t_ran=t_ran, session=sess)

    def ctl_HandoverNotify(self, msg):
        self.spawn(self._finish_handover(msg))

    def _finish_handover(self, msg):
        ue = msg.get("ue")
        ho = self.handovers.get(ue)
        if ho is None:
            self.count("unexpected_notify")
            return
        self.contexts[ue].serving_ran = ho["t_ran"]
        yield call(ho["s_ran"], "ReleaseCommand", 11, ue=ue, session=ho["session"], drain=ho["drain"])
        del self.handovers[ue]
        self.notify(self.smf, "HandoverComplete", step=12, ue=ue, session=ho["session"])

    def digest(self):
        return " ".join(f"{u}@{c.serving_ran}:{sorted(c.sessions)}"
                        for u, c in sorted(self.contexts.items()))


# SMF ----------------------------------------------------------------------

class SmfNode(SignalingNode):
    """Session management: path selection, address allocation and N4 programming.

    ``anchors`` maps each ICN-AP to ``(address, pool)``; UE addresses are
    drawn from the pool of the serving anchor. ``dns`` is ``(node, address)``
    of the resolver that should track IP session addresses, if any.
    """

    role = Role.SMF

    def __init__(self, node_id: str, nssf: str = "nssf", icn_smf: str = "icn-smf",
                 anchors: Optional[Dict[str, Tuple[int, str]]] = None,
                 dns: Optional[Tuple[str, int]] = None, nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.nssf = nssf
        self.icn_smf = icn_smf
        self.anchors = dict(anchors or {})
        self.dns = dns
        self.records: Dict[str, PduSessionRecord] = {}
        self.slices: Dict[str, SliceDescriptor] = {}
        self._used: Set[int] = set()
        self._n_sessions = 0
        self._n_tunnels = 0

    # allocation ----------------------------------------------------------

    def _new_session(self) -> str:
        self._n_sessions += 1
        return f"s{self._n_sessions}"

    def _new_tunnel(self) -> str:
        self._n_tunnels += 1
        return f"t{self._n_tunnels}"

    def _allocate(self, ap: str) -> int:
        address, pool = self.anchors[ap]
        for host in ipaddress.ip_network(pool).hosts():
            a = int(host)
            if a != address and a not in self._used:
                self._used.add(a)
                return a
        raise NoCandidate(f"address pool of {ap} exhausted")

    def _outer(self, kind: str, ue_addr: int, ap: str) -> Optional[FiveTuple]:
        if kind != "icn":
            return None
        return _icn_outer(ue_addr, self.anchors[ap][0])

    # helpers -------------------------------------------------------------

    def _do(self, undo: list, dst: str, tag: str, step=None, revert=None, **payload):
        reply = yield call(dst, tag, step, **payload)
        if reply.ok and revert is not None:
            undo.append(revert)
        return reply

    def _unwind(self, undo: list):
        for dst, tag, payload in reversed(undo):
            yield call(dst, tag, **payload)
        undo.clear()

    # establishment -------------------------------------------------------

    def ctl_SessionCreate(self, msg):
        self.spawn(self._establish(msg))

    def _establish(self, msg):
        ue, kind, ran = msg.get("ue"), msg.get("kind"), msg.get("ran")
        chosen = yield call(self.nssf, "NssfQuery", ue=ue, hint=msg.get("slice_hint"),
                            allowed=msg.get("allowed"))
        if not chosen.ok:
            self.respond(msg, ok=False, reason="NoSlice")
            return
        desc: SliceDescriptor = chosen.get("slice")
        self.slices[desc.slice_id] = desc
        try:
            ulcl, ap = smf_select_target_path(self.sim.topology, ran, desc)
            addr = self._allocate(ap)
        except NoCandidate as exc:
            self.respond(msg, ok=False, reason="NoCandidate")
            self.log("session", f"refused {exc}")
            return
        sid = self._new_session()
        t_ran, t_n9 = self._new_tunnel(), self._new_tunnel()
        rec = PduSessionRecord(sid, ue, desc.slice_id, ulcl, ap, (t_ran, t_n9), kind=kind,
                               addr=addr, serving_ran=ran, prefix=msg.get("prefix"))
        self.records[sid] = rec
        undo: list = []
        ok = yield from self._provision(rec, undo)
        if not ok:
            yield from self._unwind(undo)
            rec.state = SessionState.RELEASED
            self._used.discard(addr)
            self.respond(msg, ok=False, reason="ProvisioningFailed")
            return
        self.respond(msg, session=sid, tunnel=t_ran, ulcl=ulcl, outer=self._outer(kind, addr, ap),
                     addr=addr, dns=self.dns[1] if self.dns else None)

    def _provision(self, rec: PduSessionRecord, undo: list):
        sid, ulcl, ap, addr = rec.session_id, rec.serving_ulcl, rec.serving_icn_ap, rec.addr
        t_ran, t_n9 = rec.tunnel_chain
        delta = N4Delta(
            add_tunnels={t_ran: rec.serving_ran, t_n9: ap},
            add_rules=[(UL, ClassifierRule(RuleMatch(src_addr=addr), t_n9, session=sid)),
                       (DL, ClassifierRule(RuleMatch(dst_addr=addr), t_ran, session=sid))])
        r = yield from self._do(undo, ulcl, "N4Update", delta=delta, revert=(
            ulcl, "N4Update", {"delta": N4Delta(remove_tunnels=[t_ran, t_n9], remove_rules_of=[sid])}))
        if not r.ok:
            return False
        delta = N4Delta(add_tunnels={t_n9: ulcl})
        if rec.kind != "icn":
            delta.dl_tunnels = {sid: t_n9}
            delta.ip_hosts = {addr: sid}
        r = yield from self._do(undo, ap, "N4Update", delta=delta, revert=(
            ap, "N4Update", {"delta": N4Delta(remove_tunnels=[t_n9], remove_sessions=[sid])}))
        if not r.ok:
            return False
        if rec.kind == "icn":
            r = yield from self._do(undo, self.icn_smf, "IcnSessionRequest", op="establish",
                                    session=sid, ap=ap, tunnel=t_n9, prefix=rec.prefix, ue_addr=addr,
                                    revert=(self.icn_smf, "IcnSessionRequest",
                                            {"op": "release", "session": sid}))
            if not r.ok:
                return False
        elif self.dns:
            r = yield call(self.dns[0], "DnsUpdate", name=rec.ue_id, addr=addr)
            if not r.ok:
                return False
        return True

    def ctl_SmContextUpdate(self, msg):
        self.spawn(self._context_update(msg))

    def _context_update(self, msg):
        rec = self.records.get(msg.get("session"))
        if rec is None:
            self.respond(msg, ok=False, reason="UnknownSession")
            return
        if msg.get("op") == "activate":
            rec.state = SessionState.ACTIVE
            self.log("session", f"{rec.session_id} ACTIVE ue={rec.ue_id} ulcl={rec.serving_ulcl} "
                                f"ap={rec.serving_icn_ap} tunnels={','.join(rec.tunnel_chain)}")
            self.respond(msg)
            return
        yield from self._teardown(rec)
        self.respond(msg)

    def _teardown(self, rec: PduSessionRecord):
        sid = rec.session_id
        t_ran, t_n9 = rec.tunnel_chain
        if rec.kind == "icn":
            yield call(self.icn_smf, "IcnSessionRequest", op="release", session=sid)
        yield call(rec.serving_icn_ap, "N4Update",
                   delta=N4Delta(remove_tunnels=[t_n9], remove_sessions=[sid]))
        yield call(rec.serving_ulcl, "N4Update",
                   delta=N4Delta(remove_tunnels=[t_ran, t_n9], remove_rules_of=[sid]))
        self._used.discard(rec.addr)
        rec.state = SessionState.RELEASED

    # handover ------------------------------------------------------------

    def ctl_SessionModify(self, msg):
        op = msg.get("op")
        if op == "handover":
            self.spawn(self._prepare_move(msg))
        elif op == "rollback":
            self.spawn(self._rollback_move(msg))
        else:
            self.respond(msg, ok=False, reason="UnknownOp")

    def _prepare_move(self, msg):
        """Steps 3 to 7: build the target path while the source path keeps working."""
        sid = msg.get("session")
        rec = self.records.get(sid)
        if rec is None or rec.state != SessionState.ACTIVE:
            self.respond(msg, ok=False, reason="SessionNotActive", step=7)
            return
        t_ran_node = msg.get("t_ran")
        try:
            ulcl2, ap2 = smf_select_target_path(self.sim.topology, t_ran_node, self.slices[rec.slice_id])
        except NoCandidate:
            self.respond(msg, ok=False, reason="NoCandidate", step=7)
            return
        rec.state = SessionState.HANDOVER_PREPARING
        icn = rec.kind == "icn"
        same_ulcl = ulcl2 == rec.serving_ulcl
        same_ap = ap2 == rec.serving_icn_ap
        t_ran1, t_n9 = rec.tunnel_chain
        new_addr = rec.addr if (icn or same_ap) else self._allocate(ap2)
        t_ran2 = self._new_tunnel()
        t_n9b = t_n9 if same_ulcl else self._new_tunnel()
        mv = {"t_ran": t_ran_node, "ulcl": ulcl2, "ap": ap2, "addr": new_addr,
              "tunnels": (t_ran2, t_n9b), "same_ulcl": same_ulcl, "same_ap": same_ap,
              "drain": icn or same_ulcl, "undo": []}
        undo = mv["undo"]
        rec.move = mv

        # step 4: target UL-CL
        dl_rule = ClassifierRule(RuleMatch(dst_addr=new_addr), t_ran2, session=sid)
        if same_ulcl:
            old_rule = ClassifierRule(RuleMatch(dst_addr=rec.addr), t_ran1, session=sid)
            delta = N4Delta(add_tunnels={t_ran2: t_ran_node}, add_rules=[(DL, dl_rule)],
                            end_marker=(t_ran1, sid, self._dl_outer(rec)))
            revert = N4Delta(remove_tunnels=[t_ran2], add_rules=[(DL, old_rule)])
        else:
            delta = N4Delta(
                add_tunnels={t_ran2: t_ran_node, t_n9b: ap2},
                add_rules=[(UL, ClassifierRule(RuleMatch(src_addr=new_addr), t_n9b, session=sid)),
                           (DL, dl_rule)])
            revert = N4Delta(remove_tunnels=[t_ran2, t_n9b], remove_rules_of=[sid])
        r = yield from self._do(undo, ulcl2, "N4Update", 4, delta=delta,
                                revert=(ulcl2, "N4Update", {"delta": revert}))
        if not r.ok:
            yield from self._fail_move(msg, rec, r.reason)
            return

        # steps 5 and 6: anchor side
        if icn:
            r = yield from self._do(undo, self.icn_smf, "IcnSessionRequest", 5, op="move", session=sid,
                                    old_ap=rec.serving_icn_ap, new_ap=ap2, tunnel=t_n9b, peer=ulcl2,
                                    drain=True, revert=(self.icn_smf, "IcnSessionRequest",
                                                        {"op": "revert", "session": sid}))
        elif not same_ulcl:
            delta = N4Delta(add_tunnels={t_n9b: ulcl2}, dl_tunnels={sid: t_n9b})
            if same_ap:
                revert = N4Delta(dl_tunnels={sid: t_n9}, remove_tunnels=[t_n9b])
            else:
                delta.ip_hosts = {new_addr: sid}
                revert = N4Delta(remove_tunnels=[t_n9b], remove_sessions=[sid])
            r = yield from self._do(undo, ap2, "N4Update", 6, delta=delta,
                                    revert=(ap2, "N4Update", {"delta": revert}))
        if not r.ok:
            yield from self._fail_move(msg, rec, r.reason)
            return

        # step 7
        rec.state = SessionState.HANDOVER_EXECUTING
        self.respond(msg, step=7, tunnel=t_ran2, ulcl=ulcl2, outer=self._outer(rec.kind, new_addr, ap2),
                     drain=mv["drain"], addr=new_addr)

    def _dl_outer(self, rec: PduSessionRecord) -> Optional[FiveTuple]:
        if rec.kind != "icn":
            return None
        return FiveTuple(self.anchors[rec.serving_icn_ap][0], rec.addr, ICN_PORT, ICN_PORT, Protocol.UDP)

    def _fail_move(self, msg, rec: PduSessionRecord, reason: str):
        yield from self._unwind(rec.move["undo"])
        if rec.move["addr"] != rec.addr:
            self._used.discard(rec.move["addr"])
        rec.move = None
        rec.state = SessionState.ACTIVE
        self.respond(msg, ok=False, reason=reason or "HandoverAbort", step=7)

    def _rollback_move(self, msg):
        rec = self.records.get(msg.get("session"))
        if rec is None or rec.move is None:
            self.respond(msg, ok=False, reason="NoHandover")
            return
        yield from self._unwind(rec.move["undo"])
        if rec.move["addr"] != rec.addr:
            self._used.discard(rec.move["addr"])
        rec.move = None
        rec.state = SessionState.ACTIVE
        self.respond(msg)

    def ctl_HandoverComplete(self, msg):
        self.spawn(self._complete_move(msg))

    def _complete_move(self, msg):
        """Step 12: retire the source path."""
        rec = self.records.get(msg.get("session"))
        if rec is None or rec.move is None:
            self.count("unexpected_notify")
            return
        mv = rec.move
        sid = rec.session_id
        t_ran1, t_n9 = rec.tunnel_chain
        drain = sid if mv["drain"] else None
        if mv["same_ulcl"]:
            yield call(rec.serving_ulcl, "N4Update", 12, drain=drain,
                       delta=N4Delta(remove_tunnels=[t_ran1]))
        else:
            yield call(rec.serving_ulcl, "N4Update", 12, drain=drain,
                       delta=N4Delta(remove_tunnels=[t_ran1, t_n9], remove_rules_of=[sid]))
            if rec.kind == "icn":
                yield call(self.icn_smf, "IcnSessionRequest", 12, op="release_old", session=sid)
            elif mv["same_ap"]:
                yield call(rec.serving_icn_ap, "N4Update", 12, delta=N4Delta(remove_tunnels=[t_n9]))
            else:
                # name first, so a client that loses the old address resolves the new one
                if self.dns:
                    yield call(self.dns[0], "DnsUpdate", 12, name=rec.ue_id, addr=mv["addr"])
                yield call(rec.serving_icn_ap, "N4Update", 12,
                           delta=N4Delta(remove_tunnels=[t_n9], remove_sessions=[sid]))
                self._used.discard(rec.addr)
        rec.serving_ulcl, rec.serving_icn_ap = mv["ulcl"], mv["ap"]
        rec.tunnel_chain = mv["tunnels"]
        rec.addr = mv["addr"]
        rec.serving_ran = mv["t_ran"]
        rec.move = None
        rec.state = SessionState.ACTIVE
        self.sim.mark("handover_complete", node=self.node_id, session=sid, ulcl=rec.serving_ulcl,
                      ap=rec.serving_icn_ap)

    def digest(self):
        return " ".join(f"{r.session_id}:{r.state.value}:{r.serving_ulcl}/{r.serving_icn_ap}"
                        for _, r in sorted(self.records.items()))


# ICN-SMF ------------------------------------------------------------------

class IcnSmfNode(SignalingNode):
    """Owns the ICN state of sessions at the anchors and keeps the NRS current."""

    role = Role.ICN_SMF

    def __init__(self, node_id: str, nrs: str = "nrs", nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.nrs = nrs
        self.sessions: Dict[str, dict] = {}

    def ctl_IcnSessionRequest(self, msg):
        proc = getattr(self, "_op_" + str(msg.get("op")), None)
        if proc is None:
            self.respond(msg, ok=False, reason="UnknownOp")
            return
        self.spawn(proc(msg))

    def _op_establish(self, msg):
        sid, ap, prefix = msg.get("session"), msg.get("ap"), msg.get("prefix")
        r = yield call(ap, "IcnSessionUpdate", op="attach", session=sid, tunnel=msg.get("tunnel"),
                       prefix=prefix, ue_addr=msg.get("ue_addr"))
        if not r.ok:
            self.respond(msg, ok=False, reason="NackFromAnchor")
            return
        if prefix:
            r = yield call(self.nrs, "NrsUpdate", prefix=prefix, anchor=ap)
            if not r.ok:
                yield call(ap, "IcnSessionUpdate", op="detach", session=sid)
                self.respond(msg, ok=False, reason="NrsUpdateFailed")
                return
        self.sessions[sid] = {"ap": ap, "tunnel": msg.get("tunnel"), "prefix": prefix,
                              "ue_addr": msg.get("ue_addr"), "old": None}
        self.respond(msg)

    def _op_move(self, msg):
        sid = msg.get("session")
        if sid not in self.sessions:
            self.respond(msg, ok=False, reason="UnknownSession", step=7)
            return
        ok, reason = yield from self.icnsmf_update_anchor(
            sid, msg.get("new_ap"), msg.get("old_ap"), msg.get("tunnel"), msg.get("peer"),
            msg.get("drain", False))
        self.respond(msg, ok=ok, reason=reason, step=7)

    def icnsmf_update_anchor(self, sid: str, new_ap: str, old_ap: str, tunnel: str,
                             peer: Optional[str], drain: bool = False):
        """Step 6. Returns ``(ok, reason)``; on failure nothing is left installed."""
        entry = self.sessions[sid]
        if new_ap == old_ap:
            if tunnel == entry["tunnel"]:
                return True, ""
            r = yield call(old_ap, "IcnSessionUpdate", 6, op="retunnel", session=sid, tunnel=tunnel,
                           peer=peer, drain=drain)
            if not r.ok:
                return False, "NackFromAnchor"
            entry["old"] = {"ap": old_ap, "tunnel": entry["tunnel"], "mode": "retunnel"}
            entry["tunnel"] = tunnel
            return True, ""
        r = yield call(new_ap, "IcnSessionUpdate", 6, op="attach", session=sid, tunnel=tunnel, peer=peer,
                       prefix=entry["prefix"], ue_addr=entry["ue_addr"])
        if not r.ok:
            return False, "NackFromAnchor"
        r = yield call(old_ap, "IcnSessionUpdate", 6, op="label", session=sid, prefix=entry["prefix"],
                       target=new_ap, drain=drain)
        if not r.ok:
            yield call(new_ap, "IcnSessionUpdate", op="detach", session=sid, remove_tunnel=True)
            return False, "NackFromAnchor"
        entry["old"] = {"ap": old_ap, "tunnel": entry["tunnel"], "mode": "label"}
        entry["ap"], entry["tunnel"] = new_ap, tunnel
        return True, ""

    def _op_revert(self, msg):
        sid = msg.get("session")
        entry = self.sessions.get(sid)
        old = entry and entry["old"]
        if not old:
            self.respond(msg)
            return
        if old["mode"] == "label":
            yield call(old["ap"], "IcnSessionUpdate", op="restore", session=sid, prefix=entry["prefix"])
            yield call(entry["ap"], "IcnSessionUpdate", op="detach", session=sid, remove_tunnel=True)
        else:
            yield call(old["ap"], "IcnSessionUpdate", op="restore", session=sid, prefix=entry["prefix"],
                       drop_tunnel=entry["tunnel"])
        entry["ap"], entry["tunnel"], entry["old"] = old["ap"], old["tunnel"], None
        self.respond(msg)

    def _op_release_old(self, msg):
        sid = msg.get("session")
        entry = self.sessions.get(sid)
        old = entry and entry["old"]
        if not old:
            self.respond(msg)
            return
        if old["mode"] == "label":
            # resolution first: once routers point at the new anchor, the label can go
            if entry["prefix"]:
                yield call(self.nrs, "NrsUpdate", 12, prefix=entry["prefix"], anchor=entry["ap"])
            r = yield call(old["ap"], "IcnSessionUpdate", 12, op="unlabel", session=sid,
                           prefix=entry["prefix"])
        else:
            r = yield call(old["ap"], "IcnSessionUpdate", 12, op="drop_old", session=sid)
        entry["old"] = None
        self.respond(msg, ok=r.ok, reason=r.reason)

    def _op_release(self, msg):
        sid = msg.get("session")
        entry = self.sessions.pop(sid, None)
        if entry is not None:
            yield call(entry["ap"], "IcnSessionUpdate", op="detach", session=sid)
        self.respond(msg)

    def digest(self):
        return " ".join(f"{s}@{e['ap']}:{e['tunnel']}" for s, e in sorted(self.sessions.items()))
