"""User-plane functions: RAN tunnel endpoint, UL-CL classifier, ICN-AP and ICN-DN routers.

The ``*State`` classes and the module-level operations are plain data
manipulation and can be exercised without a simulator. The ``*Node``
classes bind them to the event loop.
"""

from __future__ import annotations

import copy
import ipaddress
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .engine import Role
from .forwarder import Face, FaceKind, Forwarder, ForwarderActions, ForwardingLabel, NoRoute, NotFound
from .messages import ControlMessage, SignalingNode
from .names import (
    Data, EndMarker, FiveTuple, Interest, IpPacket, Nack, Protocol, RadioFrame,
    TunneledPacket, as_name, decapsulate, dotted, encapsulate,
)

UL = "UL"
DL = "DL"
ICN_PORT = 6363


class NoMatch(LookupError):
    pass


class DanglingTunnel(ValueError):
    pass


class NotAttached(LookupError):
    pass


class NoSessionTunnel(LookupError):
    pass


@dataclass(frozen=True)
class RuleMatch:
    """Five-tuple predicate; ``None`` fields are wildcards."""

    src_addr: Optional[int] = None
    dst_addr: Optional[int] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    protocol: Optional[Protocol] = None

    def matches(self, ft: FiveTuple) -> bool:
        return all(
            want is None or want == got
            for want, got in (
                (self.src_addr, ft.src_addr),
                (self.dst_addr, ft.dst_addr),
                (self.src_port, ft.src_port),
                (self.dst_port, ft.dst_port),
                (self.protocol, ft.protocol),
            )
        )

    def __str__(self):
        parts = []
        if self.src_addr is not None:
            parts.append(f"src={dotted(self.src_addr)}")
        if self.dst_addr is not None:
            parts.append(f"dst={dotted(self.dst_addr)}")
        for label, v in (("sport", self.src_port), ("dport", self.dst_port), ("proto", self.protocol)):
            if v is not None:
                parts.append(f"{label}={getattr(v, 'value', v)}")
        return "&".join(parts) or "*"


@dataclass(frozen=True)
class ClassifierRule:
    match: RuleMatch
    action_tunnel: str
    priority: int = 10
    session: Optional[str] = None

    def __str__(self):
        return f"{self.match}->{self.action_tunnel}@{self.priority}"


@dataclass
class N4Delta:
    """A batch of user-plane state changes applied atomically."""

    add_tunnels: Dict[str, str] = field(default_factory=dict)
    remove_tunnels: List[str] = field(default_factory=list)
    add_rules: List[Tuple[str, ClassifierRule]] = field(default_factory=list)
    remove_rules_of: List[str] = field(default_factory=list)  # session ids
    # anchor-only fields
    dl_tunnels: Dict[str, str] = field(default_factory=dict)
    remove_sessions: List[str] = field(default_factory=list)
    ip_hosts: Dict[int, str] = field(default_factory=dict)
    # (tunnel, session, outer) on which an end marker is sent after applying
    end_marker: Optional[Tuple[str, str, FiveTuple]] = None

    def __str__(self):
        parts = []
        if self.add_tunnels:
            parts.append("+tun=" + ",".join(f"{t}>{p}" for t, p in self.add_tunnels.items()))
        if self.remove_tunnels:
            parts.append("-tun=" + ",".join(self.remove_tunnels))
        if self.add_rules:
            parts.append("+rules=" + ",".join(f"{d}:{r}" for d, r in self.add_rules))
        if self.remove_rules_of:
            parts.append("-rules=" + ",".join(self.remove_rules_of))
        if self.dl_tunnels:
            parts.append("dl=" + ",".join(f"{s}>{t}" for s, t in self.dl_tunnels.items()))
        if self.remove_sessions:
            parts.append("-sess=" + ",".join(self.remove_sessions))
        if self.ip_hosts:
            parts.append("hosts=" + ",".join(f"{dotted(a)}>{s}" for a, s in self.ip_hosts.items()))
        if self.end_marker:
            parts.append(f"marker={self.end_marker[0]}")
        return "N4(" + " ".join(parts) + ")"


class UlClState:
    def __init__(self):
        self.ul_rules: List[Tuple[int, ClassifierRule]] = []
        self.dl_rules: List[Tuple[int, ClassifierRule]] = []
        self.tunnels: Dict[str, str] = {}
        self._order = 0

    def rules(self, direction: str) -> List[Tuple[int, ClassifierRule]]:
        return self.ul_rules if direction == UL else self.dl_rules

    def add_rule(self, direction: str, rule: ClassifierRule):
        rules = self.rules(direction)
        # one rule per (match, priority): a re-add replaces in place
        for i, (order, existing) in enumerate(rules):
            if existing.match == rule.match and existing.priority == rule.priority:
                rules[i] = (order, rule)
                return
        self._order += 1
        rules.append((self._order, rule))

    def apply_delta(self, delta: N4Delta):
        staged = copy.deepcopy(self)
        for tid, peer in delta.add_tunnels.items():
            staged.tunnels[tid] = peer
        for tid in delta.remove_tunnels:
            staged.tunnels.pop(tid, None)
        for sess in delta.remove_rules_of:
            staged.ul_rules = [(o, r) for o, r in staged.ul_rules if r.session != sess]
            staged.dl_rules = [(o, r) for o, r in staged.dl_rules if r.session != sess]
        for direction, rule in delta.add_rules:
            staged.add_rule(direction, rule)
        for _, rule in staged.ul_rules + staged.dl_rules:
            if rule.action_tunnel not in staged.tunnels:
                raise DanglingTunnel(f"rule {rule} references unknown tunnel {rule.action_tunnel}")
        self.__dict__.update(staged.__dict__)

    def rules_for_session(self, session: str) -> List[ClassifierRule]:
        return [r for _, r in self.ul_rules + self.dl_rules if r.session == session]


def ulcl_classify(pkt, direction: str, state: UlClState) -> str:
    ft = pkt.five_tuple() if isinstance(pkt, TunneledPacket) else pkt.header
    if ft is None:
        raise NoMatch("packet carries no five tuple")
    best = None
    for order, rule in state.rules(direction):
        if rule.match.matches(ft):
            key = (-rule.priority, order)
            if best is None or key < best[0]:
                best = (key, rule)
    if best is None:
        raise NoMatch(str(ft))
    return best[1].action_tunnel


class IcnApState:
    def __init__(self, forwarder: Forwarder, anchor_role: bool = True):
        self.forwarder = forwarder
        self.anchor_role = anchor_role
        self.tunnels: Dict[str, str] = {}
        self.dl_tunnels: Dict[str, str] = {}
        # session -> old tunnel kept only to let uplink drain after a switch
        self.draining: Dict[str, str] = {}
        self.ip_hosts: Dict[int, str] = {}
        self.session_addr: Dict[str, int] = {}

    def apply_delta(self, delta: N4Delta):
        tunnels = dict(self.tunnels)
        dl = dict(self.dl_tunnels)
        hosts = dict(self.ip_hosts)
        tunnels.update(delta.add_tunnels)
        for tid in delta.remove_tunnels:
            tunnels.pop(tid, None)
        for sess in delta.remove_sessions:
            dl.pop(sess, None)
            hosts = {a: s for a, s in hosts.items() if s != sess}
        dl.update(delta.dl_tunnels)
        hosts.update(delta.ip_hosts)
        for sess, tid in dl.items():
            if tid not in tunnels:
                raise DanglingTunnel(f"session {sess} bound to unknown tunnel {tid}")
        removed = [t for t in self.tunnels if t not in tunnels]
        self.tunnels, self.dl_tunnels, self.ip_hosts = tunnels, dl, hosts
        for sess in delta.remove_sessions:
            self.session_addr.pop(sess, None)
        for a, s in delta.ip_hosts.items():
            self.session_addr[s] = a
        for tid in removed:
            face = self.forwarder.face_for(FaceKind.TUNNEL, tid)
            if face is not None:
                self.forwarder.remove_face(face)
        for tid in tunnels:
            self.forwarder.add_face(FaceKind.TUNNEL, tid)

    def tunnel_session(self, tid: str) -> Optional[str]:
        for sess, t in list(self.dl_tunnels.items()) + list(self.draining.items()):
            if t == tid:
                return sess
        return None


def n4_update(delta: N4Delta, state):
    """Apply ``delta`` to a UL-CL or ICN-AP state; all or nothing."""
    state.apply_delta(delta)


def icnap_uplink(tp: TunneledPacket, state: IcnApState, now: int) -> ForwarderActions:
    tid, pdu = decapsulate(tp)
    face = state.forwarder.face_for(FaceKind.TUNNEL, tid)
    if face is None:
        face = state.forwarder.add_face(FaceKind.TUNNEL, tid)
    if isinstance(pdu, Interest):
        return state.forwarder.process_interest(pdu, face, now)
    if isinstance(pdu, Data):
        return state.forwarder.process_data(pdu, face, now)
    if isinstance(pdu, Nack):
        return process_nack(state.forwarder, pdu, face, now)
    raise TypeError(f"not an ICN PDU: {pdu!r}")


def process_nack(fwd: Forwarder, nack: Nack, in_face: Face, now: int) -> ForwarderActions:
    entry = fwd.pit.pop(nack.interest.name, None)
    if entry is None:
        fwd.counters["unsolicited"] += 1
        return ForwarderActions("unsolicited")
    out = []
    for face_id, nonce in entry.downstream:
        if face_id in fwd.faces:
            out.append((fwd.faces[face_id], Interest(nack.interest.name, nonce, nack.interest.lifetime)))
    fwd.counters["nacked"] += 1
    return ForwarderActions("nacked", nack=out)


class RanState:
    def __init__(self):
        self.attached_ues: Set[str] = set()
        self.ue_tunnels: Dict[Tuple[str, str], str] = {}
        self.tunnel_peer: Dict[str, str] = {}
        self.session_outer: Dict[Tuple[str, str], FiveTuple] = {}

    def install(self, ue: str, session: str, tunnel: str, peer: str, outer: Optional[FiveTuple]):
        old = self.ue_tunnels.get((ue, session))
        if old is not None and old != tunnel:
            self.tunnel_peer.pop(old, None)
        self.ue_tunnels[(ue, session)] = tunnel
        self.tunnel_peer[tunnel] = peer
        if outer is not None:
            self.session_outer[(ue, session)] = outer

    def remove(self, ue: str, session: str) -> Optional[str]:
        tid = self.ue_tunnels.pop((ue, session), None)
        if tid is not None:
            self.tunnel_peer.pop(tid, None)
        self.session_outer.pop((ue, session), None)
        return tid

    def session_of(self, tunnel: str) -> Optional[Tuple[str, str]]:
        for key, tid in self.ue_tunnels.items():
            if tid == tunnel:
                return key
        return None


def ran_relay(pdu, ue: str, session_id: str, direction: str, state: RanState):
    if ue not in state.attached_ues:
        raise NotAttached(ue)
    tid = state.ue_tunnels.get((ue, session_id))
    if tid is None:
        raise NoSessionTunnel(f"{ue}/{session_id}")
    if direction == UL:
        return encapsulate(pdu, tid, state.tunnel_peer, state.session_outer.get((ue, session_id)))
    return RadioFrame(ue, session_id, pdu)


@dataclass(frozen=True)
class RadioAttach:
    ue: str

    def __str__(self):
        return f"RadioAttach ue={self.ue}"


def _describe_pdu(pdu) -> str:
    if isinstance(pdu, TunneledPacket):
        return f"tunnel={pdu.tunnel_id} {_describe_pdu(pdu.inner)}"
    if isinstance(pdu, (Interest, Data, Nack)):
        return f"{type(pdu).__name__} {pdu.name}"
    if isinstance(pdu, IpPacket):
        return f"IpPacket {pdu.header}"
    return str(pdu)


class UserPlaneNode(SignalingNode):
    def drop(self, cause: str, pdu, direction: str = "-"):
        self.count("drops", cause=cause)
        self.log("drop", f"dir={direction} cause={cause} {_describe_pdu(pdu)}")

    def fwd_log(self, direction: str, pdu, outcome: str, tunnel: str = "-"):
        self.log("fwd", f"dir={direction} {_describe_pdu(pdu)} tunnel={tunnel} outcome={outcome}")


class RanNode(UserPlaneNode):
    role = Role.RAN

    def __init__(self, node_id: str, amf: str = "amf", nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.amf = amf
        self.state = RanState()
        self.early: Dict[str, List] = {}
        self.pending_dl: Dict[Tuple[str, str], List] = {}
        self.ul_markers: Set[str] = set()
        self.pending_release: Dict[str, ControlMessage] = {}
        self.released: List[Tuple[str, str]] = []

    # radio side ----------------------------------------------------------

    def attach(self, ue: str):
        self.state.attached_ues.add(ue)
        self.log("attach", f"ue={ue}")
        for (u, s), queue in sorted(self.pending_dl.items()):
            if u == ue:
                self._flush(u, s)

    def on_packet(self, src, pdu):
        if isinstance(pdu, RadioAttach):
            self.attach(pdu.ue)
        elif isinstance(pdu, RadioFrame):
            self._uplink(pdu)
        elif isinstance(pdu, TunneledPacket):
            self._downlink(pdu)
        else:
            self.drop("unexpected", pdu)

    def _uplink(self, frame: RadioFrame):
        try:
            tp = ran_relay(frame.pdu, frame.ue, frame.session_id, UL, self.state)
        except (NotAttached, NoSessionTunnel) as exc:
            self.drop(type(exc).__name__, frame.pdu, UL)
            return
        self.fwd_log(UL, frame.pdu, "relayed", tp.tunnel_id)
        self.send(self.state.tunnel_peer[tp.tunnel_id], tp)
        marker = frame.pdu
        if isinstance(marker, EndMarker) and marker.uplink:
            self.ul_markers.add(marker.session_id)
            if marker.session_id in self.pending_release:
                self._release(self.pending_release.pop(marker.session_id))

    def _downlink(self, tp: TunneledPacket):
        key = self.state.session_of(tp.tunnel_id)
        if key is None:
            # target side of a handover: data may arrive before the context
            self.early.setdefault(tp.tunnel_id, []).append(tp.inner)
            self.count("ran_buffered")
            self.fwd_log(DL, tp, "buffered")
            return
        self._deliver(key[0], key[1], tp.inner)

    def _deliver(self, ue: str, session: str, pdu):
        if ue not in self.state.attached_ues:
            self.pending_dl.setdefault((ue, session), []).append(pdu)
            self.count("ran_buffered")
            self.fwd_log(DL, pdu, "buffered")
            return
        frame = ran_relay(pdu, ue, session, DL, self.state)
        self.fwd_log(DL, pdu, "delivered", self.state.ue_tunnels[(ue, session)])
        self.send(ue, frame)

    def _flush(self, ue: str, session: str):
        queue = self.pending_dl.pop((ue, session), [])
        for pdu in queue:
            self._deliver(ue, session, pdu)

    # control side --------------------------------------------------------

    def _install_session(self, msg: ControlMessage):
        ue, sess, tid, peer = msg.get("ue"), msg.get("session"), msg.get("tunnel"), msg.get("ulcl")
        self.state.install(ue, sess, tid, peer, msg.get("outer"))
        self.log("session", f"install ue={ue} session={sess} tunnel={tid} peer={peer}")
        early = self.early.pop(tid, [])
        if early:
            self.pending_dl.setdefault((ue, sess), []).extend(early)
        if ue in self.state.attached_ues:
            self._flush(ue, sess)

        def done(reply, _):
            if reply.ok:
                self.respond(msg)
            else:
                self.state.remove(ue, sess)
                for pdu in self.pending_dl.pop((ue, sess), []):
                    self.drop("SetupFailed", pdu, DL)
                self.respond(msg, ok=False, reason=reply.reason)

        self.request(peer, "TunnelSetup", step=msg.step, on_reply=done, tunnel=tid, ran=self.node_id)

    def ctl_RanSessionSetup(self, msg):
        self._install_session(msg)

    def ctl_PathSwitchCommand(self, msg):
        self._install_session(msg)

    def ctl_HandoverRequest(self, msg):
        # step 2: relay the UE's request to the AMF under the same correlation id
        self.request(self.amf, "HandoverRequired", step=2, corr=msg.corr,
                     ue=msg.get("ue"), s_ran=self.node_id, t_ran=msg.get("t_ran"),
                     sessions=msg.get("sessions"), names=msg.get("names"))

    def ctl_HandoverConfirm(self, msg):
        ue = msg.get("ue")
        self.attach(ue)
        self.notify(self.amf, "HandoverNotify", step=11, corr=msg.corr, ue=ue, t_ran=self.node_id)

    def ctl_ReleaseCommand(self, msg):
        sess = msg.get("session")
        if msg.get("drain") and sess not in self.ul_markers:
            self.pending_release[sess] = msg
            self.log("release", f"deferred session={sess} awaiting end marker")
            return
        self._release(msg)

    def _release(self, msg):
        ue, sess = msg.get("ue"), msg.get("session")
        tid = self.state.remove(ue, sess)
        self.ul_markers.discard(sess)
        self.pending_dl.pop((ue, sess), None)
        if not any(u == ue for u, _ in self.state.ue_tunnels):
            self.state.attached_ues.discard(ue)
        self.released.append((ue, sess))
        self.sim.mark("release", node=self.node_id, ue=ue, session=sess, tunnel=tid)
        self.respond(msg)

    def digest(self):
        return (f"attached={sorted(self.state.attached_ues)} "
                f"tunnels={sorted(f'{u}/{s}:{t}' for (u, s), t in self.state.ue_tunnels.items())}")


class UlClNode(UserPlaneNode):
    role = Role.ULCL

    def __init__(self, node_id: str, nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.state = UlClState()
        self.bound: Set[str] = set()
        self.ul_markers: Set[str] = set()
        self.pending: Dict[str, List[ControlMessage]] = {}

    def on_packet(self, src, pdu):
        if not isinstance(pdu, TunneledPacket):
            self.drop("unexpected", pdu)
            return
        direction = UL if self.sim.topology.roles.get(src) == Role.RAN else DL
        inner = pdu.inner
        if isinstance(inner, EndMarker) and inner.uplink and inner.origin == self.node_id:
            self.log("fwd", f"dir=UL {inner} outcome=consumed")
            self._marker_seen(inner.session_id)
            return
        try:
            out = ulcl_classify(pdu, direction, self.state)
        except NoMatch:
            self.drop("NoMatch", pdu, direction)
            return
        peer = self.state.tunnels[out]
        self.fwd_log(direction, inner, "classified", f"{pdu.tunnel_id}>{out}")
        self.send(peer, encapsulate(inner, out, self.state.tunnels, pdu.outer))
        if isinstance(inner, EndMarker) and inner.uplink:
            self._marker_seen(inner.session_id)

    def _marker_seen(self, session: str):
        self.ul_markers.add(session)
        for msg in self.pending.pop(session, []):
            self._apply(msg)

    def ctl_N4Update(self, msg):
        drain = msg.get("drain")
        if drain and drain not in self.ul_markers:
            self.pending.setdefault(drain, []).append(msg)
            self.log("n4", f"deferred awaiting end marker session={drain}")
            return
        self._apply(msg)

    def _apply(self, msg):
        delta: N4Delta = msg.get("delta")
        try:
            n4_update(delta, self.state)
        except DanglingTunnel as exc:
            self.respond(msg, ok=False, reason="DanglingTunnel")
            self.log("n4", f"rejected {exc}")
            return
        self.bound -= set(delta.remove_tunnels)
        if msg.get("drain"):
            self.ul_markers.discard(msg.get("drain"))
        self.log("n4", f"applied {delta}")
        if delta.end_marker is not None:
            tid, sess, outer = delta.end_marker
            if tid in self.state.tunnels:
                self.send(self.state.tunnels[tid],
                          encapsulate(EndMarker(sess, self.node_id), tid, self.state.tunnels, outer))
        self.respond(msg)

    def ctl_TunnelSetup(self, msg):
        tid = msg.get("tunnel")
        if self.state.tunnels.get(tid) != msg.sender:
            self.respond(msg, ok=False, reason="UnknownTunnel")
            return
        self.bound.add(tid)
        self.respond(msg)

    def digest(self):
        rules = [f"UL:{r}" for _, r in self.state.ul_rules] + [f"DL:{r}" for _, r in self.state.dl_rules]
        return f"tunnels={sorted(self.state.tunnels.items())} rules={rules}"


class IcnNode(UserPlaneNode):
    """Shared plumbing for nodes that embed a forwarder and route IP."""

    def __init__(self, node_id: str, forwarder: Forwarder, nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.forwarder = forwarder
        self.ip_routes: List[Tuple[ipaddress.IPv4Network, str]] = []

    def link_face(self, neighbour: str) -> Face:
        return self.forwarder.add_face(FaceKind.LINK, neighbour)

    def add_ip_route(self, network: str, next_hop: str):
        self.ip_routes.append((ipaddress.ip_network(network), next_hop))
        self.ip_routes.sort(key=lambda r: (-r[0].prefixlen, int(r[0].network_address)))

    def ip_next_hop(self, dst: int) -> Optional[str]:
        a = ipaddress.IPv4Address(dst)
        for net, hop in self.ip_routes:
            if a in net:
                return hop
        return None

    def handle_icn(self, pdu, face: Face, direction: str):
        now = self.sim.clock
        fwd = self.forwarder
        if isinstance(pdu, Interest):
            actions = fwd.process_interest(pdu, face, now)
        elif isinstance(pdu, Data):
            actions = fwd.process_data(pdu, face, now)
        else:
            actions = process_nack(fwd, pdu, face, now)
        self.after_forwarding(pdu, face, actions, direction)

    def after_forwarding(self, pdu, face, actions: ForwarderActions, direction: str):
        self.count("icn_" + actions.outcome)
        self.log("fwd", f"dir={direction} {_describe_pdu(pdu)} in={face} outcome={actions.outcome}")
        if actions.outcome in ("unsolicited", "duplicate_nonce", "no_route"):
            self.count("drops", cause=actions.outcome)
        if actions.outcome in ("forwarded", "label"):
            self.sim.set_timer(self.node_id, pdu.lifetime, "pit")
        for out_face, pkt in actions.send:
            self.emit(out_face, pkt)
        for out_face, interest in actions.nack:
            self.emit(out_face, Nack(interest))

    def emit(self, face: Face, pkt):
        if face.kind == FaceKind.LINK:
            self.send(face.ref, pkt)
        else:
            self.count("local_delivery")

    def on_timer(self, tag, data):
        if tag == "pit":
            for name in self.forwarder.expire_pit(self.sim.clock):
                self.count("drops", cause="expiry")
                self.log("drop", f"cause=expiry Interest {name}")

    def route_ip(self, pkt: IpPacket):
        hop = self.ip_next_hop(pkt.header.dst_addr)
        if hop is None:
            self.drop("NoRoute", pkt)
            return
        self.send(hop, pkt)


class IcnApNode(IcnNode):
    role = Role.ICN_AP

    def __init__(self, node_id: str, address: int, pool: Optional[str] = None,
                 cs_capacity: int = 0, linger: int = 0, nack_tags=()):
        super().__init__(node_id, Forwarder(node_id, cs_capacity, is_anchor=True), nack_tags)
        self.state = IcnApState(self.forwarder)
        self.address = address
        self.pool = ipaddress.ip_network(pool) if pool else None
        self.linger = linger
        self.session_prefix: Dict[str, str] = {}
        self.ul_markers: Set[str] = set()
        self.pending: Dict[str, dict] = {}

    # data path -----------------------------------------------------------

    def on_packet(self, src, pdu):
        if isinstance(pdu, TunneledPacket):
            inner = pdu.inner
            if isinstance(inner, (Interest, Data, Nack)):
                face = self.forwarder.face_for(FaceKind.TUNNEL, pdu.tunnel_id)
                if face is None or pdu.tunnel_id not in self.state.tunnels:
                    self.drop("UnknownTunnel", pdu, UL)
                    return
                actions = icnap_uplink(pdu, self.state, self.sim.clock)
                self.after_forwarding(inner, face, actions, UL)
            elif isinstance(inner, EndMarker):
                if inner.uplink and inner.origin == self.node_id:
                    self.log("fwd", f"dir=UL {inner} outcome=consumed")
                    self.ul_markers.add(inner.session_id)
                    self._check_pending(inner.session_id)
            elif isinstance(inner, IpPacket):
                self.route_ip(inner)
            return
        if isinstance(pdu, (Interest, Data, Nack)):
            self.handle_icn(pdu, self.link_face(src), DL)
        elif isinstance(pdu, IpPacket):
            self.route_ip(pdu)
        else:
            self.drop("unexpected", pdu)

    def emit(self, face: Face, pkt):
        if face.kind != FaceKind.TUNNEL:
            return super().emit(face, pkt)
        tid = face.ref
        peer = self.state.tunnels.get(tid)
        if peer is None:
            self.drop("UnknownTunnel", pkt, DL)
            return
        self.send(peer, encapsulate(pkt, tid, self.state.tunnels, self._outer(tid)))

    def _outer(self, tid: str) -> Optional[FiveTuple]:
        sess = self.state.tunnel_session(tid)
        ue_addr = self.state.session_addr.get(sess)
        if ue_addr is None:
            return None
        return FiveTuple(self.address, ue_addr, ICN_PORT, ICN_PORT, Protocol.UDP)

    def route_ip(self, pkt: IpPacket):
        dst = pkt.header.dst_addr
        sess = self.state.ip_hosts.get(dst)
        if sess is not None and sess in self.state.dl_tunnels:
            tid = self.state.dl_tunnels[sess]
            self.fwd_log(DL, pkt, "tunneled", tid)
            self.send(self.state.tunnels[tid], encapsulate(pkt, tid, self.state.tunnels))
            return
        if self.pool is not None and ipaddress.IPv4Address(dst) in self.pool:
            # address from our pool with no live session: tell the sender
            self.drop("HostUnreachable", pkt, DL)
            if pkt.body[:1] != ("unreachable",):
                h = pkt.header
                reply = IpPacket(FiveTuple(self.address, h.src_addr, 0, h.src_port, Protocol.OTHER),
                                 64, ("unreachable", dotted(dst)))
                super().route_ip(reply)
            return
        super().route_ip(pkt)

    # control -------------------------------------------------------------

    def ctl_N4Update(self, msg):
        delta: N4Delta = msg.get("delta")
        try:
            n4_update(delta, self.state)
        except DanglingTunnel:
            self.respond(msg, ok=False, reason="DanglingTunnel")
            return
        self.log("n4", f"applied {delta}")
        self.respond(msg)

    def ctl_IcnSessionUpdate(self, msg):
        op = msg.get("op")
        handler = getattr(self, "_op_" + op, None)
        if handler is None:
            self.respond(msg, ok=False, reason="UnknownOp")
            return
        handler(msg)

    def _bind(self, sess: str, tid: str, prefix: Optional[str], ue_addr: Optional[int]):
        face = self.forwarder.add_face(FaceKind.TUNNEL, tid)
        self.state.dl_tunnels[sess] = tid
        if ue_addr is not None:
            self.state.session_addr[sess] = ue_addr
        if prefix:
            self.session_prefix[sess] = prefix
            self.forwarder.add_route(as_name(prefix), face)

    def _unbind_route(self, sess: str, tid: str):
        prefix = self.session_prefix.get(sess)
        face = self.forwarder.face_for(FaceKind.TUNNEL, tid)
        if prefix and face is not None:
            self.forwarder.remove_route(as_name(prefix), face)

    def _send_marker(self, sess: str, tid: str):
        peer = self.state.tunnels.get(tid)
        if peer is not None:
            self.send(peer, encapsulate(EndMarker(sess, self.node_id), tid, self.state.tunnels,
                                        self._outer(tid)))

    def _op_attach(self, msg):
        sess, tid, peer = msg.get("session"), msg.get("tunnel"), msg.get("peer")
        if peer is not None:
            self.state.tunnels[tid] = peer
        if tid not in self.state.tunnels:
            self.respond(msg, ok=False, reason="DanglingTunnel")
            return
        self._bind(sess, tid, msg.get("prefix"), msg.get("ue_addr"))
        self.log("anchor", f"attach session={sess} tunnel={tid}")
        self.respond(msg)

    def _op_label(self, msg):
        sess, prefix, target = msg.get("session"), msg.get("prefix"), msg.get("target")
        if not self.sim.topology.has_link(self.node_id, target):
            self.respond(msg, ok=False, reason="NoLink")
            return
        label = ForwardingLabel(as_name(prefix), target, self.link_face(target))
        self.forwarder.install_forwarding_label(label)
        self.session_prefix.setdefault(sess, prefix)
        tid = self.state.dl_tunnels.pop(sess, None)
        if tid is not None:
            self.state.draining[sess] = tid
            self._unbind_route(sess, tid)
            if msg.get("drain"):
                self._send_marker(sess, tid)
        self.log("anchor", f"label {prefix} -> {target} session={sess}")
        self.respond(msg)

    def _op_retunnel(self, msg):
        sess, tid, peer = msg.get("session"), msg.get("tunnel"), msg.get("peer")
        old = self.state.dl_tunnels.get(sess)
        self.state.tunnels[tid] = peer
        if old is not None:
            self._unbind_route(sess, old)
            self.state.draining[sess] = old
        self._bind(sess, tid, self.session_prefix.get(sess), None)
        if old is not None and msg.get("drain"):
            self._send_marker(sess, old)
        self.respond(msg)

    def _op_unlabel(self, msg):
        self._await_drain(msg, linger=self.linger)

    def _op_drop_old(self, msg):
        self._await_drain(msg, linger=0)

    def _await_drain(self, msg, linger: int):
        sess = msg.get("session")
        self.pending[sess] = {"msg": msg, "linger_done": linger == 0}
        if linger:
            self.sim.set_timer(self.node_id, linger, "linger", sess)
        self._check_pending(sess)

    def on_timer(self, tag, data):
        if tag == "linger":
            if data in self.pending:
                self.pending[data]["linger_done"] = True
                self._check_pending(data)
            return
        super().on_timer(tag, data)

    def _check_pending(self, sess: str):
        entry = self.pending.get(sess)
        if entry is None or not entry["linger_done"]:
            return
        if sess in self.state.draining and sess not in self.ul_markers:
            return
        del self.pending[sess]
        msg = entry["msg"]
        prefix = msg.get("prefix")
        if msg.get("op") == "unlabel" and prefix:
            try:
                self.forwarder.remove_forwarding_label(as_name(prefix))
            except NotFound:
                pass
        old = self.state.draining.pop(sess, None)
        if old is not None:
            self.state.tunnels.pop(old, None)
            face = self.forwarder.face_for(FaceKind.TUNNEL, old)
            if face is not None:
                self.forwarder.remove_face(face)
        self.ul_markers.discard(sess)
        if sess not in self.state.dl_tunnels:
            self.session_prefix.pop(sess, None)
            self.state.session_addr.pop(sess, None)
        self.log("anchor", f"{msg.get('op')} done session={sess}")
        self.respond(msg)

    def _op_detach(self, msg):
        sess = msg.get("session")
        tid = self.state.dl_tunnels.pop(sess, None)
        if tid is not None:
            self._unbind_route(sess, tid)
            if msg.get("remove_tunnel"):
                self.state.tunnels.pop(tid, None)
                face = self.forwarder.face_for(FaceKind.TUNNEL, tid)
                if face is not None:
                    self.forwarder.remove_face(face)
        self.session_prefix.pop(sess, None)
        self.state.session_addr.pop(sess, None)
        self.respond(msg)

    def _op_restore(self, msg):
        sess, prefix = msg.get("session"), msg.get("prefix")
        label = self.forwarder.labels.get(as_name(prefix))
        try:
            self.forwarder.remove_forwarding_label(as_name(prefix))
        except NotFound:
            pass
        drop = msg.get("drop_tunnel")
        if drop is not None:
            self._unbind_route(sess, drop)
            self.state.tunnels.pop(drop, None)
            face = self.forwarder.face_for(FaceKind.TUNNEL, drop)
            if face is not None:
                self.forwarder.remove_face(face)
        tid = self.state.draining.pop(sess, None)
        if tid is not None:
            self._bind(sess, tid, prefix, None)
        if label is not None:
            self._reissue(label.via)
        self.respond(msg)

    def _reissue(self, redirect: Face):
        """Send Interests that went out through a withdrawn label again, on the normal route."""
        now = self.sim.clock
        for name in sorted(self.forwarder.pit):
            entry = self.forwarder.pit[name]
            if entry.upstream != redirect.face_id or entry.expiry <= now:
                continue
            try:
                out = self.forwarder.fib_lookup(name)
            except NoRoute:
                continue
            entry.upstream = out.face_id
            interest = Interest(name, entry.downstream[0][1], entry.expiry - now)
            self.fwd_log(DL, interest, "reissued")
            self.emit(out, interest)

    def digest(self):
        return (f"tunnels={sorted(self.state.tunnels.items())} dl={sorted(self.state.dl_tunnels.items())} "
                f"draining={sorted(self.state.draining.items())} labels={sorted(map(str, self.forwarder.labels))} "
                f"pit={len(self.forwarder.pit)} cs={len(self.forwarder.cs)}")


class DnRouterNode(IcnNode):
    role = Role.DN_ROUTER

    def __init__(self, node_id: str, cs_capacity: int = 0, nack_tags=()):
        super().__init__(node_id, Forwarder(node_id, cs_capacity), nack_tags)

    def on_packet(self, src, pdu):
        if isinstance(pdu, (Interest, Data, Nack)):
            self.handle_icn(pdu, self.link_face(src), "-")
        elif isinstance(pdu, IpPacket):
            self.route_ip(pdu)
        else:
            self.drop("unexpected", pdu)

    def ctl_RouteUpdate(self, msg):
        prefix, anchor = as_name(msg.get("prefix")), msg.get("anchor")
        hop = self.sim.topology.next_hop(self.node_id, anchor, DN_ROLES)
        if hop is None:
            self.respond(msg, ok=False, reason="NoPath")
            return
        self.forwarder.remove_route(prefix)
        self.forwarder.add_route(prefix, self.link_face(hop))
        self.log("route", f"{prefix} -> {hop} (anchor {anchor})")
        self.respond(msg)

    def digest(self):
        return f"fib={len(self.forwarder.fib)} pit={len(self.forwarder.pit)} cs={len(self.forwarder.cs)}"


DN_ROLES = (Role.DN_ROUTER, Role.ICN_AP, Role.APP_SERVER)
