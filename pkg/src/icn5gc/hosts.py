"""End hosts: the UE (vehicle) and application servers on the data network side."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from .engine import Role
from .messages import SignalingNode
from .names import (
    Data, EndMarker, FiveTuple, Interest, IpPacket, Nack, Protocol, RadioFrame, as_name,
    dotted, is_prefix_of,
)
from .userplane import RadioAttach

HTTP_PORT = 80
DNS_PORT = 53


class RequestTracker:
    """Issue/satisfy bookkeeping for one consumer application."""

    def __init__(self):
        self.issued: Dict[str, int] = {}
        self.satisfied: Dict[str, int] = {}
        self.latencies: List[int] = []
        self.duplicates = 0
        self.nacked = 0
        self.failed: List[str] = []

    def issue(self, key: str, now: int):
        self.issued.setdefault(key, now)

    def satisfy(self, key: str, now: int) -> bool:
        if key not in self.issued:
            return False
        if key in self.satisfied:
            self.duplicates += 1
            return False
        self.satisfied[key] = now
        self.latencies.append(now - self.issued[key])
        return True

    def outstanding(self) -> List[str]:
        return [k for k in self.issued if k not in self.satisfied]

    @property
    def lost(self) -> int:
        return len(self.issued) - len(self.satisfied)


def _reply_header(h: FiveTuple) -> FiveTuple:
    return FiveTuple(h.dst_addr, h.src_addr, h.dst_port, h.src_port, h.protocol)


@dataclass(frozen=True)
class Publication:
    """A processed sensing update handed along the edge/cloud pipeline."""

    segment: str
    version: int

    def __str__(self):
        return f"Publication segment={self.segment} v={self.version}"


class UeNode(SignalingNode):
    """A vehicle: registers, opens its configured sessions, produces under its
    own prefix and consumes named content or IP services."""

    role = Role.UE

    def __init__(self, node_id: str, amf: str = "amf", prefix: Optional[str] = None,
                 sessions: Sequence[dict] = ({"kind": "icn"},), produce: bool = True,
                 payload_size: int = 1024, lifetime: int = 4000, nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.amf = amf
        self.prefix = prefix or f"/{node_id}"
        self.session_cfg = [dict(s) for s in sessions]
        self.produce = produce
        self.payload_size = payload_size
        self.lifetime = lifetime
        self.serving_ran: Optional[str] = None
        self.icn_authorized = False
        self.sessions: Dict[str, dict] = {}
        self.establishing: Dict[str, int] = {}
        self.waiting: List[dict] = []
        self.requests = RequestTracker()
        self.dns_cache: Dict[str, int] = {}
        self.dns_waiting: Dict[str, List[dict]] = {}
        self._qid = 0
        self._port = 40000
        self.handover: Optional[dict] = None

    # helpers ---------------------------------------------------------------

    def session_of_kind(self, kind: str) -> Optional[str]:
        for sid in sorted(self.sessions):
            if self.sessions[sid]["kind"] == kind:
                return sid
        return None

    def _default_kind(self) -> str:
        kinds = [c.get("kind", "icn") for c in self.session_cfg]
        return "icn" if "icn" in kinds else "ip"

    def _radio(self, ran: str, sid: str, pdu):
        self.send(ran, RadioFrame(self.node_id, sid, pdu))

    # actions -----------------------------------------------------------------

    def on_action(self, action):
        do = action.get("do")
        if do == "ue_attach":
            self.attach(action["ran"])
        elif do == "request":
            self.issue(action)
        elif do == "trigger_handover":
            self.trigger_handover(action["target"])
        elif do == "detach":
            self.detach()
        else:
            super().on_action(action)

    def attach(self, ran: str):
        self.serving_ran = ran
        self.send(ran, RadioAttach(self.node_id))
        self.request(self.amf, "RegistrationRequest", on_reply=self._registered, ran=ran,
                     prefix=self.prefix)

    def detach(self):
        self.log("detach", f"ran={self.serving_ran}")
        self.serving_ran = None
        self.sessions.clear()

    def _registered(self, reply, _):
        self.icn_authorized = bool(reply.get("icn_authorized"))
        for cfg in self.session_cfg:
            kind = cfg.get("kind", "icn")
            self.establishing[kind] = self.establishing.get(kind, 0) + 1
            self.request(self.amf, "SessionEstablishRequest", on_reply=self._established, ctx=cfg,
                         kind=kind, slice=cfg.get("slice"))

    def _established(self, reply, cfg):
        kind = cfg.get("kind", "icn")
        self.establishing[kind] -= 1
        if reply.ok:
            sid = reply.get("session")
            self.sessions[sid] = {"kind": kind, "addr": reply.get("addr"), "ran": reply.get("ran"),
                                  "dns": reply.get("dns")}
            self.log("session", f"up {sid} kind={kind} ran={reply.get('ran')}")
        else:
            self.count("session_rejected")
            self.log("session", f"rejected kind={kind} reason={reply.reason}")
        still = []
        for action in self.waiting:
            if action.get("via", self._default_kind()) == kind and not self.establishing[kind]:
                self.issue(action)
            else:
                still.append(action)
        self.waiting = still

    def issue(self, action: dict):
        kind = action.get("via") or self._default_kind()
        sid = self.session_of_kind(kind)
        if sid is None or self.serving_ran is None:
            if self.establishing.get(kind):
                self.waiting.append(action)
            else:
                self.count("requests_blocked")
                self.log("blocked", f"{action.get('name')} no {kind} session")
            return
        name = str(action["name"])
        if kind == "icn":
            interest = Interest(as_name(name), self.sim.next_nonce(), self.lifetime)
            self.requests.issue(name, self.sim.clock)
            self._radio(self.serving_ran, sid, interest)
            return
        service = action.get("service", "")
        if service in self.dns_cache:
            self._ip_request(sid, self.dns_cache[service], name)
            return
        first = service not in self.dns_waiting
        self.dns_waiting.setdefault(service, []).append(action)
        if first:
            self._qid += 1
            self.count("dns_lookups")
            sess = self.sessions[sid]
            hdr = FiveTuple(sess["addr"], sess["dns"], self._next_port(), DNS_PORT, Protocol.UDP)
            self._radio(self.serving_ran, sid, IpPacket(hdr, 64, ("dnsq", service, self._qid)))

    def _next_port(self) -> int:
        self._port += 1
        return self._port

    def _ip_request(self, sid: str, server: int, name: str):
        sess = self.sessions[sid]
        self.requests.issue(name, self.sim.clock)
        hdr = FiveTuple(sess["addr"], server, self._next_port(), HTTP_PORT, Protocol.TCP)
        self._radio(self.serving_ran, sid, IpPacket(hdr, 128, ("request", name)))

    def trigger_handover(self, target: str):
        sids = sorted(self.sessions)
        if not sids or self.serving_ran is None:
            self.count("handover_refused")
            return
        self.handover = {"s_ran": self.serving_ran, "t_ran": target, "start": self.sim.clock}
        self.sim.mark("handover_start", node=self.node_id, s_ran=self.serving_ran, t_ran=target)
        self.request(self.serving_ran, "HandoverRequest", step=1, on_reply=self._handover_ack,
                     ue=self.node_id, t_ran=target, sessions=sids, names=[self.prefix])

    def _handover_ack(self, reply, _):
        ho = self.handover
        if not reply.ok:
            self.count("handover_aborted")
            self.sim.mark("handover_aborted", node=self.node_id, reason=reply.reason)
            self.handover = None
            return
        # step 9 carries the new default route: from now on send via the target RAN
        t_ran = reply.get("t_ran", ho["t_ran"])
        self.serving_ran = t_ran
        for sess in self.sessions.values():
            sess["ran"] = t_ran
        self.notify(t_ran, "HandoverConfirm", step=10, corr=reply.corr, ue=self.node_id)
        self.handover = None

    # data ----------------------------------------------------------------------

    def on_packet(self, src, pdu):
        if not isinstance(pdu, RadioFrame):
            self.count("unhandled_packet")
            return
        inner, sid = pdu.pdu, pdu.session_id
        now = self.sim.clock
        if isinstance(inner, Interest):
            if self.produce and is_prefix_of(as_name(self.prefix), inner.name):
                self.count("produced")
                data = Data(inner.name, self.payload_size, self.node_id)
                # answer on the radio the Interest arrived on
                self._radio(src, sid, data)
            else:
                self.count("drops", cause="not_producer")
        elif isinstance(inner, Data):
            if not self.requests.satisfy(str(inner.name), now):
                self.count("unsolicited_data")
        elif isinstance(inner, Nack):
            self.requests.nacked += 1
        elif isinstance(inner, EndMarker):
            self._radio(src, sid, inner.echoed())
        elif isinstance(inner, IpPacket):
            self._ip(src, sid, inner)

    def _ip(self, src, sid, pkt: IpPacket):
        kind = pkt.body[0] if pkt.body else None
        if kind == "request":
            self.count("produced")
            self._radio(src, sid, IpPacket(_reply_header(pkt.header), self.payload_size,
                                           ("response", pkt.body[1])))
        elif kind == "response":
            if not self.requests.satisfy(pkt.body[1], self.sim.clock):
                self.count("unsolicited_data")
        elif kind == "dnsr":
            service, address = pkt.body[1], pkt.body[2]
            actions = self.dns_waiting.pop(service, [])
            if address is None:
                self.count("dns_failures")
                return
            self.dns_cache[service] = address
            for action in actions:
                self.issue(action)
        elif kind == "unreachable":
            self.count("unreachable")

    def digest(self):
        return (f"ran={self.serving_ran} sessions={sorted(self.sessions)} "
                f"issued={len(self.requests.issued)} satisfied={len(self.requests.satisfied)}")


class AppServerNode(SignalingNode):
    """Data-network host.

    Depending on configuration it is an ICN producer (``serves``), an IP
    server (``address`` plus ``serves``), a DNS resolver (``dns_records``),
    a pipeline stage (``pipeline_next``) and/or a consumer driven by
    ``stream``/``request`` actions.
    """

    role = Role.APP_SERVER

    def __init__(self, node_id: str, address: Optional[int] = None, gateway: Optional[str] = None,
                 serves: Sequence[str] = (), payload_size: int = 1024,
                 dns_records: Optional[Dict[str, int]] = None, resolver: Optional[int] = None,
                 pipeline_next: Optional[str] = None, alg_delay: int = 0, lifetime: int = 4000,
                 nack_tags=()):
        super().__init__(node_id, nack_tags)
        self.address = address
        self.gateway = gateway
        self.serves = [as_name(p) for p in serves]
        self.payload_size = payload_size
        self.dns_records = dns_records
        self.resolver = resolver
        self.pipeline_next = pipeline_next
        self.alg_delay = alg_delay
        self.lifetime = lifetime
        self.requests = RequestTracker()
        self.versions: Dict[str, int] = {}
        # ip consumer state, per service name
        self.servers: Dict[str, Optional[int]] = {}
        self.restarting: Dict[str, bool] = {}
        self.inflight: Dict[str, tuple] = {}
        self.backlog: Dict[str, List[str]] = {}
        self._qid = 0
        self._port = 50000

    def _gw(self) -> str:
        if self.gateway is None:
            self.gateway = self.sim.topology.neighbours(self.node_id, plane="data")[0]
        return self.gateway

    def serves_name(self, name) -> bool:
        return any(is_prefix_of(p, name) for p in self.serves)

    # actions -------------------------------------------------------------

    def on_action(self, action):
        do = action.get("do")
        if do == "request":
            self.consume(str(action["name"]), action.get("via", "icn"), action.get("service"))
        elif do == "stream":
            self.on_timer("stream", dict(action, seq=0))
        elif do == "sensor":
            self.sense(action["segment"])
        else:
            super().on_action(action)

    def on_timer(self, tag, data):
        if tag == "stream":
            seq = data["seq"]
            if seq >= data.get("count", 0):
                return
            self.consume(f"{data['name']}/{seq}", data.get("via", "icn"), data.get("service"))
            self.sim.set_timer(self.node_id, data.get("interval", 10), "stream", dict(data, seq=seq + 1))
        elif tag == "publish":
            self._forward(data)

    def consume(self, name: str, via: str, service: Optional[str] = None):
        if via == "icn":
            self.requests.issue(name, self.sim.clock)
            self.send(self._gw(), Interest(as_name(name), self.sim.next_nonce(), self.lifetime))
            return
        self.requests.issue(name, self.sim.clock)
        server = self.servers.get(service)
        if server is None or self.restarting.get(service):
            self.backlog.setdefault(service, []).append(name)
            if service not in self.servers:
                self.servers[service] = None
                self._lookup(service)
            return
        self._ip_request(service, server, name)

    def _lookup(self, service: str):
        self._qid += 1
        self.count("dns_lookups")
        hdr = FiveTuple(self.address, self.resolver, self._next_port(), DNS_PORT, Protocol.UDP)
        self.send(self._gw(), IpPacket(hdr, 64, ("dnsq", service, self._qid)))

    def _next_port(self) -> int:
        self._port += 1
        return self._port

    def _ip_request(self, service: str, server: int, name: str):
        self.inflight[name] = (service, server)
        hdr = FiveTuple(self.address, server, self._next_port(), HTTP_PORT, Protocol.TCP)
        self.send(self._gw(), IpPacket(hdr, 128, ("request", name)))

    # pipeline --------------------------------------------------------------

    def sense(self, segment: str):
        version = self.versions.get(segment, 0) + 1
        self.versions[segment] = version
        pub = Publication(segment, version)
        if self.alg_delay:
            # the gateway translating between the vehicle-side and server protocols
            self.count("alg_translations")
            self.sim.set_timer(self.node_id, self.alg_delay, "publish", pub)
        else:
            self._forward(pub)

    def _forward(self, pub: Publication):
        if self.pipeline_next is None:
            self.versions[pub.segment] = max(self.versions.get(pub.segment, 0), pub.version)
            self.count("publications")
            return
        self.send(self.pipeline_next, pub)

    # packets ---------------------------------------------------------------

    def on_packet(self, src, pdu):
        now = self.sim.clock
        if isinstance(pdu, Interest):
            if self.serves_name(pdu.name):
                self.count("upstream_fetch")
                self.send(src, Data(pdu.name, self.payload_size, self.node_id))
            else:
                self.count("drops", cause="not_producer")
                self.send(src, Nack(pdu))
        elif isinstance(pdu, Data):
            if not self.requests.satisfy(str(pdu.name), now):
                self.count("unsolicited_data")
        elif isinstance(pdu, Nack):
            self.requests.nacked += 1
        elif isinstance(pdu, Publication):
            if self.alg_delay:
                self.count("alg_translations")
                self.sim.set_timer(self.node_id, self.alg_delay, "publish", pdu)
            else:
                self._forward(pdu)
        elif isinstance(pdu, IpPacket):
            self._ip(pdu)
        else:
            self.count("unhandled_packet")

    def _ip(self, pkt: IpPacket):
        kind = pkt.body[0] if pkt.body else None
        if kind == "request":
            if self.serves_name(as_name(pkt.body[1])):
                self.count("upstream_fetch")
                self.send(self._gw(), IpPacket(_reply_header(pkt.header), self.payload_size,
                                               ("response", pkt.body[1])))
        elif kind == "dnsq":
            records = self.dns_records or {}
            address = records.get(pkt.body[1])
            self.send(self._gw(), IpPacket(_reply_header(pkt.header), 64,
                                           ("dnsr", pkt.body[1], address, pkt.body[2])))
        elif kind == "response":
            self.inflight.pop(pkt.body[1], None)
            if not self.requests.satisfy(pkt.body[1], self.sim.clock):
                self.count("unsolicited_data")
        elif kind == "dnsr":
            self._resolved(pkt.body[1], pkt.body[2])
        elif kind == "unreachable":
            self._unreachable(pkt.body[1])

    def _resolved(self, service: str, address: Optional[int]):
        if address is None:
            self.count("dns_failures")
            return
        self.servers[service] = address
        self.restarting[service] = False
        self.log("app", f"connected service={service} addr={dotted(address)}")
        for name in self.backlog.pop(service, []):
            self._ip_request(service, address, name)

    def _unreachable(self, dotted_addr: str):
        lost = sorted(n for n, (svc, a) in self.inflight.items() if dotted(a) == dotted_addr)
        for name in lost:
            service, _ = self.inflight.pop(name)
            self.backlog.setdefault(service, []).append(name)
        for service, address in sorted(self.servers.items()):
            if address is not None and dotted(address) == dotted_addr and not self.restarting.get(service):
                # the peer's address changed under us: the session has to be set up again
                self.restarting[service] = True
                self.count("session_reestablishments")
                self.log("app", f"restart service={service} lost={dotted_addr}")
                self._lookup(service)

    def ctl_DnsUpdate(self, msg):
        if self.dns_records is None:
            self.respond(msg, ok=False, reason="NotResolver")
            return
        self.dns_records[msg.get("name")] = msg.get("addr")
        self.log("dns", f"{msg.get('name')} -> {dotted(msg.get('addr'))}")
        self.respond(msg)

    def digest(self):
        return (f"issued={len(self.requests.issued)} satisfied={len(self.requests.satisfied)} "
                f"versions={sorted(self.versions.items())}")
