"""Signaling messages exchanged between network functions.

Every request carries a correlation id; the matching response reuses it.
A procedure may relay one request over several hops under the same id
(the UE's handover request reaches the AMF through the source RAN), and
it is still answered exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

from .engine import Node

# request tag -> response tag
RESPONSES = {
    "RegistrationRequest": "RegistrationAccept",
    "SubscriptionQuery": "SubscriptionResponse",
    "SessionEstablishRequest": "SessionEstablishAccept",
    "SessionCreate": "SessionCreateResponse",
    "NssfQuery": "NssfResponse",
    "N4Update": "N4Ack",
    "IcnSessionRequest": "IcnSessionResponse",
    "IcnSessionUpdate": "IcnSessionAck",
    "NrsUpdate": "NrsUpdateAck",
    "RouteUpdate": "RouteUpdateAck",
    "RanSessionSetup": "RanSessionSetupAck",
    "TunnelSetup": "TunnelSetupAck",
    "SmContextUpdate": "SmContextUpdateAck",
    "HandoverRequest": "HandoverAck",
    "HandoverRequired": "HandoverAck",
    "SessionModify": "SessionModifyResponse",
    "PathSwitchCommand": "PathSwitchAck",
    "ReleaseCommand": "ReleaseComplete",
    "DnsUpdate": "DnsUpdateAck",
}

NOTIFICATIONS = {"HandoverConfirm", "HandoverNotify", "HandoverComplete"}


def _fmt(value) -> str:
    if isinstance(value, dict):
        return "{" + ",".join(f"{k}:{_fmt(v)}" for k, v in sorted(value.items())) + "}"
    if isinstance(value, (set, frozenset)):
        return "{" + ",".join(sorted(_fmt(v) for v in value)) + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_fmt(v) for v in value) + "]"
    return str(value)


@dataclass(frozen=True)
class ControlMessage:
    tag: str
    sender: str
    receiver: str
    corr: int
    kind: str = "request"  # request | response | notify
    payload: Dict[str, Any] = field(default_factory=dict, compare=False)
    step: Optional[int] = None
    ok: bool = True
    reason: str = ""

    @property
    def is_request(self):
        return self.kind == "request"

    @property
    def is_response(self):
        return self.kind == "response"

    def get(self, key, default=None):
        return self.payload.get(key, default)

    def describe(self) -> str:
        parts = [f"CTRL {self.tag} {self.sender}->{self.receiver} corr={self.corr}"]
        if self.step is not None:
            parts.append(f"step={self.step}")
        if not self.ok:
            parts.append(f"nack={self.reason or 'error'}")
        if self.payload:
            parts.append(_fmt(self.payload))
        return " ".join(parts)

    __str__ = describe


@dataclass
class Call:
    """A request yielded by a procedure; the reply is sent back into it."""

    dst: str
    tag: str
    step: Optional[int] = None
    payload: Dict[str, Any] = field(default_factory=dict)


def call(dst: str, tag: str, step=None, **payload) -> Call:
    return Call(dst, tag, step, payload)


class SignalingNode(Node):
    """Node that speaks the request/response protocol.

    ``nack_tags`` is a fault-injection hook: requests whose tag is listed
    are refused instead of processed. ``Tag@6`` refuses only step-6 requests.
    """

    def __init__(self, node_id: str, nack_tags=()):
        super().__init__(node_id)
        self.nack_tags = set(nack_tags)
        # corr -> (callback, context)
        self._waiting: Dict[int, Tuple[Callable, Any]] = {}

    def request(self, dst: str, tag: str, step=None, corr=None, on_reply=None, ctx=None,
                **payload) -> int:
        corr = corr if corr is not None else self.sim.next_corr()
        msg = ControlMessage(tag, self.node_id, dst, corr, "request", payload, step)
        if on_reply is not None:
            self._waiting[corr] = (on_reply, ctx)
        self.count("signaling", tag=tag)
        self.send(dst, msg)
        return corr

    def respond(self, to: ControlMessage, ok=True, reason="", step=None, dst=None,
                tag=None, **payload):
        tag = tag or RESPONSES[to.tag]
        dst = dst or to.sender
        msg = ControlMessage(tag, self.node_id, dst, to.corr, "response", payload,
                             step if step is not None else to.step, ok, reason)
        self.count("signaling", tag=tag)
        self.send(dst, msg)

    def notify(self, dst: str, tag: str, step=None, corr=None, **payload):
        corr = corr if corr is not None else self.sim.next_corr()
        msg = ControlMessage(tag, self.node_id, dst, corr, "notify", payload, step)
        self.count("signaling", tag=tag)
        self.send(dst, msg)

    def spawn(self, proc):
        """Drive a generator procedure.

        The generator yields a ``Call`` (resumed with its reply) or a list
        of calls issued together (resumed with the list of replies once all
        have arrived).
        """
        self._advance(proc, None)

    def _advance(self, proc, value):
        try:
            item = proc.send(value)
        except StopIteration:
            return
        if isinstance(item, Call):
            self.request(item.dst, item.tag, step=item.step,
                         on_reply=lambda reply, _: self._advance(proc, reply), **item.payload)
            return
        calls = list(item)
        if not calls:
            self._advance(proc, [])
            return
        replies = [None] * len(calls)
        remaining = [len(calls)]

        def collect(reply, index):
            replies[index] = reply
            remaining[0] -= 1
            if remaining[0] == 0:
                self._advance(proc, replies)

        for i, c in enumerate(calls):
            self.request(c.dst, c.tag, step=c.step, on_reply=collect, ctx=i, **c.payload)

    def on_message(self, src, msg):
        if isinstance(msg, ControlMessage):
            if msg.is_response and msg.corr in self._waiting:
                callback, ctx = self._waiting.pop(msg.corr)
                callback(msg, ctx)
                return
            if msg.is_request and (msg.tag in self.nack_tags or f"{msg.tag}@{msg.step}" in self.nack_tags):
                self.respond(msg, ok=False, reason="Injected")
                return
            handler = getattr(self, "ctl_" + msg.tag, None)
            if handler is None:
                self.count("unhandled_control", tag=msg.tag)
                if msg.is_request:
                    self.respond(msg, ok=False, reason="Unsupported")
                return
            handler(msg)
            return
        self.on_packet(src, msg)

    def on_packet(self, src, pdu):
        self.count("unhandled_packet")
