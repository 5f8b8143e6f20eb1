"""Names, ICN/IP packets and tunnel encapsulation.

Everything here is an immutable value type.
"""

from __future__ import annotations

import enum
import ipaddress
from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple, Union


class MalformedName(ValueError):
    pass


class UnknownTunnel(KeyError):
    pass


@dataclass(frozen=True, order=True)
class Name:
    components: Tuple[bytes, ...]

    def __post_init__(self):
        comps = tuple(
            c.encode() if isinstance(c, str) else bytes(c) for c in self.components
        )
        if not comps:
            raise MalformedName("a name needs at least one component")
        if any(len(c) == 0 for c in comps):
            raise MalformedName("empty name component")
        object.__setattr__(self, "components", comps)

    @classmethod
    def of(cls, *parts: Union[str, bytes]) -> "Name":
        return cls(tuple(parts))

    def __str__(self):
        return "/" + "/".join(c.decode("utf-8", "backslashreplace") for c in self.components)

    def __repr__(self):
        return f"Name({str(self)!r})"

    def __len__(self):
        return len(self.components)

    def append(self, *parts: Union[str, bytes]) -> "Name":
        return Name(self.components + tuple(parts))

    def prefixes(self) -> Iterable["Name"]:
        """Yield every prefix of this name, longest first."""
        for n in range(len(self.components), 0, -1):
            yield Name(self.components[:n])


def parse_name(text: str) -> Name:
    if not text or not text.startswith("/"):
        raise MalformedName(f"name must start with '/': {text!r}")
    parts = text[1:].split("/")
    if any(p == "" for p in parts):
        raise MalformedName(f"empty component in {text!r}")
    return Name(tuple(parts))


def as_name(value: Union[str, Name]) -> Name:
    return value if isinstance(value, Name) else parse_name(value)


def is_prefix_of(prefix: Name, name: Name) -> bool:
    n = len(prefix.components)
    return n <= len(name.components) and name.components[:n] == prefix.components


@dataclass(frozen=True)
class Interest:
    name: Name
    nonce: int
    lifetime: int = 4000
    hop_count: int = 0

    def __post_init__(self):
        if self.lifetime <= 0:
            raise ValueError("Interest lifetime must be positive")
        if self.hop_count < 0:
            raise ValueError("hop_count must be non-negative")

    def hop(self) -> "Interest":
        return Interest(self.name, self.nonce, self.lifetime, self.hop_count + 1)

    def __str__(self):
        return f"Interest name={self.name} nonce={self.nonce}"


@dataclass(frozen=True)
class Data:
    name: Name
    payload_size: int = 1024
    producer_id: str = ""
    signed: bool = True

    def __str__(self):
        return f"Data name={self.name} producer={self.producer_id} size={self.payload_size}"


class Protocol(enum.Enum):
    UDP = "UDP"
    TCP = "TCP"
    OTHER = "OTHER"


def addr(value: Union[str, int]) -> int:
    """Abstract IP address as a 32-bit integer."""
    return int(ipaddress.IPv4Address(value))


def dotted(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True)
class FiveTuple:
    src_addr: int
    dst_addr: int
    src_port: int = 0
    dst_port: int = 0
    protocol: Protocol = Protocol.UDP

    def __post_init__(self):
        for port in (self.src_port, self.dst_port):
            if not 0 <= port <= 65535:
                raise ValueError(f"port out of range: {port}")

    def __str__(self):
        return (
            f"{dotted(self.src_addr)}:{self.src_port}->"
            f"{dotted(self.dst_addr)}:{self.dst_port}/{self.protocol.value}"
        )


@dataclass(frozen=True)
class IpPacket:
    header: FiveTuple
    payload_size: int = 512
    # application body, e.g. ("request", "/traffic/monitor/seg1", 3)
    body: Tuple = ()

    def __str__(self):
        extra = " " + " ".join(str(b) for b in self.body) if self.body else ""
        return f"IpPacket {self.header}{extra}"


@dataclass(frozen=True)
class EndMarker:
    """In-band marker closing the downlink of a switched session path.

    The UE echoes it back uplink, so a node that has seen it in both
    directions knows the old path carries nothing more for the session.
    """

    session_id: str
    origin: str
    uplink: bool = False

    def echoed(self) -> "EndMarker":
        return EndMarker(self.session_id, self.origin, True)

    def __str__(self):
        return f"EndMarker session={self.session_id} origin={self.origin} ul={self.uplink}"


@dataclass(frozen=True)
class Nack:
    """Negative acknowledgment returned downstream when no route exists."""

    interest: Interest
    reason: str = "NoRoute"

    @property
    def name(self):
        return self.interest.name

    def __str__(self):
        return f"Nack name={self.interest.name} nonce={self.interest.nonce} reason={self.reason}"


@dataclass(frozen=True)
class RadioFrame:
    """A PDU on the abstract radio link between a UE and a RAN."""

    ue: str
    session_id: str
    pdu: object

    def __str__(self):
        return f"Radio ue={self.ue} session={self.session_id} [{self.pdu}]"


IcnPdu = Union[Interest, Data]
Pdu = Union[Interest, Data, Nack, IpPacket, EndMarker]


@dataclass(frozen=True)
class TunneledPacket:
    tunnel_id: str
    inner: Pdu
    # outer header; for ICN PDUs this is the session's IP association
    outer: Optional[FiveTuple] = field(default=None, compare=True)

    def five_tuple(self) -> Optional[FiveTuple]:
        if self.outer is not None:
            return self.outer
        if isinstance(self.inner, IpPacket):
            return self.inner.header
        return None

    def __str__(self):
        return f"Tunnel {self.tunnel_id} [{self.inner}]"


def encapsulate(pdu: Pdu, tunnel: str, known_tunnels=None, outer: Optional[FiveTuple] = None) -> TunneledPacket:
    if known_tunnels is not None and tunnel not in known_tunnels:
        raise UnknownTunnel(tunnel)
    return TunneledPacket(tunnel, pdu, outer)


def decapsulate(tp: TunneledPacket) -> Tuple[str, Pdu]:
    return tp.tunnel_id, tp.inner


def pdu_kind(pdu) -> str:
    if isinstance(pdu, TunneledPacket):
        return pdu_kind(pdu.inner)
    return type(pdu).__name__


def is_icn(pdu) -> bool:
    if isinstance(pdu, TunneledPacket):
        return is_icn(pdu.inner)
    if isinstance(pdu, RadioFrame):
        return is_icn(pdu.pdu)
    return isinstance(pdu, (Interest, Data, Nack))
