"""CCN-style stateful forwarding: FIB, PIT, Content Store and forwarding labels."""

from __future__ import annotations

import enum
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from .names import Data, Interest, Name, is_prefix_of

DEFAULT_LIFETIME = 4000


class NoRoute(LookupError):
    pass


class RoleViolation(RuntimeError):
    pass


class NotFound(KeyError):
    pass


class FaceKind(enum.Enum):
    LOCAL_APP = "app"
    TUNNEL = "tunnel"
    LINK = "link"


@dataclass(frozen=True)
class Face:
    face_id: int
    kind: FaceKind
    ref: Optional[str] = None  # tunnel id or neighbour node id

    def __str__(self):
        return f"F{self.face_id}:{self.kind.value}" + (f"({self.ref})" if self.ref else "")


@dataclass(frozen=True)
class FibEntry:
    prefix: Name
    next_hop: Face
    cost: int = 0


@dataclass
class PitEntry:
    name: Name
    created: int
    expiry: int
    # (face_id, nonce) in arrival order
    downstream: List[Tuple[int, int]] = field(default_factory=list)
    upstream: Optional[int] = None

    def nonces(self):
        return {nonce for _, nonce in self.downstream}


@dataclass
class CsEntry:
    name: Name
    data: Data
    last_used: int


@dataclass(frozen=True)
class ForwardingLabel:
    covered_prefix: Name
    target_anchor: str
    via: Face


@dataclass
class ForwarderActions:
    outcome: str
    send: List[Tuple[Face, object]] = field(default_factory=list)
    nack: List[Tuple[Face, Interest]] = field(default_factory=list)

    @property
    def upstream(self) -> List[Tuple[Face, Interest]]:
        return [(f, p) for f, p in self.send if isinstance(p, Interest)]


class Forwarder:
    """Per-node forwarding engine.

    ``is_anchor`` marks an ICN-AP; only anchors accept forwarding labels.
    """

    def __init__(self, node_id: str, cs_capacity: int = 0, is_anchor: bool = False,
                 default_lifetime: int = DEFAULT_LIFETIME):
        if cs_capacity < 0:
            raise ValueError("cs_capacity must be >= 0")
        self.node_id = node_id
        self.cs_capacity = cs_capacity
        self.is_anchor = is_anchor
        self.default_lifetime = default_lifetime
        self.faces: Dict[int, Face] = {}
        self._next_face = 1
        self.fib: Dict[Name, Dict[int, FibEntry]] = {}
        self.pit: Dict[Name, PitEntry] = {}
        self.cs: "OrderedDict[Name, CsEntry]" = OrderedDict()
        self.labels: Dict[Name, ForwardingLabel] = {}
        self.counters: Counter = Counter()

    # faces -------------------------------------------------------------

    def add_face(self, kind: FaceKind, ref: Optional[str] = None) -> Face:
        for face in self.faces.values():
            if face.kind == kind and face.ref == ref and kind != FaceKind.LOCAL_APP:
                return face
        face = Face(self._next_face, kind, ref)
        self._next_face += 1
        self.faces[face.face_id] = face
        return face

    def face_for(self, kind: FaceKind, ref: str) -> Optional[Face]:
        for face in self.faces.values():
            if face.kind == kind and face.ref == ref:
                return face
        return None

    def remove_face(self, face: Face):
        """Drop a face and every FIB entry, label and PIT record using it."""
        self.faces.pop(face.face_id, None)
        for prefix in list(self.fib):
            self.fib[prefix].pop(face.face_id, None)
            if not self.fib[prefix]:
                del self.fib[prefix]
        for prefix, label in list(self.labels.items()):
            if label.via.face_id == face.face_id:
                del self.labels[prefix]
        for name, entry in list(self.pit.items()):
            entry.downstream = [d for d in entry.downstream if d[0] != face.face_id]
            # nothing can come back through a face that is gone
            if not entry.downstream or entry.upstream == face.face_id:
                del self.pit[name]

    # FIB ---------------------------------------------------------------

    def add_route(self, prefix: Name, face: Face, cost: int = 0):
        if cost < 0:
            raise ValueError("cost must be >= 0")
        self.faces.setdefault(face.face_id, face)
        self.fib.setdefault(prefix, {})[face.face_id] = FibEntry(prefix, face, cost)

    def remove_route(self, prefix: Name, face: Optional[Face] = None):
        if prefix not in self.fib:
            return
        if face is None:
            del self.fib[prefix]
            return
        self.fib[prefix].pop(face.face_id, None)
        if not self.fib[prefix]:
            del self.fib[prefix]

    def fib_lookup(self, name: Name) -> Face:
        for prefix in name.prefixes():
            entries = self.fib.get(prefix)
            if entries:
                best = min(entries.values(), key=lambda e: (e.cost, e.next_hop.face_id))
                return best.next_hop
        raise NoRoute(str(name))

    # labels ------------------------------------------------------------

    def install_forwarding_label(self, label: ForwardingLabel):
        if not self.is_anchor:
            raise RoleViolation(f"{self.node_id} is not an ICN-AP")
        self.faces.setdefault(label.via.face_id, label.via)
        self.labels[label.covered_prefix] = label

    def remove_forwarding_label(self, prefix: Name):
        if prefix not in self.labels:
            raise NotFound(str(prefix))
        del self.labels[prefix]

    def label_for(self, name: Name) -> Optional[ForwardingLabel]:
        for prefix in name.prefixes():
            if prefix in self.labels:
                return self.labels[prefix]
        return None

    # packet processing -------------------------------------------------

    def process_interest(self, interest: Interest, in_face: Face, now: int) -> ForwarderActions:
        name = interest.name
        cached = self.cs.get(name)
        if cached is not None:
            cached.last_used = now
            self.cs.move_to_end(name)
            self.counters["cs_hits"] += 1
            return ForwarderActions("cs_hit", send=[(in_face, cached.data)])

        entry = self.pit.get(name)
        if entry is not None and entry.expiry > now:
            if interest.nonce in entry.nonces():
                self.counters["loop_suppressed"] += 1
                return ForwarderActions("duplicate_nonce")
            entry.downstream.append((in_face.face_id, interest.nonce))
            entry.expiry = max(entry.expiry, now + interest.lifetime)
            self.counters["aggregated"] += 1
            return ForwarderActions("aggregated")

        label = self.label_for(name)
        if label is not None:
            out = label.via
            outcome = "label"
        else:
            try:
                out = self.fib_lookup(name)
            except NoRoute:
                self.counters["no_route"] += 1
                return ForwarderActions("no_route", nack=[(in_face, interest)])
            outcome = "forwarded"

        if entry is not None:
            # stale entry that expire_pit has not collected yet
            self._expire_entry(name)
        self.pit[name] = PitEntry(name, now, now + interest.lifetime,
                                  [(in_face.face_id, interest.nonce)], out.face_id)
        self.counters["upstream"] += 1
        return ForwarderActions(outcome, send=[(out, interest.hop())])

    def process_data(self, data: Data, in_face: Face, now: int) -> ForwarderActions:
        entry = self.pit.get(data.name)
        if entry is None or entry.expiry <= now:
            if entry is not None:
                self._expire_entry(data.name)
            self.counters["unsolicited"] += 1
            return ForwarderActions("unsolicited")
        del self.pit[data.name]
        sends = []
        seen = set()
        for face_id, _ in entry.downstream:
            if face_id in seen or face_id not in self.faces:
                continue
            seen.add(face_id)
            sends.append((self.faces[face_id], data))
        self._cache(data, now)
        self.counters["satisfied"] += 1
        return ForwarderActions("satisfied", send=sends)

    def _cache(self, data: Data, now: int):
        if self.cs_capacity == 0:
            return
        if data.name in self.cs:
            self.cs.move_to_end(data.name)
            self.cs[data.name] = CsEntry(data.name, data, now)
            return
        while len(self.cs) >= self.cs_capacity:
            self.cs.popitem(last=False)
            self.counters["cs_evictions"] += 1
        self.cs[data.name] = CsEntry(data.name, data, now)

    def _expire_entry(self, name: Name):
        del self.pit[name]
        self.counters["timeouts"] += 1

    def expire_pit(self, now: int) -> List[Name]:
        expired = sorted(n for n, e in self.pit.items() if e.expiry <= now)
        for name in expired:
            self._expire_entry(name)
        return expired

    def next_expiry(self) -> Optional[int]:
        return min((e.expiry for e in self.pit.values()), default=None)

    def dump(self) -> List[str]:
        """One record per FIB/PIT/CS/label entry, in a stable order."""
        out = []
        for prefix in sorted(self.fib):
            for e in sorted(self.fib[prefix].values(), key=lambda e: e.next_hop.face_id):
                out.append(f"{self.node_id} FIB {prefix} {e.next_hop} cost={e.cost}")
        for name in sorted(self.pit):
            e = self.pit[name]
            down = ",".join(f"F{f}#{n}" for f, n in e.downstream)
            out.append(f"{self.node_id} PIT {name} down={down} expiry={e.expiry}")
        for name, e in self.cs.items():
            out.append(f"{self.node_id} CS {name} last_used={e.last_used}")
        for prefix in sorted(self.labels):
            lab = self.labels[prefix]
            out.append(f"{self.node_id} LABEL {prefix} -> {lab.target_anchor} via {lab.via}")
        return out
