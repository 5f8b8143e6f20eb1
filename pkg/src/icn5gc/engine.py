"""Deterministic discrete-event kernel.

Time is integer milliseconds. Events are totally ordered by ``(time, seq)``
where ``seq`` is handed out in insertion order, so a run is fully
determined by its seed and configuration.
"""

from __future__ import annotations

import enum
import heapq
import logging
import random
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple

import networkx as nx

log = logging.getLogger(__name__)


class TimeTravel(ValueError):
    pass


class NoLink(LookupError):
    pass


class Role(str, enum.Enum):
    UE = "UE"
    RAN = "RAN"
    ULCL = "UL-CL"
    ICN_AP = "ICN-AP"
    DN_ROUTER = "ICN-DN-ROUTER"
    AMF = "AMF"
    SMF = "SMF"
    ICN_SMF = "ICN-SMF"
    ICN_AF = "ICN-AF"
    NSSF = "NSSF"
    PCF_UDM = "PCF-UDM"
    NRS = "NRS"
    APP_SERVER = "APP-SERVER"


USER_PLANE_ROLES = {Role.RAN, Role.ULCL, Role.ICN_AP, Role.DN_ROUTER, Role.APP_SERVER}


def node_sort_key(node_id: str):
    """Natural ordering, so that "ul-cl-2" < "ul-cl-10"."""
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", node_id)]


@dataclass(order=True)
class Event:
    time: int
    seq: int
    target: str = field(compare=False)
    kind: str = field(compare=False)  # "msg" | "timer" | "action"
    payload: Any = field(compare=False, default=None)
    src: Optional[str] = field(compare=False, default=None)


@dataclass
class Link:
    a: str
    b: str
    latency: int
    loss_rate: float = 0.0
    plane: str = "data"  # "data" | "control"

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError(f"negative latency on {self.a}-{self.b}")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate out of [0, 1] on {self.a}-{self.b}")

    @property
    def key(self) -> Tuple[str, str]:
        return link_key(self.a, self.b)


def link_key(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if a <= b else (b, a)


class Topology:
    def __init__(self):
        self.roles: Dict[str, Role] = {}
        self.links: Dict[Tuple[str, str], Link] = {}

    def add_node(self, node_id: str, role: Role):
        self.roles[node_id] = Role(role)

    def add_link(self, link: Link):
        for end in (link.a, link.b):
            if end not in self.roles:
                raise KeyError(f"link endpoint {end!r} is not a node")
        self.links[link.key] = link

    def link(self, a: str, b: str) -> Link:
        try:
            return self.links[link_key(a, b)]
        except KeyError:
            raise NoLink(f"{a} <-> {b}") from None

    def has_link(self, a: str, b: str) -> bool:
        return link_key(a, b) in self.links

    def neighbours(self, node: str, plane: Optional[str] = None) -> List[str]:
        out = []
        for (a, b), link in self.links.items():
            if plane is not None and link.plane != plane:
                continue
            if a == node:
                out.append(b)
            elif b == node:
                out.append(a)
        return sorted(out, key=node_sort_key)

    def nodes_with_role(self, role: Role) -> List[str]:
        return sorted((n for n, r in self.roles.items() if r == role), key=node_sort_key)

    def data_graph(self, exclude_roles: Iterable[Role] = (Role.UE,)) -> nx.Graph:
        excluded = set(exclude_roles)
        g = nx.Graph()
        for n, r in self.roles.items():
            if r not in excluded:
                g.add_node(n)
        for (a, b), link in self.links.items():
            if link.plane == "data" and a in g and b in g:
                g.add_edge(a, b)
        return g

    def hop_count(self, src: str, dst: str) -> Optional[int]:
        g = self.data_graph()
        try:
            return nx.shortest_path_length(g, src, dst)
        except (nx.NetworkXNoPath, nx.NodeNotFound):
            return None

    def next_hop(self, src: str, dst: str, allowed_roles: Iterable[Role]) -> Optional[str]:
        """First hop from src toward dst over data links among allowed roles."""
        allowed = set(allowed_roles)
        g = nx.Graph()
        for n, r in self.roles.items():
            if r in allowed or n in (src, dst):
                g.add_node(n)
        for (a, b), link in self.links.items():
            if link.plane == "data" and a in g and b in g:
                g.add_edge(a, b)
        try:
            paths = list(nx.all_shortest_paths(g, src, dst))
        except (nx.NetworkXNoPath, nx.NodeNotFound):
            return None
        if len(paths[0]) < 2:
            return None
        return min((p[1] for p in paths), key=node_sort_key)


class Metrics:
    """Monotone counters keyed by (name, labels)."""

    def __init__(self):
        self._c: Counter = Counter()

    def inc(self, name: str, value: int = 1, **labels):
        if value < 0:
            raise ValueError("counters only go up")
        key = (name, tuple(sorted((k, str(v)) for k, v in labels.items())))
        self._c[key] += value

    def total(self, name: str, **labels) -> int:
        want = {k: str(v) for k, v in labels.items()}
        return sum(v for (n, lab), v in self._c.items()
                   if n == name and all(dict(lab).get(k) == val for k, val in want.items()))

    def records(self) -> List[Tuple[str, str, int]]:
        out = []
        for (name, labels), value in sorted(self._c.items()):
            lab = ",".join(f"{k}={v}" for k, v in labels) or "-"
            out.append((name, lab, value))
        return out

    def as_dict(self) -> Dict[str, int]:
        totals: Counter = Counter()
        for (name, _), value in self._c.items():
            totals[name] += value
        return dict(sorted(totals.items()))


@dataclass
class RunSummary:
    final_clock: int
    quiescent: bool
    pending: int
    processed: int
    counters: Dict[str, int]
    digests: Dict[str, str]


class Node:
    """Base class of every simulated node.

    Subclasses override ``on_message``, ``on_timer`` and ``on_action``.
    """

    role: Role = Role.APP_SERVER

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.sim: Optional["Simulator"] = None

    def handle(self, event: Event):
        if event.kind == "msg":
            self.on_message(event.src, event.payload)
        elif event.kind == "timer":
            tag, data = event.payload
            self.on_timer(tag, data)
        else:
            self.on_action(event.payload)

    def on_message(self, src: str, msg):
        self.sim.metrics.inc("unhandled", node=self.node_id)

    def on_timer(self, tag: str, data):
        pass

    def on_action(self, action: Dict):
        self.sim.metrics.inc("unhandled", node=self.node_id)

    # helpers
    def send(self, dst: str, msg):
        self.sim.send(self.node_id, dst, msg)

    def log(self, kind: str, details: str):
        self.sim.log(self.node_id, kind, details)

    def count(self, name: str, value: int = 1, **labels):
        labels.setdefault("node", self.node_id)
        self.sim.metrics.inc(name, value, **labels)

    def digest(self) -> str:
        return ""


def describe(payload) -> str:
    describe_fn = getattr(payload, "describe", None)
    if describe_fn is not None:
        return describe_fn()
    return str(payload)


class Simulator:
    def __init__(self, topology: Topology, seed: int = 0):
        self.topology = topology
        self.seed = seed
        self.rng = random.Random(seed)
        self.clock = 0
        self._queue: List[Event] = []
        self._seq = 0
        self._current_seq = 0
        self._corr = 0
        self._nonce = 0
        self.nodes: Dict[str, Node] = {}
        self.metrics = Metrics()
        self.trace: List[str] = []
        self.sent = 0
        self.delivered = 0
        self.lost = 0
        self.observers: List = []
        self.delivery_observers: List = []
        self.marks: List[Tuple[int, str, Dict[str, Any]]] = []

    # setup ---------------------------------------------------------------

    def add(self, node: Node) -> Node:
        if node.node_id not in self.topology.roles:
            raise KeyError(f"{node.node_id!r} not in topology")
        node.sim = self
        self.nodes[node.node_id] = node
        return node

    def next_corr(self) -> int:
        self._corr += 1
        return self._corr

    def next_nonce(self) -> int:
        self._nonce += 1
        return self._nonce

    # scheduling ------------------------------------------------------------

    def schedule(self, event: Event) -> Event:
        if event.time < self.clock:
            raise TimeTravel(f"event at {event.time} < clock {self.clock}")
        self._seq += 1
        event.seq = self._seq
        heapq.heappush(self._queue, event)
        return event

    def at(self, time: int, target: str, kind: str, payload=None, src=None) -> Event:
        return self.schedule(Event(time, 0, target, kind, payload, src))

    def set_timer(self, node: str, delay: int, tag: str, data=None) -> Event:
        return self.at(self.clock + delay, node, "timer", (tag, data))

    def send(self, src: str, dst: str, msg):
        link = self.topology.link(src, dst)
        self.sent += 1
        for obs in self.observers:
            obs(self, src, dst, msg)
        if link.loss_rate > 0 and self.rng.random() < link.loss_rate:
            self.lost += 1
            self.metrics.inc("link_drops", link=f"{link.key[0]}-{link.key[1]}")
            self.log(src, "lost", f"to={dst} {describe(msg)}")
            return
        self.at(self.clock + link.latency, dst, "msg", msg, src)

    # tracing ---------------------------------------------------------------

    def log(self, node: str, kind: str, details: str):
        self.trace.append(f"{self.clock} {self._current_seq} {node} {kind} {details}")

    def mark(self, kind: str, **info):
        """Record a notable protocol milestone (trace line plus structured entry)."""
        self.marks.append((self.clock, kind, info))
        node = info.get("node", "-")
        details = " ".join(f"{k}={v}" for k, v in sorted(info.items()) if k != "node")
        self.log(node, "mark", f"{kind} {details}".rstrip())

    # running ---------------------------------------------------------------

    def pending(self) -> int:
        return len(self._queue)

    def step(self) -> Event:
        event = heapq.heappop(self._queue)
        self.clock = event.time
        self._current_seq = event.seq
        node = self.nodes[event.target]
        if event.kind == "msg":
            self.delivered += 1
            self.log(event.target, "recv", f"from={event.src} {describe(event.payload)}")
        elif event.kind == "timer":
            self.log(event.target, "timer", str(event.payload[0]))
        else:
            self.log(event.target, "action", str(event.payload.get("do")))
        for obs in self.delivery_observers:
            obs(self, event)
        node.handle(event)
        return event

    def run_to_quiescence(self, max_time: Optional[int] = None) -> RunSummary:
        processed = 0
        while self._queue:
            if max_time is not None and self._queue[0].time > max_time:
                break
            self.step()
            processed += 1
        quiescent = not self._queue
        if not quiescent:
            log.warning("nonquiescent: %d events pending past t=%s", len(self._queue), max_time)
            self.metrics.inc("nonquiescent")
        digests = {n: self.nodes[n].digest() for n in sorted(self.nodes, key=node_sort_key)}
        return RunSummary(self.clock, quiescent, len(self._queue), processed,
                          self.metrics.as_dict(), digests)
