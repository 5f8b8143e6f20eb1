"""Independent checks that read the raw trace or raw node state.

Nothing here uses the simulator's counters or the report; the point is to
recount from first principles and compare.
"""

import re
from collections import Counter, defaultdict

TRACE_LINE = re.compile(r"^(\d+) (\d+) (\S+) (\S+) ?(.*)$")
CTRL = re.compile(r"CTRL (\S+) (\S+)->(\S+) corr=(\d+)(?: step=(\d+))?(?: nack=(\S+))?")


def parse(trace_lines):
    for line in trace_lines:
        m = TRACE_LINE.match(line)
        assert m, f"malformed trace line: {line!r}"
        t, seq, node, kind, rest = m.groups()
        yield int(t), int(seq), node, kind, rest


def received(trace_lines):
    """(time, node, sender, details) for every delivered message."""
    for t, _, node, kind, rest in parse(trace_lines):
        if kind == "recv":
            sender, _, details = rest.partition(" ")
            yield t, node, sender[len("from="):], details


def control_deliveries(trace_lines):
    out = []
    for t, node, sender, details in received(trace_lines):
        m = CTRL.match(details)
        if m:
            tag, s, r, corr, step, nack = m.groups()
            assert (s, r) == (sender, node)
            out.append({"time": t, "tag": tag, "sender": s, "receiver": r, "corr": int(corr),
                        "step": int(step) if step else None, "nack": nack})
    return out


def mec_audit(trace_lines, producer, anchor):
    """Brute-force MEC counts.

    upstream: requests (ICN Interests or IP requests) the producer received.
    edge_requests: Interests the anchor received from its tunnels.
    edge_forwarded: Interests the anchor sent out on its network side.
    """
    upstream = 0
    edge_in = 0
    edge_out = 0
    for _, node, sender, details in received(trace_lines):
        if node == producer and (details.startswith("Interest ") or
                                 (details.startswith("IpPacket") and " request " in details)):
            upstream += 1
        if node == anchor and details.startswith("Tunnel ") and "[Interest " in details:
            edge_in += 1
        if sender == anchor and details.startswith("Interest "):
            edge_out += 1
    return {"upstream": upstream, "edge_requests": edge_in, "edge_forwarded": edge_out,
            "edge_hits": edge_in - edge_out}


def consumer_audit(trace_lines, consumer):
    """Interests a DN-side consumer sent versus Data it got back, by name."""
    sent = Counter()
    got = Counter()
    for _, node, sender, details in received(trace_lines):
        if sender == consumer and details.startswith("Interest name="):
            sent[details.split()[1][5:]] += 1
        if node == consumer and details.startswith("Data name="):
            got[details.split()[1][5:]] += 1
    return sent, got


def tunnel_icn_pdus(trace_lines):
    """Every delivery of an ICN PDU inside a tunnel."""
    hits = []
    for t, node, sender, details in received(trace_lines):
        if details.startswith("Tunnel ") and re.search(r"\[(Interest|Data|Nack) ", details):
            hits.append((t, sender, node, details))
    return hits


def state_references(sim, session, old_nodes, old_tunnels):
    """Sweep every node's live state for anything still tied to the old path.

    Returns a list of human-readable findings; empty means clean.
    """
    from icn5gc.forwarder import FaceKind

    found = []
    old_tunnels = set(old_tunnels)
    for nid, node in sorted(sim.nodes.items()):
        st = getattr(node, "state", None)
        # UL-CL rules and tunnels
        for attr in ("ul_rules", "dl_rules"):
            for _, rule in getattr(st, attr, []) if st is not None else []:
                if rule.action_tunnel in old_tunnels or (nid in old_nodes and rule.session == session):
                    found.append(f"{nid} {attr} {rule}")
        tunnels = getattr(st, "tunnels", {}) if st is not None else {}
        for tid, peer in tunnels.items():
            if tid in old_tunnels or (peer in old_nodes and nid not in old_nodes and tid in old_tunnels):
                found.append(f"{nid} tunnel {tid}->{peer}")
        for attr in ("dl_tunnels", "draining"):
            for sess, tid in (getattr(st, attr, {}) if st is not None else {}).items():
                if tid in old_tunnels or (nid in old_nodes and sess == session):
                    found.append(f"{nid} {attr} {sess}:{tid}")
        # RAN contexts
        for (ue, sess), tid in (getattr(st, "ue_tunnels", {}) if st is not None else {}).items():
            if tid in old_tunnels:
                found.append(f"{nid} ran tunnel {ue}/{sess}:{tid}")
        if st is not None and hasattr(st, "early"):
            pass
        for tid in getattr(node, "early", {}):
            if tid in old_tunnels:
                found.append(f"{nid} early buffer {tid}")
        # forwarders
        fwd = getattr(node, "forwarder", None)
        if fwd is not None:
            for face in fwd.faces.values():
                if face.kind == FaceKind.TUNNEL and face.ref in old_tunnels:
                    found.append(f"{nid} face {face}")
            if nid in old_nodes and fwd.labels:
                found.append(f"{nid} labels {sorted(map(str, fwd.labels))}")
            if nid in old_nodes and fwd.pit:
                found.append(f"{nid} pit {sorted(map(str, fwd.pit))}")
            for prefix, entries in fwd.fib.items():
                for e in entries.values():
                    if e.next_hop.kind == FaceKind.TUNNEL and e.next_hop.ref in old_tunnels:
                        found.append(f"{nid} fib {prefix} via {e.next_hop}")
        # control functions
        for attr in ("pending", "pending_release"):
            if getattr(node, attr, None):
                found.append(f"{nid} {attr} not empty")
        records = getattr(node, "records", None)
        if records and session in records:
            rec = records[session]
            if rec.serving_ulcl in old_nodes or rec.serving_icn_ap in old_nodes:
                found.append(f"{nid} record still on {rec.serving_ulcl}/{rec.serving_icn_ap}")
            if set(rec.tunnel_chain) & old_tunnels:
                found.append(f"{nid} record tunnels {rec.tunnel_chain}")
        sessions = getattr(node, "sessions", None)
        if isinstance(sessions, dict) and session in sessions and isinstance(sessions[session], dict):
            entry = sessions[session]
            if entry.get("ap") in old_nodes or entry.get("tunnel") in old_tunnels or entry.get("old"):
                found.append(f"{nid} icn session entry {entry}")
        table = getattr(node, "table", None)
        if isinstance(table, dict):
            for prefix, anchor in table.items():
                if anchor in old_nodes:
                    found.append(f"{nid} resolves {prefix} to {anchor}")
    return found


def dn_routes_via(sim, prefix, old_anchor):
    from icn5gc.names import as_name
    out = []
    for nid, node in sorted(sim.nodes.items()):
        fwd = getattr(node, "forwarder", None)
        if fwd is None or nid == old_anchor:
            continue
        for e in fwd.fib.get(as_name(prefix), {}).values():
            if e.next_hop.ref == old_anchor:
                out.append(f"{nid} routes {prefix} via {old_anchor}")
    return out


def step_windows(deliveries):
    """Per-step (first delivery, last delivery) recomputed from the trace."""
    win = defaultdict(list)
    for d in deliveries:
        if d["step"] is not None:
            win[d["step"]].append(d["time"])
    return {k: (min(v), max(v)) for k, v in win.items()}
