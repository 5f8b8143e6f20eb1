"""Run reports: counters, latencies and the handover step log."""

from __future__ import annotations

import io
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple


class IoError(OSError):
    pass


@dataclass(frozen=True)
class StepRecord:
    step: int
    sender: str
    receiver: str
    tag: str
    time: int
    kind: str = "request"
    ok: bool = True

    def __str__(self):
        flag = "" if self.ok else " NACK"
        return f"{self.step:>2} {self.time:>6} {self.sender} -> {self.receiver} {self.tag}{flag}"


@dataclass
class HandoverReport:
    records: List[StepRecord] = field(default_factory=list)
    # step -> (first send, last delivery)
    step_times: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    started: Optional[int] = None
    finished: Optional[int] = None
    release_time: Optional[int] = None
    outcome: str = "incomplete"  # complete | aborted | incomplete

    @property
    def duration(self) -> Optional[int]:
        if self.started is None or self.finished is None:
            return None
        return self.finished - self.started

    @property
    def messages(self) -> int:
        return len(self.records)

    def step_sequence(self) -> List[int]:
        return [r.step for r in self.records]

    def golden(self) -> List[Tuple[int, str, str, str]]:
        """The comparison surface: (step, sender, receiver, tag) in send order."""
        return [(r.step, r.sender, r.receiver, r.tag) for r in self.records]


@dataclass
class Report:
    scenario: str
    mode: str
    seed: int
    upstream_fetches: int = 0
    cache_hits: int = 0
    pit_aggregations: int = 0
    signaling_messages: int = 0
    interests_lost: int = 0
    dns_lookups: int = 0
    session_reestablishments: int = 0
    requests_issued: int = 0
    requests_satisfied: int = 0
    duplicates: int = 0
    alg_translations: int = 0
    sessions_refused: int = 0
    latencies: List[int] = field(default_factory=list)
    handover: Optional[HandoverReport] = None
    quiescent: bool = True
    final_clock: int = 0

    COUNTERS = ("upstream_fetches", "cache_hits", "pit_aggregations", "signaling_messages",
                "interests_lost", "dns_lookups", "session_reestablishments", "requests_issued",
                "requests_satisfied", "duplicates", "alg_translations", "sessions_refused")

    @property
    def aborted(self) -> bool:
        return self.handover is not None and self.handover.outcome == "aborted"

    @property
    def mean_latency(self) -> Optional[float]:
        return sum(self.latencies) / len(self.latencies) if self.latencies else None

    def rows(self) -> List[Tuple[str, object]]:
        out: List[Tuple[str, object]] = [(c, getattr(self, c)) for c in self.COUNTERS]
        mean = self.mean_latency
        out.append(("mean_latency_ms", round(mean, 2) if mean is not None else "-"))
        out.append(("max_latency_ms", max(self.latencies) if self.latencies else "-"))
        if self.handover is not None:
            h = self.handover
            out.append(("handover_outcome", h.outcome))
            out.append(("handover_messages", h.messages))
            out.append(("handover_duration_ms", h.duration if h.duration is not None else "-"))
            for step in sorted(h.step_times):
                start, end = h.step_times[step]
                out.append((f"step_{step}_ms", f"{start}-{end}"))
        out.append(("quiescent", self.quiescent))
        out.append(("final_clock_ms", self.final_clock))
        return out

    def records(self) -> List[str]:
        lines = [f"report scenario={self.scenario} mode={self.mode} seed={self.seed}"]
        lines += [f"{k} {v}" for k, v in self.rows()]
        if self.handover is not None:
            lines += [f"step {r.step} {r.time} {r.sender} {r.receiver} {r.tag}" for r in self.handover.records]
        return lines


def _table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*map(str, r)) for r in rows]
    return "\n".join(lines)


def _delta(a, b) -> str:
    if isinstance(a, bool) or isinstance(b, bool):
        return "" if a == b else "differs"
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        d = b - a
        return f"{d:+g}"
    return ""


def format_report(report: Report, other: Optional[Report] = None) -> str:
    if other is None:
        return _table(["metric", report.scenario], [[k, v] for k, v in report.rows()])
    right = dict(other.rows())
    keys = [k for k, _ in report.rows()] + [k for k, _ in other.rows() if k not in dict(report.rows())]
    left = dict(report.rows())
    rows = [[k, left.get(k, "-"), right.get(k, "-"), _delta(left.get(k), right.get(k))] for k in keys]
    return _table(["metric", report.scenario, other.scenario, "delta"], rows)


def emit_report(report: Report, other: Optional[Report] = None, records_path: Optional[str] = None,
                stream=None) -> str:
    """Print the table and optionally write line-delimited records."""
    text = format_report(report, other)
    print(text, file=stream or sys.stdout)
    if records_path is not None:
        buf = io.StringIO()
        for rep in (report,) if other is None else (report, other):
            buf.write("\n".join(rep.records()) + "\n")
        try:
            with open(records_path, "w") as fh:
                fh.write(buf.getvalue())
        except OSError as exc:
            raise IoError(f"cannot write {records_path}: {exc}") from exc
    return text
