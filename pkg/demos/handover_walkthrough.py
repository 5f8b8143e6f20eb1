"""Walk through one ICN handover: the signaling ladder, step timings and
what the consumer saw while the path moved."""
from icn5gc.scenario import bundled, load_scenario, run_scenario

cfg = load_scenario(bundled("handover.scenario"))
run = run_scenario(cfg)
ho = run.report.handover

print(f"outcome={ho.outcome}  messages={ho.messages}  duration={ho.duration} ms")
print()
for rec in ho.records:
    print(rec)

print()
print("step  start   end")
for step, (start, end) in sorted(ho.step_times.items()):
    print(f"{step:>4} {start:>6} {end:>6}")

rep = run.report
print()
print(f"requests issued={rep.requests_issued} satisfied={rep.requests_satisfied} "
      f"lost={rep.interests_lost} duplicates={rep.duplicates}")

# the special cases: same UL-CL keeps the anchor, co-location removes RAN-UL-CL latency
for name in ("handover_same_ulcl", "handover_colocated", "handover_ip"):
    other = run_scenario(load_scenario(bundled(name + ".scenario"))).report
    h = other.handover
    print(f"{name:<20} messages={h.messages:<3} duration={h.duration:<4} "
          f"reestablishments={other.session_reestablishments} lost={other.interests_lost}")

# a few trace lines around the moment the old anchor starts redirecting
labelled = [line for line in run.sim.trace if "outcome=label" in line]
print()
print(*labelled[:3], sep="\n")
