"""Edge caching versus per-vehicle fetches as the fleet grows.

Every vehicle asks for the same segment. On the ICN side the anchor's
content store answers all but the first request; on the IP side each
request goes to the producer.
"""
from icn5gc.report import format_report
from icn5gc.scenario import bundled, load_scenario, run_mec_scenario

icn_cfg = load_scenario(bundled("mec_icn.scenario"))
ip_cfg = load_scenario(bundled("mec_ip.scenario"))

print(f"{'N':>4} {'icn fetch':>10} {'icn hits':>9} {'ip fetch':>9} {'icn sig':>8} {'ip sig':>7}")
for n in (1, 2, 5, 10, 25, 50):
    icn = run_mec_scenario(icn_cfg.with_fleet(n))
    ip = run_mec_scenario(ip_cfg.with_fleet(n))
    print(f"{n:>4} {icn.upstream_fetches:>10} {icn.cache_hits:>9} {ip.upstream_fetches:>9} "
          f"{icn.signaling_messages:>8} {ip.signaling_messages:>7}")

# full side-by-side table for the default fleet
print()
print(format_report(run_mec_scenario(icn_cfg), run_mec_scenario(ip_cfg)))
