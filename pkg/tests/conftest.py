import functools
import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

from icn5gc.scenario import bundled, load_scenario, run_scenario  # noqa: E402

RANDOM_SEEDS = range(1, 101)


@functools.lru_cache(maxsize=None)
def bundled_cfg(name):
    return load_scenario(bundled(name + ".scenario"))


@functools.lru_cache(maxsize=None)
def default_run(name):
    return run_scenario(bundled_cfg(name))


@functools.lru_cache(maxsize=None)
def randomized_run(name, seed, lo=1, hi=50):
    cfg = bundled_cfg(name).variant(randomize_latency=(lo, hi))
    return run_scenario(cfg, seed=seed)
