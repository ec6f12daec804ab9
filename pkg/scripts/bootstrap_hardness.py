"""Baseline Rank-1 inside bootstrapped identities versus an equal-size random control."""

from _runner import run
from webface.experiments import BootstrapExperiment, bootstrap_hardness


def brief(r):
    return {k: v for k, v in r.items() if k != "control_identities"}


def fn(seed, exp):
    return brief(bootstrap_hardness(seed, exp))


if __name__ == "__main__":
    run(__doc__, fn, BootstrapExperiment, range(5),
        lambda rs: f"bootstrapped set harder in {sum(r['passed'] for r in rs)}/{len(rs)} seeds")
