"""Target Rank-1 of the widest bottleneck versus warm-started narrower ones."""

from _runner import run
from webface.experiments import BottleneckExperiment, bottleneck_trend

if __name__ == "__main__":
    run(__doc__, bottleneck_trend, BottleneckExperiment, range(5),
        lambda rs: f"narrower bottleneck at least as good in {sum(r['passed'] for r in rs)}/{len(rs)} seeds")
