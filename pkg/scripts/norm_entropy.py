"""Correlation between raw feature norm and softmax entropy on occluded held-out faces."""

from _runner import run
from webface.experiments import NormEntropyExperiment, norm_entropy_link

if __name__ == "__main__":
    run(__doc__, norm_entropy_link, NormEntropyExperiment, [0],
        lambda rs: "pearson " + ", ".join(f"{r['pearson_norm_entropy']:.3f}" for r in rs))
