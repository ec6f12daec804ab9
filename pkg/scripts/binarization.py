"""Verification accuracy lost by replacing cosine scores with Hamming scores of sign bits."""

import numpy as np

from _runner import run
from webface.experiments import BinarizationExperiment, binarization_drop

if __name__ == "__main__":
    run(__doc__, binarization_drop, BinarizationExperiment, range(5),
        lambda rs: f"mean drop {np.mean([r['drop'] for r in rs]):.2f} points")
