"""Target Rank-1 of the widened network versus the same-width network, both trained on the bootstrapped identities."""

import numpy as np

from _runner import run
from webface.experiments import ExpansionExperiment, expansion_benefit

if __name__ == "__main__":
    run(__doc__, expansion_benefit, ExpansionExperiment, range(3),
        lambda rs: f"mean expanded {np.mean([r['expanded'] for r in rs]):.2f} "
                   f"vs un-expanded {np.mean([r['unexpanded'] for r in rs]):.2f}")
