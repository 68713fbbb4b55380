"""Bundled demo data: one Simulation-1 dataset (150 genes, 45 samples, gamma 1.2).

The size-factor sidecar holds the generator's library scales (all 1). In
this design every gene is informative and the clusters differ in total
expression, so estimated size factors absorb part of the cluster signal.
"""

from importlib import resources

DEMO_COUNTS = "demo_sim1_counts.tsv"
DEMO_SAMPLES = "demo_sim1_samples.csv"
DEMO_GENES = "demo_sim1_genes.csv"
DEMO_SIZE_FACTORS = "demo_sim1_size_factors.csv"


def path(name: str):
    return resources.files(__name__) / name


def demo_counts_path():
    return path(DEMO_COUNTS)
