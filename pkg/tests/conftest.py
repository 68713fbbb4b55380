import numpy as np
import pytest

from snbclust.counts import normalize
from snbclust.nb import fit_null_means
from snbclust.simulate import SimulationConfig, generate


@pytest.fixture(scope="session")
def sim1():
    return generate(SimulationConfig(scheme="sim1", gamma=1.2, seed=11))


@pytest.fixture(scope="session")
def sim2():
    return generate(SimulationConfig(scheme="sim2", gamma=1.2, seed=5))


@pytest.fixture(scope="session")
def sim2_small():
    """sim2-style data trimmed to 300 genes (the first 150 informative) for fast EM tests."""
    ds = generate(SimulationConfig(scheme="sim2", gamma=1.2, seed=21))
    keep = np.zeros(ds.counts.n_genes, dtype=bool)
    keep[:300] = True
    return ds.counts.subset_genes(keep), ds.labels, ds.informative_mask[:300]


@pytest.fixture(scope="session")
def sim1_fitted(sim1):
    prof = normalize(sim1.counts, size_factors=np.ones(sim1.counts.n_samples))
    return sim1, prof, fit_null_means(sim1.counts, prof)
