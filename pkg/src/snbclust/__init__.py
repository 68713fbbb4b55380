"""Sparse negative-binomial mixture clustering of RNA-seq samples, with Gaussian baselines."""

from .counts import CountMatrix, NormalizationProfile, load_counts, normalize, write_counts
from .errors import (
    DegenerateFitError,
    EmptyResultError,
    NumericError,
    ParseError,
    SnbClustError,
    ValidationError,
)
from .fused import FusedConfig, fit_fused
from .metrics import adjusted_rand_index, fisher_enrichment, roc_auc
from .mixture import FitConfig, MixtureFit, fit, map_labels, selected_genes
from .nb import fit_null_means, nb_log_pmf
from .selection import run_lambda_path, snbclust_path

__version__ = "0.1.0"

__all__ = [
    "CountMatrix",
    "NormalizationProfile",
    "load_counts",
    "normalize",
    "write_counts",
    "SnbClustError",
    "ParseError",
    "ValidationError",
    "EmptyResultError",
    "NumericError",
    "DegenerateFitError",
    "FusedConfig",
    "fit_fused",
    "adjusted_rand_index",
    "fisher_enrichment",
    "roc_auc",
    "FitConfig",
    "MixtureFit",
    "fit",
    "map_labels",
    "selected_genes",
    "fit_null_means",
    "nb_log_pmf",
    "run_lambda_path",
    "snbclust_path",
]
