"""Count matrix ingestion, filtering and normalization.

Genes are rows and samples are columns throughout the package.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyResultError, ParseError, ValidationError

PHI_MIN = 0.01
PHI_MAX = 1000.0
MOM_EPS = 1e-8
DISPERSION_SHRINKAGE = 0.25


class SizeFactorFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class CountMatrix:
    """Genes x samples matrix of non-negative integer counts."""

    gene_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise ValidationError("counts must be a 2-D genes x samples matrix")
        if counts.size and not np.all(np.isfinite(counts)):
            raise ValidationError("counts contain non-finite values")
        if np.any(counts < 0):
            raise ValidationError("counts must be non-negative")
        if counts.dtype.kind == "f":
            if np.any(counts != np.round(counts)):
                raise ValidationError("counts must be integral")
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "gene_ids", tuple(str(g) for g in self.gene_ids))
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))

        G, n = counts.shape
        if len(self.gene_ids) != G or len(self.sample_ids) != n:
            raise ValidationError(
                f"id lengths ({len(self.gene_ids)}, {len(self.sample_ids)}) "
                f"do not match counts shape {counts.shape}"
            )
        if G < 1:
            raise ValidationError("need at least one gene")
        if n < 2:
            raise ValidationError("need at least two samples")
        _check_distinct(self.gene_ids, "gene")
        _check_distinct(self.sample_ids, "sample")

    @classmethod
    def from_array(cls, counts, gene_ids=None, sample_ids=None) -> CountMatrix:
        counts = np.asarray(counts)
        G, n = counts.shape
        if gene_ids is None:
            gene_ids = [f"gene{j + 1}" for j in range(G)]
        if sample_ids is None:
            sample_ids = [f"sample{i + 1}" for i in range(n)]
        return cls(tuple(gene_ids), tuple(sample_ids), counts)

    @property
    def n_genes(self) -> int:
        return self.counts.shape[0]

    @property
    def n_samples(self) -> int:
        return self.counts.shape[1]

    def subset_genes(self, mask) -> CountMatrix:
        mask = np.asarray(mask, dtype=bool)
        ids = [g for g, keep in zip(self.gene_ids, mask) if keep]
        return CountMatrix(tuple(ids), self.sample_ids, self.counts[mask])


def _check_distinct(ids, kind):
    seen = set()
    for x in ids:
        if x in seen:
            raise ValidationError(f"duplicate {kind} id {x!r}")
        seen.add(x)


@dataclass(frozen=True)
class NormalizationProfile:
    """Plug-in size factors, dispersions and log-CPM for one count matrix."""

    size_factors: np.ndarray
    dispersions: np.ndarray
    log_cpm: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.asarray(self.size_factors, dtype=float)
        phi = np.asarray(self.dispersions, dtype=float)
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValidationError("size factors must be positive and finite")
        if np.any(~np.isfinite(phi)) or np.any(phi <= 0):
            raise ValidationError("dispersions must be positive and finite")
        for name, arr in (("size_factors", s), ("dispersions", phi)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def log_size_factors(self) -> np.ndarray:
        return np.log(self.size_factors)


def _parse_count_cell(cell, row, col):
    text = cell.strip()
    try:
        value = int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise ParseError(f"non-numeric count {cell!r} at row {row}, column {col}") from None
        if not np.isfinite(f) or f != int(f):
            raise ParseError(f"non-integer count {cell!r} at row {row}, column {col}") from None
        value = int(f)
    if value < 0:
        raise ParseError(f"negative count {cell!r} at row {row}, column {col}")
    return value


def load_counts(path, format: str | None = None) -> CountMatrix:
    """Read a counts table (header of sample ids, first column gene ids).

    ``format`` is ``"tsv"`` or ``"csv"``; inferred from the suffix when omitted.
    Parse errors report 1-based file row and column coordinates.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"counts file not found: {path}")
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "tsv"
    if format not in ("tsv", "csv"):
        raise ParseError(f"unknown counts format {format!r}")
    delimiter = "\t" if format == "tsv" else ","

    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one gene row")
    header = rows[0]
    sample_ids = [h.strip() for h in header[1:]]
    gene_ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(
                f"{path}: row {r} has {len(row)} fields, header has {len(header)}"
            )
        gene_ids.append(row[0].strip())
        values.append([_parse_count_cell(c, r, col) for col, c in enumerate(row[1:], start=2)])
    return CountMatrix(tuple(gene_ids), tuple(sample_ids), np.array(values, dtype=np.int64))


def write_counts(m: CountMatrix, path, format: str | None = None, corner: str = "gene_id"):
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "tsv"
    delimiter = "\t" if format == "tsv" else ","
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([corner, *m.sample_ids])
        for gid, row in zip(m.gene_ids, m.counts):
            w.writerow([gid, *(int(v) for v in row)])


def filter_genes(m: CountMatrix, min_mean: float = 0.0, min_variance_quantile: float = 0.0) -> CountMatrix:
    """Keep genes with mean >= ``min_mean`` and variance >= the given quantile of gene variances."""
    if min_mean < 0:
        raise ValidationError("min_mean must be >= 0")
    if not 0.0 <= min_variance_quantile <= 1.0:
        raise ValidationError("min_variance_quantile must lie in [0, 1]")
    y = m.counts.astype(float)
    means = y.mean(axis=1)
    var = y.var(axis=1, ddof=1)
    keep = means >= min_mean
    if min_variance_quantile > 0:
        keep &= var >= np.quantile(var, min_variance_quantile)
    if not keep.any():
        raise EmptyResultError("all genes were filtered out")
    return m.subset_genes(keep)


def _geomean_one(s):
    return s / np.exp(np.mean(np.log(s)))


def _size_factors(m: CountMatrix, method: str):
    y = m.counts.astype(float)
    if np.any(y.sum(axis=0) <= 0):
        raise ValidationError("every sample needs at least one positive count")
    if method == "median_of_ratios":
        pos = np.all(y > 0, axis=1)
        if pos.any():
            logy = np.log(y[pos])
            log_ratio = logy - logy.mean(axis=1, keepdims=True)
            return _geomean_one(np.exp(np.median(log_ratio, axis=0))), method
        warnings.warn(
            "no gene is positive in all samples; using library_total size factors",
            SizeFactorFallbackWarning,
            stacklevel=3,
        )
        method = "library_total"
    if method == "library_total":
        return _geomean_one(y.sum(axis=0)), method
    raise ValidationError(f"unknown size factor method {method!r}")


def estimate_size_factors(m: CountMatrix, method: str = "median_of_ratios") -> np.ndarray:
    """Per-sample size factors rescaled to geometric mean 1.

    ``median_of_ratios`` uses genes that are positive in every sample and
    falls back to ``library_total`` (with a ``SizeFactorFallbackWarning``)
    when there are none.
    """
    return _size_factors(m, method)[0]


def estimate_dispersions(
    m: CountMatrix,
    size_factors,
    shrinkage: float = DISPERSION_SHRINKAGE,
    phi_min: float = PHI_MIN,
    phi_max: float = PHI_MAX,
) -> np.ndarray:
    """Moment-matched NB dispersions, shrunk on the log scale toward their median.

    With adjusted counts ``y / s`` having mean ``mu`` and sample variance ``v``,
    the raw estimate is ``mu**2 / max(v - mu, eps)``. Larger values mean less
    overdispersion.
    """
    s = np.asarray(size_factors, dtype=float)
    if np.any(s <= 0):
        raise ValidationError("size factors must be positive")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValidationError("shrinkage must lie in [0, 1]")
    adj = m.counts / s[None, :]
    mu = adj.mean(axis=1)
    v = adj.var(axis=1, ddof=1)
    with np.errstate(divide="ignore"):
        raw = mu**2 / np.maximum(v - mu, MOM_EPS)
    # all-zero genes carry no overdispersion evidence
    raw = np.where(mu > 0, raw, phi_max)
    log_raw = np.log(raw)
    shrunk = np.exp((1.0 - shrinkage) * log_raw + shrinkage * np.log(np.median(raw)))
    return np.clip(shrunk, phi_min, phi_max)


def log_cpm(m: CountMatrix) -> np.ndarray:
    """log10 counts-per-million with +0.5 count and +1 library offsets."""
    y = m.counts.astype(float)
    lib = y.sum(axis=0)
    return np.log10((y + 0.5) / (lib[None, :] + 1.0) * 1e6)


def normalize(
    m: CountMatrix,
    size_factor_method: str = "median_of_ratios",
    shrinkage: float = DISPERSION_SHRINKAGE,
    size_factors=None,
    dispersions=None,
) -> NormalizationProfile:
    """Build the full plug-in profile; explicit overrides skip estimation."""
    meta = {}
    if size_factors is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SizeFactorFallbackWarning)
            s, used = _size_factors(m, size_factor_method)
        meta["size_factor_method"] = used
        meta["size_factor_fallback"] = any(
            issubclass(w.category, SizeFactorFallbackWarning) for w in caught
        )
    else:
        s = np.asarray(size_factors, dtype=float)
        if s.shape != (m.n_samples,):
            raise ValidationError("size factor override has wrong length")
        meta["size_factor_method"] = "override"
        meta["size_factor_fallback"] = False
    if dispersions is None:
        phi = estimate_dispersions(m, s, shrinkage=shrinkage)
        meta["dispersion_method"] = "moments"
    else:
        phi = np.asarray(dispersions, dtype=float)
        if phi.shape != (m.n_genes,):
            raise ValidationError("dispersion override has wrong length")
        meta["dispersion_method"] = "override"
    return NormalizationProfile(s, phi, log_cpm(m), meta)


def write_profile(m: CountMatrix, prof: NormalizationProfile, size_factor_path, dispersion_path):
    """Write the size-factor and dispersion CSV sidecars."""
    _write_id_values(size_factor_path, "size_factor", m.sample_ids, prof.size_factors)
    _write_id_values(dispersion_path, "dispersion", m.gene_ids, prof.dispersions)


def _write_id_values(path, column, ids, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", column])
        for i, v in zip(ids, values):
            w.writerow([i, repr(float(v))])


def read_id_values(path, ids) -> np.ndarray:
    """Read an ``id,value`` sidecar and align it to ``ids``."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"file not found: {path}")
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise ParseError(f"{path}: expected an id,value header")
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                table[row[0]] = float(row[1])
            except (IndexError, ValueError):
                raise ParseError(f"{path}: bad value at row {r}") from None
    missing = [i for i in ids if i not in table]
    if missing:
        raise ValidationError(f"{path}: missing ids, e.g. {missing[0]!r}")
    return np.array([table[i] for i in ids])
