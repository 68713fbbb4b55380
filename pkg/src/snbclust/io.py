"""Serialization of fitted models and run metadata."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError


def write_labels(path, sample_ids, labels, responsibilities=None):
    """``sample_id,label,max_posterior``; max_posterior is 1 for hard clusterings."""
    labels = np.asarray(labels)
    if responsibilities is None:
        post = np.ones(len(labels))
    else:
        post = np.max(np.asarray(responsibilities), axis=1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "label", "max_posterior"])
        for sid, lab, p in zip(sample_ids, labels, post):
            w.writerow([sid, int(lab), repr(float(p))])


def read_labels(path, column: str = "label") -> tuple[list[str], np.ndarray]:
    """Read ``sample_id`` plus an integer label column from a CSV."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"label file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "sample_id" not in reader.fieldnames or column not in reader.fieldnames:
            raise ParseError(f"{path}: needs sample_id and {column} columns")
        ids, labels = [], []
        for r, row in enumerate(reader, start=2):
            try:
                labels.append(int(row[column]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {r} column {column!r} is not an integer") from None
            ids.append(row["sample_id"])
    return ids, np.array(labels, dtype=int)


def read_gene_truth(path) -> tuple[list[str], np.ndarray]:
    """Gene ids and the informative flag from a gene-truth sidecar."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"gene truth file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"gene_id", "informative"} <= set(reader.fieldnames):
            raise ParseError(f"{path}: needs gene_id and informative columns")
        ids, flags = [], []
        for r, row in enumerate(reader, start=2):
            if row["informative"] not in ("0", "1"):
                raise ParseError(f"{path}: row {r} informative flag must be 0 or 1")
            ids.append(row["gene_id"])
            flags.append(row["informative"] == "1")
    return ids, np.array(flags, dtype=bool)


def read_gene_scores(path, column: str = "score") -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"gene score file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "gene_id" not in reader.fieldnames or column not in reader.fieldnames:
            raise ParseError(f"{path}: needs gene_id and {column} columns")
        ids, vals = [], []
        for r, row in enumerate(reader, start=2):
            try:
                vals.append(float(row[column]))
            except (TypeError, ValueError):
                raise ParseError(f"{path}: row {r} column {column!r} is not a number") from None
            ids.append(row["gene_id"])
    return ids, np.array(vals)


def write_beta(path, gene_ids, beta, beta_star):
    """``gene_id,beta_star,beta_1..beta_K`` with values written by repr (round-trip exact)."""
    beta = np.asarray(beta, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_id", "beta_star", *[f"beta_{k + 1}" for k in range(beta.shape[1])]])
        for gid, bs, row in zip(gene_ids, beta_star, beta):
            w.writerow([gid, repr(float(bs)), *(repr(float(v)) for v in row)])


def write_gene_table(path, gene_ids, columns: dict):
    """Generic per-gene CSV: ``gene_id`` followed by the given named columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gene_id", *columns])
        cols = [np.asarray(v) for v in columns.values()]
        for j, gid in enumerate(gene_ids):
            w.writerow([gid, *(_fmt(c[j]) for c in cols)])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_metadata(path, record: dict):
    """One ``key=value`` line per entry, keys in insertion order."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in record.items():
            if "=" in str(key) or "\n" in str(value):
                raise ValidationError(f"metadata entry {key!r} cannot be written as key=value")
            fh.write(f"{key}={_meta_value(value)}\n")


def _meta_value(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(str(_meta_value(x)) for x in v)
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    return str(v)


def read_key_values(path) -> dict:
    """Parse a ``key=value`` file; blank lines and ``#`` comments are skipped."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for r, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"{path}: line {r} is not key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def fit_metadata(fit, method: str, extra: dict | None = None) -> dict:
    """Run-metadata record for a mixture fit."""
    rec = {
        "method": method,
        "K": fit.K,
        "lambda": float(fit.lam),
        "seed": fit.seed,
        "iterations": fit.n_iter,
        "converged": bool(fit.converged),
        "restarts_used": fit.restarts_used,
        "penalized_loglik": float(fit.penalized_loglik),
        "loglik": float(fit.loglik),
        "n_shrunk": fit.n_shrunk,
    }
    if extra:
        rec.update(extra)
    return rec
