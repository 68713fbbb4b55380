"""Clustering and feature-selection evaluation metrics."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.special import comb

from .errors import ParseError, ValidationError


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie adjusted Rand index of two partitions."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("label vectors must have the same length")
    if a.size == 0:
        raise ValidationError("label vectors are empty")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    sum_cells = comb(table, 2).sum()
    sum_rows = comb(table.sum(axis=1), 2).sum()
    sum_cols = comb(table.sum(axis=0), 2).sum()
    total = comb(a.size, 2)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        # both partitions trivial (all-one-cluster or all-singletons)
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def roc_auc(scores, truth) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=float)
    truth = np.asarray(truth, dtype=bool)
    if scores.shape != truth.shape:
        raise ValidationError("scores and truth must have the same length")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("truth must contain both classes")
    ranks = stats.rankdata(scores)
    u = ranks[truth].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class ContingencyTable2x2:
    a: int  # selected and in set
    b: int  # selected, not in set
    c: int  # unselected, in set
    d: int  # unselected, not in set

    @property
    def total(self):
        return self.a + self.b + self.c + self.d


def contingency(selected, in_set) -> ContingencyTable2x2:
    selected = np.asarray(selected, dtype=bool)
    in_set = np.asarray(in_set, dtype=bool)
    if selected.shape != in_set.shape:
        raise ValidationError("masks must cover the same genes")
    return ContingencyTable2x2(
        int(np.sum(selected & in_set)),
        int(np.sum(selected & ~in_set)),
        int(np.sum(~selected & in_set)),
        int(np.sum(~selected & ~in_set)),
    )


def fisher_over_representation(t: ContingencyTable2x2) -> float:
    """One-sided Fisher exact p-value P(A >= a) under the hypergeometric null."""
    n_selected = t.a + t.b
    set_size = t.a + t.c
    return float(stats.hypergeom.sf(t.a - 1, t.total, set_size, n_selected))


def benjamini_hochberg(pvalues) -> np.ndarray:
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        return p.copy()
    order = np.argsort(p, kind="mergesort")
    ranked = p[order] * p.size / np.arange(1, p.size + 1)
    adjusted = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty_like(p)
    out[order] = np.minimum(adjusted, 1.0)
    return out


@dataclass(frozen=True)
class EnrichmentRow:
    name: str
    table: ContingencyTable2x2
    p: float
    fdr: float


def fisher_enrichment(selected, gene_sets: dict) -> list[EnrichmentRow]:
    """Over-representation p-value (and BH FDR) for each named gene-set mask."""
    selected = np.asarray(selected, dtype=bool)
    names, tables, pvals = [], [], []
    for name, mask in gene_sets.items():
        mask = np.asarray(mask, dtype=bool)
        t = contingency(selected, mask)
        if t.a + t.c == 0:
            warnings.warn(f"gene set {name!r} is empty in this universe", stacklevel=2)
            p = 1.0
        else:
            p = fisher_over_representation(t)
        names.append(name)
        tables.append(t)
        pvals.append(p)
    fdr = benjamini_hochberg(pvals)
    return [EnrichmentRow(nm, t, p, q) for nm, t, p, q in zip(names, tables, pvals, fdr)]


def read_gene_sets(path, gene_ids) -> dict:
    """Parse ``name<TAB>id1,id2,...`` lines into masks over ``gene_ids``."""
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"gene-set file not found: {path}")
    index = {g: j for j, g in enumerate(gene_ids)}
    sets = {}
    with open(path, encoding="utf-8") as fh:
        for r, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(f"{path}: line {r} lacks a tab separator")
            name, members = line.split("\t", 1)
            mask = np.zeros(len(gene_ids), dtype=bool)
            for g in members.split(","):
                g = g.strip()
                if g in index:
                    mask[index[g]] = True
            sets[name.strip()] = mask
    return sets


def write_enrichment(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "a", "b", "c", "d", "p", "fdr"])
        for r in rows:
            t = r.table
            w.writerow([r.name, t.a, t.b, t.c, t.d, repr(float(r.p)), repr(float(r.fdr))])
