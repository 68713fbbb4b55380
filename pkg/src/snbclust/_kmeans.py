"""Lloyd's K-means with k-means++ seeding and optional feature weights.

Sparse K-means calls this hundreds of times per gap statistic on tiny
sample counts, so it stays a plain numpy loop without estimator overhead.
"""

import numpy as np


def _sqdist(X, C, w):
    # X: (n, p), C: (K, p) -> (n, K) weighted squared distances
    Xw = X * w
    return (Xw * X).sum(1)[:, None] - 2.0 * Xw @ C.T + (C * C * w).sum(1)[None, :]


def _plusplus(X, K, w, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d = _sqdist(X, np.array(centers), w)[:, 0]
    for _ in range(1, K):
        d = np.maximum(d, 0.0)
        total = d.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d / total)
        centers.append(X[idx])
        d = np.minimum(d, _sqdist(X, X[idx][None, :], w)[:, 0])
    return np.array(centers)


def _centers(X, labels, K):
    C = np.zeros((K, X.shape[1]))
    for k in range(K):
        members = labels == k
        if members.any():
            C[k] = X[members].mean(axis=0)
    return C


def _lloyd(X, C, w, max_iter):
    K = C.shape[0]
    labels = None
    for _ in range(max_iter):
        D = _sqdist(X, C, w)
        new = D.argmin(axis=1)
        counts = np.bincount(new, minlength=K)
        for k in np.flatnonzero(counts == 0):
            # reseed an empty cluster at the worst-fit point
            far = D[np.arange(len(new)), new].argmax()
            new[far] = k
            counts = np.bincount(new, minlength=K)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = _centers(X, labels, K)
    D = _sqdist(X, C, w)
    inertia = float(np.maximum(D[np.arange(len(labels)), labels], 0.0).sum())
    return labels, inertia


def canonical_labels(labels):
    """Relabel so clusters are numbered by first appearance."""
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=int)
    remap[order] = np.arange(len(order))
    return remap[np.unique(labels, return_inverse=True)[1]]


def kmeans(X, K, rng, n_init=10, weights=None, init_labels=None, max_iter=100):
    """Best-of-``n_init`` weighted K-means on the rows of ``X``.

    ``init_labels``, if given, is run as an extra candidate so the result
    is never worse than that partition. Returns ``(labels, inertia)`` with
    0-based labels.
    """
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    w = np.ones(p) if weights is None else np.asarray(weights, dtype=float)
    if K == 1:
        labels = np.zeros(n, dtype=int)
        return labels, _lloyd(X, _centers(X, labels, 1), w, 1)[1]
    best = None
    if init_labels is not None:
        labels = np.asarray(init_labels, dtype=int)
        best = _lloyd(X, _centers(X, labels, K), w, max_iter)
    for _ in range(n_init):
        cand = _lloyd(X, _plusplus(X, K, w, rng), w, max_iter)
        if best is None or cand[1] < best[1] - 1e-12:
            best = cand
    return best
