"""2-D PCA projection of item points for visual inspection of a concept."""

from __future__ import annotations

import csv

import numpy as np

from .errors import ContractError


def power_components(x, k=2, tol=1e-8, max_iter=1000, seed=0):
    """Top-``k`` principal directions of mean-centered rows of ``x``.

    Power iteration on the covariance with deflation after each component.
    Returns ``(components (k, d), eigenvalues (k,))``.
    """
    x = np.asarray(x, dtype=np.float64)
    cov = x.T @ x / max(len(x) - 1, 1)
    d = cov.shape[0]
    rng = np.random.default_rng(seed)
    comps, vals = [], []
    for _ in range(min(k, d)):
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            # sign-insensitive convergence test
            done = min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol
            v = w
            if done:
                break
        lam = float(v @ cov @ v)
        comps.append(v)
        vals.append(lam)
        cov = cov - lam * np.outer(v, v)
    comps = np.array(comps)
    # fix the sign so the largest |coordinate| is positive
    for c in comps:
        j = np.argmax(np.abs(c))
        if c[j] < 0:
            c *= -1
    return comps, np.array(vals)


def project_2d(points, **kw):
    x = np.asarray(points, dtype=np.float64)
    x = x - x.mean(axis=0)
    comps, _ = power_components(x, 2, **kw)
    return x @ comps.T


def concept_projection(store, ds, rel, tag, n_random, rng):
    """Rows ``(item_id, x, y, label)`` for items of a concept plus random others."""
    linked = np.asarray(ds.concepts.items_of(rel, tag), dtype=np.int64)
    if len(linked) == 0:
        raise ContractError(f"concept (relation={rel}, tag={tag}) has no linked items")
    others = np.setdiff1d(np.arange(ds.n_items), linked)
    n_random = min(n_random, len(others))
    rand = np.sort(rng.choice(others, n_random, replace=False)) if n_random else others[:0]
    ids = np.concatenate([np.sort(linked), rand])
    labels = ["concept"] * len(linked) + ["random"] * len(rand)
    xy = project_2d(store.tables["items"][ids])
    return [(int(i), float(a), float(b), lab) for i, (a, b), lab in zip(ids, xy, labels)]


def write_projection_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["item_id", "x", "y", "label"])
        for i, x, y, lab in rows:
            w.writerow([i, f"{x:.9g}", f"{y:.9g}", lab])
