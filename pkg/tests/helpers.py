"""Shared test utilities: independent oracles and random-instance generators."""

from __future__ import annotations

import numpy as np

from boxmatch.dataset import Dataset, Schema
from boxmatch.inference import StratumObservation


def make_dataset(values, z, tiers=None, box=(), exact=None, imputed=True, names=None):
    """Small in-memory dataset; values is a list of covariate rows."""
    values = [tuple(row) for row in values]
    width = len(values[0])
    if names is None:
        names = tuple(f"x{j + 1}" for j in range(width))
    if tiers is None:
        tiers = {name: 3 for name in names}
    schema = Schema(
        covariate_names=tuple(names),
        tiers=tiers,
        box_covariates=tuple(box),
        exact_match_column=None if exact is None else "key",
    )
    return Dataset(
        schema=schema,
        ids=tuple(f"u{i}" for i in range(len(values))),
        z=np.asarray(z, dtype=np.int8),
        r=np.zeros(len(values), dtype=np.int8),
        rows=tuple(values),
        exact_keys=None if exact is None else tuple(exact),
        imputed=imputed,
    )


def irls_logistic(x, y, tol=1e-12, max_iter=200):
    """Independent IRLS fit on the raw scale (weighted least squares updates)."""
    x = np.column_stack([np.ones(len(y)), np.asarray(x, dtype=float)])
    y = np.asarray(y, dtype=float)
    beta = np.zeros(x.shape[1])
    for _ in range(max_iter):
        eta = x @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = mu * (1.0 - mu)
        zwork = eta + (y - mu) / w
        wx = x * w[:, None]
        beta_new = np.linalg.solve(x.T @ wx, x.T @ (w * zwork))
        if np.max(np.abs(beta_new - beta)) < tol:
            beta = beta_new
            break
        beta = beta_new
    return beta[0], beta[1:]


def brute_force_full_match(dist, allowed, kappa_t, kappa_c):
    """Minimum-cost star forest covering every unit; None if infeasible."""
    nt, nc = dist.shape
    edges = [(i, j) for i in range(nt) for j in range(nc) if allowed[i, j]]
    best = None
    for bits in range(1 << len(edges)):
        chosen = [edges[k] for k in range(len(edges)) if bits >> k & 1]
        deg_t = [0] * nt
        deg_c = [0] * nc
        for i, j in chosen:
            deg_t[i] += 1
            deg_c[j] += 1
        if any(d == 0 for d in deg_t) or any(d == 0 for d in deg_c):
            continue
        if any(d > kappa_c for d in deg_t) or any(d > kappa_t for d in deg_c):
            continue
        if any(deg_t[i] >= 2 and deg_c[j] >= 2 for i, j in chosen):
            continue
        cost = sum(dist[i, j] for i, j in chosen)
        if best is None or cost < best:
            best = cost
    return best


def random_observations(rng, max_total=16, max_stratum=5):
    """Random stratified-experiment summaries with both arms in every stratum."""
    target = int(rng.integers(4, max_total + 1))
    obs = []
    total = 0
    while total < target:
        n = int(rng.integers(2, max_stratum + 1))
        n = min(n, target - total)
        if n < 2:
            break
        m = 1 if rng.random() < 0.5 else n - 1
        t1 = int(rng.integers(0, m + 1))
        c1 = int(rng.integers(0, n - m + 1))
        obs.append(StratumObservation(n=n, m=m, t1=t1, c1=c1))
        total += n
    if not obs:
        obs = [StratumObservation(n=2, m=1, t1=int(rng.integers(0, 2)), c1=int(rng.integers(0, 2)))]
    return obs
