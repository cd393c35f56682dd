"""Seeded synthetic data: cohorts for the pipeline and stratified experiments.

The cohort generator stands in for a real observational study. It produces
units with continuous covariates, a treatment assignment driven by those
covariates, an optional treated-only region along the first box covariate
(the overlap gap), binary potential outcomes with a tunable effect, and an
exact-match subgroup key. The full potential outcomes are returned as a truth
record so downstream checks can compare against the realized effect.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .dataset import Dataset, Schema
from .inference import StratumCompletion, StratumObservation


@dataclass(frozen=True)
class SyntheticTruth:
    """Realized potential outcomes of a generated cohort, in unit order."""

    r_treated: tuple[int, ...]
    r_control: tuple[int, ...]

    @property
    def true_ate(self) -> float:
        n = len(self.r_treated)
        return (sum(self.r_treated) - sum(self.r_control)) / n

    def true_ate_over(self, indices) -> float:
        idx = list(indices)
        s = sum(self.r_treated[i] - self.r_control[i] for i in idx)
        return s / len(idx)


def generate_cohort(
    n_units: int,
    covariate_count: int = 4,
    overlap_gap: float = 0.0,
    true_effect: float = 0.0,
    missing_rate: float = 0.0,
    confounding: float = 0.6,
    seed=0,
) -> tuple[Dataset, SyntheticTruth]:
    """Reproducible cohort with known potential outcomes.

    ``overlap_gap`` shifts treated units along the first covariate, creating
    a region where only treated units live. ``confounding`` scales how
    strongly the covariates drive treatment; small values give strong
    overlap. ``missing_rate`` knocks out cells in the covariates beyond the
    first two (the box covariates stay complete). The same seed yields the
    same cohort, bit for bit.
    """
    if n_units < 4:
        raise ValueError("need at least 4 units")
    if covariate_count < 2:
        raise ValueError("need at least 2 covariates for a 2-D box")
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must be in [0, 1)")
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    p = covariate_count
    x = rng.normal(0.0, 1.0, size=(n_units, p))
    lin = confounding * (1.2 * x[:, 0] + 0.8 * x[:, 1] + 0.35 * x[:, 2:].sum(axis=1))
    z = rng.random(n_units) < expit(-0.2 + lin)
    # guarantee both arms
    if z.all():
        z[0] = False
    if not z.any():
        z[0] = True
    # a treated-only fringe: part of the treated arm sits beyond all controls
    fringe = z & (rng.random(n_units) < 0.35)
    x[:, 0] = x[:, 0] + overlap_gap * fringe

    p_control = expit(-1.2 + 0.7 * x[:, 0] + 0.4 * x[:, 1])
    p_treated = np.clip(p_control + true_effect, 0.02, 0.98)
    r_control = (rng.random(n_units) < p_control).astype(int)
    r_treated = (rng.random(n_units) < p_treated).astype(int)
    r = np.where(z, r_treated, r_control).astype(np.int8)

    subgroup = (x[:, 1] > np.quantile(x[:, 1], 0.7)).astype(int)

    names = tuple(f"x{j + 1}" for j in range(p))
    tiers = {name: (1 if j < 2 else (2 if j == 2 else 3)) for j, name in enumerate(names)}
    schema = Schema(
        covariate_names=names,
        tiers=tiers,
        box_covariates=names[:2],
        exact_match_column="subgroup",
    )

    rows = []
    for i in range(n_units):
        row = []
        for j in range(p):
            if j >= 2 and missing_rate > 0.0 and rng.random() < missing_rate:
                row.append(None)
            else:
                row.append(float(x[i, j]))
        rows.append(tuple(row))

    ds = Dataset(
        schema=schema,
        ids=tuple(f"u{i + 1:04d}" for i in range(n_units)),
        z=z.astype(np.int8),
        r=r,
        rows=tuple(rows),
        exact_keys=tuple(str(int(s)) for s in subgroup),
        imputed=False,
    )
    truth = SyntheticTruth(
        r_treated=tuple(int(v) for v in r_treated),
        r_control=tuple(int(v) for v in r_control),
    )
    return ds, truth


def generate_experiment(
    n_units: int = 60,
    max_stratum: int = 5,
    effect: float = 0.0,
    n_strata: int | None = None,
    seed=0,
) -> tuple[list[StratumCompletion], list[StratumObservation]]:
    """Stratified experiment with full-matching-shaped strata and one realized assignment.

    Each stratum has one unit on a random side and 1 to ``max_stratum - 1`` on
    the other; potential outcomes are Bernoulli with a per-stratum base rate
    and the given additive effect. Returns the completions (including which
    units were treated, encoded in the observation counts) and observed
    per-stratum summaries from one uniform assignment draw. When ``n_strata``
    is given, exactly that many strata are produced and ``n_units`` is
    ignored.
    """
    if n_units < 2:
        raise ValueError("need at least 2 units")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    completions: list[StratumCompletion] = []
    observations: list[StratumObservation] = []
    placed = 0
    while (len(completions) < n_strata) if n_strata is not None else (placed < n_units):
        n = int(rng.integers(2, max_stratum + 1))
        if n_strata is None:
            n = min(n, max(2, n_units - placed))
        m = 1 if rng.random() < 0.5 else n - 1
        base = rng.uniform(0.2, 0.8)
        r_c = (rng.random(n) < base).astype(int)
        r_t = (rng.random(n) < np.clip(base + effect, 0.02, 0.98)).astype(int)
        comp = StratumCompletion(
            r_treated=tuple(int(v) for v in r_t),
            r_control=tuple(int(v) for v in r_c),
            m=m,
        )
        completions.append(comp)
        treated = rng.choice(n, size=m, replace=False)
        tset = set(int(i) for i in treated)
        t1 = sum(comp.r_treated[i] for i in tset)
        c1 = sum(comp.r_control[i] for i in range(n) if i not in tset)
        observations.append(StratumObservation(n=n, m=m, t1=t1, c1=c1))
        placed += n
    return completions, observations
