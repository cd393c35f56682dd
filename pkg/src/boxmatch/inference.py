"""Randomization inference for the average treatment effect with binary outcomes.

Within each stratum the treated count is fixed and assignments are uniform,
so the estimator's randomization variance under any completion of the
unobserved potential outcomes decomposes into independent per-stratum
contributions. A null hypothesis on the average effect is composite: many
completions are compatible with the observed data and share the same total
effect. Tests here evaluate each null at the completion that maximizes the
variance, which bounds the p-value over the whole composite null.

The maximization is exact. Completions within a stratum only matter through
four counts (how many treated events and non-events would also have an event
under control, and symmetrically for controls), so each stratum reduces to a
small option set: for every achievable per-stratum effect sum, the largest
variance contribution and a witness achieving it. A dynamic program over the
running effect total then maximizes the summed contributions subject to the
overall effect hitting d/N, for every integer d at once. All option values
are exact rationals, scaled to a common integer denominator, so the DP
compares exactly and equals naive enumeration wherever enumeration is
feasible.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy.stats import norm

_NEG = -(1 << 62)


@dataclass(frozen=True)
class StratumObservation:
    """Observed summary of one stratum: size, treated count, events per arm."""

    n: int
    m: int
    t1: int
    c1: int

    def __post_init__(self):
        if not (1 <= self.m <= self.n - 1):
            raise ValueError("treated count must leave both arms non-empty")
        if not (0 <= self.t1 <= self.m):
            raise ValueError("treated event count out of range")
        if not (0 <= self.c1 <= self.n - self.m):
            raise ValueError("control event count out of range")


@dataclass(frozen=True)
class StratumOption:
    """One feasible (effect sum, variance contribution) pair with a witness.

    ``witness`` = (a, b, g, h): treated events / treated non-events whose
    control outcome would be 1, and control events / control non-events whose
    treated outcome would be 1.
    """

    s: int
    sigma2: Fraction
    witness: tuple[int, int, int, int]


@dataclass(frozen=True)
class StratumOptionSet:
    observation: StratumObservation
    options: tuple[StratumOption, ...]


@dataclass(frozen=True)
class StratumAllocation:
    observation: StratumObservation
    option: StratumOption


@dataclass(frozen=True)
class WorstCaseResult:
    d: int
    n_total: int
    feasible: bool
    max_variance: Fraction | None
    allocation: tuple[StratumAllocation, ...] | None

    @property
    def delta0(self) -> Fraction:
        return Fraction(self.d, self.n_total)


def _binary_variance(ones: int, n: int) -> Fraction:
    # sample variance of a 0/1 vector with `ones` ones
    return Fraction(ones * (n - ones), n * (n - 1))


@lru_cache(maxsize=None)
def _options_cached(n: int, m: int, t1: int, c1: int) -> tuple[StratumOption, ...]:
    best: dict[int, StratumOption] = {}
    c0 = n - m - c1  # controls without an event
    t0 = m - t1
    for a in range(t1 + 1):
        for b in range(t0 + 1):
            for g in range(c1 + 1):
                for h in range(c0 + 1):
                    ones_t = t1 + g + h
                    ones_c = c1 + a + b
                    plus = (t1 - a) + h
                    minus = b + (c1 - g)
                    s = plus - minus
                    s_t2 = _binary_variance(ones_t, n)
                    s_c2 = _binary_variance(ones_c, n)
                    s_d2 = Fraction(
                        n * (plus + minus) - (plus - minus) ** 2, n * (n - 1)
                    )
                    sigma2 = n * n * (
                        s_t2 / m + s_c2 / (n - m) - s_d2 / n
                    )
                    cur = best.get(s)
                    if cur is None or sigma2 > cur.sigma2:
                        best[s] = StratumOption(s=s, sigma2=sigma2, witness=(a, b, g, h))
    return tuple(best[s] for s in sorted(best))


def stratum_options(obs: StratumObservation) -> StratumOptionSet:
    """All achievable per-stratum effect sums with their maximal variance contributions.

    Results are memoized on (n, m, t1, c1); strata sharing those counts share
    one enumeration.
    """
    return StratumOptionSet(
        observation=obs, options=_options_cached(obs.n, obs.m, obs.t1, obs.c1)
    )


class VarianceGrid:
    """Worst-case variance of the effect estimate for every null d/N at once.

    Option variance contributions are brought to a common integer scale, a
    forward pass records the best achievable total at every running effect
    sum, and a backward pass recovers a witness allocation for any feasible d.
    """

    def __init__(self, observations: Sequence[StratumObservation]):
        if not observations:
            raise ValueError("at least one stratum is required")
        self.observations = tuple(observations)
        self.option_sets = tuple(stratum_options(o) for o in self.observations)
        self.n_total = sum(o.n for o in self.observations)

        denom = math.lcm(
            *(
                opt.sigma2.denominator
                for os in self.option_sets
                for opt in os.options
            )
        )
        self._scale = denom
        width = 2 * self.n_total + 1
        peak = sum(
            max(int(opt.sigma2 * denom) for opt in os.options)
            for os in self.option_sets
        )
        if peak >= (1 << 62):
            raise OverflowError("variance scale too large for the integer DP")

        layers = [np.full(width, _NEG, dtype=np.int64)]
        layers[0][self.n_total] = 0
        for os in self.option_sets:
            prev = layers[-1]
            nxt = np.full(width, _NEG, dtype=np.int64)
            for opt in os.options:
                w = int(opt.sigma2 * denom)
                s = opt.s
                lo_dst = max(0, s)
                hi_dst = width + min(0, s)
                src = prev[lo_dst - s : hi_dst - s]
                dst = nxt[lo_dst:hi_dst]
                cand = np.where(src > _NEG, src + w, _NEG)
                np.maximum(dst, cand, out=dst)
            layers.append(nxt)
        self._layers = layers

    def feasible(self, d: int) -> bool:
        idx = d + self.n_total
        if idx < 0 or idx >= len(self._layers[-1]):
            return False
        return bool(self._layers[-1][idx] > _NEG)

    def feasible_ds(self) -> list[int]:
        return [
            int(i) - self.n_total
            for i in np.flatnonzero(self._layers[-1] > _NEG)
        ]

    def max_sigma2_total(self, d: int) -> Fraction | None:
        if not self.feasible(d):
            return None
        return Fraction(int(self._layers[-1][d + self.n_total]), self._scale)

    def max_variance(self, d: int) -> Fraction | None:
        """Worst-case var of the effect estimate under the null d/N."""
        total = self.max_sigma2_total(d)
        if total is None:
            return None
        return total / (self.n_total * self.n_total)

    def witness(self, d: int) -> tuple[StratumAllocation, ...]:
        if not self.feasible(d):
            raise ValueError(f"d={d} is infeasible")
        width = 2 * self.n_total + 1
        idx = d + self.n_total
        chosen: list[StratumAllocation] = []
        for i in range(len(self.option_sets) - 1, -1, -1):
            prev = self._layers[i]
            value = int(self._layers[i + 1][idx])
            for opt in self.option_sets[i].options:
                w = int(opt.sigma2 * self._scale)
                src = idx - opt.s
                if 0 <= src < width and prev[src] > _NEG and int(prev[src]) + w == value:
                    chosen.append(
                        StratumAllocation(
                            observation=self.observations[i], option=opt
                        )
                    )
                    idx = src
                    break
            else:
                raise AssertionError("backtrack failed; DP layers inconsistent")
        chosen.reverse()
        return tuple(chosen)


def max_variance_dp(
    observations: Sequence[StratumObservation],
    d: int,
    grid: VarianceGrid | None = None,
) -> WorstCaseResult:
    """Exact maximum randomization variance over completions whose effects sum to d."""
    if grid is None:
        grid = VarianceGrid(observations)
    if not grid.feasible(d):
        return WorstCaseResult(
            d=d, n_total=grid.n_total, feasible=False, max_variance=None, allocation=None
        )
    return WorstCaseResult(
        d=d,
        n_total=grid.n_total,
        feasible=True,
        max_variance=grid.max_variance(d),
        allocation=grid.witness(d),
    )


def estimate_ate(observations: Sequence[StratumObservation]) -> Fraction:
    """Stratum-size weighted difference of event rates between the arms."""
    n_total = sum(o.n for o in observations)
    total = Fraction(0)
    for o in observations:
        total += Fraction(o.n, n_total) * (
            Fraction(o.t1, o.m) - Fraction(o.c1, o.n - o.m)
        )
    return total


def observations_from_strata(
    strata_member_ids: Sequence[Sequence[str]],
    treated_ids: Sequence[Sequence[str]],
    outcome_by_id,
) -> list[StratumObservation]:
    """Summarize per-unit outcomes into per-stratum observation counts."""
    out = []
    for members, treated in zip(strata_member_ids, treated_ids):
        tset = set(treated)
        t1 = sum(int(outcome_by_id[u]) for u in members if u in tset)
        c1 = sum(int(outcome_by_id[u]) for u in members if u not in tset)
        out.append(
            StratumObservation(n=len(members), m=len(tset), t1=t1, c1=c1)
        )
    return out


@dataclass(frozen=True)
class StratumCompletion:
    """Full potential outcomes for one stratum with its fixed treated count."""

    r_treated: tuple[int, ...]
    r_control: tuple[int, ...]
    m: int

    @property
    def n(self) -> int:
        return len(self.r_treated)

    def __post_init__(self):
        if len(self.r_treated) != len(self.r_control):
            raise ValueError("potential outcome vectors must have equal length")
        if not (1 <= self.m <= self.n - 1):
            raise ValueError("treated count must leave both arms non-empty")


def eq1_variance(completions: Sequence[StratumCompletion]) -> Fraction:
    """Randomization variance of the effect estimate, directly from potential outcomes."""
    n_total = sum(c.n for c in completions)
    total = Fraction(0)
    for c in completions:
        n, m = c.n, c.m
        rt = c.r_treated
        rc = c.r_control
        mean_t = Fraction(sum(rt), n)
        mean_c = Fraction(sum(rc), n)
        s_t2 = sum((Fraction(v) - mean_t) ** 2 for v in rt) / (n - 1)
        s_c2 = sum((Fraction(v) - mean_c) ** 2 for v in rc) / (n - 1)
        deltas = [tv - cv for tv, cv in zip(rt, rc)]
        mean_d = Fraction(sum(deltas), n)
        s_d2 = sum((Fraction(v) - mean_d) ** 2 for v in deltas) / (n - 1)
        total += Fraction(n * n, n_total * n_total) * (
            s_t2 / m + s_c2 / (n - m) - s_d2 / n
        )
    return total


def true_effect(completions: Sequence[StratumCompletion]) -> Fraction:
    n_total = sum(c.n for c in completions)
    s = sum(sum(c.r_treated) - sum(c.r_control) for c in completions)
    return Fraction(s, n_total)


def completion_from_witness(
    obs: StratumObservation, witness: tuple[int, int, int, int]
) -> StratumCompletion:
    """Reconstruct unit-level potential outcomes realizing a witness's counts.

    Units are laid out treated-first (events before non-events), then
    controls (events before non-events). Any assignment of the counts to
    concrete units yields the same estimator distribution, since units within
    a class share treatment status and observed outcome.
    """
    a, b, g, h = witness
    t0 = obs.m - obs.t1
    c0 = obs.n - obs.m - obs.c1
    r_t: list[int] = []
    r_c: list[int] = []
    # treated with observed event: r_T = 1, r_C = 1 for the first `a`
    for i in range(obs.t1):
        r_t.append(1)
        r_c.append(1 if i < a else 0)
    # treated without event: r_T = 0, r_C = 1 for the first `b`
    for i in range(t0):
        r_t.append(0)
        r_c.append(1 if i < b else 0)
    # controls with observed event: r_C = 1, r_T = 1 for the first `g`
    for i in range(obs.c1):
        r_c.append(1)
        r_t.append(1 if i < g else 0)
    # controls without event: r_C = 0, r_T = 1 for the first `h`
    for i in range(c0):
        r_c.append(0)
        r_t.append(1 if i < h else 0)
    return StratumCompletion(r_treated=tuple(r_t), r_control=tuple(r_c), m=obs.m)


def observation_of_completion(c: StratumCompletion) -> StratumObservation:
    """Observed counts if the first m units are the treated ones."""
    t1 = sum(c.r_treated[:c.m])
    c1 = sum(c.r_control[c.m:])
    return StratumObservation(n=c.n, m=c.m, t1=t1, c1=c1)


def _stratum_completions(obs: StratumObservation):
    """Per-stratum list of (effect sum, variance numerator) over all completions.

    Treated units keep their observed treated outcome and range over control
    outcomes; controls symmetrically. Variance contributions are evaluated
    from the full vectors, not through the option-set shortcut.
    """
    results = []
    t0 = obs.m - obs.t1
    c0 = obs.n - obs.m - obs.c1
    observed_t = [1] * obs.t1 + [0] * t0
    observed_c = [1] * obs.c1 + [0] * c0
    for bits in itertools.product((0, 1), repeat=obs.n):
        r_t = list(observed_t) + list(bits[obs.m:])
        r_c = list(bits[: obs.m]) + list(observed_c)
        comp = StratumCompletion(r_treated=tuple(r_t), r_control=tuple(r_c), m=obs.m)
        s = sum(r_t) - sum(r_c)
        sigma2 = eq1_variance([comp]) * (obs.n * obs.n)  # undo the 1/N^2 for N = n
        results.append((s, sigma2))
    return results


def oracle_variance_by_d(
    observations: Sequence[StratumObservation], limit: int = 16
) -> dict[int, Fraction]:
    """Naive maximum variance per total effect sum, by enumerating all completions.

    Enumerates every assignment of the unobserved potential outcomes (2^N in
    total) and keeps the best variance at each achievable total. Exists to
    cross-check the dynamic program; refuses N above ``limit``.
    """
    n_total = sum(o.n for o in observations)
    if n_total > limit:
        raise ValueError(f"oracle limit exceeded: N={n_total} > {limit}")
    per_stratum = [_stratum_completions(o) for o in observations]
    # common integer scale so the enumeration loop stays in int arithmetic
    denom = math.lcm(
        *(v.denominator for items in per_stratum for _, v in items)
    )
    scaled = [
        [(s, int(v * denom)) for s, v in items] for items in per_stratum
    ]
    best: dict[int, int] = {}
    for combo in itertools.product(*scaled):
        s = 0
        var = 0
        for item in combo:
            s += item[0]
            var += item[1]
        if s not in best or var > best[s]:
            best[s] = var
    return {
        s: Fraction(v, denom) / (n_total * n_total) for s, v in best.items()
    }


def enumerate_null_variance_oracle(
    observations: Sequence[StratumObservation], d: int, limit: int = 16
) -> Fraction | None:
    """Maximum variance among completions summing to d, or None if infeasible."""
    n_total = sum(o.n for o in observations)
    if d < -n_total or d > n_total:
        return None
    return oracle_variance_by_d(observations, limit=limit).get(d)


@dataclass(frozen=True)
class InferenceReport:
    ate_hat: Fraction
    se: float
    p_values: dict[int, float]
    ci_d: tuple[int, int] | None
    contiguous: bool
    alpha: float
    n_total: int
    d_star: int
    warnings: tuple[str, ...]

    @property
    def ate_hat_float(self) -> float:
        return float(self.ate_hat)

    @property
    def ci(self) -> tuple[float, float] | None:
        if self.ci_d is None:
            return None
        return (self.ci_d[0] / self.n_total, self.ci_d[1] / self.n_total)


def test_and_invert(
    observations: Sequence[StratumObservation],
    alpha: float = 0.05,
    grid: VarianceGrid | None = None,
) -> InferenceReport:
    """Worst-case p-values over the integer effect grid and the inverted confidence set.

    For each feasible d the statistic (ate - d/N) / sqrt(worst-case variance)
    is referred to the normal distribution; infeasible d gets p = 0 (the
    composite null is empty), and a feasible zero-variance null degenerates
    to p = 1 when the estimate equals d/N exactly and p = 0 otherwise. The
    reported interval is the hull of grid points with p >= alpha; if the
    accepted set has gaps the hull is still reported, flagged via
    ``contiguous=False``. The standard error is evaluated at the feasible
    grid point nearest N * ate (ties toward the smaller d).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must be in (0, 1)")
    if grid is None:
        grid = VarianceGrid(observations)
    n_total = grid.n_total
    ate = estimate_ate(grid.observations)

    p_values: dict[int, float] = {}
    accepted: list[int] = []
    warnings: list[str] = []
    for d in range(-n_total, n_total + 1):
        var = grid.max_variance(d)
        if var is None:
            p = 0.0
        elif var == 0:
            p = 1.0 if ate == Fraction(d, n_total) else 0.0
        else:
            z = float(ate - Fraction(d, n_total)) / math.sqrt(float(var))
            p = float(2.0 * norm.sf(abs(z)))
        p_values[d] = p
        if p >= alpha:
            accepted.append(d)

    target = ate * n_total
    d_star = min(grid.feasible_ds(), key=lambda d: (abs(Fraction(d) - target), d))
    var_star = grid.max_variance(d_star)
    se = math.sqrt(float(var_star))

    if accepted:
        ci_d = (accepted[0], accepted[-1])
        contiguous = len(accepted) == accepted[-1] - accepted[0] + 1
        if not contiguous:
            warnings.append(
                "accepted nulls are not contiguous; reporting their interval hull"
            )
    else:
        ci_d = None
        contiguous = True
        warnings.append("no null was accepted at the given alpha")

    return InferenceReport(
        ate_hat=ate,
        se=se,
        p_values=p_values,
        ci_d=ci_d,
        contiguous=contiguous,
        alpha=alpha,
        n_total=n_total,
        d_star=d_star,
        warnings=tuple(warnings),
    )


@dataclass(frozen=True, eq=False)
class SimulationResult:
    samples: np.ndarray
    mean: float
    variance: float
    scaled_samples: np.ndarray
    denominator: int
    mode: str

    @property
    def exact_mean(self) -> Fraction:
        return Fraction(int(self.scaled_samples.sum(dtype=np.int64)), len(self.scaled_samples) * self.denominator)

    @property
    def exact_variance(self) -> Fraction:
        n = len(self.scaled_samples)
        total = int(self.scaled_samples.sum(dtype=np.int64))
        sq = int((self.scaled_samples.astype(np.int64) ** 2).sum(dtype=np.int64))
        mean = Fraction(total, n)
        return (Fraction(sq, n) - mean * mean) / (self.denominator**2)


def _stratum_assignment_values(
    completions: Sequence[StratumCompletion],
) -> tuple[list[np.ndarray], int]:
    """Per-stratum effect estimates for every assignment, on a shared integer scale."""
    n_total = sum(c.n for c in completions)
    lcm = math.lcm(*(c.m * (c.n - c.m) for c in completions))
    denom = n_total * lcm
    per_stratum = []
    for c in completions:
        n, m = c.n, c.m
        unit = lcm // (m * (n - m))
        vals = []
        for treated in itertools.combinations(range(n), m):
            tset = set(treated)
            t_sum = sum(c.r_treated[i] for i in treated)
            c_sum = sum(c.r_control[i] for i in range(n) if i not in tset)
            vals.append(n * unit * (t_sum * (n - m) - c_sum * m))
        per_stratum.append(np.asarray(vals, dtype=np.int64))
    return per_stratum, denom


def simulate_randomization(
    completions: Sequence[StratumCompletion],
    mode: str = "exhaustive",
    draws: int = 10000,
    seed=0,
    limit: int = 10**6,
) -> SimulationResult:
    """Distribution of the effect estimate over stratified treatment assignments.

    ``exhaustive`` enumerates every assignment (the count is the product of
    per-stratum binomial coefficients and must not exceed ``limit``);
    ``monte-carlo`` draws assignments uniformly with one independent seeded
    generator per stratum. Sample values are exact integers over a common
    denominator, exposed alongside the float view.
    """
    per_stratum, denom = _stratum_assignment_values(completions)
    if mode == "exhaustive":
        count = 1
        for vals in per_stratum:
            count *= len(vals)
            if count > limit:
                raise ValueError(
                    f"exhaustive enumeration exceeds {limit} assignments; "
                    "use monte-carlo mode"
                )
        scaled = np.zeros(1, dtype=np.int64)
        for vals in per_stratum:
            scaled = (scaled[:, None] + vals[None, :]).reshape(-1)
        samples = scaled / denom
        return SimulationResult(
            samples=samples,
            mean=float(samples.mean()),
            variance=float(samples.var(ddof=0)),
            scaled_samples=scaled,
            denominator=denom,
            mode=mode,
        )
    if mode == "monte-carlo":
        if draws < 2:
            raise ValueError("at least 2 draws are required")
        streams = np.random.SeedSequence(seed).spawn(len(per_stratum))
        scaled = np.zeros(draws, dtype=np.int64)
        for vals, stream in zip(per_stratum, streams):
            rng = np.random.default_rng(stream)
            scaled += vals[rng.integers(0, len(vals), size=draws)]
        samples = scaled / denom
        return SimulationResult(
            samples=samples,
            mean=float(samples.mean()),
            variance=float(samples.var(ddof=1)),
            scaled_samples=scaled,
            denominator=denom,
            mode=mode,
        )
    raise ValueError(f"unknown mode '{mode}' (use 'exhaustive' or 'monte-carlo')")


def qq_table(samples: np.ndarray, n_points: int = 99) -> np.ndarray:
    """Probability grid with sample quantiles and matching fitted-normal quantiles.

    Returns an array of rows (p, sample quantile, normal quantile) where the
    normal is fit by the sample mean and SD.
    """
    samples = np.asarray(samples, dtype=float)
    mu = samples.mean()
    sd = samples.std(ddof=1)
    probs = (np.arange(1, n_points + 1)) / (n_points + 1)
    emp = np.quantile(samples, probs)
    theo = mu + sd * norm.ppf(probs)
    return np.column_stack([probs, emp, theo])
