"""Distances, optimal restricted full matching, and balance diagnostics.

Full matching stratifies the population into disjoint sets, each holding one
unit on one arm and one or more units on the other, minimizing the total
distance from every many-side member to its stratum's singleton. The solver
reduces the problem to a min-cost flow: choose a bipartite edge set where
every treated unit keeps degree in [1, kappa_c], every control keeps degree
in [1, kappa_t], and forbidden pairs carry no arc. Any such edge set can be
pruned to a union of stars without raising its cost (an edge whose endpoints
both have degree two or more is redundant for coverage), so the flow optimum
equals the full-matching optimum; the prune below only ever removes edges of
zero cost when the flow is optimal.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .dataset import Dataset
from .flow import FlowInfeasibleError, MinCostFlow


class MatchError(RuntimeError):
    """The requested match is ill-posed or infeasible."""


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    treated_ids: tuple[str, ...]
    control_ids: tuple[str, ...]
    distances: np.ndarray
    forbidden: np.ndarray | None = None

    def __post_init__(self):
        if self.distances.shape != (len(self.treated_ids), len(self.control_ids)):
            raise ValueError("distance matrix shape does not match id lists")
        if self.forbidden is not None and self.forbidden.shape != self.distances.shape:
            raise ValueError("forbidden mask shape does not match distances")
        if np.any(self.distances < 0):
            raise ValueError("distances must be nonnegative")


@dataclass(frozen=True)
class Stratum:
    member_ids: tuple[str, ...]
    treated_ids: tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.member_ids)

    @property
    def m(self) -> int:
        return len(self.treated_ids)


@dataclass(frozen=True)
class Stratification:
    strata: tuple[Stratum, ...]
    kappa_t: int
    kappa_c: int
    objective: float

    @property
    def n_total(self) -> int:
        return sum(s.n for s in self.strata)

    def stratum_of(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for i, s in enumerate(self.strata):
            for uid in s.member_ids:
                out[uid] = i
        return out


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    tier: int
    threshold: float
    before: float
    after: float | None

    @property
    def passed(self) -> bool | None:
        if self.after is None:
            return None
        return abs(self.after) < self.threshold


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[BalanceRow, ...]

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)


def rank_mahalanobis(ds: Dataset, covariates: Sequence[str] | None = None) -> DistanceMatrix:
    """Mahalanobis distances between treated and control units on rank-transformed covariates.

    Each covariate is replaced by its ranks over the whole population (ties
    get average ranks), every rank column is rescaled to the variance of
    untied ranks 1..N, and distances use the covariance of the rescaled
    columns. Strictly monotone transformations of any covariate leave the
    result unchanged.
    """
    if not ds.imputed:
        raise ValueError("rank_mahalanobis requires an imputed dataset")
    names = tuple(covariates) if covariates is not None else ds.schema.covariate_names
    x = ds.covariate_matrix(names)
    n = x.shape[0]
    if n < 3:
        raise MatchError("at least 3 units are needed to estimate a rank covariance")
    for j, name in enumerate(names):
        if np.unique(x[:, j]).size < 2:
            raise MatchError(f"covariate '{name}' is constant; drop it from the distance")

    ranks = np.column_stack([rankdata(x[:, j]) for j in range(x.shape[1])])
    untied_var = n * (n + 1) / 12.0  # sample variance of 1..N
    sd = ranks.std(axis=0, ddof=1)
    ranks = ranks * (np.sqrt(untied_var) / sd)

    cov = np.cov(ranks, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.min() <= eigvals.max() * 1e-10:
        low = np.linalg.eigh(cov)[1][:, 0]
        involved = [names[j] for j in np.flatnonzero(np.abs(low) > 1e-6)]
        raise MatchError(
            "rank covariance is singular; collinear columns: " + ", ".join(involved)
        )
    inv = np.linalg.inv(cov)

    treated = np.flatnonzero(ds.z == 1)
    control = np.flatnonzero(ds.z == 0)
    rt = ranks[treated]
    rc = ranks[control]
    cross = rt @ inv @ rc.T
    qt = np.einsum("ij,jk,ik->i", rt, inv, rt)
    qc = np.einsum("ij,jk,ik->i", rc, inv, rc)
    d2 = qt[:, None] + qc[None, :] - 2.0 * cross
    np.clip(d2, 0.0, None, out=d2)
    return DistanceMatrix(
        treated_ids=tuple(ds.ids[i] for i in treated),
        control_ids=tuple(ds.ids[i] for i in control),
        distances=np.sqrt(d2),
    )


def apply_caliper(
    dm: DistanceMatrix,
    scores: Mapping[str, float],
    width: float = 0.2,
    penalty: float | None = None,
) -> DistanceMatrix:
    """Add a soft penalty to pairs whose scores differ by more than ``width`` score SDs.

    The SD is taken over the current study population (everyone in the
    distance matrix, both arms, ddof=1). A zero SD disables the caliper.
    ``penalty`` defaults to 1000 times the mean distance, large enough to be
    avoided whenever feasible while never making the match infeasible.
    """
    st = np.array([scores[i] for i in dm.treated_ids], dtype=float)
    sc = np.array([scores[i] for i in dm.control_ids], dtype=float)
    pooled = np.concatenate([st, sc])
    sd = pooled.std(ddof=1) if len(pooled) > 1 else 0.0
    if sd == 0.0:
        return replace(dm, distances=dm.distances.copy())
    if penalty is None:
        penalty = 1000.0 * float(dm.distances.mean())
    over = np.abs(st[:, None] - sc[None, :]) > width * sd
    return replace(dm, distances=dm.distances + penalty * over)


def _integer_costs(distances: np.ndarray, allowed: np.ndarray, cost_scale: float | None) -> np.ndarray:
    if cost_scale is None:
        finite = distances[allowed]
        top = float(finite.max()) if finite.size else 0.0
        cost_scale = 1.0 if top == 0.0 else 1e8 / top
    return np.rint(distances * cost_scale).astype(np.int64)


def full_match(
    dm: DistanceMatrix,
    exact_keys: Mapping[str, str] | None = None,
    kappa_t: int | None = None,
    kappa_c: int | None = None,
    cost_scale: float | None = None,
) -> Stratification:
    """Optimal full matching with per-stratum ratio caps and exact-key constraints.

    ``kappa_t`` caps treated units attached to a control singleton; ``kappa_c``
    caps controls attached to a treated singleton; ``None`` means unrestricted.
    Pairs from different ``exact_keys`` levels are forbidden, so every stratum
    stays within one level. Distances are scaled to integer flow costs; pass
    ``cost_scale`` explicitly when the inputs are already integral and exact
    optimality matters (the default scales the largest distance to 1e8).
    """
    nt = len(dm.treated_ids)
    nc = len(dm.control_ids)
    if nt == 0 or nc == 0:
        raise MatchError("both arms must be non-empty")
    total = nt + nc
    kappa_t = total if kappa_t is None else int(kappa_t)
    kappa_c = total if kappa_c is None else int(kappa_c)
    if kappa_t < 1 or kappa_c < 1:
        raise MatchError("ratio caps must be at least 1")

    allowed = np.ones((nt, nc), dtype=bool)
    if dm.forbidden is not None:
        allowed &= ~dm.forbidden
    if exact_keys is not None:
        kt = [exact_keys[i] for i in dm.treated_ids]
        kc = [exact_keys[j] for j in dm.control_ids]
        levels = defaultdict(lambda: [0, 0, []])
        for i, key in enumerate(kt):
            levels[key][0] += 1
            levels[key][2].append(dm.treated_ids[i])
        for j, key in enumerate(kc):
            levels[key][1] += 1
            levels[key][2].append(dm.control_ids[j])
        lonely = {k: v for k, v in levels.items() if v[0] == 0 or v[1] == 0}
        if lonely:
            detail = "; ".join(
                f"key '{k}' has units {', '.join(v[2])} on one arm only" for k, v in sorted(lonely.items())
            )
            raise MatchError("exact-match keys cannot be matched: " + detail)
        same = np.array([[kt[i] == kc[j] for j in range(nc)] for i in range(nt)])
        allowed &= same

    if not allowed.any(axis=1).all():
        bad = [dm.treated_ids[i] for i in np.flatnonzero(~allowed.any(axis=1))]
        raise MatchError("treated unit(s) with no allowed partner: " + ", ".join(bad))
    if not allowed.any(axis=0).all():
        bad = [dm.control_ids[j] for j in np.flatnonzero(~allowed.any(axis=0))]
        raise MatchError("control unit(s) with no allowed partner: " + ", ".join(bad))

    costs = _integer_costs(dm.distances, allowed, cost_scale)

    # Nodes: 0 = source side, 1..nt treated, nt+1..nt+nc control, last = sink side.
    # Every unit owes one unit of flow (its coverage); extra capacity up to the
    # ratio caps flows source -> treated and control -> sink, recirculating
    # through sink -> source.
    s = 0
    k = nt + nc + 1
    net = MinCostFlow(nt + nc + 2)
    supplies = [0] * (nt + nc + 2)
    supplies[s] = -nt
    supplies[k] = nc
    for i in range(nt):
        supplies[1 + i] = 1
        if kappa_c > 1:
            net.add_arc(s, 1 + i, kappa_c - 1, 0)
    for j in range(nc):
        supplies[1 + nt + j] = -1
        if kappa_t > 1:
            net.add_arc(1 + nt + j, k, kappa_t - 1, 0)
    net.add_arc(k, s, total * max(kappa_t, kappa_c), 0)
    pair_arcs: dict[int, tuple[int, int]] = {}
    for i in range(nt):
        for j in range(nc):
            if allowed[i, j]:
                arc = net.add_arc(1 + i, 1 + nt + j, 1, int(costs[i, j]))
                pair_arcs[arc] = (i, j)

    try:
        net.solve(supplies)
    except FlowInfeasibleError:
        raise MatchError(
            f"no feasible full match under ratio caps ({kappa_t}, {kappa_c}); "
            "try looser ratios"
        ) from None

    edges = sorted((i, j) for arc, (i, j) in pair_arcs.items() if net.flow_on(arc) == 1)
    deg_t = defaultdict(int)
    deg_c = defaultdict(int)
    for i, j in edges:
        deg_t[i] += 1
        deg_c[j] += 1
    # prune non-star edges (largest cost first, then reverse pair order)
    changed = True
    edge_set = set(edges)
    while changed:
        changed = False
        removable = [e for e in edge_set if deg_t[e[0]] >= 2 and deg_c[e[1]] >= 2]
        if removable:
            removable.sort(key=lambda e: (costs[e[0], e[1]], e), reverse=True)
            i, j = removable[0]
            edge_set.remove((i, j))
            deg_t[i] -= 1
            deg_c[j] -= 1
            changed = True
    edges = sorted(edge_set)

    by_t = defaultdict(list)
    by_c = defaultdict(list)
    for i, j in edges:
        by_t[i].append(j)
        by_c[j].append(i)
    strata: list[Stratum] = []
    used_t: set[int] = set()
    used_c: set[int] = set()
    for i in range(nt):
        if len(by_t[i]) >= 2:
            members = (dm.treated_ids[i],) + tuple(dm.control_ids[j] for j in by_t[i])
            strata.append(Stratum(member_ids=members, treated_ids=(dm.treated_ids[i],)))
            used_t.add(i)
            used_c.update(by_t[i])
    for j in range(nc):
        if j in used_c:
            continue
        if len(by_c[j]) >= 2:
            tids = tuple(dm.treated_ids[i] for i in by_c[j])
            members = tids + (dm.control_ids[j],)
            strata.append(Stratum(member_ids=members, treated_ids=tids))
            used_t.update(by_c[j])
            used_c.add(j)
    for i, j in edges:
        if i not in used_t and j not in used_c:
            strata.append(
                Stratum(
                    member_ids=(dm.treated_ids[i], dm.control_ids[j]),
                    treated_ids=(dm.treated_ids[i],),
                )
            )
            used_t.add(i)
            used_c.add(j)

    if len(used_t) != nt or len(used_c) != nc:
        raise MatchError("internal error: flow solution did not cover all units")
    for st in strata:
        if min(st.m, st.n - st.m) != 1:
            raise MatchError("internal error: stratum is not a star")
        if st.m > kappa_t or st.n - st.m > kappa_c:
            raise MatchError("internal error: stratum exceeds ratio caps")

    strata.sort(key=lambda st: st.member_ids)
    objective = 0.0
    tpos = {uid: i for i, uid in enumerate(dm.treated_ids)}
    cpos = {uid: j for j, uid in enumerate(dm.control_ids)}
    for st in strata:
        controls = [uid for uid in st.member_ids if uid not in set(st.treated_ids)]
        for t in st.treated_ids:
            for c in controls:
                objective += float(dm.distances[tpos[t], cpos[c]])
    return Stratification(
        strata=tuple(strata), kappa_t=kappa_t, kappa_c=kappa_c, objective=objective
    )


def standardized_differences(
    ds: Dataset,
    strat: Stratification | None = None,
    covariates: Sequence[str] | None = None,
) -> BalanceReport:
    """Standardized mean differences before and (optionally) after matching.

    The before value is (mean_T - mean_C) / s_pool with
    s_pool = sqrt((s_T^2 + s_C^2) / 2) over the given population. The after
    value weights within-stratum arm means by stratum size and divides by the
    same pre-matching s_pool. A covariate with zero pooled SD and equal means
    scores 0; unequal means with zero SD is an error.
    """
    if not ds.imputed:
        raise ValueError("standardized_differences requires an imputed dataset")
    names = tuple(covariates) if covariates is not None else ds.schema.covariate_names
    x = ds.covariate_matrix(names)
    treated = ds.z == 1
    if not treated.any() or treated.all():
        raise ValueError("both arms must be present")

    xt = x[treated]
    xc = x[~treated]
    s_pool = np.sqrt((xt.var(axis=0, ddof=1) + xc.var(axis=0, ddof=1)) / 2.0)

    index_of = {uid: i for i, uid in enumerate(ds.ids)}
    rows: list[BalanceRow] = []
    for j, name in enumerate(names):
        diff = float(xt[:, j].mean() - xc[:, j].mean())
        if s_pool[j] == 0.0:
            if diff != 0.0:
                raise ValueError(
                    f"covariate '{name}' has zero pooled SD but unequal arm means"
                )
            before = 0.0
        else:
            before = diff / float(s_pool[j])

        after: float | None = None
        if strat is not None:
            n_matched = strat.n_total
            weighted = 0.0
            for st in strat.strata:
                t_set = set(st.treated_ids)
                tvals = [x[index_of[uid], j] for uid in st.member_ids if uid in t_set]
                cvals = [x[index_of[uid], j] for uid in st.member_ids if uid not in t_set]
                weighted += (st.n / n_matched) * (float(np.mean(tvals)) - float(np.mean(cvals)))
            if s_pool[j] == 0.0:
                after = 0.0
            else:
                after = weighted / float(s_pool[j])

        rows.append(
            BalanceRow(
                covariate=name,
                tier=ds.schema.tiers[name],
                threshold=ds.schema.threshold_for(name),
                before=before,
                after=after,
            )
        )
    return BalanceReport(rows=tuple(rows))
