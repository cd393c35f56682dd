"""Configuration-driven pipeline: load, impute, trim, match, infer, report.

Every stage reads its inputs from files in the output directory and writes
its products back there, so stages can be rerun individually and a full run
is just the stages in order. A run ends with a manifest listing every
emitted file with a SHA-256 checksum; identical configuration and seed yield
byte-identical files.

Randomness is derived from the single configured seed through fixed-purpose
substreams (0: data generation, 1: Monte-Carlo simulation), so stages never
share generator state.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .dataset import (
    DEFAULT_TIER_THRESHOLDS,
    Dataset,
    LoadError,
    Schema,
    filter_to_box,
    impute_with_indicators,
    load_csv,
)
from .inference import (
    InferenceReport,
    StratumObservation,
    VarianceGrid,
    completion_from_witness,
    estimate_ate,
    max_variance_dp,
    qq_table,
    simulate_randomization,
    test_and_invert,
)
from .matching import (
    BalanceReport,
    MatchError,
    Stratification,
    Stratum,
    apply_caliper,
    full_match,
    rank_mahalanobis,
    standardized_differences,
)
from .maxbox import Box, maximal_box
from .propensity import fit_logistic, mark_support

EXIT_OK = 0
EXIT_BALANCE_NOT_ATTAINED = 2

GENERATOR_SUBSTREAM = 0
MONTE_CARLO_SUBSTREAM = 1


class ConfigError(ValueError):
    """The pipeline configuration is malformed."""


@dataclass(frozen=True)
class PipelineConfig:
    input: str
    output_dir: str
    seed: int
    schema: Schema
    alpha: float = 0.05
    support_rule: str = "crump"
    support_bounds: tuple[float, float] = (0.1, 0.9)
    score_covariates: tuple[str, ...] = ()
    box_budget: int = 0
    caliper_width: float = 0.2
    caliper_penalty: float | None = None
    caliper_score_covariates: tuple[str, ...] | None = None
    ratio_attempts: tuple[tuple[int, int], ...] = ((7, 7),)
    distance_covariates: tuple[str, ...] | None = None
    cost_scale: float | None = None
    subgroups: bool = True
    qq_draws: int = 20000
    raw: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must be in (0, 1)")
        if not self.ratio_attempts:
            raise ConfigError("ratio_attempts must list at least one (kappa_t, kappa_c) pair")
        for name in self.score_covariates:
            if name not in self.schema.covariate_names:
                raise ConfigError(f"support score covariate '{name}' is not in the schema")
        if self.support_rule not in ("crump", "dehejia-wahba"):
            raise ConfigError(f"unknown support rule '{self.support_rule}'")
        if self.box_budget < 0:
            raise ConfigError("box budget must be nonnegative")


def _require(mapping: Mapping[str, Any], key: str, where: str):
    if key not in mapping:
        raise ConfigError(f"missing '{key}' in {where}")
    return mapping[key]


def config_from_dict(raw: Mapping[str, Any]) -> PipelineConfig:
    schema_raw = _require(raw, "schema", "config")
    covariates = _require(schema_raw, "covariates", "schema")
    tier_thresholds = {
        int(k): float(v)
        for k, v in raw.get("tier_thresholds", DEFAULT_TIER_THRESHOLDS).items()
    }
    schema = Schema(
        covariate_names=tuple(covariates),
        tiers={str(k): int(v) for k, v in covariates.items()},
        box_covariates=tuple(schema_raw.get("box_covariates", ())),
        id_column=schema_raw.get("id_column", "id"),
        treatment_column=schema_raw.get("treatment_column", "z"),
        outcome_column=schema_raw.get("outcome_column", "r"),
        exact_match_column=schema_raw.get("exact_match_column"),
        indicator_tier=int(schema_raw.get("indicator_tier", 3)),
        tier_thresholds=tier_thresholds,
    )
    support = raw.get("support", {})
    caliper = raw.get("caliper", {})
    match = raw.get("match", {})
    inference = raw.get("inference", {})
    bounds = support.get("bounds", [0.1, 0.9])
    attempts = match.get("ratio_attempts", raw.get("ratio_attempts", [[7, 7]]))
    distance_cov = match.get("distance_covariates")
    caliper_cov = caliper.get("score_covariates")
    tier1 = tuple(name for name in schema.covariate_names if schema.tiers[name] == 1)
    default_scores = tier1 if tier1 else schema.box_covariates
    return PipelineConfig(
        input=str(_require(raw, "input", "config")),
        output_dir=str(_require(raw, "output_dir", "config")),
        seed=int(raw.get("seed", 0)),
        schema=schema,
        alpha=float(raw.get("alpha", 0.05)),
        support_rule=str(support.get("rule", "crump")),
        support_bounds=(float(bounds[0]), float(bounds[1])),
        score_covariates=tuple(support.get("score_covariates", default_scores)),
        box_budget=int(raw.get("box", {}).get("budget", 0)),
        caliper_width=float(caliper.get("width", 0.2)),
        caliper_penalty=None if caliper.get("penalty") is None else float(caliper["penalty"]),
        caliper_score_covariates=None if caliper_cov is None else tuple(caliper_cov),
        ratio_attempts=tuple((int(a), int(b)) for a, b in attempts),
        distance_covariates=None if distance_cov is None else tuple(distance_cov),
        cost_scale=None if match.get("cost_scale") is None else float(match["cost_scale"]),
        subgroups=bool(inference.get("subgroups", True)),
        qq_draws=int(inference.get("qq_draws", 20000)),
        raw=dict(raw),
    )


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> PipelineConfig:
    with Path(path).open(encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if overrides:
        raw = _apply_overrides(raw, overrides)
    return config_from_dict(raw)


def _apply_overrides(raw: dict, overrides: Mapping[str, Any]) -> dict:
    out = json.loads(json.dumps(raw))  # deep copy of plain data
    for dotted, value in overrides.items():
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return out


# ---------------------------------------------------------------------------
# file helpers


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]):
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path: Path, payload) -> None:
    with path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def write_dataset_csv(ds: Dataset, path: Path) -> None:
    header = [ds.schema.id_column, ds.schema.treatment_column, ds.schema.outcome_column]
    if ds.schema.exact_match_column is not None:
        header.append(ds.schema.exact_match_column)
    header.extend(ds.schema.covariate_names)
    rows = []
    for i in range(ds.n_units):
        row: list[Any] = [ds.ids[i], int(ds.z[i]), int(ds.r[i])]
        if ds.schema.exact_match_column is not None:
            row.append(ds.exact_keys[i])
        row.extend("" if v is None else v for v in ds.rows[i])
        rows.append(row)
    write_csv(path, header, rows)


def _schema_payload(schema: Schema, indicator_names: Sequence[str]) -> dict:
    return {
        "covariates": {name: schema.tiers[name] for name in schema.covariate_names},
        "box_covariates": list(schema.box_covariates),
        "id_column": schema.id_column,
        "treatment_column": schema.treatment_column,
        "outcome_column": schema.outcome_column,
        "exact_match_column": schema.exact_match_column,
        "indicator_tier": schema.indicator_tier,
        "tier_thresholds": {str(k): v for k, v in schema.tier_thresholds.items()},
        "missingness_indicators": list(indicator_names),
    }


def _schema_from_payload(payload: Mapping[str, Any]) -> tuple[Schema, tuple[str, ...]]:
    schema = Schema(
        covariate_names=tuple(payload["covariates"]),
        tiers={k: int(v) for k, v in payload["covariates"].items()},
        box_covariates=tuple(payload["box_covariates"]),
        id_column=payload["id_column"],
        treatment_column=payload["treatment_column"],
        outcome_column=payload["outcome_column"],
        exact_match_column=payload["exact_match_column"],
        indicator_tier=int(payload["indicator_tier"]),
        tier_thresholds={int(k): float(v) for k, v in payload["tier_thresholds"].items()},
    )
    return schema, tuple(payload["missingness_indicators"])


def _read_imputed(path: Path, schema_path: Path) -> Dataset:
    with schema_path.open(encoding="utf-8") as fh:
        payload = json.load(fh)
    schema, indicators = _schema_from_payload(payload)
    ds = load_csv(path, schema)
    return dataclasses.replace(
        ds, imputed=True, missingness_indicator_names=indicators
    )


def _read_id_column(path: Path, column: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for record in reader:
            out[record["id"]] = record[column]
    return out


# ---------------------------------------------------------------------------
# stages


def _workdir(config: PipelineConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def stage_impute(config: PipelineConfig) -> dict:
    out = _workdir(config)
    ds = load_csv(config.input, config.schema)
    imputed = impute_with_indicators(ds)
    write_dataset_csv(imputed, out / "imputed.csv")
    write_json(out / "schema_imputed.json", _schema_payload(imputed.schema, imputed.missingness_indicator_names))
    return {
        "stage": "impute",
        "n_units": imputed.n_units,
        "n_treated": imputed.n_treated,
        "n_control": imputed.n_control,
        "indicators_added": list(imputed.missingness_indicator_names),
    }


def stage_propensity(config: PipelineConfig) -> dict:
    """Fit the full propensity model on the imputed data and write per-unit scores."""
    out = _workdir(config)
    ds = _read_imputed(out / "imputed.csv", out / "schema_imputed.json")
    names, notes = _usable_covariates(ds, ds.schema.covariate_names)
    model = fit_logistic(ds, names)
    scores = model.predict(ds.covariate_matrix(names))
    write_csv(
        out / "propensity.csv",
        ["id", "score"],
        [(ds.ids[i], float(scores[i])) for i in range(ds.n_units)],
    )
    return {
        "stage": "propensity",
        "covariates": list(names),
        "converged": model.converged,
        "iterations": model.iterations,
        "intercept": model.intercept,
        "coefficients": {n: float(c) for n, c in zip(names, model.coefficients)},
        "notes": notes,
    }


def stage_support(config: PipelineConfig) -> dict:
    out = _workdir(config)
    ds = _read_imputed(out / "imputed.csv", out / "schema_imputed.json")
    score_covariates = config.score_covariates or ds.schema.box_covariates
    flags = mark_support(
        ds,
        rule=config.support_rule,
        score_covariates=score_covariates,
        crump_bounds=config.support_bounds,
    )
    rows = [
        (ds.ids[i], float(flags.scores[i]), int(flags.per_unit[i]))
        for i in range(ds.n_units)
    ]
    write_csv(out / "support.csv", ["id", "score", "flag"], rows)
    return {
        "stage": "support",
        "rule": flags.rule_name,
        "score_covariates": list(score_covariates),
        "n_retained": int(flags.per_unit.sum()),
        "n_excluded": int((1 - flags.per_unit).sum()),
    }


def stage_box(config: PipelineConfig) -> dict:
    out = _workdir(config)
    ds = _read_imputed(out / "imputed.csv", out / "schema_imputed.json")
    if not ds.schema.box_covariates:
        raise ConfigError("box stage requires schema box_covariates")
    flag_by_id = _read_id_column(out / "support.csv", "flag")
    flags = np.array([int(flag_by_id[uid]) for uid in ds.ids], dtype=np.int8)
    coords = ds.covariate_matrix(ds.schema.box_covariates)
    result = maximal_box(
        coords[flags == 1],
        coords[flags == 0],
        budget=config.box_budget,
        dimension_names=ds.schema.box_covariates,
    )
    write_json(
        out / "box.json",
        {
            "dimension_names": list(result.box.dimension_names),
            "lower": [float(v) for v in result.box.lower],
            "upper": [float(v) for v in result.box.upper],
            "cardinality": result.cardinality,
            "negatives_inside": result.negatives_inside,
            "nodes_explored": result.nodes_explored,
            "proven_optimal": result.proven_optimal,
            "budget": config.box_budget,
        },
    )
    inside = result.box.contains_mask(coords)
    rows = []
    for i in range(ds.n_units):
        rows.append(
            (ds.ids[i], *[float(v) for v in coords[i]], int(ds.z[i]), int(flags[i]), int(inside[i]))
        )
    header = ["id", *ds.schema.box_covariates, "arm", "support_flag", "inside_box"]
    write_csv(out / "box_points.csv", header, rows)
    return {
        "stage": "box",
        "cardinality": result.cardinality,
        "negatives_inside": result.negatives_inside,
        "nodes_explored": result.nodes_explored,
        "proven_optimal": result.proven_optimal,
        "lower": [float(v) for v in result.box.lower],
        "upper": [float(v) for v in result.box.upper],
    }


def _read_box(out: Path) -> Box:
    with (out / "box.json").open(encoding="utf-8") as fh:
        payload = json.load(fh)
    return Box(
        lower=np.asarray(payload["lower"], dtype=float),
        upper=np.asarray(payload["upper"], dtype=float),
        dimension_names=tuple(payload["dimension_names"]),
    )


def _balance_rows(report: BalanceReport) -> list[tuple]:
    rows = []
    for r in report.rows:
        rows.append(
            (
                r.covariate,
                r.tier,
                r.threshold,
                r.before,
                "" if r.after is None else r.after,
                "" if r.passed is None else int(r.passed),
            )
        )
    return rows


def _usable_covariates(study: Dataset, names: Sequence[str]) -> tuple[tuple[str, ...], list[str]]:
    """Drop columns that are constant or exact duplicates within the study population."""
    kept: list[str] = []
    notes: list[str] = []
    seen: dict[bytes, str] = {}
    x = study.covariate_matrix(names)
    for j, name in enumerate(names):
        col = x[:, j]
        if np.unique(col).size < 2:
            notes.append(f"covariate '{name}' is constant in the study population; dropped")
            continue
        key = col.tobytes()
        if key in seen:
            notes.append(f"covariate '{name}' duplicates '{seen[key]}'; dropped")
            continue
        seen[key] = name
        kept.append(name)
    return tuple(kept), notes


def stage_match(config: PipelineConfig) -> dict:
    """Restrict to the box, refit scores, build distances, and run match attempts.

    Attempts run in config order and stop at the first whose balance passes
    every threshold. Returns a summary either way; ``balance_attained`` tells
    the pipeline whether to continue into inference.
    """
    out = _workdir(config)
    for stale in out.glob("balance_attempt_*.csv"):
        stale.unlink()
    ds = _read_imputed(out / "imputed.csv", out / "schema_imputed.json")
    box = _read_box(out)
    study = filter_to_box(ds, box)
    write_dataset_csv(study, out / "study_population.csv")

    caliper_covs = (
        tuple(config.caliper_score_covariates)
        if config.caliper_score_covariates is not None
        else study.schema.covariate_names
    )
    caliper_covs, dropped_notes = _usable_covariates(study, caliper_covs)
    model = fit_logistic(study, caliper_covs)
    scores = model.predict(study.covariate_matrix(caliper_covs))
    write_csv(
        out / "study_scores.csv",
        ["id", "score"],
        [(study.ids[i], float(scores[i])) for i in range(study.n_units)],
    )

    distance_covs = (
        tuple(config.distance_covariates)
        if config.distance_covariates is not None
        else study.schema.covariate_names
    )
    distance_covs, more_notes = _usable_covariates(study, distance_covs)
    dropped_notes.extend(more_notes)
    dm = rank_mahalanobis(study, distance_covs)
    dm = apply_caliper(
        dm,
        {study.ids[i]: float(scores[i]) for i in range(study.n_units)},
        width=config.caliper_width,
        penalty=config.caliper_penalty,
    )
    exact = None
    if study.exact_keys is not None:
        exact = {study.ids[i]: study.exact_keys[i] for i in range(study.n_units)}

    attempts_summary = []
    chosen: Stratification | None = None
    chosen_report: BalanceReport | None = None
    chosen_attempt = -1
    for k, (kappa_t, kappa_c) in enumerate(config.ratio_attempts):
        try:
            strat = full_match(
                dm,
                exact_keys=exact,
                kappa_t=kappa_t,
                kappa_c=kappa_c,
                cost_scale=config.cost_scale,
            )
        except MatchError as exc:
            attempts_summary.append(
                {"kappa_t": kappa_t, "kappa_c": kappa_c, "feasible": False, "error": str(exc)}
            )
            continue
        report = standardized_differences(study, strat)
        write_csv(
            out / f"balance_attempt_{k}.csv",
            ["covariate", "tier", "threshold", "sd_before", "sd_after", "passed"],
            _balance_rows(report),
        )
        attempts_summary.append(
            {
                "kappa_t": kappa_t,
                "kappa_c": kappa_c,
                "feasible": True,
                "objective": strat.objective,
                "n_strata": len(strat.strata),
                "balance_pass": report.all_pass,
            }
        )
        if report.all_pass:
            chosen = strat
            chosen_report = report
            chosen_attempt = k
            break

    summary = {
        "stage": "match",
        "n_study": study.n_units,
        "n_study_treated": study.n_treated,
        "n_study_control": study.n_control,
        "attempts": attempts_summary,
        "balance_attained": chosen is not None,
        "chosen_attempt": chosen_attempt,
        "notes": sorted(set(dropped_notes)),
    }
    if chosen is None:
        return summary

    stratum_of = chosen.stratum_of()
    write_csv(
        out / "strata.csv",
        ["id", "stratum"],
        [(uid, stratum_of[uid]) for uid in study.ids],
    )
    write_csv(
        out / "balance.csv",
        ["covariate", "tier", "threshold", "sd_before", "sd_after", "passed"],
        _balance_rows(chosen_report),
    )
    write_csv(
        out / "love_plot.csv",
        ["covariate", "abs_before", "abs_after", "tier", "threshold"],
        [
            (r.covariate, abs(r.before), abs(r.after), r.tier, r.threshold)
            for r in chosen_report.rows
        ],
    )
    summary["objective"] = chosen.objective
    summary["n_strata"] = len(chosen.strata)
    return summary


def stage_balance(config: PipelineConfig) -> dict:
    """Recompute balance diagnostics from the persisted strata."""
    out = _workdir(config)
    study = _read_imputed(out / "study_population.csv", out / "schema_imputed.json")
    strata = _read_stratification(out, study)
    strat = Stratification(
        strata=tuple(strata), kappa_t=study.n_units, kappa_c=study.n_units, objective=0.0
    )
    report = standardized_differences(study, strat)
    write_csv(
        out / "balance.csv",
        ["covariate", "tier", "threshold", "sd_before", "sd_after", "passed"],
        _balance_rows(report),
    )
    write_csv(
        out / "love_plot.csv",
        ["covariate", "abs_before", "abs_after", "tier", "threshold"],
        [
            (r.covariate, abs(r.before), abs(r.after), r.tier, r.threshold)
            for r in report.rows
        ],
    )
    return {
        "stage": "balance",
        "all_pass": report.all_pass,
        "n_strata": len(strata),
    }


def _read_stratification(out: Path, study: Dataset) -> list[Stratum]:
    stratum_by_id = _read_id_column(out / "strata.csv", "stratum")
    z_by_id = {study.ids[i]: int(study.z[i]) for i in range(study.n_units)}
    members: dict[int, list[str]] = {}
    for uid in study.ids:
        members.setdefault(int(stratum_by_id[uid]), []).append(uid)
    strata = []
    for idx in sorted(members):
        ids = tuple(members[idx])
        treated = tuple(uid for uid in ids if z_by_id[uid] == 1)
        strata.append(Stratum(member_ids=ids, treated_ids=treated))
    return strata


def _observations_of(strata: Sequence[Stratum], r_by_id: Mapping[str, int]) -> list[StratumObservation]:
    obs = []
    for s in strata:
        tset = set(s.treated_ids)
        t1 = sum(r_by_id[u] for u in s.member_ids if u in tset)
        c1 = sum(r_by_id[u] for u in s.member_ids if u not in tset)
        obs.append(StratumObservation(n=s.n, m=s.m, t1=t1, c1=c1))
    return obs


def _inference_payload(report: InferenceReport, label: str) -> dict:
    return {
        "label": label,
        "n_units": report.n_total,
        "ate_hat": float(report.ate_hat),
        "se": report.se,
        "ci": None if report.ci is None else [report.ci[0], report.ci[1]],
        "ci_d": None if report.ci_d is None else list(report.ci_d),
        "alpha": report.alpha,
        "contiguous": report.contiguous,
        "d_star": report.d_star,
        "warnings": list(report.warnings),
    }


def _write_pvalues(path: Path, report: InferenceReport, grid: VarianceGrid):
    rows = []
    n = report.n_total
    for d in range(-n, n + 1):
        var = grid.max_variance(d)
        rows.append(
            (
                d,
                d / n,
                int(var is not None),
                "" if var is None else float(var),
                report.p_values[d],
            )
        )
    write_csv(path, ["d", "delta0", "feasible", "max_variance", "p"], rows)


def stage_infer(config: PipelineConfig) -> dict:
    out = _workdir(config)
    for stale in list(out.glob("inference_subgroup_*.json")) + list(
        out.glob("pvalues_subgroup_*.csv")
    ):
        stale.unlink()
    study = _read_imputed(out / "study_population.csv", out / "schema_imputed.json")
    strata = _read_stratification(out, study)
    r_by_id = {study.ids[i]: int(study.r[i]) for i in range(study.n_units)}

    observations = _observations_of(strata, r_by_id)
    grid = VarianceGrid(observations)
    report = test_and_invert(observations, alpha=config.alpha, grid=grid)
    write_json(out / "inference.json", _inference_payload(report, "overall"))
    _write_pvalues(out / "pvalues.csv", report, grid)
    summary = {
        "stage": "infer",
        "overall": _inference_payload(report, "overall"),
        "subgroups": [],
        "notes": [],
    }

    if config.subgroups and study.exact_keys is not None:
        key_by_id = {study.ids[i]: study.exact_keys[i] for i in range(study.n_units)}
        full = _read_imputed(out / "imputed.csv", out / "schema_imputed.json")
        all_levels = sorted(set(full.exact_keys)) if full.exact_keys is not None else []
        levels = sorted(set(study.exact_keys))
        for level in all_levels:
            if level not in levels:
                summary["notes"].append(
                    f"subgroup '{level}': empty after restriction, skipped"
                )
        for level in levels:
            sub = [s for s in strata if key_by_id[s.member_ids[0]] == level]
            if not sub:
                summary["notes"].append(f"subgroup '{level}': no strata, skipped")
                continue
            sub_obs = _observations_of(sub, r_by_id)
            sub_grid = VarianceGrid(sub_obs)
            sub_report = test_and_invert(sub_obs, alpha=config.alpha, grid=sub_grid)
            write_json(
                out / f"inference_subgroup_{level}.json",
                _inference_payload(sub_report, f"subgroup={level}"),
            )
            _write_pvalues(out / f"pvalues_subgroup_{level}.csv", sub_report, sub_grid)
            summary["subgroups"].append(_inference_payload(sub_report, f"subgroup={level}"))
    return summary


def stage_simulate(config: PipelineConfig) -> dict:
    """Monte-Carlo draws from the worst-case completion at the reported null."""
    out = _workdir(config)
    study = _read_imputed(out / "study_population.csv", out / "schema_imputed.json")
    strata = _read_stratification(out, study)
    r_by_id = {study.ids[i]: int(study.r[i]) for i in range(study.n_units)}
    observations = _observations_of(strata, r_by_id)

    with (out / "inference.json").open(encoding="utf-8") as fh:
        d_star = json.load(fh)["d_star"]
    result = max_variance_dp(observations, d_star)
    completions = [
        completion_from_witness(alloc.observation, alloc.option.witness)
        for alloc in result.allocation
    ]
    sim = simulate_randomization(
        completions,
        mode="monte-carlo",
        draws=config.qq_draws,
        seed=[config.seed, MONTE_CARLO_SUBSTREAM],
    )
    table = qq_table(sim.samples)
    write_csv(
        out / "qq.csv",
        ["prob", "sample_quantile", "normal_quantile"],
        [tuple(float(v) for v in row) for row in table],
    )
    return {
        "stage": "simulate",
        "d_star": d_star,
        "draws": config.qq_draws,
        "sample_mean": sim.mean,
        "sample_variance": sim.variance,
    }


MANIFEST_FILES = [
    "imputed.csv",
    "schema_imputed.json",
    "support.csv",
    "box.json",
    "box_points.csv",
    "study_population.csv",
    "study_scores.csv",
    "strata.csv",
    "balance.csv",
    "love_plot.csv",
    "inference.json",
    "pvalues.csv",
    "qq.csv",
]


@dataclass(frozen=True)
class RunReport:
    exit_status: int
    stages: tuple[dict, ...]
    files: tuple[dict, ...]
    warnings: tuple[str, ...]


class PipelineStageError(RuntimeError):
    """A stage failed; the message names the stage."""


def _run_stage(name: str, fn, config: PipelineConfig) -> dict:
    try:
        return fn(config)
    except PipelineStageError:
        raise
    except Exception as exc:
        raise PipelineStageError(f"stage '{name}': {exc}") from exc


def run_pipeline(config: PipelineConfig) -> RunReport:
    """Execute all stages in order and write the checksummed manifest.

    Stops before inference with exit status 2 when no match attempt attains
    balance; the per-attempt diagnostics are still written.
    """
    out = _workdir(config)
    stages: list[dict] = []
    warnings: list[str] = []

    stages.append(_run_stage("impute", stage_impute, config))
    stages.append(_run_stage("support", stage_support, config))
    stages.append(_run_stage("box", stage_box, config))
    match_summary = _run_stage("match", stage_match, config)
    stages.append(match_summary)
    warnings.extend(match_summary.get("notes", []))

    if match_summary["balance_attained"]:
        infer_summary = _run_stage("infer", stage_infer, config)
        stages.append(infer_summary)
        warnings.extend(infer_summary.get("notes", []))
        stages.append(_run_stage("simulate", stage_simulate, config))
        exit_status = EXIT_OK
    else:
        warnings.append(
            "no match attempt attained balance; inference skipped (exit status 2)"
        )
        exit_status = EXIT_BALANCE_NOT_ATTAINED

    files = []
    names = list(MANIFEST_FILES)
    names.extend(
        p.name for p in sorted(out.glob("balance_attempt_*.csv"))
    )
    names.extend(p.name for p in sorted(out.glob("inference_subgroup_*.json")))
    names.extend(p.name for p in sorted(out.glob("pvalues_subgroup_*.csv")))
    for name in sorted(set(names)):
        path = out / name
        if path.exists():
            files.append(
                {"name": name, "sha256": sha256_of(path), "bytes": path.stat().st_size}
            )

    report = RunReport(
        exit_status=exit_status,
        stages=tuple(stages),
        files=tuple(files),
        warnings=tuple(warnings),
    )
    write_json(
        out / "run_report.json",
        {
            "exit_status": report.exit_status,
            "stages": list(report.stages),
            "files": list(report.files),
            "warnings": list(report.warnings),
            "seed": config.seed,
            "input": config.input,
        },
    )
    return report
