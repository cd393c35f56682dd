"""Command-line interface: stage subcommands, synthetic data, full pipeline runs."""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from . import pipeline as pl
from .maxbox import maximal_box
from .synthetic import generate_cohort


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.BadParameter(f"expected KEY=VALUE, got '{pair}'")
        key, value = pair.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def _load_config(config_path: str, set_: tuple[str, ...], output_dir, seed) -> pl.PipelineConfig:
    overrides = _parse_overrides(set_)
    if output_dir is not None:
        overrides["output_dir"] = output_dir
    if seed is not None:
        overrides["seed"] = seed
    try:
        return pl.load_config(config_path, overrides)
    except (pl.ConfigError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc))


def _run(stage_name: str, fn, config: pl.PipelineConfig):
    try:
        summary = fn(config)
    except Exception as exc:
        raise click.ClickException(f"stage '{stage_name}': {exc}")
    click.echo(json.dumps(summary, sort_keys=True))


config_option = click.option("--config", "-c", "config_path", required=True, type=click.Path(exists=True), help="Pipeline config file (YAML).")
set_option = click.option("--set", "-s", "set_", multiple=True, metavar="KEY=VALUE", help="Override a config key (dotted path, YAML value).")
out_option = click.option("--output-dir", "-o", default=None, help="Override output directory.")
seed_option = click.option("--seed", default=None, type=int, help="Override the run seed.")


def _stage_command(name: str, fn, help_text: str):
    @main.command(name=name, help=help_text)
    @config_option
    @set_option
    @out_option
    @seed_option
    def _cmd(config_path, set_, output_dir, seed, _fn=fn, _name=name):
        config = _load_config(config_path, set_, output_dir, seed)
        _run(_name, _fn, config)

    return _cmd


@click.group()
def main():
    """Box-shaped study populations, full matching, and worst-case inference."""


@main.command()
@config_option
@set_option
@out_option
@seed_option
def pipeline(config_path, set_, output_dir, seed):
    """Run every stage and write the checksummed manifest."""
    config = _load_config(config_path, set_, output_dir, seed)
    try:
        report = pl.run_pipeline(config)
    except pl.PipelineStageError as exc:
        raise click.ClickException(str(exc))
    click.echo(
        json.dumps(
            {"exit_status": report.exit_status, "warnings": list(report.warnings)},
            sort_keys=True,
        )
    )
    if report.exit_status != 0:
        sys.exit(report.exit_status)


@main.command()
@click.option("--points", "points_path", default=None, type=click.Path(exists=True), help="Standalone mode: CSV of coordinates plus a 0/1 'label' column.")
@click.option("--budget", default=0, type=int, help="Negatives allowed inside (standalone mode).")
@click.option("--out", "out_path", default=None, help="Where to write the standalone box JSON.")
@click.option("--config", "-c", "config_path", default=None, type=click.Path(exists=True), help="Pipeline config file (YAML).")
@set_option
@out_option
@seed_option
def box(points_path, budget, out_path, config_path, set_, output_dir, seed):
    """Solve the maximal box, from pipeline intermediates or a labeled points CSV."""
    if points_path is not None:
        with open(points_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            dims = [c for c in reader.fieldnames if c != "label"]
            pos, neg = [], []
            for record in reader:
                point = [float(record[d]) for d in dims]
                (pos if record["label"].strip() == "1" else neg).append(point)
        try:
            result = maximal_box(np.asarray(pos), np.asarray(neg), budget=budget, dimension_names=dims)
        except Exception as exc:
            raise click.ClickException(str(exc))
        payload = {
            "dimension_names": list(result.box.dimension_names),
            "lower": [float(v) for v in result.box.lower],
            "upper": [float(v) for v in result.box.upper],
            "cardinality": result.cardinality,
            "negatives_inside": result.negatives_inside,
            "nodes_explored": result.nodes_explored,
            "proven_optimal": result.proven_optimal,
            "budget": budget,
        }
        if out_path is not None:
            pl.write_json(Path(out_path), payload)
        click.echo(json.dumps(payload, sort_keys=True))
        return
    if config_path is None:
        raise click.ClickException("provide either --points or --config")
    config = _load_config(config_path, set_, output_dir, seed)
    _run("box", pl.stage_box, config)


@main.command()
@click.option("--n", "n_units", default=400, type=int, help="Number of units.")
@click.option("--covariates", "covariate_count", default=4, type=int)
@click.option("--overlap-gap", default=0.0, type=float, help="Treated-only shift on the first covariate.")
@click.option("--effect", "true_effect", default=0.0, type=float, help="Additive effect on the event probability.")
@click.option("--missing-rate", default=0.0, type=float)
@click.option("--confounding", default=0.6, type=float, help="How strongly covariates drive treatment.")
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default=".", help="Directory for synthetic.csv and truth.json.")
@click.option("--write-config", "config_out", default=None, help="Also write a ready-to-run pipeline config.")
def generate(n_units, covariate_count, overlap_gap, true_effect, missing_rate, confounding, seed, out_dir, config_out):
    """Write a seeded synthetic cohort with a known-truth record."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds, truth = generate_cohort(
        n_units=n_units,
        covariate_count=covariate_count,
        overlap_gap=overlap_gap,
        true_effect=true_effect,
        missing_rate=missing_rate,
        confounding=confounding,
        seed=[seed, pl.GENERATOR_SUBSTREAM],
    )
    pl.write_dataset_csv(ds, out / "synthetic.csv")
    pl.write_json(
        out / "truth.json",
        {
            "true_ate": truth.true_ate,
            "r_treated": list(truth.r_treated),
            "r_control": list(truth.r_control),
            "ids": list(ds.ids),
        },
    )
    if config_out is not None:
        names = list(ds.schema.covariate_names)
        config = {
            "input": str(out / "synthetic.csv"),
            "output_dir": str(out / "run"),
            "seed": seed,
            "alpha": 0.05,
            "schema": {
                "id_column": "id",
                "treatment_column": "z",
                "outcome_column": "r",
                "exact_match_column": "subgroup",
                "covariates": {name: ds.schema.tiers[name] for name in names},
                "box_covariates": list(ds.schema.box_covariates),
            },
            "support": {
                "rule": "crump",
                "bounds": [0.1, 0.9],
                "score_covariates": [n for n in names if ds.schema.tiers[n] == 1],
            },
            "box": {"budget": 0},
            "caliper": {"width": 0.2},
            "match": {"ratio_attempts": [[2, 2], [4, 4], [7, 7], [15, 15]]},
        }
        with open(config_out, "w", encoding="utf-8") as fh:
            yaml.safe_dump(config, fh, sort_keys=False)
    click.echo(
        json.dumps(
            {"n_units": ds.n_units, "n_treated": ds.n_treated, "true_ate": truth.true_ate},
            sort_keys=True,
        )
    )


_stage_command("impute", pl.stage_impute, "Load the input CSV, impute, and write the working table.")
_stage_command("propensity", pl.stage_propensity, "Fit the full propensity model and write per-unit scores.")
_stage_command("support", pl.stage_support, "Flag units inside viable overlap with the configured rule.")
_stage_command("match", pl.stage_match, "Restrict to the box, run match attempts, write strata and balance.")
_stage_command("balance", pl.stage_balance, "Recompute balance diagnostics from persisted strata.")
_stage_command("infer", pl.stage_infer, "Estimate the effect and invert worst-case tests into an interval.")
_stage_command("simulate", pl.stage_simulate, "Monte-Carlo draws from the worst-case completion; writes QQ data.")


if __name__ == "__main__":
    main()
