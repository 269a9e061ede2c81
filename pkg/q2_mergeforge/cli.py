# ----------------------------------------------------------------------------
# Copyright (c) 2025, Bokulich Lab.
#
# Distributed under the terms of the Modified BSD License.
#
# The full license is in the file LICENSE, distributed with this software.
# ----------------------------------------------------------------------------
import logging
import os

import click

from ._errors import MergeForgeError
from .evalmetrics import (
    MetricTable,
    build_report,
    ingest_judgments,
    render_table,
    score_judgments,
    write_report,
)
from .mergecore import SignMode, TaskVector, compute_delta, task_vector_norms
from .recipe import execute_recipe, load_document, load_grid, load_recipe
from .search import (
    DistanceToTarget,
    GridSpec,
    Method,
    ScoresFileEvaluator,
    SweepOptions,
    enumerate_grid,
    run_sweep,
    sweep_table,
    write_sweep_report,
)
from .tensorio import read_archive, read_header, write_archive

logger = logging.getLogger(__name__)

THREADS_ENV = "MERGEFORGE_THREADS"


class MergeForgeGroup(click.Group):
    """Turns library errors into one ``error: <Class>: <message>`` line."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except MergeForgeError as e:
            message = " ".join(str(e).split())
            click.echo(f"error: {type(e).__name__}: {message}", err=True)
            ctx.exit(1)


def _absolute(path):
    return os.path.abspath(path) if path is not None else None


@click.group(cls=MergeForgeGroup)
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    envvar=THREADS_ENV,
    default=1,
    show_default=True,
    help=f"Worker threads (falls back to ${THREADS_ENV}).",
)
@click.option("--quiet", is_flag=True, help="Only log warnings and errors.")
@click.pass_context
def cli(ctx, threads, quiet):
    """Merge model checkpoints and score the results."""
    logging.basicConfig(
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {"threads": threads, "quiet": quiet}


@cli.command("merge")
@click.option("--recipe", "recipe_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Overrides the recipe's output.")
@click.option("--seed", type=click.IntRange(min=0), help="Overrides the recipe's seed.")
@click.pass_obj
def merge(obj, recipe_path, out, seed):
    """Run the merge described by a YAML recipe."""
    recipe = load_recipe(recipe_path, output=_absolute(out), seed=seed)
    merged = execute_recipe(recipe, threads=obj["threads"])
    for name, value in recipe.defaults_applied.items():
        click.echo(f"default applied: {name}={value}")
    click.echo(f"wrote {len(merged)} tensors to {recipe.output}")


@cli.command("grid")
@click.option("--grid", "grid_path", required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), help="Report directory.")
@click.option("--seed", type=click.IntRange(min=0), help="Seed for DARE masks.")
@click.pass_obj
def grid(obj, grid_path, out, seed):
    """Sweep merge coefficients over a grid and rank the candidates."""
    doc = load_grid(grid_path, output=_absolute(out), seed=seed)
    spec = GridSpec(Method(doc.method), len(doc.models), doc.values)
    candidates = enumerate_grid(spec)
    weights = (doc.ranking_weights["general"], doc.ranking_weights["safety"])
    logger.info("Sweeping %d %s candidates", len(candidates), doc.method)

    if doc.scores is not None:
        results = ScoresFileEvaluator(doc.scores).results(candidates, weights)
    else:
        models = [read_archive(path, lazy=True) for path in doc.models]
        base = read_archive(doc.base, lazy=True) if doc.base else None
        options = SweepOptions(
            density=doc.density,
            sign_mode=SignMode(doc.sign_mode),
            drop_prob=doc.drop_prob,
            seed=doc.seed,
            output_dtype=doc.output_dtype,
        )
        evaluator = DistanceToTarget(read_archive(doc.target, lazy=True))
        results = run_sweep(
            candidates, models, base, evaluator, options, weights, obj["threads"]
        )

    write_sweep_report(results, doc.output)
    if not obj["quiet"]:
        click.echo(sweep_table(results).to_string(index=False))
    click.echo(f"wrote sweep report to {doc.output}")


@cli.command("inspect")
@click.argument("archive", type=click.Path(exists=True))
@click.option("--norms", is_flag=True, help="Also print per-tensor L2 norms.")
def inspect_archive(archive, norms):
    """Print an archive's header: names, dtypes, shapes and byte ranges."""
    header = read_header(archive)
    values = {}
    if norms:
        values = task_vector_norms(TaskVector.from_archive(read_archive(archive)))
    for entry in header.entries:
        begin, end = entry.data_offsets
        shape = "x".join(str(d) for d in entry.shape) or "scalar"
        line = f"{entry.name}\t{entry.dtype}\t{shape}\t[{begin}, {end})"
        if norms:
            line += f"\t{values[entry.name]:.6g}"
        click.echo(line)
    for key, value in sorted(header.metadata.items()):
        click.echo(f"# {key}: {value}")


@cli.command("delta")
@click.option("--model", required=True, type=click.Path(exists=True))
@click.option("--base", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
def delta(model, base, out):
    """Write the task vector (model minus base) as an archive."""
    tv = compute_delta(read_archive(model, lazy=True), read_archive(base, lazy=True))
    write_archive(tv.to_archive(), _absolute(out))
    click.echo(f"wrote {len(tv.deltas)} deltas to {_absolute(out)}")


@cli.command("score")
@click.option("--judgments", required=True, type=click.Path(exists=True))
@click.option("--base", "base_model", required=True, help="Model harm is compared to.")
@click.option("--baseline", help="Row the report annotates deltas against.")
@click.option(
    "--languages", help="Comma-separated language tags; others are rejected."
)
@click.option("--out", type=click.Path(), help="Directory for report files.")
def score(judgments, base_model, baseline, languages, out):
    """Compute safety and general metrics from a judgment file."""
    declared = languages.split(",") if languages else None
    js = ingest_judgments(judgments, declared)
    if js.errors:
        click.echo(f"skipped {len(js.errors)} invalid lines", err=True)
    table = score_judgments(js, base_model, baseline).with_aggregate()
    report = build_report(table) if baseline else render_table(table)
    click.echo(report.text)
    if out is not None:
        write_report(report, _absolute(out))


@cli.command("report")
@click.option("--table", "table_path", required=True, type=click.Path(exists=True))
@click.option("--baseline", required=True, help="Row to compute deltas against.")
@click.option("--out", type=click.Path(), help="Directory for report files.")
def report(table_path, baseline, out):
    """Render a metric table with deltas to a baseline row."""
    data = load_document(table_path)
    if "rows" not in data:
        data = {"rows": data}
    data["baseline"] = baseline
    rendered = build_report(MetricTable.from_dict(data))
    click.echo(rendered.text)
    if out is not None:
        write_report(rendered, _absolute(out))


if __name__ == "__main__":
    cli()
