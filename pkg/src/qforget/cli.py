"""Command-line entry point: ``qforget <command>``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
"""
from __future__ import annotations

import json
import logging
import shutil
import sys
from datetime import datetime
from importlib import resources
from pathlib import Path

import click
import numpy as np

from . import __version__
from ._io import write_table
from .cohort import (
    CohortConfig, CohortError, build_dataset, closed_comparison, forgotten_signal, persistence_overlap,
    view_concentration, views_growth_histogram, write_dataset,
)
from .evaluate import ExperimentError, ExperimentPlan, PlanError, prepare, run_experiment, write_report
from .features import GROUPS, FeatureError, FeatureMatrix, dense_schema
from .gbt import BoostError
from .ingest import DumpFormatError, read_dump
from .records import dump_label, parse_timestamp
from .stats import predictiveness_report, write_report as write_predictiveness
from .store import StoreError, SnapshotStore
from .synthgen import SynthConfig, SynthError, dump_directory, generate

log = logging.getLogger("qforget.cli")

EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 2, 3, 4
DATA_ERRORS = (StoreError, BoostError, CohortError, PlanError, ExperimentError, FeatureError, DumpFormatError,
               SynthError, FileNotFoundError, json.JSONDecodeError)
ANALYSES = ("forgotten-signal", "concentration", "overlap", "growth-hist", "closed", "predictiveness")
DEFAULT_GROWTH_EDGES = (-0.75, -0.5, -0.25, -0.05, 0.0, 0.25, 0.5, 1.0, 2.0)


class DataError(Exception):
    """Bad or missing input data detected by the command layer."""


# --- option helpers --------------------------------------------------------------


def _timestamp(ctx, param, value):
    if value is None:
        return None
    try:
        return parse_timestamp(value)
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _timestamps(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(parse_timestamp(v) for v in value.split(","))
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _floats(ctx, param, value):
    if value is None:
        return None
    try:
        return tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from None


def _fractions(ctx, param, value):
    values = _floats(ctx, param, value)
    if values is not None and not all(0 < v <= 1 for v in values):
        raise click.BadParameter("fractions must lie in (0, 1]")
    return values


def _edges(ctx, param, value):
    values = _floats(ctx, param, value)
    if values is not None and any(b <= a for a, b in zip(values, values[1:])):
        raise click.BadParameter("edges must be strictly increasing")
    return values


def _load_config(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _cohort_config(config: dict, gap: int | None, fraction, threshold, strict) -> CohortConfig:
    d = dict(config.get("cohort", {}))
    for key, value in (("gap_months", gap), ("highly_viewed_fraction", fraction),
                       ("forgotten_growth_threshold", threshold)):
        if value is not None:
            d[key] = value
    if strict:
        d["strict"] = True
    try:
        return CohortConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise click.UsageError(f"bad cohort configuration: {exc}") from None


def _open_store(path, need_dumps: bool = True) -> SnapshotStore:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"no snapshot store at {p}")
    store = SnapshotStore(p, create=False)
    if need_dumps and not store.dump_times():
        raise DataError(f"store {p} holds no snapshots")
    return store


def _check_triple(triple) -> tuple[datetime, datetime, datetime]:
    if triple is None:
        raise click.UsageError("--triple T1,T2,T3 is required for this command")
    if len(triple) != 3:
        raise click.BadParameter("expected three comma-separated dump times", param_hint="--triple")
    if not triple[0] < triple[1] < triple[2]:
        raise click.BadParameter("dump times must be increasing", param_hint="--triple")
    return triple


def _window(store: SnapshotStore, window) -> tuple[datetime, datetime]:
    if window is None:
        times = store.dump_times()
        if len(times) < 2:
            raise DataError("the store needs at least two snapshots")
        return times[-2], times[-1]
    if len(window) != 2 or not window[0] < window[1]:
        raise click.BadParameter("expected two increasing dump times", param_hint="--window")
    return window


# --- commands ----------------------------------------------------------------------


@click.group()
@click.version_option(__version__, prog_name="qforget")
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Highly viewed questions that are being forgotten: data pipeline and experiments."""
    logging.basicConfig(
        level=log_level.upper(), stream=sys.stderr,
        format="level=%(levelname)s module=%(name)s msg=%(message)s",
    )


@cli.command()
@click.option("--posts", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--users", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--tags", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dump-time", required=True, callback=_timestamp, help="Publication time of the dump (ISO-8601).")
@click.option("--store", required=True, type=click.Path(file_okay=False))
@click.option("--strict", is_flag=True, help="Abort on the first malformed row.")
@click.option("--no-text", is_flag=True, help="Do not keep titles and bodies.")
def ingest(posts, users, tags, dump_time, store, strict, no_text):
    """Parse one dump and write it into the store (replacing a snapshot with the same time)."""
    snap, reports = read_dump(posts, users, tags, dump_time, strict=strict)
    written = SnapshotStore(store).write(snap, keep_text=not no_text)
    for name, rep in reports.items():
        skipped = ",".join(f"{k}:{v}" for k, v in sorted(rep.skipped_types.items())) or "-"
        click.echo(f"{name}: rows={rep.rows} records={rep.records} warnings={rep.n_warnings} skipped_types={skipped}")
    click.echo(f"snapshot {dump_label(dump_time)}: questions={len(snap.questions)} answers={len(snap.answers)} "
               f"users={len(snap.users)} tags={len(snap.tags)} -> {written.directory}")


@cli.command("build-dataset")
@click.option("--store", required=True, type=click.Path(file_okay=False))
@click.option("--triple", required=True, callback=_timestamps, help="last,current,next dump times.")
@click.option("--gap", required=True, type=click.Choice(["3", "6"]), help="Months between dumps.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", type=float, help="Highly viewed fraction (default 0.15).")
@click.option("--threshold", type=float, help="Views-growth threshold (default -0.05).")
@click.option("--strict", is_flag=True, help="Fail on decreasing view counts instead of clamping.")
def build_dataset_cmd(store, triple, gap, out, config_path, fraction, threshold, strict):
    """Label the highly viewed questions of one dump triple."""
    triple = _check_triple(triple)
    cfg = _cohort_config(_load_config(config_path), int(gap), fraction, threshold, strict)
    ds = build_dataset(_open_store(store), *triple, cfg)
    write_dataset(ds, out)
    c = ds.counts()
    click.echo("#total\t#being_forgotten\t#unforgotten")
    click.echo(f"{c['total']}\t{c['being_forgotten']}\t{c['unforgotten']}")


@cli.command()
@click.option("--store", required=True, type=click.Path(file_okay=False))
@click.option("--which", required=True, type=click.Choice(ANALYSES))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--triple", callback=_timestamps, help="Dump triple (growth-hist, closed, predictiveness).")
@click.option("--gap", type=click.Choice(["3", "6"]), default="6", show_default=True)
@click.option("--window", callback=_timestamps, help="Two dump times bounding the view window.")
@click.option("--grid", callback=_fractions, help="Comma-separated top-K fractions.")
@click.option("--edges", callback=_edges, help="Comma-separated growth histogram edges.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
def analyze(store, which, out, triple, gap, window, grid, edges, config_path):
    """Descriptive analyses and single-feature predictiveness as plot-ready CSV."""
    config = _load_config(config_path)
    cfg = _cohort_config(config, int(gap), None, None, False)
    st = _open_store(store)
    header = {"analysis": which, "cohort": cfg.to_dict()}
    if which == "forgotten-signal":
        w = _window(st, window)
        if grid:
            cfg = CohortConfig.from_dict({**cfg.to_dict(), "top_n_grid": grid})
        rows = forgotten_signal(st, [t for t in st.dump_times() if t <= w[0]], w, cfg)
        cols = ["dump_time", "top_n", "n_top", "n_stale", "fraction_stale"]
        write_table(out, cols, ([r[c] for c in cols] for r in rows), {**header, "window": w})
    elif which == "concentration":
        w = _window(st, window)
        rows = view_concentration(st, *w, grid or cfg.top_n_grid)
        cols = ["top_k", "n_top", "share"]
        write_table(out, cols, ([r[c] for c in cols] for r in rows), {**header, "window": w, "grid": grid})
    elif which == "overlap":
        times = st.dump_times()
        if len(times) < 3:
            raise DataError("overlap needs at least three snapshots")
        pairs = [((a, b), (b, c)) for a, b, c in zip(times, times[1:], times[2:])]
        rows = persistence_overlap(st, pairs, cfg)
        cols = ["period", "next_period", "n_top_questions", "question_overlap", "n_top_tags", "tag_overlap"]
        write_table(out, cols, ([r[c] for c in cols] for r in rows), header)
    else:
        triple = _check_triple(triple)
        ds = build_dataset(st, *triple, cfg)
        header["triple"] = triple
        if which == "growth-hist":
            hist = views_growth_histogram(ds, edges or DEFAULT_GROWTH_EDGES)
            write_table(out, ["lower", "upper", "count"],
                        ([r["lower"], r["upper"], r["count"]] for r in hist.rows()), {**header, "edges": edges})
        elif which == "closed":
            res = closed_comparison(st, ds)
            rows = [["closed_fraction", "dataset", res["n_dataset"], None, None, None, res["closed_fraction"]]]
            for name, groups in res["indicators"].items():
                for group, s in groups.items():
                    rows.append([name, group, s["n"], s["q1"], s["median"], s["q3"], s["mean"]])
            write_table(out, ["indicator", "group", "n", "q1", "median", "q3", "mean"], rows, header)
        else:
            prep = prepare(st, ds)
            groups = [g for g in GROUPS if g != "text"]
            dense = np.hstack([prep.blocks[g] for g in groups])
            matrix = FeatureMatrix(dense_schema(groups), ds.question_ids, dense)
            write_predictiveness(predictiveness_report(matrix, ds), out, header)
    click.echo(f"wrote {out}")


@cli.command()
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, help="Override the plan's seed.")
@click.option("--jobs", type=click.IntRange(1), default=1, show_default=True)
@click.option("--no-bins", is_flag=True, help="Skip the per-bin analysis.")
def experiment(plan_path, out, seed, jobs, no_bins):
    """Run an experiment plan and write the summary table and detailed results."""
    raw = json.loads(Path(plan_path).read_text())
    if seed is not None:
        raw["seed"] = seed
    plan = ExperimentPlan.from_dict(raw)
    report = run_experiment(plan, Path(plan_path).parent, jobs=jobs, with_bins=not no_bins)
    paths = write_report(report, out)
    _print_table(report)
    click.echo(f"wrote {', '.join(sorted(p.name for p in paths.values()))} to {out}")


def _print_table(report) -> None:
    cols = report.table_columns()
    click.echo("\t".join(cols))
    for row in report.table():
        click.echo("\t".join([row["feature_set"], *(f"{row[c]:.2f}" for c in cols[1:])]))


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int)
@click.option("--signal", type=click.FloatRange(0, 1), help="Signal strength override.")
@click.option("--n-questions", type=click.IntRange(0))
@click.option("--store", type=click.Path(file_okay=False), help="Also ingest every generated dump here.")
def synth(out, config_path, seed, signal, n_questions, store):
    """Generate a synthetic multi-dump corpus (and optionally ingest it)."""
    d = _load_config(config_path)
    for key, value in (("seed", seed), ("signal_strength", signal), ("n_questions", n_questions)):
        if value is not None:
            d[key] = value
    try:
        cfg = SynthConfig.from_dict(d)
    except TypeError as exc:
        raise click.UsageError(f"bad synth configuration: {exc}") from None
    man = generate(cfg, out)
    click.echo(f"generated {man['n_questions']} questions, {man['n_answers']} answers over {len(man['dumps'])} dumps in {out}")
    if store:
        _ingest_synthetic(cfg, out, store)


def _ingest_synthetic(cfg: SynthConfig, out, store) -> None:
    st = SnapshotStore(store)
    for t in cfg.times():
        d = dump_directory(out, t)
        snap, _ = read_dump(d / "Posts.xml", d / "Users.xml", d / "Tags.xml", t, strict=True)
        st.write(snap)
        click.echo(f"ingested {dump_label(t)} into {store}")


@cli.command()
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--jobs", type=click.IntRange(1), default=1, show_default=True)
def quickstart(out, jobs):
    """Synthesize the bundled corpus, ingest it and run the bundled plan."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    bundle = resources.files("qforget.data").joinpath("quickstart")
    for name in ("synth.json", "plan.json"):
        with resources.as_file(bundle.joinpath(name)) as src:
            shutil.copyfile(src, out / name)
    cfg = SynthConfig.from_dict(json.loads((out / "synth.json").read_text()))
    man = generate(cfg, out / "corpus")
    click.echo(f"generated {man['n_questions']} questions in {out / 'corpus'}")
    _ingest_synthetic(cfg, out / "corpus", out / "store")
    plan = ExperimentPlan.load(out / "plan.json")
    report = run_experiment(plan, out, jobs=jobs)
    write_report(report, out / "report")
    _print_table(report)
    click.echo(f"report written to {out / 'report'}")


# --- entry point -------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="qforget", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.UsageError as exc:
        exc.show()
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_DATA
    except (DataError, *DATA_ERRORS) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        log.exception("internal error")
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_INTERNAL
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
