"""End-to-end acceptance checks, one test per criterion.

Each test records ``(passed, detail)`` in ``conftest.ACCEPTANCE`` before asserting,
so the terminal summary prints one line per criterion even when some fail.
Run just these with ``pytest -m acceptance -s``.
"""
from __future__ import annotations

import json
import math
import subprocess
import sys
import time
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import oracles
import test_gbt
import test_ingest
import test_stats
from conftest import ACCEPTANCE, PLANTED, Corpus
from helpers import random_view_table, views_store
from qforget import cli
from qforget._io import read_table
from qforget.evaluate import ALL_FEATURE_SETS
from qforget.cohort import (
    CohortConfig, build_dataset, closed_comparison, forgotten_signal, persistence_overlap, read_dataset,
    view_concentration, views_growth_histogram,
)
from qforget.ingest import read_dump
from qforget.records import to_micros
from qforget.stats import mann_whitney, rank_auc, single_feature_auc, spearman
from qforget.synthgen import SynthConfig, build_snapshots, dump_directory, generate
from test_cohort import CFG, TIMES, dataset_labels, raw_snapshots, table_views

pytestmark = pytest.mark.acceptance


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def triple_arg(times) -> str:
    return ",".join(t.isoformat() for t in times)


def record(n: int, failures: list[str], summary: str) -> None:
    ok = not failures
    detail = summary if ok else f"{summary}; failed: {'; '.join(failures)}"
    ACCEPTANCE[n] = (ok, detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


def passes(check, *args) -> bool:
    try:
        check(*args)
    except AssertionError:
        return False
    return True


def tree_files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def write_plan(path: Path, datasets, **extra) -> Path:
    path.write_text(json.dumps({"datasets": datasets, **extra}))
    return path


def dataset_entry(name, store, triple, gap):
    return {"name": name, "store": str(store), "gap_months": gap, "triple": [t.isoformat() for t in triple]}


# --- 1: the summary table has one row per feature set, min/max/avg per gap ----


def test_criterion_1_table_shaped_report(small_corpus, tmp_path):
    c = small_corpus
    t = c.times
    datasets = [dataset_entry(f"q{i}", c.store_path, t[i:i + 3], 3) for i in range(3)]
    datasets.append(dataset_entry("h0", c.store_path, (t[0], t[2], t[4]), 6))
    plan = write_plan(tmp_path / "plan.json", datasets, n_runs=3, n_bins=3)
    failures = []
    if run("experiment", "--plan", plan, "--out", tmp_path / "report") != 0:
        failures.append("experiment exit code")
    cols, rows = read_table(tmp_path / "report" / "summary.csv")
    expected_cols = ["feature_set"] + [f"{gap}m_{m}_{agg}" for gap in (3, 6) for m in ("f1", "accuracy")
                                       for agg in ("min", "max", "avg")]
    if cols != expected_cols:
        failures.append(f"columns {cols}")
    names = [r[0] for r in rows]
    if names != list(ALL_FEATURE_SETS) or len(rows) != 13:
        failures.append(f"rows {names}")
    for r in rows:
        rec = dict(zip(cols, r))
        for gap in (3, 6):
            for m in ("f1", "accuracy"):
                lo, hi, avg = (float(rec[f"{gap}m_{m}_{a}"]) for a in ("min", "max", "avg"))
                if not (0 <= lo <= avg + 1e-9 and avg <= hi + 1e-9 and hi <= 100):
                    failures.append(f"{rec['feature_set']} {gap}m {m} ordering")
                if gap == 6 and not lo == hi == avg:
                    failures.append(f"{rec['feature_set']} single 6m dataset spread")
    record(1, failures, f"summary.csv has {len(rows)} feature-set rows x {len(cols) - 1} min/max/avg columns")


# --- 2: a planted signal is learned end to end -----------------------------------------


def test_criterion_2_planted_signal_end_to_end(tmp_path):
    cfg_path = tmp_path / "synth.json"
    cfg_path.write_text(json.dumps(SynthConfig(**PLANTED).to_dict()))
    started = time.perf_counter()
    failures = []
    if run("synth", "--config", cfg_path, "--out", tmp_path / "dumps", "--store", tmp_path / "store") != 0:
        failures.append("synth exit code")
    manifest = json.loads((tmp_path / "dumps" / "manifest.json").read_text())
    times = [datetime.strptime(t, "%Y-%m-%d").replace(tzinfo=timezone.utc) for t in PLANTED["dump_times"]]
    if run("build-dataset", "--store", tmp_path / "store", "--triple", triple_arg(times), "--gap", 6,
           "--out", tmp_path / "dataset.csv") != 0:
        failures.append("build-dataset exit code")
    ds = read_dataset(tmp_path / "dataset.csv")
    expected = manifest["labels"][",".join(manifest["dumps"])]
    if sorted(ds.question_ids[ds.being_forgotten].tolist()) != sorted(expected["being_forgotten"]):
        failures.append("labels differ from the generator manifest")
    plan = write_plan(tmp_path / "plan.json", [dataset_entry("planted", tmp_path / "store", times, 6)],
                      feature_sets=["All"])
    if run("experiment", "--plan", plan, "--out", tmp_path / "report") != 0:
        failures.append("experiment exit code")
    elapsed = time.perf_counter() - started
    cols, rows = read_table(tmp_path / "report" / "cells.csv")
    f1 = float(dict(zip(cols, rows[0]))["f1"])
    if f1 < 0.90:
        failures.append(f"mean F1 {f1:.3f} < 0.90")
    if elapsed > 300:
        failures.append(f"runtime {elapsed:.0f}s > 300s")
    record(2, failures, f"{PLANTED['n_questions']} questions, {ds.n_total} labeled, mean F1 {f1:.3f}, "
                        f"synth+ingest+label+experiment {elapsed:.1f}s")


# --- 3: with no signal nothing is predictive --------------------------------------------


NULL = dict(n_questions=34000, n_users=8000, n_tags=40, seed=21, signal_strength=0.0,
            dump_times=("2019-03-01", "2019-09-01", "2020-03-01"))


@pytest.fixture(scope="module")
def null_corpus(tmp_path_factory) -> Corpus:
    return Corpus(tmp_path_factory.mktemp("null_corpus"), SynthConfig(**NULL))


def test_criterion_3_null_signal_control(null_corpus, tmp_path):
    c = null_corpus
    failures = []
    out = tmp_path / "predictiveness.csv"
    if run("analyze", "--store", c.store_path, "--which", "predictiveness", "--triple", triple_arg(c.times),
           "--gap", 6, "--out", out) != 0:
        failures.append("analyze exit code")
    cols, rows = read_table(out)
    aucs = {r[0]: float(r[cols.index("auc")]) for r in rows if r[cols.index("auc")] not in ("", "nan")}
    outside = {f: round(a, 4) for f, a in aucs.items() if not 0.45 <= a <= 0.55}
    if outside:
        failures.append(f"AUC outside [0.45, 0.55]: {outside}")
    ds = build_dataset(c.store, *c.times, CohortConfig(gap_months=6))
    prevalence = float(ds.being_forgotten.mean())
    plan = write_plan(tmp_path / "plan.json", [dataset_entry("null", c.store_path, c.times, 6)],
                      feature_sets=["All"])
    if run("experiment", "--plan", plan, "--out", tmp_path / "report", "--no-bins") != 0:
        failures.append("experiment exit code")
    rc, rrows = read_table(tmp_path / "report" / "cells.csv")
    f1 = float(dict(zip(rc, rrows[0]))["f1"])
    if abs(f1 - prevalence) > 0.05:
        failures.append(f"F1 {f1:.3f} vs prevalence {prevalence:.3f}")
    record(3, failures, f"{ds.n_total} labeled; {len(aucs)} feature AUCs in [{min(aucs.values()):.3f}, "
                        f"{max(aucs.values()):.3f}]; F1 {f1:.3f} vs prevalence {prevalence:.3f}")


# --- 4: statistics against enumeration and pair counting -----------------------------------


def _pearson(xs, ys):
    mx, my = sum(xs) / len(xs), sum(ys) / len(ys)
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    return sxy / math.sqrt(sxx * syy)


def test_criterion_4_statistics_oracles():
    failures = []
    rng = np.random.default_rng(4)
    worst_p, n_pairs = 0.0, 0
    for n_a, n_b in test_stats.small_pairs():
        for tie_prone in (False, True):
            a = rng.integers(0, 4, n_a) if tie_prone else rng.normal(size=n_a)
            b = rng.integers(0, 4, n_b) if tie_prone else rng.normal(size=n_b)
            r = mann_whitney(a, b)
            if r.method == "degenerate":
                continue
            n_pairs += 1
            worst_p = max(worst_p, abs(r.p - test_stats.enumerated_p(a.tolist(), b.tolist())))
    if worst_p > 1e-12:
        failures.append(f"Mann-Whitney p gap {worst_p:.2e}")

    worst_rho = abs(spearman([1, 1, 2], [3, 4, 4]).rho - 0.5)
    for _ in range(50):
        n = int(rng.integers(3, 25))
        x, y = rng.integers(0, 4, n).tolist(), rng.integers(0, 4, n).tolist()
        rx, ry = test_stats.py_midranks(x), test_stats.py_midranks(y)
        if len(set(rx)) == 1 or len(set(ry)) == 1:
            continue
        worst_rho = max(worst_rho, abs(spearman(x, y).rho - _pearson(rx, ry)))
    if worst_rho > 1e-12:
        failures.append(f"Spearman gap {worst_rho:.2e}")

    worst_auc = 0.0
    for i in range(100):
        n = int(rng.integers(2, 60))
        labels = rng.random(n) < 0.4
        labels[0], labels[1] = True, False
        values = rng.integers(0, 6, n) if i % 2 else rng.normal(size=n)
        ref = test_stats.pair_count_auc(values.tolist(), labels.tolist())
        worst_auc = max(worst_auc, abs(rank_auc(values, labels) - ref),
                        abs(single_feature_auc(values, labels) - max(ref, 1 - ref)))
    if worst_auc > 1e-12:
        failures.append(f"AUC gap {worst_auc:.2e}")
    record(4, failures, f"{n_pairs} Mann-Whitney cases (max p gap {worst_p:.1e}), Spearman gap {worst_rho:.1e}, "
                        f"100 AUC fixtures gap {worst_auc:.1e}")


# --- 5: boosted trees -------------------------------------------------------------------


def test_criterion_5_gbt_properties():
    checks = {
        "loss non-increasing on 20 datasets": passes(test_gbt.test_training_loss_never_increases_on_20_datasets),
        "gradient/hessian finite differences": passes(test_gbt.test_gradients_match_central_differences),
        "XOR depth 2 solves, depth 1 fails": passes(test_gbt.test_xor_needs_depth_two),
        "histogram splits equal exact splits": all(
            passes(test_gbt.test_histogram_tree_equals_exact_split_reference, s) for s in range(6)),
    }
    record(5, [k for k, ok in checks.items() if not ok], ", ".join(checks))


# --- 6: labels against brute-force recomputation -----------------------------------------


def test_criterion_6_labeling_oracle(tmp_path):
    failures = []
    n_labeled = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        table = random_view_table(rng, int(rng.integers(5, 120)), tie_prone=bool(seed % 2))
        table[10_000] = [0, 2000, 3900]          # growth exactly -0.05
        table[10_001] = [0, 2000, 3899]          # growth just below
        ds = build_dataset(views_store(tmp_path / str(seed), table, TIMES), *TIMES, CFG)
        got = dataset_labels(ds)
        if got != oracles.labels(table_views(table), 0, 1, 2):
            failures.append(f"store {seed} differs")
        if got.get(10_000) is not False or got.get(10_001) is not True:
            failures.append(f"store {seed} boundary")
        n_labeled += len(got)
    record(6, failures, f"50 stores, {n_labeled} labels equal the exact recomputation; growth -0.05 unforgotten")


# --- 7: ingestion ------------------------------------------------------------------------


PEAK_RSS_CHILD = """
import json, sys
from datetime import datetime, timezone
from qforget.ingest import parse_posts

def high_water_kb():
    # VmHWM resets on exec, unlike ru_maxrss which inherits the parent's peak
    with open("/proc/self/status") as fh:
        return next(int(line.split()[1]) for line in fh if line.startswith("VmHWM:"))

base = high_water_kb()
keep = sys.argv[2] == "keep"
kept, n = [], 0
with open(sys.argv[1], "rb") as fh:
    for rec in parse_posts(fh, datetime(2020, 1, 1, tzinfo=timezone.utc), strict=True):
        n += 1
        if keep:
            kept.append(rec)
print(json.dumps({"rows": n, "base_kb": base, "peak_kb": high_water_kb()}))
"""


def write_posts(path: Path, n_rows: int) -> Path:
    with open(path, "w") as fh:
        fh.write('<?xml version="1.0" encoding="utf-8"?>\n<posts>\n')
        for i in range(1, n_rows + 1):
            if i % 3:
                fh.write(f'  <row Id="{i}" PostTypeId="1" CreationDate="2015-01-01T00:00:00.000" Score="{i % 7}" '
                         f'ViewCount="{i % 1000}" Body="&lt;p&gt;q {i}&lt;/p&gt;" Title="t{i}" '
                         f'Tags="&lt;a&gt;&lt;b{i % 50}&gt;" AnswerCount="1" CommentCount="0" '
                         f'LastActivityDate="2015-02-01T00:00:00.000" />\n')
            else:
                fh.write(f'  <row Id="{i}" PostTypeId="2" ParentId="{i - 1}" CreationDate="2015-01-02T00:00:00.000" '
                         f'Score="1" Body="&lt;p&gt;a&lt;/p&gt;" CommentCount="0" '
                         f'LastActivityDate="2015-01-02T00:00:00.000" />\n')
        fh.write("</posts>\n")
    return path


def peak_growth_kb(path: Path, keep: bool = False) -> tuple[int, int]:
    """Rows parsed and peak-RSS growth in a fresh interpreter; ``keep`` retains every record."""
    out = subprocess.run([sys.executable, "-c", PEAK_RSS_CHILD, str(path), "keep" if keep else "stream"],
                         capture_output=True, text=True, check=True)
    res = json.loads(out.stdout)
    return res["rows"], res["peak_kb"] - res["base_kb"]


MEMORY_CEILING_KB = 32 * 1024


def test_criterion_7_ingestion(tmp_path):
    failures = []
    fixtures = {
        "posts": test_ingest.test_posts_fixture_matches_hand_written_records,
        "users": test_ingest.test_users_fixture_matches_hand_written_records,
        "tags": test_ingest.test_tags_fixture_and_lowercase_normalization,
    }
    failures += [f"{k} fixture" for k, check in fixtures.items() if not passes(check)]

    small = write_posts(tmp_path / "small.xml", 10**5)
    small_rows, small_kb = peak_growth_kb(small)
    # the probe must be able to see growth: holding the records in a list has to register
    _, retained_kb = peak_growth_kb(small, keep=True)
    if retained_kb < 8 * 1024:
        failures.append(f"retaining 1e5 records grew peak RSS by only {retained_kb} KB")
    big = write_posts(tmp_path / "big.xml", 10**6)
    size_mb = big.stat().st_size / 2**20
    big_rows, big_kb = peak_growth_kb(big)
    if (small_rows, big_rows) != (10**5, 10**6):
        failures.append(f"row counts {small_rows}, {big_rows}")
    if big_kb > MEMORY_CEILING_KB or big_kb - small_kb > 4 * 1024:
        failures.append(f"peak growth {small_kb} KB at 1e5 rows vs {big_kb} KB at 1e6 rows")
    big.unlink()

    cfg = SynthConfig(n_questions=600, n_users=80, n_tags=8, seed=17, late_question_fraction=0.2,
                      dump_times=("2019-01-01", "2019-04-01", "2019-07-01"))
    generate(cfg, tmp_path / "synth")
    parsed = []
    for t in cfg.times():
        d = dump_directory(tmp_path / "synth", t)
        parsed.append(read_dump(d / "Posts.xml", d / "Users.xml", d / "Tags.xml", t, strict=True)[0])
    if parsed != build_snapshots(cfg):
        failures.append("synthetic round trip")
    record(7, failures, f"fixtures exact; 10^6 rows ({size_mb:.0f} MB) parsed with peak RSS growth {big_kb} KB "
                        f"(10^5 rows: {small_kb} KB, retained: {retained_kb} KB); synthetic dumps round-trip")


# --- 8: determinism --------------------------------------------------------------------


def test_criterion_8_determinism(small_corpus, tmp_path):
    c = small_corpus
    failures = []

    def twice(name, make_args, exclude=()):
        outs = []
        for k in ("a", "b"):
            root = tmp_path / name / k
            code = [run(*argv) for argv in make_args(root)]
            if any(code):
                failures.append(f"{name} exit codes {code}")
            outs.append({p: b for p, b in tree_files(root).items() if Path(p).name not in exclude})
        if not outs[0] or outs[0] != outs[1]:
            failures.append(f"{name} outputs differ")

    twice("ingest", lambda root: [
        ("ingest", "--posts", d / "Posts.xml", "--users", d / "Users.xml", "--tags", d / "Tags.xml",
         "--dump-time", t.isoformat(), "--store", root)
        for t in c.times for d in [dump_directory(c.dumps_dir, t)]
    ])
    triple = triple_arg(c.times[:3])
    twice("build-dataset", lambda root: [
        ("build-dataset", "--store", c.store_path, "--triple", triple, "--gap", 3, "--out", root / "ds.csv")])
    analyses = {
        "forgotten-signal": (), "concentration": (), "overlap": (),
        "growth-hist": ("--triple", triple, "--gap", 3), "closed": ("--triple", triple, "--gap", 3),
        "predictiveness": ("--triple", triple, "--gap", 3),
    }
    for which, extra in analyses.items():
        twice(f"analyze {which}", lambda root, w=which, e=extra: [
            ("analyze", "--store", c.store_path, "--which", w, "--out", root / f"{w}.csv", *e)])
    plan = write_plan(tmp_path / "plan.json", [dataset_entry("d", c.store_path, c.times[:3], 3)],
                      feature_sets=["Question", "tfidf-tag", "All"], n_runs=2, n_bins=2)
    twice("experiment", lambda root: [("experiment", "--plan", plan, "--out", root, "--seed", 9)],
          exclude=("runtimes.json",))
    synth_cfg = tmp_path / "synth.json"
    synth_cfg.write_text(json.dumps({"n_questions": 200, "n_users": 30, "n_tags": 6,
                                     "dump_times": ["2019-01-01", "2019-07-01", "2020-01-01"]}))
    twice("synth", lambda root: [("synth", "--config", synth_cfg, "--out", root / "dumps", "--seed", 8,
                                  "--store", root / "store")])
    record(8, failures, "ingest, build-dataset, 6 analyses, experiment (timings aside) and synth "
                        "are byte-identical on re-run")


# --- 9: descriptive analyses ------------------------------------------------------------


def test_criterion_9_descriptive_analyses(small_corpus, tmp_path):
    c = small_corpus
    raw = raw_snapshots(c)
    vb = oracles.views_by_dump(raw)
    us = [to_micros(t) for t in c.times]
    failures = []

    grid = [0.05, 0.1, 0.15, 0.3, 0.5, 1.0]
    for d in range(len(c.times) - 1):
        period = oracles.period_views(vb, d, d + 1)
        for r in view_concentration(c.store, c.times[d], c.times[d + 1], grid):
            if abs(r["share"] - float(oracles.concentration(period, r["top_k"]))) > 1e-12:
                failures.append(f"concentration dump {d} K={r['top_k']}")

    pairs = [((a, b), (b, e)) for a, b, e in zip(c.times, c.times[1:], c.times[2:])]
    for i, row in enumerate(persistence_overlap(c.store, pairs, CFG)):
        top1 = oracles.select_top(oracles.period_views(vb, i, i + 1), Fraction("0.15"))
        top2 = oracles.select_top(oracles.period_views(vb, i + 1, i + 2), Fraction("0.15"))
        t1 = oracles.select_top(oracles.tag_popularity(raw[i + 1], us[i], us[i + 1], to_micros), Fraction("0.15"))
        t2 = oracles.select_top(oracles.tag_popularity(raw[i + 2], us[i + 1], us[i + 2], to_micros),
                                Fraction("0.15"))
        if row["question_overlap"] != len(top1 & top2) / len(top1) or row["tag_overlap"] != len(t1 & t2) / len(t1):
            failures.append(f"overlap pair {i}")

    cfg3 = CohortConfig(gap_months=3)
    edges = ["-0.75", "-0.5", "-0.05", "0", "0.25", "1"]
    for i in range(len(c.times) - 2):
        ds = build_dataset(c.store, *c.times[i:i + 3], cfg3)
        cur, fut = oracles.period_views(vb, i, i + 1), oracles.period_views(vb, i + 1, i + 2)
        growth = [Fraction(fut[q] - cur[q], cur[q]) for q in ds.question_ids.tolist()]
        got = views_growth_histogram(ds, [float(e) for e in edges]).counts.tolist()
        if got != oracles.histogram(growth, [Fraction(e) for e in edges]):
            failures.append(f"growth histogram triple {i}")

        res = closed_comparison(c.store, ds)
        snap = raw[i + 1]
        closed = [q for q in snap.questions if q.closed_date is not None and q.closed_date <= c.times[i + 1]]
        chosen = set(ds.question_ids.tolist())
        in_ds = [q for q in snap.questions if q.id in chosen]
        if res["closed_fraction"] != sum(q.id in chosen for q in closed) / len(in_ds):
            failures.append(f"closed fraction triple {i}")
        for name in ("answer_count", "comment_count", "score", "view_count"):
            for group, qs in (("closed", closed), ("dataset", in_ds)):
                if not qs:
                    continue
                want = oracles.quartiles([getattr(q, name) for q in qs])
                s = res["indicators"][name][group]
                if max(abs(a - b) for a, b in zip((s["q1"], s["median"], s["q3"]), want)) > 1e-12:
                    failures.append(f"closed {name} {group} triple {i}")

    window = (c.times[-2], c.times[-1])
    gained = oracles.period_views(vb, len(c.times) - 2, len(c.times) - 1)
    for r in forgotten_signal(c.store, c.times[:-1], window, CFG):
        d = [t.isoformat() for t in c.times].index(r["dump_time"])
        top = {q for q in oracles.select_top(vb[d], Fraction(str(r["top_n"]))) if q in gained}
        stale = sum(1 for q in top if gained[q] < CFG.stale_view_ceiling)
        if (r["n_top"], r["n_stale"]) != (len(top), stale):
            failures.append(f"forgotten signal dump {d} top {r['top_n']}")

    uniform = views_store(tmp_path / "uniform", {q: [0, 7, 14] for q in range(1, 1001)}, TIMES)
    worst = max(abs(r["share"] - r["top_k"])
                for r in view_concentration(uniform, TIMES[0], TIMES[1], [0.01, 0.05, 0.1, 0.15, 0.2, 0.5, 1.0]))
    if worst > 1e-12:
        failures.append(f"uniform share gap {worst:.1e}")
    record(9, failures, "concentration, overlap, growth histogram, closed comparison and forgotten signal match "
                        f"brute force on {len(c.times)} dumps; uniform share(K) - K at most {worst:.1e}")
