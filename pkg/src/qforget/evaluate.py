"""Experiment harness: feature-set comparison over repeated random splits.

For every dataset the dense feature blocks and raw documents are computed once.
Each run draws one seeded train/test split that is shared by all feature sets, fits
the tf-idf vocabularies on the training rows, trains a boosted ensemble per
feature set and scores F1 (positive class: being forgotten) and accuracy on the
test rows.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from . import gbt
from ._io import write_json, write_table
from .cohort import CohortConfig, CohortDataset, build_dataset
from .features import GROUPS, FeatureContext, FeatureSpec, FeatureMatrix, dense_schema
from .records import dump_label, parse_timestamp
from .store import SnapshotStore
from .text import DEFAULT_VOCAB_CAPS, TEXT_FIELDS, TextModel, fit_text_model

log = logging.getLogger(__name__)

MAX_REDRAWS = 10

# feature set -> (dense groups, tf-idf fields)
FEATURE_SETS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "tfidf-body": ((), ("body",)),
    "tfidf-title": ((), ("title",)),
    "tfidf-tag": ((), ("tags",)),
    "tfidf-(body+title)": ((), ("body", "title")),
    "Text": ((), TEXT_FIELDS),
    "Question": (("question",), ()),
    "User": (("user",), ()),
    "Answer": (("answer",), ()),
    "Tag": (("tag",), ()),
    "Question+User": (("question", "user"), ()),
    "Question+User+Answer": (("question", "user", "answer"), ()),
    "Question+User+Answer+Tag": (("question", "user", "answer", "tag"), ()),
    "All": (("question", "user", "answer", "tag"), TEXT_FIELDS),
}
ALL_FEATURE_SETS = tuple(FEATURE_SETS)


class PlanError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    store: str
    triple: tuple[datetime, datetime, datetime]
    gap_months: int

    def to_dict(self) -> dict:
        return {"name": self.name, "store": self.store, "gap_months": self.gap_months,
                "triple": [t.isoformat() for t in self.triple]}


@dataclass(frozen=True)
class ExperimentPlan:
    datasets: tuple[DatasetSpec, ...]
    feature_sets: tuple[str, ...] = ALL_FEATURE_SETS
    n_runs: int = 5
    train_fraction: float = 0.9
    seed: int = 0
    n_bins: int = 10
    bin_mode: str = "within"            # or "global"
    bin_feature_set: str = "All"
    importance_feature_set: str = "All"
    top_k: int = 10
    boost: gbt.BoostConfig = gbt.BoostConfig()
    cohort: dict = field(default_factory=dict)
    vocab_caps: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB_CAPS))

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise PlanError("train_fraction must lie in (0, 1)")
        if self.n_runs < 1:
            raise PlanError("n_runs must be >= 1")
        if self.n_bins < 1:
            raise PlanError("n_bins must be >= 1")
        if self.bin_mode not in ("within", "global"):
            raise PlanError("bin_mode must be 'within' or 'global'")
        for fs in (*self.feature_sets, self.bin_feature_set, self.importance_feature_set):
            if fs not in FEATURE_SETS:
                raise PlanError(f"unknown feature set {fs!r}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise PlanError("dataset names must be unique")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentPlan":
        d = dict(d)
        try:
            datasets = tuple(
                DatasetSpec(s["name"], s["store"], tuple(parse_timestamp(t) for t in s["triple"]), int(s["gap_months"]))
                for s in d.pop("datasets")
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanError(f"bad dataset entry: {exc}") from exc
        if any(len(s.triple) != 3 for s in datasets):
            raise PlanError("every dataset needs a triple of three dump times")
        boost = gbt.BoostConfig.from_dict(d.pop("boost", {}))
        if "feature_sets" in d:
            d["feature_sets"] = tuple(d["feature_sets"])
        caps = {**DEFAULT_VOCAB_CAPS, **d.pop("vocab_caps", {})}
        try:
            return cls(datasets=datasets, boost=boost, vocab_caps=caps, **d)
        except TypeError as exc:
            raise PlanError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentPlan":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise PlanError(f"{path}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "datasets": [s.to_dict() for s in self.datasets],
            "feature_sets": list(self.feature_sets),
            "n_runs": self.n_runs,
            "train_fraction": self.train_fraction,
            "seed": self.seed,
            "n_bins": self.n_bins,
            "bin_mode": self.bin_mode,
            "bin_feature_set": self.bin_feature_set,
            "importance_feature_set": self.importance_feature_set,
            "top_k": self.top_k,
            "boost": asdict(self.boost),
            "cohort": dict(self.cohort),
            "vocab_caps": dict(self.vocab_caps),
        }


# --- metrics --------------------------------------------------------------------


def confusion(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[int, int, int, int]:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    return int((t & p).sum()), int((~t & p).sum()), int((t & ~p).sum()), int((~t & ~p).sum())


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def f1_score(y_true, y_pred) -> float:
    tp, fp, fn, _ = confusion(y_true, y_pred)
    return f1_from_counts(tp, fp, fn)


def accuracy(y_true, y_pred) -> float:
    tp, fp, fn, tn = confusion(y_true, y_pred)
    return (tp + tn) / (tp + fp + fn + tn)


# --- prepared data ----------------------------------------------------------------


@dataclass
class PreparedDataset:
    """A labeled cohort with every dense feature block and raw document precomputed."""

    name: str
    gap_months: int
    dataset: CohortDataset
    blocks: dict[str, np.ndarray]
    docs: dict[str, list[str]]

    @property
    def labels(self) -> np.ndarray:
        return self.dataset.labels

    def with_labels(self, labels: np.ndarray) -> "PreparedDataset":
        return PreparedDataset(self.name, self.gap_months, self.dataset.with_labels(labels), self.blocks, self.docs)

    def subset(self, rows: np.ndarray) -> "PreparedDataset":
        return PreparedDataset(
            self.name, self.gap_months, self.dataset.subset(rows),
            {g: b[rows] for g, b in self.blocks.items()},
            {f: [d[i] for i in rows] for f, d in self.docs.items()},
        )


def prepare(store: SnapshotStore, dataset: CohortDataset, name: str = "dataset") -> PreparedDataset:
    ctx = FeatureContext(store, dataset.prediction_time, dataset.config.gap_months)
    ids = dataset.question_ids
    blocks = {g: ctx.block(g, ids) for g in GROUPS if g != "text"}
    return PreparedDataset(name, dataset.config.gap_months, dataset, blocks, ctx.documents(ids))


def resolve_store(spec: DatasetSpec, base_dir: str | os.PathLike | None) -> Path:
    p = Path(spec.store)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


def check_plan(plan: ExperimentPlan, base_dir=None) -> None:
    """Fail before any training if a store or dump time is missing."""
    if not plan.datasets:
        raise PlanError("the plan lists no datasets")
    for spec in plan.datasets:
        path = resolve_store(spec, base_dir)
        if not (path / "manifest.json").exists():
            raise PlanError(f"dataset {spec.name!r}: no store at {path}")
        have = set(SnapshotStore(path, create=False).dump_times())
        missing = [dump_label(t) for t in spec.triple if t not in have]
        if missing:
            raise PlanError(f"dataset {spec.name!r}: store {path} lacks dump(s) {missing}")


def prepare_plan(plan: ExperimentPlan, base_dir=None) -> list[PreparedDataset]:
    check_plan(plan, base_dir)
    out = []
    for spec in plan.datasets:
        store = SnapshotStore(resolve_store(spec, base_dir), create=False)
        cfg = CohortConfig.from_dict({**plan.cohort, "gap_months": spec.gap_months})
        ds = build_dataset(store, *spec.triple, cfg)
        out.append(prepare(store, ds, spec.name))
    return out


# --- design matrices ----------------------------------------------------------------


class _RunFeatures:
    """Design matrices of one dataset under one train/test split."""

    def __init__(self, data: PreparedDataset, train: np.ndarray, vocab_caps: Mapping[str, int], fields: Iterable[str]):
        self.data = data
        self.fields = tuple(f for f in TEXT_FIELDS if f in set(fields))
        self.text_model: TextModel | None = None
        self.weights: dict[str, sp.csr_matrix] = {}
        if self.fields:
            train_docs = {f: [data.docs[f][i] for i in train] for f in self.fields}
            self.text_model = fit_text_model(train_docs, vocab_caps)
            for f in self.fields:
                self.weights[f] = self.text_model.fields[f].transform(data.docs[f])

    def matrix(self, feature_set: str) -> FeatureMatrix:
        groups, fields = FEATURE_SETS[feature_set]
        schema = dense_schema(groups)
        parts = [self.data.blocks[g] for g in GROUPS if g in groups]
        n = self.data.dataset.n_total
        dense = np.hstack(parts) if parts else np.zeros((n, 0))
        sparse = None
        if fields:
            sparse = sp.hstack([self.weights[f] for f in fields], format="csr")
            schema = schema + [FeatureSpec(name, "text", "sparse-text-weight", "none")
                               for name in self.text_model.feature_names(list(fields))]
        return FeatureMatrix(schema, self.data.dataset.question_ids, dense, sparse)


def _split_seed(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def draw_split(labels: np.ndarray, train_fraction: float, rng: np.random.Generator,
               max_redraws: int = MAX_REDRAWS) -> tuple[np.ndarray, np.ndarray, int]:
    """Uniform random split whose test part holds both classes.

    Returns sorted train and test row indices and the number of rejected draws.
    """
    y = np.asarray(labels).astype(bool)
    n = len(y)
    n_train = int(round(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ExperimentError(f"cannot split {n} rows at train fraction {train_fraction}")
    for attempt in range(max_redraws + 1):
        perm = rng.permutation(n)
        train, test = np.sort(perm[:n_train]), np.sort(perm[n_train:])
        if y[test].any() and not y[test].all():
            return train, test, attempt
    raise ExperimentError(f"no split with both classes in the test part after {max_redraws} redraws")


# --- results -------------------------------------------------------------------


@dataclass
class CellResult:
    dataset: str
    gap_months: int
    feature_set: str
    f1_runs: list[float]
    accuracy_runs: list[float]

    @property
    def f1(self) -> float:
        return float(np.mean(self.f1_runs))

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracy_runs))


@dataclass
class BinResult:
    dataset: str
    bin: int
    n: int
    view_min: int
    view_max: int
    forgotten_fraction: float
    f1: float
    degenerate: bool


@dataclass
class ExperimentReport:
    plan: ExperimentPlan
    cells: list[CellResult]
    bins: list[BinResult]
    importance: list[tuple[str, float]]
    datasets: dict[str, dict]
    redraws: dict[str, int]
    runtimes: dict[str, float]

    def cell(self, dataset: str, feature_set: str) -> CellResult:
        for c in self.cells:
            if c.dataset == dataset and c.feature_set == feature_set:
                return c
        raise KeyError((dataset, feature_set))

    def gaps(self) -> list[int]:
        return sorted({c.gap_months for c in self.cells})

    def table(self) -> list[dict]:
        """Per feature set and gap: min/max/avg over datasets of the run means (in percent)."""
        rows = []
        for fs in self.plan.feature_sets:
            row: dict = {"feature_set": fs}
            for gap in self.gaps():
                cells = [c for c in self.cells if c.feature_set == fs and c.gap_months == gap]
                for metric in ("f1", "accuracy"):
                    vals = np.array([100.0 * getattr(c, metric) for c in cells])
                    row[f"{gap}m_{metric}_min"] = float(vals.min())
                    row[f"{gap}m_{metric}_max"] = float(vals.max())
                    row[f"{gap}m_{metric}_avg"] = float(vals.mean())
            rows.append(row)
        return rows

    def table_columns(self) -> list[str]:
        cols = ["feature_set"]
        for gap in self.gaps():
            for metric in ("f1", "accuracy"):
                cols += [f"{gap}m_{metric}_{agg}" for agg in ("min", "max", "avg")]
        return cols


# --- protocol ------------------------------------------------------------------------


def _fit_score(matrix: FeatureMatrix, labels: np.ndarray, train: np.ndarray, test: np.ndarray,
               config: gbt.BoostConfig):
    model = gbt.fit(matrix.rows(train), labels[train], config)
    pred = model.predict(matrix.rows(test))
    return model, pred


def _run_dataset(plan: ExperimentPlan, index: int, data: PreparedDataset, pool) -> tuple[list[CellResult], dict, int]:
    labels = data.labels
    f1s = {fs: [] for fs in plan.feature_sets}
    accs = {fs: [] for fs in plan.feature_sets}
    importance: dict[str, float] = {}
    redraws = 0
    sets = list(dict.fromkeys([*plan.feature_sets, plan.importance_feature_set]))
    fields = {f for fs in sets for f in FEATURE_SETS[fs][1]}
    for run in range(plan.n_runs):
        train, test, r = draw_split(labels, plan.train_fraction, _split_seed(plan.seed, index, run))
        redraws += r
        assert len(np.intersect1d(train, test)) == 0 and len(train) + len(test) == len(labels)
        if labels[train].all() or not labels[train].any():
            raise ExperimentError(f"{data.name}: run {run} has a single-class training split")
        feats = _RunFeatures(data, train, plan.vocab_caps, fields)

        def job(fs):
            return fs, _fit_score(feats.matrix(fs), labels, train, test, plan.boost)

        for fs, (model, pred) in pool.map(job, sets):
            if fs in f1s:
                f1s[fs].append(f1_score(labels[test], pred))
                accs[fs].append(accuracy(labels[test], pred))
            if fs == plan.importance_feature_set:
                for name, v in model.feature_importance().items():
                    importance[name] = importance.get(name, 0.0) + v / plan.n_runs
    cells = [CellResult(data.name, data.gap_months, fs, f1s[fs], accs[fs]) for fs in plan.feature_sets]
    return cells, importance, redraws


def equal_count_bins(current_views: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Row indices sorted by current views (ties by row order), cut into equal-count bins."""
    order = np.argsort(np.asarray(current_views), kind="stable")
    return [np.sort(b) for b in np.array_split(order, n_bins)]


def bin_analysis(data: PreparedDataset, plan: ExperimentPlan, index: int = 0) -> list[BinResult]:
    """F1 per current-views bin; ``plan.bin_mode`` picks within-bin or global models."""
    labels = data.labels
    views = data.dataset.current_views
    bins = equal_count_bins(views, plan.n_bins)
    fields = FEATURE_SETS[plan.bin_feature_set][1]
    scores: list[list[float]] = [[] for _ in bins]
    degenerate = [False] * len(bins)

    if plan.bin_mode == "global":
        bin_of = np.empty(len(labels), np.int64)
        for b, rows in enumerate(bins):
            bin_of[rows] = b
        for run in range(plan.n_runs):
            train, test, _ = draw_split(labels, plan.train_fraction, _split_seed(plan.seed, index, run))
            feats = _RunFeatures(data, train, plan.vocab_caps, fields)
            _, pred = _fit_score(feats.matrix(plan.bin_feature_set), labels, train, test, plan.boost)
            for b in range(len(bins)):
                sel = bin_of[test] == b
                if sel.any():
                    scores[b].append(f1_score(labels[test][sel], pred[sel]))
    else:
        for b, rows in enumerate(bins):
            sub = data.subset(rows)
            y = sub.labels
            for run in range(plan.n_runs):
                try:
                    train, test, _ = draw_split(y, plan.train_fraction, _split_seed(plan.seed, index, run))
                except ExperimentError:
                    degenerate[b] = True
                    break
                if y[train].all() or not y[train].any():
                    degenerate[b] = True
                    break
                feats = _RunFeatures(sub, train, plan.vocab_caps, fields)
                _, pred = _fit_score(feats.matrix(plan.bin_feature_set), y, train, test, plan.boost)
                scores[b].append(f1_score(y[test], pred))

    out = []
    for b, rows in enumerate(bins):
        ok = not degenerate[b] and len(scores[b]) > 0
        out.append(BinResult(
            data.name, b + 1, len(rows),
            int(views[rows].min()) if len(rows) else 0, int(views[rows].max()) if len(rows) else 0,
            float(labels[rows].mean()) if len(rows) else math.nan,
            float(np.mean(scores[b])) if ok else math.nan, not ok,
        ))
    return out


def rank_features(importance_maps: Sequence[Mapping[str, float]], top_k: int | None = None) -> list[tuple[str, float]]:
    """Mean importance per feature across datasets, as percentages of the total, descending."""
    if not importance_maps:
        return []
    names = sorted({n for m in importance_maps for n in m})
    means = np.array([sum(m.get(n, 0.0) for m in importance_maps) / len(importance_maps) for n in names])
    total = means.sum()
    pct = 100.0 * means / total if total > 0 else np.zeros_like(means)
    ranked = sorted(zip(names, pct.tolist()), key=lambda kv: (-kv[1], kv[0]))
    return ranked[:top_k] if top_k else ranked


def run_prepared(plan: ExperimentPlan, prepared: Sequence[PreparedDataset], jobs: int = 1,
                 with_bins: bool = True) -> ExperimentReport:
    cells: list[CellResult] = []
    bins: list[BinResult] = []
    maps, redraws, runtimes, described = [], {}, {}, {}
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for i, data in enumerate(prepared):
            start = time.perf_counter()
            c, imp, r = _run_dataset(plan, i, data, pool)
            cells += c
            maps.append(imp)
            redraws[data.name] = r
            if with_bins:
                bins += bin_analysis(data, plan, i)
            runtimes[data.name] = time.perf_counter() - start
            described[data.name] = {"gap_months": data.gap_months, **data.dataset.describe()}
            log.info("dataset=%s rows=%d seconds=%.1f", data.name, data.dataset.n_total, runtimes[data.name])
    return ExperimentReport(plan, cells, bins, rank_features(maps), described, redraws, runtimes)


def run_experiment(plan: ExperimentPlan, base_dir=None, jobs: int = 1, with_bins: bool = True) -> ExperimentReport:
    """Build every dataset of the plan from its store and run the full protocol."""
    prepared = prepare_plan(plan, base_dir)
    return run_prepared(plan, prepared, jobs, with_bins)


# --- output ----------------------------------------------------------------------


def write_report(report: ExperimentReport, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write the report files.  Wall-clock timings go to ``runtimes.json`` only,
    so every other file is byte-identical across re-runs with the same plan."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = report.plan.to_dict()
    paths = {}
    cols = report.table_columns()
    paths["table"] = write_table(out / "summary.csv", cols, ([r[c] for c in cols] for r in report.table()), cfg)
    paths["cells"] = write_table(
        out / "cells.csv", ["dataset", "gap_months", "feature_set", "f1", "accuracy", "f1_runs", "accuracy_runs"],
        ([c.dataset, c.gap_months, c.feature_set, c.f1, c.accuracy,
          " ".join(repr(v) for v in c.f1_runs), " ".join(repr(v) for v in c.accuracy_runs)] for c in report.cells),
        cfg,
    )
    paths["bins"] = write_table(
        out / "bins.csv", ["dataset", "bin", "n", "view_min", "view_max", "forgotten_fraction", "f1", "degenerate"],
        ([b.dataset, b.bin, b.n, b.view_min, b.view_max, b.forgotten_fraction, b.f1, int(b.degenerate)]
         for b in report.bins),
        cfg,
    )
    paths["importance"] = write_table(
        out / "importance.csv", ["rank", "feature", "percent"],
        ([i + 1, name, pct] for i, (name, pct) in enumerate(report.importance)), cfg,
    )
    paths["top_features"] = write_table(
        out / "top_features.csv", ["rank", "feature", "percent"],
        ([i + 1, name, pct] for i, (name, pct) in enumerate(report.importance[: report.plan.top_k])), cfg,
    )
    paths["manifest"] = write_json(out / "manifest.json", {
        "plan": cfg,
        "seeds": {"plan": report.plan.seed, "boost": report.plan.boost.seed},
        "datasets": report.datasets,
        "split_redraws": report.redraws,
        "files": sorted(p.name for p in paths.values()),
    }, cfg)
    paths["runtimes"] = write_json(out / "runtimes.json", {"seconds": report.runtimes}, cfg)
    return paths
