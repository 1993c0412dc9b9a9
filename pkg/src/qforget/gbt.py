"""Gradient-boosted decision trees for binary classification (logistic loss).

Second-order boosting: each round fits a regression tree to the gradients
``p - y`` and hessians ``p (1 - p)`` of the log-loss, choosing splits over
pre-computed histogram bins and setting leaf values to ``-G / (H + l2)``.
Missing values (NaN) get their own bin; every split learns whether they go left
or right.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

MODEL_MAGIC = b"QFGBT\x00"
MODEL_VERSION = 1


class BoostError(ValueError):
    pass


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 20
    histogram_bins: int = 256
    l2_leaf_regularization: float = 1.0
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValueError("n_rounds must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.histogram_bins < 2:
            raise ValueError("histogram_bins must be >= 2")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ValueError("max_depth must be >= 0 and min_samples_leaf >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")
        if self.l2_leaf_regularization < 0:
            raise ValueError("l2_leaf_regularization must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "BoostConfig":
        return cls(**d)


# --- loss -------------------------------------------------------------------


def sigmoid(x):
    x = np.asarray(x, np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_loss(raw: np.ndarray, y: np.ndarray) -> float:
    """Mean logistic loss of raw scores (log-odds)."""
    # log(1 + e^raw) - y * raw, computed stably
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def gradients(raw: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = sigmoid(raw)
    return p - y, p * (1.0 - p)


# --- binning ----------------------------------------------------------------


@dataclass
class Binner:
    """Global equal-frequency bins per feature.

    ``edges[f]`` holds the largest value of each bin, so bin ``b`` covers
    ``edges[f][b-1] < x <= edges[f][b]``.  NaN maps to the extra code ``len(edges[f])``.
    """

    max_bins: int
    edges: list[np.ndarray] = field(default_factory=list)

    def fit_column(self, x: np.ndarray) -> np.ndarray:
        v = np.sort(x[~np.isnan(x)])
        if len(v) == 0:
            return np.zeros(0, np.float64)
        distinct = np.unique(v)
        if len(distinct) <= self.max_bins:
            return distinct
        n = len(v)
        cut = np.ceil(np.arange(1, self.max_bins + 1) * n / self.max_bins).astype(np.int64) - 1
        return np.unique(v[cut])

    @staticmethod
    def code_column(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
        codes = np.searchsorted(edges, x, side="left").astype(np.int64)
        codes[np.isnan(x)] = len(edges)
        return codes

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(e) for e in self.edges], np.int64)


def _columns(X):
    """Yield each feature column as a float64 array (sparse columns densified one at a time)."""
    if hasattr(X, "dense") and hasattr(X, "sparse"):
        for j in range(X.dense.shape[1]):
            yield np.asarray(X.dense[:, j], np.float64)
        csc = X.sparse.tocsc()
        for j in range(csc.shape[1]):
            col = np.zeros(csc.shape[0], np.float64)
            lo, hi = csc.indptr[j], csc.indptr[j + 1]
            col[csc.indices[lo:hi]] = csc.data[lo:hi]
            yield col
    else:
        X = np.asarray(X, np.float64)
        for j in range(X.shape[1]):
            yield X[:, j]


def as_dense(X) -> np.ndarray:
    if hasattr(X, "dense") and hasattr(X, "sparse"):
        if X.sparse.shape[1] == 0:
            return np.ascontiguousarray(X.dense, np.float64)
        return np.hstack([X.dense, X.sparse.toarray()])
    return np.ascontiguousarray(np.asarray(X, np.float64))


def feature_names_of(X) -> list[str]:
    if hasattr(X, "names"):
        return list(X.names)
    return [f"f{j}" for j in range(np.asarray(X).shape[1])]


# --- numba kernels -------------------------------------------------------------


@njit(cache=True, nogil=True)
def _build_histogram(codes, rows, g, h, offsets, total_bins):
    hist = np.zeros((total_bins, 3), np.float64)
    n_features = codes.shape[1]
    for i in range(rows.shape[0]):
        r = rows[i]
        gi = g[r]
        hi = h[r]
        for f in range(n_features):
            b = offsets[f] + codes[r, f]
            hist[b, 0] += gi
            hist[b, 1] += hi
            hist[b, 2] += 1.0
    return hist


@njit(cache=True, nogil=True)
def _leaf_score(G, H, lam):
    return G * G / (H + lam)


@njit(cache=True, nogil=True)
def _find_split(hist, offsets, g_tot, h_tot, c_tot, lam, min_leaf):
    """Best (gain, feature, bin, missing_left) over all features; feature -1 if no split has positive gain."""
    best_gain = 0.0
    best_f = -1
    best_b = -1
    best_ml = False
    parent = _leaf_score(g_tot, h_tot, lam)
    n_features = offsets.shape[0] - 1
    for f in range(n_features):
        lo = offsets[f]
        miss = offsets[f + 1] - 1
        n_val = miss - lo
        gm = hist[miss, 0]
        hm = hist[miss, 1]
        cm = hist[miss, 2]
        gl = 0.0
        hl = 0.0
        cl = 0.0
        for b in range(n_val - 1):
            gl += hist[lo + b, 0]
            hl += hist[lo + b, 1]
            cl += hist[lo + b, 2]
            # missing to the right
            gr = g_tot - gl
            hr = h_tot - hl
            cr = c_tot - cl
            if cl >= min_leaf and cr >= min_leaf:
                gain = 0.5 * (_leaf_score(gl, hl, lam) + _leaf_score(gr, hr, lam) - parent)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = b
                    best_ml = False
            # missing to the left
            if cm > 0:
                gl2 = gl + gm
                hl2 = hl + hm
                cl2 = cl + cm
                if cl2 >= min_leaf and c_tot - cl2 >= min_leaf:
                    gain = 0.5 * (_leaf_score(gl2, hl2, lam) + _leaf_score(g_tot - gl2, h_tot - hl2, lam) - parent)
                    if gain > best_gain:
                        best_gain = gain
                        best_f = f
                        best_b = b
                        best_ml = True
        # all observed values left, missing alone on the right
        if cm > 0 and n_val > 0:
            gl = g_tot - gm
            hl = h_tot - hm
            cl = c_tot - cm
            if cl >= min_leaf and cm >= min_leaf:
                gain = 0.5 * (_leaf_score(gl, hl, lam) + _leaf_score(gm, hm, lam) - parent)
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_b = n_val - 1
                    best_ml = False
    return best_gain, best_f, best_b, best_ml


@njit(cache=True, nogil=True)
def _predict_raw(X, feature, threshold, missing_left, left, right, value):
    out = np.zeros(X.shape[0], np.float64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            x = X[i, feature[node]]
            if np.isnan(x):
                go_left = missing_left[node]
            else:
                go_left = x <= threshold[node]
            node = left[node] if go_left else right[node]
        out[i] = value[node]
    return out


# --- trees ------------------------------------------------------------------------


@dataclass
class RegressionTree:
    """Flat node arrays; leaves have ``feature == -1``.  ``value`` is already scaled."""

    feature: np.ndarray
    threshold: np.ndarray
    threshold_bin: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    n_samples: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def depth(self) -> int:
        def d(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(d(self.left[node]), d(self.right[node]))
        return d(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return _predict_raw(X, self.feature, self.threshold, self.missing_left, self.left, self.right, self.value)

    ARRAYS = (
        ("feature", "<i4"), ("threshold", "<f8"), ("threshold_bin", "<i4"), ("missing_left", "?"),
        ("left", "<i4"), ("right", "<i4"), ("value", "<f8"), ("gain", "<f8"), ("n_samples", "<i8"),
    )


class _TreeBuilder:
    def __init__(self, codes, offsets, edges, g, h, config: BoostConfig):
        self.codes = codes
        self.offsets = offsets
        self.edges = edges
        self.g = g
        self.h = h
        self.cfg = config
        self.total_bins = int(offsets[-1])
        self.nodes: list[list] = []

    def _new_node(self, rows, G, H):
        self.nodes.append([-1, math.nan, -1, False, -1, -1, 0.0, 0.0, len(rows)])
        return len(self.nodes) - 1

    def grow(self, rows: np.ndarray) -> RegressionTree:
        lam = self.cfg.l2_leaf_regularization
        G, H = float(self.g[rows].sum()), float(self.h[rows].sum())
        root = self._new_node(rows, G, H)
        hist = _build_histogram(self.codes, rows, self.g, self.h, self.offsets, self.total_bins)
        stack = [(root, rows, hist, G, H, 0)]
        while stack:
            node, idx, hist, G, H, depth = stack.pop()
            self.nodes[node][6] = -G / (H + lam)
            if depth >= self.cfg.max_depth or len(idx) < 2 * self.cfg.min_samples_leaf:
                continue
            gain, f, b, ml = _find_split(hist, self.offsets, G, H, float(len(idx)), lam, float(self.cfg.min_samples_leaf))
            if f < 0 or not gain > 0:
                continue
            col = self.codes[idx, f]
            n_val = self.offsets[f + 1] - self.offsets[f] - 1
            go_left = (col <= b) & (col < n_val) | ((col == n_val) & ml)
            li, ri = idx[go_left], idx[~go_left]
            small, large = (li, ri) if len(li) <= len(ri) else (ri, li)
            h_small = _build_histogram(self.codes, small, self.g, self.h, self.offsets, self.total_bins)
            h_large = hist - h_small
            hl, hr = (h_small, h_large) if small is li else (h_large, h_small)
            GL, HL = float(self.g[li].sum()), float(self.h[li].sum())
            GR, HR = float(self.g[ri].sum()), float(self.h[ri].sum())
            l_node = self._new_node(li, GL, HL)
            r_node = self._new_node(ri, GR, HR)
            rec = self.nodes[node]
            rec[0], rec[1], rec[2], rec[3], rec[4], rec[5], rec[7] = f, float(self.edges[f][b]), b, ml, l_node, r_node, gain
            stack.append((r_node, ri, hr, GR, HR, depth + 1))
            stack.append((l_node, li, hl, GL, HL, depth + 1))
        cols = list(zip(*self.nodes))
        return RegressionTree(*(np.array(c, dtype=dt) for c, (_, dt) in zip(cols, RegressionTree.ARRAYS)))


# --- ensemble -------------------------------------------------------------------


@dataclass
class BoostedEnsemble:
    config: BoostConfig
    feature_names: list[str]
    base_score: float
    trees: list[RegressionTree]
    importance: np.ndarray
    loss_trajectory: list[float]

    def decision_function(self, X) -> np.ndarray:
        Xd = as_dense(X)
        if Xd.shape[1] != len(self.feature_names):
            raise BoostError(f"expected {len(self.feature_names)} features, got {Xd.shape[1]}")
        raw = np.full(Xd.shape[0], self.base_score)
        for tree in self.trees:
            raw += tree.predict(Xd)
        return raw

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision_function(X))

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int8)

    def feature_importance(self) -> dict[str, float]:
        return dict(zip(self.feature_names, self.importance.tolist()))

    # serialization --------------------------------------------------------

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        meta = {
            "config": asdict(self.config),
            "feature_names": self.feature_names,
            "base_score": self.base_score,
            "loss_trajectory": self.loss_trajectory,
            "tree_sizes": [t.n_nodes for t in self.trees],
        }
        blob = json.dumps(meta, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(blob)) + blob)
            fh.write(np.ascontiguousarray(self.importance, "<f8").tobytes())
            for tree in self.trees:
                for name, dt in RegressionTree.ARRAYS:
                    fh.write(np.ascontiguousarray(getattr(tree, name), dt).tobytes())
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "BoostedEnsemble":
        data = Path(path).read_bytes()
        if data[:6] != MODEL_MAGIC:
            raise BoostError(f"{path}: not a model file")
        version, n = struct.unpack("<II", data[6:14])
        if version != MODEL_VERSION:
            raise BoostError(f"{path}: unsupported model version {version}")
        meta = json.loads(data[14:14 + n])
        pos = 14 + n
        n_feat = len(meta["feature_names"])
        importance = np.frombuffer(data, "<f8", n_feat, pos).copy()
        pos += 8 * n_feat
        trees = []
        for size in meta["tree_sizes"]:
            arrays = []
            for _, dt in RegressionTree.ARRAYS:
                a = np.frombuffer(data, dt, size, pos).copy()
                pos += a.nbytes
                arrays.append(a)
            trees.append(RegressionTree(*arrays))
        return cls(BoostConfig(**meta["config"]), meta["feature_names"], meta["base_score"], trees,
                   importance, meta["loss_trajectory"])


def fit(X, labels: Sequence[int], config: BoostConfig = BoostConfig()) -> BoostedEnsemble:
    """Fit a boosted ensemble on ``X`` (an array or a FeatureMatrix) and 0/1 labels."""
    y = np.asarray(labels, np.float64)
    n = len(y)
    if n == 0:
        raise BoostError("no training rows")
    if not np.isin(y, (0.0, 1.0)).all():
        raise BoostError("labels must be 0/1")
    prevalence = y.mean()
    if prevalence in (0.0, 1.0):
        raise BoostError("training labels contain a single class")

    binner = Binner(config.histogram_bins)
    code_cols = []
    for col in _columns(X):
        if len(col) != n:
            raise BoostError("feature matrix rows do not match labels")
        edges = binner.fit_column(col)
        binner.edges.append(edges)
        code_cols.append(Binner.code_column(col, edges))
    n_features = len(code_cols)
    if n_features:
        codes = np.ascontiguousarray(np.stack(code_cols, axis=1), dtype=np.int32)
    else:
        codes = np.zeros((n, 0), np.int32)
    offsets = np.zeros(n_features + 1, np.int64)
    np.cumsum(binner.n_bins + 1, out=offsets[1:])

    base = math.log(prevalence / (1.0 - prevalence))
    raw = np.full(n, base)
    rng = np.random.default_rng(config.seed)
    importance = np.zeros(n_features, np.float64)
    trees: list[RegressionTree] = []
    losses: list[float] = []
    all_rows = np.arange(n, dtype=np.int64)
    for _ in range(config.n_rounds):
        g, h = gradients(raw, y)
        rows = all_rows
        if config.subsample < 1.0:
            k = max(1, int(round(config.subsample * n)))
            rows = np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
        tree = _TreeBuilder(codes, offsets, binner.edges, g, h, config).grow(rows)
        tree.value *= config.learning_rate
        internal = tree.feature >= 0
        np.add.at(importance, tree.feature[internal], tree.gain[internal])
        # training rows are routed by bin code, identical to raw-value routing
        raw = raw + _predict_codes(codes, offsets, tree)
        trees.append(tree)
        losses.append(log_loss(raw, y))
    return BoostedEnsemble(config, feature_names_of(X), base, trees, importance, losses)


def _predict_codes(codes, offsets, tree: RegressionTree) -> np.ndarray:
    n_val = (offsets[1:] - offsets[:-1] - 1)
    return _predict_binned(codes, n_val, tree.feature, tree.threshold_bin, tree.missing_left,
                           tree.left, tree.right, tree.value)


@njit(cache=True, nogil=True)
def _predict_binned(codes, n_val, feature, threshold_bin, missing_left, left, right, value):
    out = np.zeros(codes.shape[0], np.float64)
    for i in range(codes.shape[0]):
        node = 0
        while feature[node] >= 0:
            f = feature[node]
            c = codes[i, f]
            if c == n_val[f]:
                go_left = missing_left[node]
            else:
                go_left = c <= threshold_bin[node]
            node = left[node] if go_left else right[node]
        out[i] = value[node]
    return out


def predict_proba(model: BoostedEnsemble, X) -> np.ndarray:
    return model.predict_proba(X)


def feature_importance(model: BoostedEnsemble) -> dict[str, float]:
    return model.feature_importance()
