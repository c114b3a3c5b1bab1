"""Gradient boosted regression trees on logistic loss, with F1 threshold tuning."""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# relative slack under which two split gains count as tied
_GAIN_TIE = 1e-12


@dataclass
class GbmConfig:
    num_trees: int = 200
    max_depth: int = 5
    learning_rate: float = 0.1
    min_samples_leaf: int = 20
    subsample: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if not 0 < self.learning_rate <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


@dataclass
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf.  x <= threshold goes left."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        active = feat[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, feat[nd]] <= thr[nd]
            node[idx] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return np.asarray(self.value)[node]

    def to_record(self) -> dict:
        def rec(i):
            if self.feature[i] < 0:
                return {"leaf": self.value[i]}
            return {
                "feature": self.feature[i],
                "threshold": self.threshold[i],
                "left": rec(self.left[i]),
                "right": rec(self.right[i]),
            }

        return rec(0)

    @classmethod
    def from_record(cls, record: dict) -> "Tree":
        t = cls()

        def build(r):
            if "leaf" in r:
                return t._add(value=float(r["leaf"]))
            i = t._add(int(r["feature"]), float(r["threshold"]))
            t.left[i] = build(r["left"])
            t.right[i] = build(r["right"])
            return i

        build(record)
        return t


@dataclass
class GbmModel:
    initial_score: float
    trees: list[Tree]
    learning_rate: float
    n_features: int
    threshold: float = 0.5
    columns: list[str] | None = None

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        score = np.full(len(X), self.initial_score)
        for t in self.trees:
            score += self.learning_rate * t.predict(X)
        return score


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    # clipping keeps the result strictly inside (0, 1) in float64
    return 1.0 / (1.0 + np.exp(-np.clip(z, -35.0, 35.0)))


def log_loss(y: np.ndarray, score: np.ndarray) -> float:
    # log(1 + e^s) - y s, computed stably
    return float(np.mean(np.logaddexp(0.0, score) - y * score))


def _scan(xs: np.ndarray, rs: np.ndarray, total: float, min_leaf: int):
    """Split gains for presorted columns.

    ``xs``/``rs`` are (features, n), each row sorted by feature value.  Only
    cuts leaving ``min_leaf`` rows on both sides are scored; returns
    (gain, offset) where ``gain[:, j]`` is the cut after sorted position
    ``offset + j`` and invalid cuts (equal neighbours) hold -inf.
    """
    n = xs.shape[1]
    lo, hi = min_leaf - 1, n - min_leaf
    if hi <= lo:
        return np.empty((xs.shape[0], 0)), lo
    sl = np.cumsum(rs, axis=1)[:, lo:hi]
    nl = np.arange(lo + 1, hi + 1, dtype=float)
    sr = total - sl
    sr *= sr
    sr /= n - nl
    gain = sl * sl
    gain /= nl
    gain += sr
    gain -= total * total / n
    gain[xs[:, lo:hi] >= xs[:, lo + 1 : hi + 1]] = -np.inf
    return gain, lo


def _pick(scan, xs: np.ndarray, tol_rel: float = _GAIN_TIE):
    """Best (gain, feature, threshold) from a ``_scan`` result.

    Gains within a relative tolerance of the best count as tied; ties go to
    the lower feature index, then the lower threshold.
    """
    gain, lo = scan
    if gain.size == 0:
        return None
    top = float(gain.max())
    if not top > 0:
        return None
    tol = tol_rel * max(1.0, abs(top))
    f, j = np.argwhere(gain >= top - tol)[0]
    i = lo + j
    return float(gain[f, j]), int(f), _midpoint(xs[f, i], xs[f, i + 1])


def best_split(X: np.ndarray, r: np.ndarray, rows: np.ndarray, min_leaf: int):
    """Exact greedy split of ``rows`` minimizing squared error of residuals ``r``.

    Returns (gain, feature, threshold) or None.  Near-ties prefer the lower
    feature index, then the lower threshold.
    """
    rows = np.sort(np.asarray(rows))
    if len(rows) < 2 * min_leaf:
        return None
    sub = X[rows]
    order = np.argsort(sub, axis=0, kind="stable").T
    xs = np.take_along_axis(sub.T, order, axis=1)
    rs = r[rows][order]
    return _pick(_scan(xs, rs, r[rows].sum(), min_leaf), xs)


def _midpoint(a: float, b: float) -> float:
    m = a + (b - a) / 2.0
    # adjacent floats: the midpoint can round up to b, which would send b left
    return m if m < b else a


def _fit_tree(X, r, h, rows, config: GbmConfig, presorted=None) -> Tree:
    """Grow one tree.  ``presorted`` holds a stable argsort of every column
    (features, n); node orders come from filtering it, never from re-sorting."""
    tree = Tree()
    n_all, n_feat = X.shape
    if presorted is None:
        presorted = np.argsort(X, axis=0, kind="stable").T
    member = np.zeros(n_all, dtype=bool)
    member[rows] = True
    keep = member[presorted]
    orders = presorted[keep].reshape(n_feat, -1)
    xs = np.take_along_axis(X.T, presorted, axis=1)[keep].reshape(n_feat, -1)
    rs = r[orders]

    def leaf(node_rows):
        node_rows = np.sort(node_rows)
        denom = h[node_rows].sum()
        val = r[node_rows].sum() / denom if denom > 1e-12 else 0.0
        return tree._add(value=float(val))

    def grow(orders, xs, rs, depth):
        node_rows = orders[0]
        n = len(node_rows)
        if depth >= config.max_depth or n < 2 * config.min_samples_leaf:
            return leaf(node_rows)
        # row-index order for the total, as in best_split, so both agree exactly
        split = _pick(_scan(xs, rs, r[np.sort(node_rows)].sum(), config.min_samples_leaf), xs)
        if split is None:
            return leaf(node_rows)
        _, f, thr = split
        node = tree._add(f, thr)
        go_left = np.zeros(n_all, dtype=bool)
        go_left[node_rows[X[node_rows, f] <= thr]] = True
        m = go_left[orders].ravel()
        li, ri = np.flatnonzero(m), np.flatnonzero(~m)
        n_left = len(li) // n_feat
        parts = [
            (a.take(li).reshape(n_feat, n_left), a.take(ri).reshape(n_feat, n - n_left))
            for a in (orders, xs, rs)
        ]
        tree.left[node] = grow(*(p[0] for p in parts), depth + 1)
        tree.right[node] = grow(*(p[1] for p in parts), depth + 1)
        return node

    grow(orders, xs, rs, 0)
    return tree


def fit(X, y, config: GbmConfig, loss_trace: list | None = None, columns=None) -> GbmModel:
    """Friedman gradient boosting on logistic loss with Newton leaf values."""
    config.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if len(y) < 2:
        raise ValueError("need at least 2 examples")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    if not set(np.unique(y)) <= {0.0, 1.0}:
        raise ValueError("labels must be 0/1")
    base = y.mean()
    if base in (0.0, 1.0):
        raise ValueError("both classes must be present")
    init = math.log(base / (1 - base))
    model = GbmModel(init, [], config.learning_rate, X.shape[1], columns=list(columns) if columns else None)
    score = np.full(len(y), init)
    rng = np.random.default_rng(config.seed)
    if loss_trace is not None:
        loss_trace.append(log_loss(y, score))
    all_rows = np.arange(len(y))
    presorted = np.argsort(X, axis=0, kind="stable").T
    for _ in range(config.num_trees):
        p = sigmoid(score)
        r = y - p
        h = p * (1 - p)
        if config.subsample < 1.0:
            m = max(1, int(round(config.subsample * len(y))))
            rows = np.sort(rng.choice(len(y), size=m, replace=False))
        else:
            rows = all_rows
        tree = _fit_tree(X, r, h, rows, config, presorted)
        model.trees.append(tree)
        score += config.learning_rate * tree.predict(X)
        if loss_trace is not None:
            loss_trace.append(log_loss(y, score))
    return model


def predict_proba(model: GbmModel, X) -> np.ndarray | float:
    single = np.ndim(X) == 1
    p = sigmoid(model.decision_function(X))
    return float(p[0]) if single else p


def f1_score(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def threshold_candidates(probs) -> np.ndarray:
    """Midpoints between sorted distinct probabilities, plus one point below the minimum."""
    u = np.unique(np.asarray(probs, dtype=float))
    mids = u[:-1] + (u[1:] - u[:-1]) / 2.0
    return np.concatenate([[u[0] / 2.0], mids])


def tune_threshold(probs, labels) -> float:
    """Threshold maximizing F1 of (prob > tau); ties go to the smaller tau."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(probs) != len(labels) or len(probs) == 0:
        raise ValueError("probs and labels must be non-empty and aligned")
    if labels.min() == labels.max():
        raise ValueError("both classes must be present")
    cands = threshold_candidates(probs)
    # sweep: sort by prob descending, count positives above each candidate
    order = np.argsort(-probs, kind="stable")
    sp_, sl = probs[order], labels[order]
    ctp = np.concatenate([[0], np.cumsum(sl)])
    n_pos = int(labels.sum())
    best_tau, best_f1 = None, Fraction(-1)
    for tau in cands:
        k = int(np.searchsorted(-sp_, -tau, side="left"))  # number of probs > tau
        tp = int(ctp[k])
        fp = k - tp
        # exact F1 = 2tp / (2tp + fp + fn); float rounding would split true ties
        f1 = Fraction(2 * tp, 2 * tp + fp + (n_pos - tp))
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau


def average_precision(scores, labels) -> float:
    """Area under the precision-recall curve as step-wise average precision."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # group tied scores so their order does not matter
    last = np.r_[np.nonzero(s[1:] != s[:-1])[0], len(s) - 1]
    tp = np.cumsum(l)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def stratified_holdout(labels, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, holdout) with ``fraction`` of each class held out."""
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    hold = []
    for cls in (0, 1):
        idx = np.nonzero(labels == cls)[0]
        k = int(math.floor(len(idx) * fraction + 0.5))
        if len(idx) >= 2:
            k = min(max(k, 1), len(idx) - 1)
        else:
            k = 0
        hold.append(rng.permutation(idx)[:k])
    holdout = np.sort(np.concatenate(hold))
    mask = np.ones(len(labels), dtype=bool)
    mask[holdout] = False
    return np.nonzero(mask)[0], holdout


def fit_with_threshold(X, y, config: GbmConfig, validation_fraction: float = 0.1, columns=None) -> GbmModel:
    """Fit on a stratified 90% slice and pick the F1-optimal threshold on the rest."""
    y = np.asarray(y, dtype=int)
    tr, va = stratified_holdout(y, validation_fraction, config.seed)
    model = fit(np.asarray(X)[tr], y[tr], config, columns=columns)
    if len(va) and y[va].min() != y[va].max():
        model.threshold = tune_threshold(predict_proba(model, np.asarray(X)[va]), y[va])
    return model


def save_model(path: str | Path, model: GbmModel) -> None:
    rec = {
        "initial_score": model.initial_score,
        "learning_rate": model.learning_rate,
        "n_features": model.n_features,
        "threshold": model.threshold,
        "columns": model.columns,
        "trees": [t.to_record() for t in model.trees],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(rec, fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> GbmModel:
    with open(path, encoding="utf-8") as fh:
        rec = json.load(fh)
    return GbmModel(
        initial_score=rec["initial_score"],
        trees=[Tree.from_record(t) for t in rec["trees"]],
        learning_rate=rec["learning_rate"],
        n_features=rec["n_features"],
        threshold=rec["threshold"],
        columns=rec.get("columns"),
    )
