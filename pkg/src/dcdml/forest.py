"""CART regression trees and bagged random forests in plain numpy.

One tree type serves both tasks: with 0/1 targets the squared-error split
criterion ranks splits exactly like the Gini criterion (both are
proportional to n p (1 - p) per node), and leaf means are class-1
probabilities.
"""

from __future__ import annotations

import numpy as np


class DecisionTree:
    """Greedy squared-error regression tree.

    Parameters
    ----------
    max_features : int or None
        Number of candidate features drawn (without replacement) at each
        node. ``None`` uses all features.
    max_depth : int or None
        Depth limit; ``None`` grows until the leaf-size limit binds.
    min_leaf : int
        Minimum number of training rows in each child.
    rng : numpy.random.Generator
        Source of feature subsampling.
    """

    def __init__(self, max_features=None, max_depth=None, min_leaf=5, rng=None):
        self.max_features = max_features
        self.max_depth = max_depth
        self.min_leaf = max(1, int(min_leaf))
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        n, m = X.shape
        k_feat = m if self.max_features is None else max(1, min(m, int(self.max_features)))
        max_depth = np.inf if self.max_depth is None else self.max_depth
        leaf = self.min_leaf

        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(rows):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(float(y[rows].mean()))
            return len(feature) - 1

        stack = [(np.arange(n), 0, new_node(np.arange(n)))]
        while stack:
            rows, depth, node = stack.pop()
            n_node = rows.shape[0]
            if n_node < 2 * leaf or depth >= max_depth:
                continue
            yn = y[rows]
            if yn.max() - yn.min() <= 0.0:
                continue
            feats = self.rng.choice(m, k_feat, replace=False) if k_feat < m else np.arange(m)
            split = _best_split(X[np.ix_(rows, feats)], yn, leaf)
            if split is None:
                continue
            col, thr = split
            f = int(feats[col])
            go_left = X[rows, f] <= thr
            l_rows, r_rows = rows[go_left], rows[~go_left]
            feature[node] = f
            threshold[node] = thr
            left[node] = new_node(l_rows)
            right[node] = new_node(r_rows)
            stack.append((l_rows, depth + 1, left[node]))
            stack.append((r_rows, depth + 1, right[node]))

        self.feature_ = np.asarray(feature, dtype=np.intp)
        self.threshold_ = np.asarray(threshold)
        self.left_ = np.asarray(left, dtype=np.intp)
        self.right_ = np.asarray(right, dtype=np.intp)
        self.value_ = np.asarray(value)
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.intp)
        active = np.arange(X.shape[0])
        while active.size:
            f = self.feature_[node[active]]
            internal = f >= 0
            active, f = active[internal], f[internal]
            if not active.size:
                break
            cur = node[active]
            go_left = X[active, f] <= self.threshold_[cur]
            node[active] = np.where(go_left, self.left_[cur], self.right_[cur])
        return self.value_[node]

    @property
    def n_leaves(self) -> int:
        return int((self.feature_ < 0).sum())


def _best_split(Xn: np.ndarray, yn: np.ndarray, min_leaf: int):
    """Return ``(column, threshold)`` maximizing the SSE reduction, or None."""
    n = yn.shape[0]
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ys = yn[order]
    csum = np.cumsum(ys, axis=0)
    total = csum[-1, 0]
    # candidate split after position k-1, k = min_leaf .. n - min_leaf
    lo, hi = min_leaf, n - min_leaf
    k = np.arange(lo, hi + 1, dtype=float)[:, None]
    left_sum = csum[lo - 1:hi]
    score = left_sum**2 / k + (total - left_sum) ** 2 / (n - k)
    distinct = xs[lo:hi + 1] > xs[lo - 1:hi]
    score = np.where(distinct, score, -np.inf)
    flat = int(np.argmax(score))
    row, col = divmod(flat, score.shape[1])
    best = score[row, col]
    base = total**2 / n
    if not np.isfinite(best) or best - base <= 1e-12 * max(1.0, abs(base)):
        return None
    pos = lo + row
    thr = 0.5 * (xs[pos - 1, col] + xs[pos, col])
    if thr >= xs[pos, col]:  # midpoint rounded onto the right value
        thr = xs[pos - 1, col]
    return col, float(thr)


class RandomForest:
    """Average of ``n_trees`` trees, each grown on a bootstrap resample."""

    def __init__(self, n_trees=100, max_features=None, max_depth=None, min_leaf=5, seed=0):
        if n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        self.n_trees = int(n_trees)
        self.max_features = max_features
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        rng = np.random.default_rng(self.seed)
        n = X.shape[0]
        self.trees_ = []
        for _ in range(self.n_trees):
            rows = rng.integers(0, n, n)
            tree = DecisionTree(self.max_features, self.max_depth, self.min_leaf, rng)
            self.trees_.append(tree.fit(X[rows], y[rows]))
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for tree in self.trees_:
            out += tree.predict(X)
        return out / len(self.trees_)
