"""Bagged regression trees with cheap depth truncation.

Trees are grown once to full depth; a prediction at depth ``d`` reads the
value stored at each leaf's ancestor on level ``d``.  Every internal node of a
CART tree carries the (bootstrap-weighted) mean of the samples reaching it, so
a truncated tree is exactly a depth-limited tree with the same splits.  This
makes a whole depth grid cost one fit, and out-of-bag error comes for free
because the bootstrap draws are ours.
"""
from __future__ import annotations

import numpy as np
from sklearn.tree import DecisionTreeRegressor

DEPTH_GRID = (4, 8, 16, 32, 64)


def _ancestor_maps(tree, depths):
    t = tree.tree_
    n = t.node_count
    parent = np.full(n, -1)
    for side in (t.children_left, t.children_right):
        ok = side >= 0
        parent[side[ok]] = np.flatnonzero(ok)
    depth = np.zeros(n, dtype=int)
    for node in range(1, n):  # children always have larger ids than parents
        depth[node] = depth[parent[node]] + 1
    maps = {}
    for d in depths:
        anc = np.arange(n)
        while True:
            up = depth[anc] > d
            if not up.any():
                break
            anc = np.where(up, parent[anc], anc)
        maps[d] = anc
    return maps


class Forest:
    """Random forest regressor (single or multi-output).

    Split criterion is variance reduction; each split considers a random
    ``max_features`` share of the features; leaves hold at least
    ``min_samples_leaf`` distinct training rows.
    """

    def __init__(self, n_trees: int = 100, max_features: float = 1 / 3, min_samples_leaf: int = 5,
                 depths=DEPTH_GRID, seed: int = 0):
        self.n_trees = n_trees
        self.max_features = max_features
        self.min_samples_leaf = min_samples_leaf
        self.depths = tuple(depths)
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=float)
        self._multi = y.ndim == 2
        n = len(X)
        rng = np.random.default_rng(self.seed)
        self.trees_, self.maps_, self.inbag_ = [], [], []
        max_depth = max(self.depths)
        for _ in range(self.n_trees):
            counts = np.bincount(rng.integers(0, n, n), minlength=n)
            tree = DecisionTreeRegressor(max_features=self.max_features, min_samples_leaf=self.min_samples_leaf,
                                         max_depth=max_depth, random_state=int(rng.integers(2 ** 31 - 1)))
            keep = counts > 0
            tree.fit(X[keep], y[keep], sample_weight=counts[keep].astype(float))
            self.trees_.append(tree)
            self.maps_.append(_ancestor_maps(tree, self.depths))
            self.inbag_.append(keep)
        return self

    def _values(self, tree):
        v = tree.tree_.value
        return v[:, :, 0] if self._multi else v[:, 0, 0]

    def _tree_predict(self, i, X, depth):
        tree = self.trees_[i]
        nodes = self.maps_[i][depth][tree.apply(X)]
        return self._values(tree)[nodes]

    def predict(self, X, depth: int | None = None):
        depth = max(self.depths) if depth is None else depth
        if depth not in self.depths:
            raise ValueError(f"depth {depth} not in grid {self.depths}")
        X = np.asarray(X, dtype=np.float32)
        out = self._tree_predict(0, X, depth)
        for i in range(1, self.n_trees):
            out = out + self._tree_predict(i, X, depth)
        return out / self.n_trees

    def oob_predict(self, X, depth: int):
        """Out-of-bag predictions on the training rows (NaN where never out of bag)."""
        X = np.asarray(X, dtype=np.float32)
        total, count = None, np.zeros(len(X))
        for i in range(self.n_trees):
            oob = ~self.inbag_[i]
            if not oob.any():
                continue
            p = self._tree_predict(i, X[oob], depth)
            if total is None:
                total = np.zeros((len(X),) + p.shape[1:])
            total[oob] += p
            count[oob] += 1
        with np.errstate(invalid="ignore"):
            return total / (count[:, None] if total.ndim == 2 else count)

    def oob_depth(self, X, y) -> int:
        """Depth in the grid with the smallest out-of-bag mean squared error."""
        y = np.asarray(y, float)
        best, best_err = None, np.inf
        for d in self.depths:
            p = self.oob_predict(X, d)
            err = np.nanmean((p - y) ** 2)
            if err < best_err - 1e-12:
                best, best_err = d, err
        return best
