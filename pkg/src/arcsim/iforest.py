"""Isolation forest with flat-array trees and vectorised scoring."""

from __future__ import annotations

import math

import numpy as np

EULER_GAMMA = 0.5772156649015329


def average_path_length(n) -> np.ndarray:
    """c(n): expected path length of an unsuccessful BST search among n points."""
    n = np.asarray(n, dtype=float)
    out = np.zeros_like(n)
    big = n > 2
    out[n == 2] = 1.0
    nb = n[big]
    out[big] = 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb
    return out


class IsolationForest:
    """Random axis-aligned isolation trees stored as padded node arrays.

    Node ``k`` of tree ``t`` has ``feature[t, k]`` (``-1`` for a leaf),
    ``threshold[t, k]``, child indices ``left``/``right`` and ``size`` (the
    number of training points that reached it).
    """

    def __init__(self, n_trees: int = 100, subsample: int = 256, seed: int = 0):
        self.n_trees = n_trees
        self.subsample = subsample
        self.seed = seed
        self.psi: int | None = None
        self.feature = self.threshold = self.left = self.right = self.size = None

    @property
    def fitted(self) -> bool:
        return self.feature is not None

    def fit(self, X: np.ndarray) -> IsolationForest:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("isolation forest needs a non-empty 2-D training set")
        rng = np.random.default_rng(self.seed)
        psi = min(self.subsample, len(X))
        height_limit = max(1, math.ceil(math.log2(max(psi, 2))))
        max_nodes = 2 ** (height_limit + 1) - 1
        shape = (self.n_trees, max_nodes)
        feature = np.full(shape, -1, dtype=np.int64)
        threshold = np.zeros(shape)
        left = np.zeros(shape, dtype=np.int64)
        right = np.zeros(shape, dtype=np.int64)
        size = np.zeros(shape, dtype=np.int64)
        n_feat = X.shape[1]
        for t in range(self.n_trees):
            idx = rng.choice(len(X), size=psi, replace=False)
            n_used = 1
            stack = [(0, idx, 0)]
            while stack:
                node, rows, depth = stack.pop()
                size[t, node] = len(rows)
                if depth >= height_limit or len(rows) <= 1:
                    continue
                q = int(rng.integers(n_feat))
                col = X[rows, q]
                lo, hi = col.min(), col.max()
                if lo == hi:
                    continue
                p = rng.uniform(lo, hi)
                feature[t, node] = q
                threshold[t, node] = p
                left[t, node], right[t, node] = n_used, n_used + 1
                n_used += 2
                mask = col < p
                stack.append((n_used - 1, rows[~mask], depth + 1))
                stack.append((n_used - 2, rows[mask], depth + 1))
        self.psi = psi
        self.height_limit = height_limit
        self.feature, self.threshold, self.left, self.right, self.size = feature, threshold, left, right, size
        return self

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        """Per-tree path length ``h(x)`` with the c(size) leaf adjustment, shape (n_trees, N)."""
        if not self.fitted:
            raise RuntimeError("isolation forest is not fitted")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None]
        n = len(X)
        tix = np.arange(self.n_trees)[:, None]
        cols = np.arange(n)[None, :]
        node = np.zeros((self.n_trees, n), dtype=np.int64)
        depth = np.zeros((self.n_trees, n))
        for _ in range(self.height_limit + 1):
            feat = self.feature[tix, node]
            internal = feat >= 0
            if not internal.any():
                break
            x = X[cols, np.maximum(feat, 0)]
            go_left = x < self.threshold[tix, node]
            nxt = np.where(go_left, self.left[tix, node], self.right[tix, node])
            node = np.where(internal, nxt, node)
            depth += internal
        return depth + average_path_length(self.size[tix, node])

    def score(self, X: np.ndarray) -> np.ndarray:
        """Anomaly score ``2 ** (-E[h(x)] / c(psi))`` in (0, 1]."""
        mean_h = self.path_lengths(X).mean(axis=0)
        return 2.0 ** (-mean_h / average_path_length(self.psi))

    def to_arrays(self) -> dict[str, np.ndarray]:
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "size": self.size,
            "meta": np.array([self.n_trees, self.subsample, self.seed, self.psi, self.height_limit]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> IsolationForest:
        n_trees, subsample, seed, psi, hlim = (int(v) for v in arrays["meta"])
        forest = cls(n_trees, subsample, seed)
        forest.psi, forest.height_limit = psi, hlim
        for name in ("feature", "threshold", "left", "right", "size"):
            setattr(forest, name, np.array(arrays[name]))
        return forest
