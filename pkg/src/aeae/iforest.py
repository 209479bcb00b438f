"""Isolation forest for low-dimensional feature points.

Trees are stored as flat node arrays so a whole forest can be scored with a
handful of vectorised steps and serialised without pickling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

EULER_GAMMA = 0.5772156649


def c_factor(n) -> float:
    """Average path length of an unsuccessful BST search among ``n`` points.

    ``c(n) = 2 H(n-1) - 2 (n-1) / n`` with ``H(i) = ln(i) + gamma``, and
    ``c(0) = c(1) = 0``.
    """
    if n < 0:
        raise ValueError(f"c_factor: n must be >= 0, got {n}")
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


_c_vec = np.vectorize(c_factor, otypes=[np.float64])


@dataclass
class ITree:
    """One isolation tree as parallel node arrays; node 0 is the root.

    Internal nodes have ``feature >= 0``; leaves have ``feature == -1`` and
    record how many training points reached them in ``size``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def leaf_value(self) -> np.ndarray:
        """Depth plus the ``c(size)`` correction, per node (only used at leaves)."""
        return self.depth + _c_vec(self.size)

    @classmethod
    def leaf(cls, size: int) -> ITree:
        return cls(
            np.array([-1]), np.array([0.0]), np.array([-1]), np.array([-1]), np.array([size]), np.array([0])
        )


def _build_tree(points: np.ndarray, height_limit: int, rng: np.random.Generator) -> ITree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(d, n):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(0, len(points)), points)]
    while stack:
        node, x = stack.pop()
        d = depth[node]
        if d >= height_limit or len(x) <= 1:
            continue
        lo, hi = x.min(axis=0), x.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        q = int(splittable[rng.integers(splittable.size)])
        p = rng.uniform(lo[q], hi[q])
        while not lo[q] < p < hi[q]:
            p = rng.uniform(lo[q], hi[q])
        go_left = x[:, q] < p
        feature[node] = q
        threshold[node] = p
        # left child first so children follow their parent in index order
        l = new_node(d + 1, int(go_left.sum()))
        r = new_node(d + 1, int((~go_left).sum()))
        left[node], right[node] = l, r
        stack.append((r, x[~go_left]))
        stack.append((l, x[go_left]))

    return ITree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(size, dtype=np.int64),
        np.array(depth, dtype=np.int64),
    )


def _walk(tree: ITree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(len(x), dtype=np.int64)
    rows = np.arange(len(x))
    while True:
        f = tree.feature[node]
        inner = f >= 0
        if not inner.any():
            return node
        ni, ri = node[inner], rows[inner]
        go_left = x[ri, f[inner]] < tree.threshold[ni]
        node[inner] = np.where(go_left, tree.left[ni], tree.right[ni])


def path_length(x, tree: ITree) -> np.ndarray | float:
    """Edges from the root to the leaf isolating ``x``, plus ``c(leaf size)``."""
    arr = np.asarray(x, dtype=np.float64)
    pts = np.atleast_2d(arr)
    used = tree.feature[tree.feature >= 0]
    if used.size and used.max() >= pts.shape[1]:
        raise ValueError(f"path_length: point has {pts.shape[1]} dims, tree splits on dim {used.max()}")
    out = tree.leaf_value()[_walk(tree, pts)]
    return float(out[0]) if arr.ndim == 1 else out


@dataclass
class IsolationForest:
    trees: list[ITree]
    subsample_size: int
    height_limit: int
    n_train: int
    n_features: int
    seed: int = 0

    def __post_init__(self):
        self._pack()

    def _pack(self):
        # all trees concatenated; leaves point to themselves so a walk can run a
        # fixed number of steps without masking finished rows. Each node owns
        # two slots (2k, 2k+1) so that "slot + went_right" indexes the child.
        offsets = np.cumsum([0] + [len(t) for t in self.trees])
        idx = np.arange(offsets[-1])
        is_leaf = np.concatenate([t.feature < 0 for t in self.trees])
        left = np.concatenate([t.left + o for t, o in zip(self.trees, offsets)])
        right = np.concatenate([t.right + o for t, o in zip(self.trees, offsets)])
        children = np.column_stack([np.where(is_leaf, idx, left), np.where(is_leaf, idx, right)])
        self._roots = 2 * offsets[:-1]
        self._children = 2 * children.ravel()
        self._feature = np.repeat(np.concatenate([np.maximum(t.feature, 0) for t in self.trees]), 2)
        self._threshold = np.repeat(np.concatenate([t.threshold for t in self.trees]), 2)
        self._value = np.repeat(np.concatenate([t.leaf_value() for t in self.trees]), 2)
        self._steps = max(t.max_depth for t in self.trees)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def normaliser(self) -> float:
        """``c(n)`` for the per-tree sample size actually used."""
        return c_factor(min(self.subsample_size, self.n_train))

    def mean_path_length(self, points) -> np.ndarray:
        """``E[h(x)]`` over the trees for each row of ``points``.

        Rows are laid out point-major and reduced row by row, so a point gets
        the same bits whether it is scored alone or inside a batch.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if pts.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features}-dimensional points, got {pts.shape[1]}")
        n = len(pts)
        flat = pts.ravel()
        feature, threshold, children = self._feature, self._threshold, self._children
        # .take is markedly cheaper than fancy indexing on these short arrays;
        # single-image latency is dominated by per-call overhead
        if n == 1:
            slot = self._roots
            for _ in range(self._steps):
                slot = children.take(slot + (flat.take(feature.take(slot)) >= threshold.take(slot)))
        else:
            slot = np.tile(self._roots, n)
            offset = np.repeat(np.arange(n) * self.n_features, self.n_trees)
            for _ in range(self._steps):
                col = feature.take(slot)
                col += offset
                slot = children.take(slot + (flat.take(col) >= threshold.take(slot)))
        return self._value.take(slot).reshape(n, self.n_trees).sum(axis=1) / self.n_trees


def fit(points, n_trees: int = 100, subsample_size: int = 256, seed: int = 0, height_limit: int | None = None) -> IsolationForest:
    """Grow ``n_trees`` isolation trees, each on its own random subsample.

    Tree ``i`` draws from ``default_rng(seed + i)``, so trees are independent
    of each other and of the build order.
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(x) < 2:
        raise ValueError(f"isolation forest needs at least 2 points, got {len(x)}")
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    if subsample_size < 2:
        raise ValueError(f"subsample_size must be >= 2, got {subsample_size}")
    psi = min(subsample_size, len(x))
    if height_limit is None:
        height_limit = int(math.ceil(math.log2(psi)))
    trees = []
    for i in range(n_trees):
        rng = np.random.default_rng(seed + i)
        sample = x[rng.choice(len(x), size=psi, replace=False)]
        trees.append(_build_tree(sample, height_limit, rng))
    return IsolationForest(trees, subsample_size, height_limit, len(x), x.shape[1], seed)


def anomaly_score(forest: IsolationForest | None, points) -> np.ndarray | float:
    """``s(x, n) = 2 ** (-E[h(x)] / c(n))`` with ``n`` the per-tree sample size."""
    if forest is None:
        raise ValueError("anomaly_score: forest is not fitted")
    arr = np.asarray(points, dtype=np.float64)
    s = np.power(2.0, -forest.mean_path_length(arr) / forest.normaliser)
    return float(s[0]) if arr.ndim == 1 else s


@dataclass
class ScoreModel:
    """A forest plus the score threshold above which points are outliers."""

    forest: IsolationForest
    threshold: float
    contamination: float


def calibrate_threshold(forest: IsolationForest, training_points, contamination: float = 0.1) -> ScoreModel:
    """Set the threshold at the ``1 - contamination`` quantile of training scores."""
    if not 0.0 < contamination < 0.5:
        raise ValueError(f"contamination must lie in (0, 0.5), got {contamination}")
    scores = anomaly_score(forest, np.atleast_2d(training_points))
    threshold = float(np.quantile(scores, 1.0 - contamination))
    return ScoreModel(forest, threshold, contamination)


def predict_outlier(model: ScoreModel, points):
    """``(is_outlier, score)``; a point is an outlier iff its score exceeds the threshold."""
    scores = anomaly_score(model.forest, points)
    return np.greater(scores, model.threshold), scores


# serialisation --------------------------------------------------------------------


def forest_arrays(forest: IsolationForest) -> tuple[dict, list[np.ndarray]]:
    """Descriptor and float arrays suitable for :func:`aeae.checkpoint.pack`."""
    desc = {
        "subsample_size": forest.subsample_size,
        "height_limit": forest.height_limit,
        "n_train": forest.n_train,
        "n_features": forest.n_features,
        "seed": forest.seed,
        "tree_sizes": [len(t) for t in forest.trees],
    }
    # one row per node: feature, threshold, left, right, size; depth is recomputed
    nodes = np.concatenate(
        [np.column_stack([t.feature, t.threshold, t.left, t.right, t.size]) for t in forest.trees]
    ).astype(np.float64)
    return desc, [nodes]


def forest_from_arrays(desc: dict, arrays: list[np.ndarray]) -> IsolationForest:
    (nodes,) = arrays
    trees, start = [], 0
    for n in desc["tree_sizes"]:
        block = nodes[start : start + n]
        start += n
        feature = block[:, 0].astype(np.int64)
        left = block[:, 2].astype(np.int64)
        right = block[:, 3].astype(np.int64)
        depth = np.zeros(n, dtype=np.int64)
        for i in range(n):
            if feature[i] >= 0:
                depth[left[i]] = depth[right[i]] = depth[i] + 1
        trees.append(ITree(feature, block[:, 1].copy(), left, right, block[:, 4].astype(np.int64), depth))
    return IsolationForest(
        trees, desc["subsample_size"], desc["height_limit"], desc["n_train"], desc["n_features"], desc["seed"]
    )
