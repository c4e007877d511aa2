"""Native detection classifiers: KNN, one-vs-rest linear SVM, random forest.

All three consume fixed-length feature vectors and emit a class posterior
over target counts. Training is fully deterministic: every random draw is
seeded and every iteration order fixed, so retraining reproduces identical
models. Tie rules are pinned (KNN prefers the lower training index, forest
splits prefer the lower threshold) to keep predictions reproducible too.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import InputError, TrainingError
from .features import FeatureKind, FeatureVector

KNN_DEFAULTS = {"k": 5}
SVM_DEFAULTS = {"epochs": 200, "step_size": 0.01, "l2": 1e-3}
FOREST_DEFAULTS = {"num_trees": 25, "max_depth": 8}


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix + integer target counts, uniform in kind and length."""

    matrix: np.ndarray
    labels: np.ndarray
    kind: FeatureKind
    num_classes: int

    @classmethod
    def build(
        cls,
        features: Sequence[FeatureVector],
        labels: Sequence[int],
        num_classes: int | None = None,
    ) -> "LabeledDataset":
        if len(features) == 0:
            raise TrainingError("empty dataset")
        if len(features) != len(labels):
            raise TrainingError(f"{len(features)} features but {len(labels)} labels")
        kinds = {fv.kind for fv in features}
        if len(kinds) != 1:
            raise TrainingError(f"mixed feature kinds: {sorted(k.value for k in kinds)}")
        lengths = {len(fv) for fv in features}
        if len(lengths) != 1:
            raise TrainingError(f"mixed feature lengths: {sorted(lengths)}")
        label_arr = np.asarray(labels, dtype=np.int64)
        if label_arr.min() < 0:
            raise TrainingError("labels must be non-negative target counts")
        if num_classes is None:
            num_classes = int(label_arr.max()) + 1
        elif label_arr.max() >= num_classes:
            raise TrainingError(
                f"label {label_arr.max()} out of range for num_classes={num_classes}"
            )
        matrix = np.stack([np.asarray(fv.values, dtype=np.float64) for fv in features])
        return cls(matrix=matrix, labels=label_arr, kind=kinds.pop(), num_classes=num_classes)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]


def _check_query(x: FeatureVector, kind: FeatureKind, n_features: int) -> np.ndarray:
    if x.kind is not kind:
        raise InputError(f"expected {kind.value} features, got {x.kind.value}")
    if len(x) != n_features:
        raise InputError(f"expected {n_features} dims, got {len(x)}")
    return np.asarray(x.values, dtype=np.float64)


# ---------------------------------------------------------------------------
# K-nearest neighbours
# ---------------------------------------------------------------------------

class KnnModel:
    """Stores the training data verbatim; Euclidean metric."""

    def __init__(self, k: int, matrix: np.ndarray, labels: np.ndarray,
                 kind: FeatureKind, num_classes: int):
        self.k = k
        self.matrix = matrix
        self.labels = labels
        self.kind = kind
        self.num_classes = num_classes

    def to_jsonable(self) -> dict[str, Any]:
        return {
            "type": "knn",
            "k": self.k,
            "matrix": self.matrix.tolist(),
            "labels": self.labels.tolist(),
            "kind": self.kind.value,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_jsonable(cls, d: dict[str, Any]) -> "KnnModel":
        return cls(
            k=int(d["k"]),
            matrix=np.asarray(d["matrix"], dtype=np.float64),
            labels=np.asarray(d["labels"], dtype=np.int64),
            kind=FeatureKind(d["kind"]),
            num_classes=int(d["num_classes"]),
        )


def train_knn(data: LabeledDataset, k: int = KNN_DEFAULTS["k"]) -> KnnModel:
    if not (1 <= k <= len(data)):
        raise TrainingError(f"k={k} out of range for {len(data)} samples")
    return KnnModel(k, data.matrix.copy(), data.labels.copy(), data.kind, data.num_classes)


def predict_knn(model: KnnModel, x: FeatureVector) -> np.ndarray:
    q = _check_query(x, model.kind, model.matrix.shape[1])
    diff = model.matrix - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    # Stable sort: equidistant neighbours resolve to the lower training index.
    order = np.argsort(d2, kind="stable")[: model.k]
    votes = np.bincount(model.labels[order], minlength=model.num_classes)
    return votes / model.k


# ---------------------------------------------------------------------------
# One-vs-rest linear SVM
# ---------------------------------------------------------------------------

class LinearSvmModel:
    """Per-class hyperplanes over z-scored features; softmax of margins."""

    def __init__(self, weights: np.ndarray, biases: np.ndarray, mean: np.ndarray,
                 std: np.ndarray, kind: FeatureKind, num_classes: int):
        self.weights = weights  # (num_classes, d)
        self.biases = biases
        self.mean = mean
        self.std = std
        self.kind = kind
        self.num_classes = num_classes

    def to_jsonable(self) -> dict[str, Any]:
        return {
            "type": "svm",
            "weights": self.weights.tolist(),
            "biases": self.biases.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kind": self.kind.value,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_jsonable(cls, d: dict[str, Any]) -> "LinearSvmModel":
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            biases=np.asarray(d["biases"], dtype=np.float64),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            kind=FeatureKind(d["kind"]),
            num_classes=int(d["num_classes"]),
        )


def train_linear_svm(
    data: LabeledDataset,
    epochs: int = SVM_DEFAULTS["epochs"],
    step_size: float = SVM_DEFAULTS["step_size"],
    l2: float = SVM_DEFAULTS["l2"],
) -> LinearSvmModel:
    """Hinge-loss subgradient descent, samples visited in index order.

    The step size decays as step_size / epoch. Feature standardization is
    fitted here and stored in the model; the bias is not regularized.
    """
    if len(np.unique(data.labels)) < 2:
        raise TrainingError("linear SVM needs at least two classes")
    mean = data.matrix.mean(axis=0)
    std = data.matrix.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (data.matrix - mean) / std

    n, d = z.shape
    c = data.num_classes
    weights = np.zeros((c, d))
    biases = np.zeros(c)
    # +1 for the sample's own class, -1 for the rest.
    y = np.where(np.arange(c)[None, :] == data.labels[:, None], 1.0, -1.0)

    for epoch in range(epochs):
        eta = step_size / (epoch + 1)
        shrink = 1.0 - eta * l2
        for i in range(n):
            zi = z[i]
            margins = (weights @ zi + biases) * y[i]
            weights *= shrink
            violated = margins < 1.0
            if violated.any():
                weights[violated] += eta * y[i, violated, None] * zi
                biases[violated] += eta * y[i, violated]
    return LinearSvmModel(weights, biases, mean, std, data.kind, data.num_classes)


def svm_objective(model: LinearSvmModel, data: LabeledDataset, l2: float) -> float:
    """Regularized mean hinge loss summed over the one-vs-rest problems."""
    z = (data.matrix - model.mean) / model.std
    y = np.where(np.arange(model.num_classes)[None, :] == data.labels[:, None], 1.0, -1.0)
    margins = (z @ model.weights.T + model.biases) * y
    hinge = np.maximum(0.0, 1.0 - margins).mean(axis=0).sum()
    reg = 0.5 * l2 * float((model.weights**2).sum())
    return hinge + reg


def predict_linear_svm(model: LinearSvmModel, x: FeatureVector) -> np.ndarray:
    q = _check_query(x, model.kind, model.weights.shape[1])
    z = (q - model.mean) / model.std
    margins = model.weights @ z + model.biases
    shifted = margins - margins.max()
    e = np.exp(shifted)
    return e / e.sum()


# ---------------------------------------------------------------------------
# Random forest (CART, Gini impurity)
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    probs: np.ndarray | None = None  # set on leaves only


class ForestModel:
    def __init__(self, trees: list[TreeNode], tree_seeds: list[int], max_depth: int,
                 kind: FeatureKind, num_classes: int, n_features: int):
        self.trees = trees
        self.tree_seeds = tree_seeds
        self.max_depth = max_depth
        self.kind = kind
        self.num_classes = num_classes
        self.n_features = n_features

    def to_jsonable(self) -> dict[str, Any]:
        return {
            "type": "forest",
            "trees": [_tree_to_dict(t) for t in self.trees],
            "tree_seeds": [int(s) for s in self.tree_seeds],
            "max_depth": self.max_depth,
            "kind": self.kind.value,
            "num_classes": self.num_classes,
            "n_features": self.n_features,
        }

    @classmethod
    def from_jsonable(cls, d: dict[str, Any]) -> "ForestModel":
        return cls(
            trees=[_tree_from_dict(t) for t in d["trees"]],
            tree_seeds=[int(s) for s in d["tree_seeds"]],
            max_depth=int(d["max_depth"]),
            kind=FeatureKind(d["kind"]),
            num_classes=int(d["num_classes"]),
            n_features=int(d["n_features"]),
        )


def _tree_to_dict(node: TreeNode) -> dict[str, Any]:
    if node.probs is not None:
        return {"probs": node.probs.tolist()}
    return {
        "feature": node.feature,
        "threshold": node.threshold,
        "left": _tree_to_dict(node.left),
        "right": _tree_to_dict(node.right),
    }


def _tree_from_dict(d: dict[str, Any]) -> TreeNode:
    if "probs" in d:
        return TreeNode(probs=np.asarray(d["probs"], dtype=np.float64))
    return TreeNode(
        feature=int(d["feature"]),
        threshold=float(d["threshold"]),
        left=_tree_from_dict(d["left"]),
        right=_tree_from_dict(d["right"]),
    )


def _best_split_on_feature(
    values: np.ndarray, labels: np.ndarray, num_classes: int
) -> tuple[float, float] | None:
    """Return (weighted Gini, midpoint threshold) or None if unsplittable."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    boundaries = np.nonzero(v[:-1] < v[1:])[0]
    if boundaries.size == 0:
        return None
    onehot = np.zeros((len(v), num_classes))
    onehot[np.arange(len(v)), labels[order]] = 1.0
    cum = np.cumsum(onehot, axis=0)
    total = cum[-1]

    n = len(v)
    n_left = (boundaries + 1).astype(np.float64)
    n_right = n - n_left
    left = cum[boundaries]
    right = total - left
    gini_left = 1.0 - ((left / n_left[:, None]) ** 2).sum(axis=1)
    gini_right = 1.0 - ((right / n_right[:, None]) ** 2).sum(axis=1)
    weighted = (n_left * gini_left + n_right * gini_right) / n

    best = int(np.argmin(weighted))  # ties resolve to the lowest threshold
    thr = (v[boundaries[best]] + v[boundaries[best] + 1]) / 2.0
    return float(weighted[best]), float(thr)


def _leaf(labels: np.ndarray, num_classes: int) -> TreeNode:
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    return TreeNode(probs=counts / counts.sum())


def _grow_tree(
    matrix: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    depth: int,
    max_depth: int | None,
    rng: np.random.Generator,
) -> TreeNode:
    if (
        len(labels) < 2
        or (max_depth is not None and depth >= max_depth)
        or np.all(labels == labels[0])
    ):
        return _leaf(labels, num_classes)

    d = matrix.shape[1]
    m_try = math.ceil(math.sqrt(d))
    perm = rng.permutation(d)
    best: tuple[float, float, int] | None = None
    # Evaluate m_try candidate features; if none of them splits, keep walking
    # the permutation until one does so unique points always separate.
    for rank, f in enumerate(perm):
        res = _best_split_on_feature(matrix[:, f], labels, num_classes)
        if res is not None and (best is None or res[0] < best[0]):
            best = (res[0], res[1], int(f))
        if rank + 1 >= m_try and best is not None:
            break
    if best is None:
        return _leaf(labels, num_classes)

    _, threshold, feature = best
    mask = matrix[:, feature] <= threshold
    left = _grow_tree(matrix[mask], labels[mask], num_classes, depth + 1, max_depth, rng)
    right = _grow_tree(matrix[~mask], labels[~mask], num_classes, depth + 1, max_depth, rng)
    return TreeNode(feature=feature, threshold=threshold, left=left, right=right)


def train_forest(
    data: LabeledDataset,
    num_trees: int = FOREST_DEFAULTS["num_trees"],
    max_depth: int | None = FOREST_DEFAULTS["max_depth"],
    seed: int = 0,
    bootstrap: bool = True,
) -> ForestModel:
    """CART trees on seeded bootstrap samples, ceil(sqrt(d)) features per split.

    `bootstrap=False` trains every tree on the full sample (used when a
    single fully-grown tree should memorize the training set).
    """
    if len(data) == 0:
        raise TrainingError("empty dataset")
    if num_trees < 1:
        raise TrainingError(f"num_trees must be >= 1, got {num_trees}")
    master = np.random.default_rng(seed)
    tree_seeds = [int(s) for s in master.integers(0, 2**63, num_trees)]

    n = len(data)
    trees = []
    for ts in tree_seeds:
        rng = np.random.default_rng(ts)
        idx = rng.integers(0, n, n) if bootstrap else np.arange(n)
        trees.append(
            _grow_tree(data.matrix[idx], data.labels[idx], data.num_classes, 0, max_depth, rng)
        )
    return ForestModel(trees, tree_seeds, -1 if max_depth is None else max_depth,
                       data.kind, data.num_classes, data.n_features)


def predict_forest(model: ForestModel, x: FeatureVector) -> np.ndarray:
    q = _check_query(x, model.kind, model.n_features)
    acc = np.zeros(model.num_classes)
    for tree in model.trees:
        node = tree
        while node.probs is None:
            node = node.left if q[node.feature] <= node.threshold else node.right
        acc += node.probs
    return acc / len(model.trees)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

Model = KnnModel | LinearSvmModel | ForestModel

_PREDICTORS = {
    KnnModel: predict_knn,
    LinearSvmModel: predict_linear_svm,
    ForestModel: predict_forest,
}


def predict_posterior(model: Model, x: FeatureVector) -> np.ndarray:
    return _PREDICTORS[type(model)](model, x)


def model_from_jsonable(d: dict[str, Any]) -> Model:
    loaders = {"knn": KnnModel, "svm": LinearSvmModel, "forest": ForestModel}
    return loaders[d["type"]].from_jsonable(d)
