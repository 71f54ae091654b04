"""In-repo base classifiers: CART-style trees, a multiclass softmax gradient
boosting machine, and a random forest.

All learners share the same conventions:

* split search is greedy over (feature, midpoint threshold) candidates with
  ties broken by lower feature index, then lower threshold;
* per-sample weights enter both the split criterion and the leaf values, and
  every fit is invariant to uniform rescaling of the weight vector;
* feature importance is total weighted impurity decrease per feature,
  normalized to sum to 1 (all zero when no split exists);
* fits are deterministic functions of (data, params, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

_GAIN_TOL = 1e-12


class LearnerError(Exception):
    """Invalid learner input (non-finite features, shape mismatch, ...)."""


# ---------------------------------------------------------------------------
# prediction containers
# ---------------------------------------------------------------------------


@dataclass
class PredictionSet:
    """Per-sample predicted class index plus a per-class probability row.

    labels[i] is the argmax of probabilities[i] with ties broken toward the
    lower class index. A label of -1 marks an abstention (used by the
    mixture-of-experts gate); the probability row is still a normalized
    distribution in that case.
    """

    labels: np.ndarray
    probabilities: np.ndarray

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray) -> "PredictionSet":
        probabilities = np.asarray(probabilities, dtype=np.float64)
        return cls(labels=np.argmax(probabilities, axis=1), probabilities=probabilities)

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return self.probabilities.shape[1]


def softmax(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax, shifted for stability."""
    scores = np.asarray(scores, dtype=np.float64)
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(y), n_classes), dtype=np.float64)
    out[np.arange(len(y)), y] = 1.0
    return out


def log_loss(scores: np.ndarray, y: np.ndarray, sample_weight: np.ndarray) -> float:
    """Total weighted multiclass log-loss of raw scores (pre-softmax)."""
    p = softmax(scores)
    picked = np.clip(p[np.arange(len(y)), y], 1e-300, None)
    return float(-np.sum(sample_weight * np.log(picked)))


def log_loss_gradient(scores: np.ndarray, y: np.ndarray, sample_weight: np.ndarray) -> np.ndarray:
    """Gradient of log_loss w.r.t. the score matrix: w_i * (p_ik - y_ik)."""
    p = softmax(scores)
    grad = p - one_hot(np.asarray(y), scores.shape[1])
    return sample_weight[:, None] * grad


# ---------------------------------------------------------------------------
# decision trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeParams:
    max_depth: int = 3
    min_leaf: int = 2
    task: str = "regression"  # "regression" | "classification"
    n_classes: Optional[int] = None
    max_features: Optional[int] = None  # per-split feature subsampling (forests)


@dataclass
class DecisionTree:
    """Flat-array binary tree. feature[i] == -1 marks a leaf.

    Rows with x[feature] <= threshold go left. leaf_values holds a scalar per
    node for regression and a class-frequency row for classification.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_values: np.ndarray
    raw_importance: np.ndarray
    n_features: int
    task: str

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index for every row."""
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(len(X), dtype=np.intp)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            rows = np.flatnonzero(active)
            f = feat[rows]
            go_left = X[rows, f] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def predict(self, X: np.ndarray) -> np.ndarray:
        leaves = self.apply(X)
        return self.leaf_values[leaves]

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "leaf_values": self.leaf_values.tolist(),
        }


class _TreeBuilder:
    """Recursive greedy CART builder over a dense matrix.

    Columns are sorted once at the root; child nodes inherit their sorted
    order by a stable mask partition instead of re-sorting, which keeps split
    search O(n * n_features) per level.
    """

    def __init__(
        self,
        X,
        y,
        w,
        params: TreeParams,
        rng: Optional[np.random.Generator],
        sorted_root: Optional[np.ndarray] = None,
    ):
        self.X = X
        self.y = y
        self.w = w
        self.params = params
        self.rng = rng
        self.sorted_root = (
            sorted_root if sorted_root is not None else np.argsort(X, axis=0, kind="stable")
        )
        self.n_classes = params.n_classes
        if params.task == "classification":
            if self.n_classes is None:
                self.n_classes = int(np.max(y)) + 1
            self.y_onehot = one_hot(y.astype(np.intp), self.n_classes)
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.values: list = []
        self.importance = np.zeros(X.shape[1], dtype=np.float64)

    def build(self) -> DecisionTree:
        self._grow(self.sorted_root, depth=0)
        if self.params.task == "regression":
            leaf_values = np.array(self.values, dtype=np.float64)
        else:
            leaf_values = np.array(self.values, dtype=np.float64).reshape(-1, self.n_classes)
        return DecisionTree(
            feature=np.array(self.feature, dtype=np.intp),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.intp),
            right=np.array(self.right, dtype=np.intp),
            leaf_values=leaf_values,
            raw_importance=self.importance,
            n_features=self.X.shape[1],
            task=self.params.task,
        )

    def _node_value(self, idx):
        w = self.w[idx]
        total = w.sum()
        if self.params.task == "regression":
            if total > 0:
                return float(np.dot(w, self.y[idx]) / total)
            return float(np.mean(self.y[idx]))
        counts = self.y_onehot[idx]
        if total > 0:
            freq = (w[:, None] * counts).sum(axis=0) / total
        else:
            freq = counts.mean(axis=0)
        return freq

    def _impurity(self, idx) -> float:
        """Weighted SSE (regression) or weighted Gini mass (classification)."""
        w = self.w[idx]
        total = w.sum()
        if total <= 0:
            return 0.0
        if self.params.task == "regression":
            s = np.dot(w, self.y[idx])
            q = np.dot(w, self.y[idx] ** 2)
            return float(q - s * s / total)
        s = (w[:, None] * self.y_onehot[idx]).sum(axis=0)
        return float(total - np.dot(s, s) / total)

    def _add_leaf(self, idx) -> int:
        node_id = len(self.feature)
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.values.append(self._node_value(idx))
        return node_id

    def _grow(self, sorted_idx: np.ndarray, depth: int) -> int:
        params = self.params
        idx = sorted_idx[:, 0]
        if (
            depth >= params.max_depth
            or len(idx) < 2 * params.min_leaf
            or self._impurity(idx) <= _GAIN_TOL
        ):
            return self._add_leaf(idx)

        split = self._best_split(sorted_idx)
        if split is None:
            return self._add_leaf(idx)
        feat, thr, gain, left_sorted, right_sorted = split

        node_id = len(self.feature)
        self.feature.append(feat)
        self.threshold.append(thr)
        self.left.append(-1)
        self.right.append(-1)
        self.values.append(self._node_value(idx))
        self.importance[feat] += max(gain, 0.0)

        self.left[node_id] = self._grow(left_sorted, depth + 1)
        self.right[node_id] = self._grow(right_sorted, depth + 1)
        return node_id

    def _candidate_features(self) -> np.ndarray:
        n_feat = self.X.shape[1]
        k = self.params.max_features
        if k is None or k >= n_feat:
            return np.arange(n_feat, dtype=np.intp)
        chosen = self.rng.choice(n_feat, size=k, replace=False)
        return np.sort(chosen)  # ascending keeps the lowest-index tie-break

    def _best_split(self, sorted_idx: np.ndarray):
        cols = self._candidate_features()
        S = sorted_idx[:, cols]
        Xs = self.X[S, cols[None, :]]
        Ws = self.w[S]
        n = sorted_idx.shape[0]
        min_leaf = self.params.min_leaf

        cw = np.cumsum(Ws, axis=0)
        WL = cw[:-1]
        WR = cw[-1] - WL

        if self.params.task == "regression":
            ys = self.y[S]
            wy = Ws * ys
            cwy = np.cumsum(wy, axis=0)
            cwyy = np.cumsum(wy * ys, axis=0)
            SL, QL = cwy[:-1], cwyy[:-1]
            SR, QR = cwy[-1] - SL, cwyy[-1] - QL
            with np.errstate(divide="ignore", invalid="ignore"):
                child = (QL - SL * SL / WL) + (QR - SR * SR / WR)
            parent = cwyy[-1] - cwy[-1] ** 2 / cw[-1]
        else:
            # per-class cumulative weighted counts; K is small so loop classes
            sum_sq_l = np.zeros_like(WL)
            sum_sq_r = np.zeros_like(WL)
            parent_sq = np.zeros(S.shape[1], dtype=np.float64)
            for k in range(self.n_classes):
                ck = np.cumsum(Ws * self.y_onehot[S, k], axis=0)
                skl = ck[:-1]
                skr = ck[-1] - skl
                sum_sq_l += skl * skl
                sum_sq_r += skr * skr
                parent_sq += ck[-1] ** 2
            with np.errstate(divide="ignore", invalid="ignore"):
                child = (WL - sum_sq_l / WL) + (WR - sum_sq_r / WR)
            parent = cw[-1] - parent_sq / cw[-1]

        gain = parent[None, :] - child
        pos = np.arange(1, n)[:, None]
        valid = (Xs[:-1] < Xs[1:]) & (pos >= min_leaf) & (n - pos >= min_leaf)
        valid &= (WL > 0) & (WR > 0)
        gain = np.where(valid, gain, -np.inf)

        best_pos = np.argmax(gain, axis=0)  # first max -> lowest threshold
        best_gain = gain[best_pos, np.arange(gain.shape[1])]
        if not np.isfinite(best_gain).any():
            return None
        j = int(np.argmax(best_gain))  # first max -> lowest feature index
        i = int(best_pos[j])
        feat = int(cols[j])
        thr = float((Xs[i, j] + Xs[i + 1, j]) / 2.0)

        # partition every column's sorted order by left membership (stable)
        in_left = np.zeros(self.X.shape[0], dtype=bool)
        in_left[S[: i + 1, j]] = True
        mask = in_left[sorted_idx]
        n_feat = sorted_idx.shape[1]
        left_sorted = sorted_idx.T[mask.T].reshape(n_feat, i + 1).T
        right_sorted = sorted_idx.T[~mask.T].reshape(n_feat, n - i - 1).T
        return feat, thr, float(max(best_gain[j], 0.0)), left_sorted, right_sorted


def fit_tree(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
    params: TreeParams = TreeParams(),
    rng: Optional[np.random.Generator] = None,
) -> DecisionTree:
    """Fit one greedy CART tree (regression or classification)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise LearnerError("X must be a non-empty 2-D matrix")
    if len(y) != len(X):
        raise LearnerError("y length mismatch")
    if not np.isfinite(X).all():
        raise LearnerError("non-finite feature value")
    if sample_weight is None:
        sample_weight = np.ones(len(y), dtype=np.float64)
    else:
        sample_weight = np.asarray(sample_weight, dtype=np.float64)
        if len(sample_weight) != len(y):
            raise LearnerError("sample_weight length mismatch")
        if (sample_weight < 0).any() or sample_weight.sum() <= 0:
            raise LearnerError("weights must be nonnegative and not all zero")
    if params.max_features is not None and rng is None:
        rng = np.random.default_rng(0)
    return _TreeBuilder(X, y, sample_weight, params, rng).build()


# ---------------------------------------------------------------------------
# gradient boosting machine
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GbmParams:
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_leaf: int = 2
    subsample: float = 1.0


@dataclass
class GbmModel:
    """Softmax multiclass gradient boosting over regression trees.

    trees[round][class] holds the round's per-class regression tree whose leaf
    values are already the damped step to add to that class's raw score.
    """

    params: GbmParams
    n_classes: int
    n_features: int
    init_scores: np.ndarray
    trees: list
    feature_importances_: np.ndarray
    train_losses_: list

    def decision_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise LearnerError(
                f"X has {X.shape[1]} columns, model was trained on {self.n_features}"
            )
        scores = np.tile(self.init_scores, (len(X), 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += self.params.learning_rate * tree.predict(X)
        return scores

    def predict_proba(self, X: np.ndarray) -> PredictionSet:
        return PredictionSet.from_probabilities(softmax(self.decision_scores(X)))

    def to_json_dict(self) -> dict:
        return {
            "kind": "gbm",
            "params": vars(self.params) | {},
            "n_classes": self.n_classes,
            "init_scores": self.init_scores.tolist(),
            "trees": [[t.to_json_dict() for t in row] for row in self.trees],
        }


def fit_gbm(
    X: np.ndarray,
    y: np.ndarray,
    sample_weight: Optional[np.ndarray] = None,
    params: GbmParams = GbmParams(),
    seed: int = 0,
    n_classes: Optional[int] = None,
) -> GbmModel:
    """Fit the multiclass GBM.

    Per round and class, a regression tree is fit to the negative log-loss
    gradient (one-hot minus softmax) under the shared sample weights; leaf
    values take the damped multiclass step (K-1)/K * sum(w*r)/sum(w*|r|(1-|r|))
    and are scaled by the learning rate at prediction time.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if X.ndim != 2 or len(X) == 0:
        raise LearnerError("X must be a non-empty 2-D matrix")
    if not np.isfinite(X).all():
        raise LearnerError("non-finite feature value")
    if sample_weight is None:
        w = np.ones(len(y), dtype=np.float64)
    else:
        w = np.asarray(sample_weight, dtype=np.float64)
        if len(w) != len(y):
            raise LearnerError("sample_weight length mismatch")
        if (w < 0).any() or w.sum() <= 0:
            raise LearnerError("weights must be nonnegative and not all zero")
    K = int(n_classes) if n_classes is not None else int(np.max(y)) + 1
    if K < 2:
        raise LearnerError("need at least 2 classes")
    if (y < 0).any() or (y >= K).any():
        raise LearnerError("label index out of range")

    n = len(y)
    priors = np.zeros(K, dtype=np.float64)
    np.add.at(priors, y, w)
    priors /= w.sum()
    init_scores = np.log(np.clip(priors, 1e-12, None))

    y_oh = one_hot(y, K)
    scores = np.tile(init_scores, (n, 1))
    tree_params = TreeParams(max_depth=params.max_depth, min_leaf=params.min_leaf)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))

    trees: list[list[DecisionTree]] = []
    importance = np.zeros(X.shape[1], dtype=np.float64)
    losses = [log_loss(scores, y, w) / w.sum()]

    # column sort is shared across every round and class tree
    sorted_full = np.argsort(X, axis=0, kind="stable")

    for _ in range(params.n_rounds):
        p = softmax(scores)
        residual = y_oh - p
        if params.subsample < 1.0:
            m = max(1, int(round(params.subsample * n)))
            rows = rng.choice(n, size=m, replace=False)
            X_round = X[rows]
            sorted_round = np.argsort(X_round, axis=0, kind="stable")
        else:
            rows = np.arange(n)
            X_round = X
            sorted_round = sorted_full
        round_trees = []
        for k in range(K):
            tree = _TreeBuilder(
                X_round, residual[rows, k], w[rows], tree_params, None, sorted_round
            ).build()
            leaves_sub = tree.apply(X_round)
            r_sub = residual[rows, k]
            w_sub = w[rows]
            num = np.zeros(tree.n_nodes)
            den = np.zeros(tree.n_nodes)
            np.add.at(num, leaves_sub, w_sub * r_sub)
            np.add.at(den, leaves_sub, w_sub * np.abs(r_sub) * (1.0 - np.abs(r_sub)))
            with np.errstate(divide="ignore", invalid="ignore"):
                gamma = (K - 1.0) / K * num / den
            gamma[~np.isfinite(gamma)] = 0.0
            gamma[np.abs(den) < 1e-150] = 0.0
            tree.leaf_values = gamma
            scores[:, k] += params.learning_rate * tree.predict(X)
            importance += tree.raw_importance
            round_trees.append(tree)
        trees.append(round_trees)
        losses.append(log_loss(scores, y, w) / w.sum())

    total = importance.sum()
    feature_importances = importance / total if total > 0 else importance
    return GbmModel(
        params=params,
        n_classes=K,
        n_features=X.shape[1],
        init_scores=init_scores,
        trees=trees,
        feature_importances_=feature_importances,
        train_losses_=losses,
    )


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomForestParams:
    n_trees: int = 100
    max_depth: int = 16
    min_leaf: int = 1
    bootstrap: bool = True
    max_features: Optional[str] = "sqrt"  # "sqrt" | None (all features)


@dataclass
class RandomForestModel:
    params: RandomForestParams
    n_classes: int
    n_features: int
    trees: list
    feature_importances_: np.ndarray

    def predict_proba(self, X: np.ndarray) -> PredictionSet:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.n_features:
            raise LearnerError(
                f"X has {X.shape[1]} columns, model was trained on {self.n_features}"
            )
        acc = np.zeros((len(X), self.n_classes), dtype=np.float64)
        for tree in self.trees:
            acc += tree.predict(X)
        acc /= len(self.trees)
        return PredictionSet.from_probabilities(acc)

    def to_json_dict(self) -> dict:
        return {
            "kind": "random_forest",
            "params": vars(self.params) | {},
            "n_classes": self.n_classes,
            "trees": [t.to_json_dict() for t in self.trees],
        }


def fit_random_forest(
    X: np.ndarray,
    y: np.ndarray,
    params: RandomForestParams = RandomForestParams(),
    seed: int = 0,
    n_classes: Optional[int] = None,
) -> RandomForestModel:
    """Fit a random forest of CART classification trees.

    Each tree gets its own seed derived from (seed, tree index), so results
    are independent of any parallel scheduling of tree fits.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if X.ndim != 2 or len(X) == 0:
        raise LearnerError("X must be a non-empty 2-D matrix")
    K = int(n_classes) if n_classes is not None else int(np.max(y)) + 1
    n, n_feat = X.shape
    if params.max_features == "sqrt":
        k = max(1, int(np.sqrt(n_feat)))
    elif params.max_features is None:
        k = None
    else:
        raise LearnerError(f"unknown max_features {params.max_features!r}")
    tree_params = TreeParams(
        max_depth=params.max_depth,
        min_leaf=params.min_leaf,
        task="classification",
        n_classes=K,
        max_features=k,
    )

    trees = []
    importance = np.zeros(n_feat, dtype=np.float64)
    for i in range(params.n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        tree = fit_tree(X[rows], y[rows], None, tree_params, rng=rng)
        importance += tree.raw_importance
        trees.append(tree)
    total = importance.sum()
    feature_importances = importance / total if total > 0 else importance
    return RandomForestModel(
        params=params,
        n_classes=K,
        n_features=n_feat,
        trees=trees,
        feature_importances_=feature_importances,
    )
