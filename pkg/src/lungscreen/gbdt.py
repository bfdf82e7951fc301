"""Gradient-boosted decision trees for binary classification under log-loss.

Second-order boosting: each round fits a regression tree by exact greedy
search over sorted feature values, scoring splits with the Newton gain
``G_L^2/H_L + G_R^2/H_R - G^2/H`` (``G``/``H`` are sums of log-loss
gradients/hessians), and sets leaf values to the Newton step ``-G/H``.
A leaf whose shrunken step would raise that leaf's training loss is halved
until it does not, so training loss never increases between rounds.
"""
from __future__ import annotations

import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import DegenerateLabels, DimensionMismatch, MalformedModel

EPS = 1e-15
_HESS_FLOOR = 1e-16
_MAX_HALVINGS = 60

MAGIC = b"LSGB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    num_rounds: int = 100
    learning_rate: float = 0.1
    max_depth: int = 3
    min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.learning_rate <= 1:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.num_rounds < 1:
            raise ValueError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")


@dataclass
class Tree:
    """Flat binary tree; ``feature == -1`` marks a leaf. ``x <= threshold`` goes left."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    def depth(self) -> int:
        def walk(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(self.left[node]), walk(self.right[node]))

        return walk(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return node
            r, n, f = rows[active], node[active], feat[active]
            go_left = X[r, f] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]


@dataclass
class GbdtModel:
    base_score: float
    trees: list[Tree]
    learning_rate: float
    max_depth: int
    num_rounds: int
    n_features: int
    seed: int = 0
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = _as_matrix(X, self.n_features)
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += self.learning_rate * tree.predict(X)
        return margin


def _as_matrix(X, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D feature matrix, got {X.ndim}-D")
    if n_features is not None and X.shape[1] != n_features:
        raise DimensionMismatch(f"model expects {n_features} features, got {X.shape[1]}")
    return X


def _probabilities(margin: np.ndarray) -> np.ndarray:
    return np.clip(expit(margin), EPS, 1.0 - EPS)


def _sample_losses(y: np.ndarray, margin: np.ndarray) -> np.ndarray:
    p = _probabilities(margin)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def _best_split(Xn: np.ndarray, g: np.ndarray, h: np.ndarray, min_leaf: int):
    """Best (gain, feature, threshold) over all features; ties keep the lowest feature, then threshold.

    A zero-gain split is still taken so that interactions invisible to a
    single split (XOR) can be found one level down.
    """
    n, d = Xn.shape
    if n < 2 * min_leaf:
        return None
    G, H = g.sum(), max(h.sum(), _HESS_FLOOR)
    parent = G * G / H
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    cg = np.cumsum(g[order], axis=0)[:-1]
    ch = np.cumsum(h[order], axis=0)[:-1]
    hl = np.maximum(ch, _HESS_FLOOR)
    hr = np.maximum(H - ch, _HESS_FLOOR)
    gain = cg * cg / hl + (G - cg) ** 2 / hr - parent
    n_left = np.arange(1, n)[:, None]
    valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    gain = np.where(valid, gain, -np.inf)

    best = None
    for f in range(d):
        i = int(np.argmax(gain[:, f]))
        gf = gain[i, f]
        if gf >= 0 and (best is None or gf > best[0]):
            lo, hi = xs[i, f], xs[i + 1, f]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (float(gf), f, float(thr))
    return best


def _leaf_value(y, margin, g, h, learning_rate) -> float:
    value = -g.sum() / max(h.sum(), _HESS_FLOOR)
    if not np.isfinite(value):
        return 0.0
    before = _sample_losses(y, margin).sum()
    for _ in range(_MAX_HALVINGS):
        if _sample_losses(y, margin + learning_rate * value).sum() <= before:
            return float(value)
        value *= 0.5
    return 0.0


def _grow_tree(X, y, margin, g, h, cfg: TrainConfig) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    def build(idx: np.ndarray, depth: int) -> int:
        node = new_node()
        split = _best_split(X[idx], g[idx], h[idx], cfg.min_samples_leaf) if depth < cfg.max_depth else None
        if split is None:
            value[node] = _leaf_value(y[idx], margin[idx], g[idx], h[idx], cfg.learning_rate)
            return node
        _, f, thr = split
        mask = X[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = build(idx[mask], depth + 1)
        right[node] = build(idx[~mask], depth + 1)
        return node

    build(np.arange(X.shape[0]), 0)
    return Tree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        value=np.array(value, dtype=np.float64),
    )


def train(features, labels, config: TrainConfig = TrainConfig()) -> GbdtModel:
    """Fit a boosted ensemble on a feature matrix and 0/1 labels.

    With a single class present a constant model is returned (no trees) and a
    :class:`DegenerateLabels` warning is issued.
    """
    X = _as_matrix(features)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if y.size != X.shape[0]:
        raise DimensionMismatch(f"{X.shape[0]} feature rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.size < 1:
        raise ValueError("no training samples")

    prevalence = float(np.clip(y.mean(), EPS, 1.0 - EPS))
    base = math.log(prevalence / (1.0 - prevalence))
    model = GbdtModel(
        base_score=base,
        trees=[],
        learning_rate=config.learning_rate,
        max_depth=config.max_depth,
        num_rounds=config.num_rounds,
        n_features=X.shape[1],
        seed=config.seed,
    )
    margin = np.full(y.size, base)
    model.train_loss.append(float(_sample_losses(y, margin).mean()))
    if y.min() == y.max():
        warnings.warn(
            f"all {y.size} labels are {int(y[0])}; returning a constant model",
            DegenerateLabels,
            stacklevel=2,
        )
        return model

    for _ in range(config.num_rounds):
        p = expit(margin)
        g = p - y
        h = p * (1.0 - p)
        tree = _grow_tree(X, y, margin, g, h, config)
        margin = margin + config.learning_rate * tree.predict(X)
        model.trees.append(tree)
        model.train_loss.append(float(_sample_losses(y, margin).mean()))
    return model


def predict(model: GbdtModel, features) -> np.ndarray:
    """Scores in (0, 1): logistic of base score plus shrunken tree outputs."""
    return _probabilities(model.decision_function(features))


# -- persistence -----------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")
_MODEL = struct.Struct("<ddIIIqI")
_NODE = struct.Struct("<idiid")


def save_model(model: GbdtModel) -> bytes:
    """Versioned, length-prefixed binary encoding of the model."""
    buf = io.BytesIO()
    buf.write(
        _MODEL.pack(
            model.base_score,
            model.learning_rate,
            model.max_depth,
            model.num_rounds,
            model.n_features,
            model.seed,
            len(model.trees),
        )
    )
    for tree in model.trees:
        buf.write(struct.pack("<I", tree.n_nodes))
        for k in range(tree.n_nodes):
            buf.write(
                _NODE.pack(
                    int(tree.feature[k]),
                    float(tree.threshold[k]),
                    int(tree.left[k]),
                    int(tree.right[k]),
                    float(tree.value[k]),
                )
            )
    buf.write(struct.pack("<I", len(model.train_loss)))
    buf.write(np.asarray(model.train_loss, dtype="<f8").tobytes())
    payload = buf.getvalue()
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(payload)) + payload


def load_model(data: bytes) -> GbdtModel:
    if len(data) < _HEADER.size:
        raise MalformedModel(f"truncated header: {len(data)} bytes")
    magic, version, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MalformedModel(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise MalformedModel(f"unsupported model version {version} (expected {FORMAT_VERSION})")
    payload = data[_HEADER.size :]
    if len(payload) != length:
        raise MalformedModel(f"payload is {len(payload)} bytes, header declares {length}")
    try:
        pos = 0
        base, lr, depth, rounds, n_features, seed, n_trees = _MODEL.unpack_from(payload, pos)
        pos += _MODEL.size
        trees = []
        for _ in range(n_trees):
            (n_nodes,) = struct.unpack_from("<I", payload, pos)
            pos += 4
            nodes = [_NODE.unpack_from(payload, pos + k * _NODE.size) for k in range(n_nodes)]
            pos += n_nodes * _NODE.size
            cols = list(zip(*nodes)) if nodes else [(), (), (), (), ()]
            trees.append(
                Tree(
                    feature=np.array(cols[0], dtype=np.int32),
                    threshold=np.array(cols[1], dtype=np.float64),
                    left=np.array(cols[2], dtype=np.int32),
                    right=np.array(cols[3], dtype=np.int32),
                    value=np.array(cols[4], dtype=np.float64),
                )
            )
        (n_loss,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        if pos + 8 * n_loss != len(payload):
            raise MalformedModel("trailing or missing bytes after tree list")
        loss = np.frombuffer(payload, dtype="<f8", count=n_loss, offset=pos).tolist()
    except struct.error as exc:
        raise MalformedModel(f"truncated model: {exc}") from None
    model = GbdtModel(base, trees, lr, depth, rounds, n_features, seed, loss)
    _check_model(model)
    return model


def _check_model(model: GbdtModel) -> None:
    for t_idx, tree in enumerate(model.trees):
        n = tree.n_nodes
        if n == 0:
            raise MalformedModel(f"tree {t_idx} has no nodes")
        internal = tree.feature >= 0
        if np.any(tree.feature[internal] >= model.n_features):
            raise MalformedModel(f"tree {t_idx} references a feature >= {model.n_features}")
        kids = np.concatenate([tree.left[internal], tree.right[internal]])
        if np.any((kids <= 0) | (kids >= n)):
            raise MalformedModel(f"tree {t_idx} has out-of-range child indices")
        if tree.depth() > model.max_depth:
            raise MalformedModel(f"tree {t_idx} deeper than max_depth {model.max_depth}")


def dump_model(model: GbdtModel) -> str:
    """Human-readable dump, one node per line."""
    lines = [
        f"base_score={model.base_score!r} learning_rate={model.learning_rate!r} "
        f"max_depth={model.max_depth} num_rounds={model.num_rounds} "
        f"n_features={model.n_features} trees={len(model.trees)}"
    ]
    for t_idx, tree in enumerate(model.trees):
        lines.append(f"tree {t_idx}")
        for k in range(tree.n_nodes):
            if tree.feature[k] < 0:
                lines.append(f"  {k}: leaf value={float(tree.value[k])!r}")
            else:
                lines.append(
                    f"  {k}: f{int(tree.feature[k])} <= {float(tree.threshold[k])!r} "
                    f"? {int(tree.left[k])} : {int(tree.right[k])}"
                )
    return "\n".join(lines) + "\n"


# -- patient-level scoring -------------------------------------------------

WHOLE = "whole"
MAX_NODULE = "max-nodule"


def patient_score(model: GbdtModel, nodules: Sequence, scheme, extent, mode: str = WHOLE,
                  include_location: bool = False) -> float:
    """Score a patient from its nodule list.

    ``whole`` pools every nodule into one vector. ``max-nodule`` scores each
    nodule alone (all others removed) and returns the highest score; an empty
    list scores the all-zero vector in both modes.
    """
    from .pyramid import mask_single, pool

    if mode not in (WHOLE, MAX_NODULE):
        raise ValueError(f"unknown mode {mode!r}; use {WHOLE!r} or {MAX_NODULE!r}")
    if mode == WHOLE or not nodules:
        return float(predict(model, pool(nodules, scheme, extent, include_location))[0])
    rows = np.vstack(
        [pool(mask_single(nodules, i), scheme, extent, include_location) for i in range(len(nodules))]
    )
    return float(predict(model, rows).max())


# -- estimator -------------------------------------------------------------

class GradientBoostedTreesClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier with a scikit-learn interface.

    Parameters
    ----------
    num_rounds : int
        Boosting rounds (trees).
    learning_rate : float
        Shrinkage applied to every tree, in (0, 1].
    max_depth : int
        Maximum depth of each tree (1 = stumps).
    min_samples_leaf : int
        Minimum training rows in any leaf.
    seed : int
        Recorded in the model; training itself is deterministic.
    threshold : float
        ``predict`` returns the positive class when the score is >= threshold.
    """

    def __init__(self, num_rounds=100, learning_rate=0.1, max_depth=3, min_samples_leaf=5, seed=0,
                 threshold=0.5):
        self.num_rounds = num_rounds
        self.learning_rate = learning_rate
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.threshold = threshold

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if self.classes_.size > 2:
            raise ValueError(f"binary classification only; got classes {self.classes_.tolist()}")
        if self.classes_.size == 2:
            y01 = (y == self.classes_[1]).astype(np.float64)
        else:
            # single class: keep the 0/1 meaning if possible so the constant model points the right way
            y01 = (y == 1).astype(np.float64) if self.classes_[0] in (0, 1) else np.ones_like(y, dtype=float)
        config = TrainConfig(self.num_rounds, self.learning_rate, self.max_depth, self.min_samples_leaf, self.seed)
        self.model_ = train(X, y01, config)
        self.n_features_in_ = X.shape[1]
        self.train_loss_ = np.asarray(self.model_.train_loss)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.decision_function(X)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        p = predict(self.model_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        p = self.predict_proba(X)[:, 1]
        positive = p >= self.threshold
        if self.classes_.size == 1:
            return np.full(p.shape, self.classes_[0])
        return np.where(positive, self.classes_[1], self.classes_[0])
