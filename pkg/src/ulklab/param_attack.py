"""Parameter-space attacks on an unlearned classifier.

The attacker holds small label-pure sample sets for every class. For each
subset it trains an auxiliary model: the target's feature extractor is
frozen and a freshly initialized head is fit on the subset alone. Heads
trained on classes the target still knows end up aligned with the
target's own head; heads trained on a forgotten class have to relearn it
from scratch and land somewhere else. Two feature sets expose that gap:

- dot features: the scalar ``<w_target, w_aux>`` per auxiliary model,
  consistently smaller when the auxiliary class was forgotten;
- diff features: the vector ``w_aux - w_target``, classified coordinate-
  wise by a small decision tree.

Scalar features are screened by a Youden-index threshold or exact 1-D
k-means; per class, a majority vote over its auxiliary rows decides
whether the class lands in the predicted forgotten set.
"""

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .data import (UNLEARN_CANDIDATE, ForgetTask, LabeledDataset,
                   per_class_subsets)
from .models import (ModelArtifact, ParameterVector,
                     clone_frozen_head_template, head_vector)
from .training import TrainConfig, train

DEFAULT_SUBSET_SIZE = 20
DEFAULT_MODELS_PER_CLASS = 50
DEFAULT_TREE_DEPTH = 4
AUX_EPOCHS = 15
AUX_LR = 0.1

ORIENT_LOW = "low"
ORIENT_HIGH = "high"


@dataclass(frozen=True)
class AuxHead:
    """One trained auxiliary head and the subset it was fit on."""

    vector: ParameterVector
    class_id: int
    aux_id: int
    role: str


@dataclass(frozen=True)
class DotFeatureSet:
    values: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray
    aux_ids: np.ndarray

    def __post_init__(self):
        n = len(self.values)
        if not (len(self.labels) == len(self.class_ids) == len(self.aux_ids) == n):
            raise ValueError("feature columns must share one length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (rest) or 1 (unlearn)")

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class DiffFeatureSet:
    vectors: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray
    aux_ids: np.ndarray

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise ValueError("diff vectors must form a 2-D matrix")
        n = len(self.vectors)
        if not (len(self.labels) == len(self.class_ids) == len(self.aux_ids) == n):
            raise ValueError("feature columns must share one length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (rest) or 1 (unlearn)")

    def __len__(self):
        return len(self.vectors)


def train_aux_models(target: ModelArtifact, subsets: list,
                     cfg: TrainConfig) -> list:
    """Fit one frozen-feature auxiliary head per subset.

    Head inits are drawn from per-(class, index) streams of ``cfg.seed``,
    so the batch is deterministic and no two clones share an init.
    """
    counters: dict = defaultdict(int)
    out = []
    for sub in subsets:
        if len(sub.x) == 0:
            raise ValueError(f"class {sub.class_id} subset is empty")
        idx = counters[sub.class_id]
        counters[sub.class_id] += 1
        template = clone_frozen_head_template(target, cfg.seed,
                                              class_id=sub.class_id, index=idx)
        y = np.full(len(sub.x), sub.class_id, dtype=np.int64)
        ds = LabeledDataset(sub.x, y, n_classes=target.spec.n_classes,
                            split=f"aux-c{sub.class_id}-i{idx}", filtered=True)
        result = train(template, ds, cfg)
        out.append(AuxHead(head_vector(result.model), sub.class_id, idx,
                           sub.role))
    return out


def aux_config(seed: int, epochs: int = AUX_EPOCHS, lr: float = AUX_LR,
               batch_size: int = DEFAULT_SUBSET_SIZE) -> TrainConfig:
    return TrainConfig(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)


def _label_of(head: AuxHead) -> int:
    return 1 if head.role == UNLEARN_CANDIDATE else 0


def dot_features(w_target: ParameterVector, aux: list,
                 cosine: bool = False) -> DotFeatureSet:
    """One scalar row per auxiliary head: its dot product with the target."""
    wt = w_target.values
    if cosine:
        wt = wt / np.linalg.norm(wt)
    values = []
    for head in aux:
        wa = head.vector.values
        if cosine:
            wa = wa / np.linalg.norm(wa)
        values.append(float(wt @ wa))
    return DotFeatureSet(np.asarray(values),
                         np.asarray([_label_of(h) for h in aux]),
                         np.asarray([h.class_id for h in aux]),
                         np.asarray([h.aux_id for h in aux]))


def diff_features(w_target: ParameterVector, aux: list) -> DiffFeatureSet:
    """One vector row per auxiliary head: ``w_aux - w_target``."""
    rows = np.stack([head.vector.values - w_target.values for head in aux])
    return DiffFeatureSet(rows,
                          np.asarray([_label_of(h) for h in aux]),
                          np.asarray([h.class_id for h in aux]),
                          np.asarray([h.aux_id for h in aux]))


@dataclass(frozen=True)
class YoudenResult:
    """Best TPR - FPR cut over score midpoints.

    ``orientation`` is the side carrying label 1: "low" marks
    ``score <= threshold`` as 1, "high" marks ``score > threshold``.
    ``degenerate`` flags J == 0 (no cut separates better than chance).
    """

    threshold: float
    orientation: str
    j_stat: float
    degenerate: bool

    def predict(self, scores) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        if self.orientation == ORIENT_LOW:
            return (scores <= self.threshold).astype(np.int64)
        return (scores > self.threshold).astype(np.int64)


def youden_threshold(scores, labels) -> YoudenResult:
    """Threshold maximizing Youden's J over midpoints of sorted scores.

    Ties prefer the lower threshold, then the "low" orientation.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be equal-length 1-D")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("youden threshold needs both labels present")
    distinct = np.unique(scores)
    if len(distinct) == 1:
        return YoudenResult(float(distinct[0]), ORIENT_LOW, 0.0, True)
    cuts = (distinct[:-1] + distinct[1:]) / 2.0
    best = None
    for cut in cuts:
        low = scores <= cut
        tpr_low = (labels[low] == 1).sum() / n_pos
        fpr_low = (labels[low] == 0).sum() / n_neg
        for orient, j in ((ORIENT_LOW, tpr_low - fpr_low),
                          (ORIENT_HIGH, fpr_low - tpr_low)):
            if best is None or j > best.j_stat + 1e-12:
                best = YoudenResult(float(cut), orient, float(j), False)
    if best.j_stat <= 1e-12:
        return YoudenResult(best.threshold, best.orientation, 0.0, True)
    return best


@dataclass(frozen=True)
class KMeans1DResult:
    """Exact K=2 clustering of scalar scores.

    ``labels`` marks the smaller-centroid cluster with 1 (the unlearn
    side, matching the dot-product separation direction).
    """

    labels: np.ndarray
    boundary: float
    centroids: tuple
    sse: float


def kmeans_1d(scores) -> KMeans1DResult:
    """Optimal 2-cluster split of scalars by within-cluster SSE.

    The 1-D optimum is contiguous in sorted order, so scanning every
    split point is exact. SSE ties keep the leftmost split.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) < 2:
        raise ValueError("kmeans_1d needs at least two scores")
    if len(np.unique(scores)) < 2:
        raise ValueError("kmeans_1d needs at least two distinct values")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    n = len(s)
    csum = np.concatenate([[0.0], np.cumsum(s)])
    csq = np.concatenate([[0.0], np.cumsum(s * s)])

    def sse(lo, hi):
        total = csum[hi] - csum[lo]
        return (csq[hi] - csq[lo]) - total * total / (hi - lo)

    best_i, best_sse = 1, np.inf
    for i in range(1, n):
        cur = sse(0, i) + sse(i, n)
        if cur < best_sse - 1e-15:
            best_i, best_sse = i, cur
    left_mean = csum[best_i] / best_i
    right_mean = (csum[n] - csum[best_i]) / (n - best_i)
    boundary = (s[best_i - 1] + s[best_i]) / 2.0
    in_left = np.zeros(n, dtype=bool)
    in_left[order[:best_i]] = True
    labels = np.zeros(n, dtype=np.int64)
    if left_mean <= right_mean:
        labels[in_left] = 1
    else:
        labels[~in_left] = 1
    return KMeans1DResult(labels, float(boundary),
                          (float(left_mean), float(right_mean)),
                          float(best_sse))


@dataclass(frozen=True)
class TreeNode:
    """One node of a CART tree; leaves carry ``label``, splits carry both
    children."""

    label: int | None = None
    feature: int | None = None
    threshold: float | None = None
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode
    max_depth: int
    n_features: int


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def _best_split(x: np.ndarray, y: np.ndarray):
    """Exhaustive (feature, midpoint) search minimizing weighted Gini.

    Ties prefer the lower feature index, then the lower threshold.
    Returns None when no split improves on the parent node.
    """
    n, d = x.shape
    parent = _gini(np.bincount(y, minlength=2))
    best = None
    for f in range(d):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        sc, sy = col[order], y[order]
        ones = np.cumsum(sy)
        total_ones = ones[-1]
        for i in range(1, n):
            if sc[i] == sc[i - 1]:
                continue
            left_counts = np.array([i - ones[i - 1], ones[i - 1]])
            right_counts = np.array([(n - i) - (total_ones - ones[i - 1]),
                                     total_ones - ones[i - 1]])
            w = (i * _gini(left_counts) + (n - i) * _gini(right_counts)) / n
            gain = parent - w
            if gain > 1e-12 and (best is None or gain > best[0] + 1e-12):
                best = (gain, f, float((sc[i - 1] + sc[i]) / 2.0))
    if best is None:
        return None
    return best[1], best[2]


def _grow(x: np.ndarray, y: np.ndarray, depth: int, max_depth: int) -> TreeNode:
    ones = int((y == 1).sum())
    zeros = len(y) - ones
    if ones == 0 or zeros == 0 or depth == max_depth:
        # majority label; exact tie falls back to 0 (rest side)
        return TreeNode(label=1 if ones > zeros else 0)
    split = _best_split(x, y)
    if split is None:
        return TreeNode(label=1 if ones > zeros else 0)
    f, thr = split
    mask = x[:, f] <= thr
    return TreeNode(feature=f, threshold=thr,
                    left=_grow(x[mask], y[mask], depth + 1, max_depth),
                    right=_grow(x[~mask], y[~mask], depth + 1, max_depth))


def tree_fit(features: DiffFeatureSet | np.ndarray, labels=None,
             max_depth: int = DEFAULT_TREE_DEPTH) -> DecisionTree:
    """CART with Gini impurity over raw difference vectors."""
    if isinstance(features, DiffFeatureSet):
        x, y = features.vectors, features.labels
    else:
        x, y = np.asarray(features, dtype=np.float64), np.asarray(labels)
    if x.ndim == 1:
        x = x[:, None]
    if max_depth < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")
    return DecisionTree(_grow(x, y.astype(np.int64), 0, max_depth),
                        max_depth, x.shape[1])


def tree_predict(tree: DecisionTree, vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != tree.n_features:
        raise ValueError(f"expected {tree.n_features} features, got {x.shape[1]}")
    out = np.empty(len(x), dtype=np.int64)
    for i, row in enumerate(x):
        node = tree.root
        while not node.is_leaf:
            node = node.left if row[node.feature] <= node.threshold else node.right
        out[i] = node.label
    return out[0] if single else out


def infer_forgotten(row_labels, class_ids) -> frozenset:
    """Majority vote of row labels per class; exact ties stay excluded."""
    row_labels = np.asarray(row_labels)
    class_ids = np.asarray(class_ids)
    predicted = set()
    for c in np.unique(class_ids):
        votes = row_labels[class_ids == c]
        if (votes == 1).sum() * 2 > len(votes):
            predicted.add(int(c))
    return frozenset(predicted)


@dataclass(frozen=True)
class ParamAttackResult:
    predicted: frozenset
    features: DotFeatureSet | DiffFeatureSet
    detail: dict


def _candidate_subsets(dataset: LabeledDataset, task: ForgetTask,
                       k: int, m_models: int, seed: int) -> list:
    subsets = per_class_subsets(dataset, k, m_models, seed)
    return [s.as_candidate(UNLEARN_CANDIDATE)
            if s.class_id in task.forget_classes else s for s in subsets]


def param_dot_attack(target: ModelArtifact, dataset: LabeledDataset,
                     task: ForgetTask, seed: int, screen: str = "youden",
                     k: int = DEFAULT_SUBSET_SIZE,
                     m_models: int = DEFAULT_MODELS_PER_CLASS,
                     cosine: bool = False,
                     aux: list | None = None) -> ParamAttackResult:
    """Dot-product feature attack, screened by Youden cut or 1-D k-means.

    The Youden route fits its cut on oracle-labeled rows (the evaluation
    protocol for separability); the k-means route never reads labels.
    Pass ``aux`` to reuse heads already trained for this target.
    """
    if screen not in ("youden", "kmeans"):
        raise ValueError(f"unknown screen {screen!r}")
    if aux is None:
        subsets = _candidate_subsets(dataset, task, k, m_models, seed)
        aux = train_aux_models(target, subsets, aux_config(seed))
    feats = dot_features(head_vector(target), aux, cosine=cosine)
    if screen == "youden":
        cut = youden_threshold(feats.values, feats.labels)
        row_pred = cut.predict(feats.values)
        detail = {"screen": "youden", "threshold": cut.threshold,
                  "orientation": cut.orientation, "j_stat": cut.j_stat,
                  "degenerate": cut.degenerate}
    else:
        km = kmeans_1d(feats.values)
        row_pred = km.labels
        detail = {"screen": "kmeans", "boundary": km.boundary,
                  "centroids": km.centroids}
    predicted = infer_forgotten(row_pred, feats.class_ids)
    return ParamAttackResult(predicted, feats, detail)


def param_diff_attack(target: ModelArtifact, dataset: LabeledDataset,
                      task: ForgetTask, seed: int,
                      max_depth: int = DEFAULT_TREE_DEPTH,
                      k: int = DEFAULT_SUBSET_SIZE,
                      m_models: int = DEFAULT_MODELS_PER_CLASS,
                      aux: list | None = None) -> ParamAttackResult:
    """Difference-vector attack classified by a depth-capped CART tree."""
    if aux is None:
        subsets = _candidate_subsets(dataset, task, k, m_models, seed)
        aux = train_aux_models(target, subsets, aux_config(seed))
    feats = diff_features(head_vector(target), aux)
    tree = tree_fit(feats, max_depth=max_depth)
    row_pred = tree_predict(tree, feats.vectors)
    train_acc = float((row_pred == feats.labels).mean())
    predicted = infer_forgotten(row_pred, feats.class_ids)
    return ParamAttackResult(predicted, feats,
                             {"screen": "tree", "max_depth": max_depth,
                              "train_accuracy": train_acc})
