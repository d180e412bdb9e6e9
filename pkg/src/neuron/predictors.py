"""Binary mortality-risk predictors behind one pluggable interface.

Three reference implementations:

  * LOGISTIC: L2-regularized logistic regression, full-batch gradient
    descent with backtracking (training loss never increases).
  * MLP: one hidden layer of ReLU units, full-batch gradient descent with
    the same backtracking scheme.
  * GBT: Newton-boosted depth-limited regression trees on logistic loss.
    Split selection depends only on the ordering of feature values, so
    per-column monotone affine rescaling of inputs leaves the fitted
    ensemble's validation predictions identical.

All models expose calibrated outputs in both spaces: ``predict_logit`` is
the native score and ``predict_proba`` its sigmoid, so the pair is always
mutually consistent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DegenerateLabels,
    DimensionMismatch,
    SingleClassValidation,
)

MODEL_FORMAT_VERSION = 1

PREDICTOR_KINDS = ("LOGISTIC", "MLP", "GBT")

# scaling each model family expects its inputs in
DEFAULT_SCALING = {"LOGISTIC": "ZSCORE", "MLP": "ZSCORE", "GBT": "NONE"}


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_with_logits(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^-|z|) + max(z, 0) - z*y, numerically stable
    return float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))


class Predictor:
    """Interface shared by all model kinds."""

    kind: str = ""
    scaling_mode: str = "NONE"
    n_features: int = 0
    loss_history: list

    def predict_logit(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.predict_logit(X))

    def _check_width(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(self.n_features, X.shape[1])
        return X

    def to_dict(self) -> dict:
        raise NotImplementedError


class LogisticModel(Predictor):
    kind = "LOGISTIC"
    scaling_mode = "ZSCORE"

    def __init__(self, weights: np.ndarray, bias: float, loss_history: Optional[list] = None):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = float(bias)
        self.n_features = len(self.weights)
        self.loss_history = loss_history or []

    def predict_logit(self, X: np.ndarray) -> np.ndarray:
        X = self._check_width(X)
        return X @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "scaling_mode": self.scaling_mode,
            "weights": self.weights.tolist(),
            "bias": self.bias,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "LogisticModel":
        return cls(np.array(payload["weights"]), payload["bias"])


class MLPModel(Predictor):
    kind = "MLP"
    scaling_mode = "ZSCORE"

    def __init__(self, w1, b1, w2, b2, loss_history: Optional[list] = None):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = float(b2)
        self.n_features = self.w1.shape[0]
        self.loss_history = loss_history or []

    def predict_logit(self, X: np.ndarray) -> np.ndarray:
        X = self._check_width(X)
        hidden = np.maximum(X @ self.w1 + self.b1, 0.0)
        return hidden @ self.w2 + self.b2

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "scaling_mode": self.scaling_mode,
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MLPModel":
        return cls(payload["w1"], payload["b1"], payload["w2"], payload["b2"])


@dataclass
class _TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: int = -1
    right: int = -1
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature < 0


def _tree_arrays(nodes: list) -> dict:
    return {
        "feature": np.array([n.feature for n in nodes], dtype=np.int64),
        "threshold": np.array([n.threshold for n in nodes], dtype=np.float64),
        "left": np.array([n.left for n in nodes], dtype=np.int64),
        "right": np.array([n.right for n in nodes], dtype=np.int64),
        "value": np.array([n.value for n in nodes], dtype=np.float64),
    }


def _tree_predict(tree: dict, X: np.ndarray) -> np.ndarray:
    idx = np.zeros(X.shape[0], dtype=np.int64)
    active = tree["feature"][idx] >= 0
    while active.any():
        rows = np.nonzero(active)[0]
        cur = idx[rows]
        go_left = X[rows, tree["feature"][cur]] <= tree["threshold"][cur]
        idx[rows] = np.where(go_left, tree["left"][cur], tree["right"][cur])
        active = tree["feature"][idx] >= 0
    return tree["value"][idx]


class GBTModel(Predictor):
    kind = "GBT"
    scaling_mode = "NONE"

    def __init__(self, init_score: float, trees: list, shrinkage: float,
                 n_features: int, loss_history: Optional[list] = None):
        self.init_score = float(init_score)
        self.trees = trees  # list of tree array dicts
        self.shrinkage = float(shrinkage)
        self.n_features = n_features
        self.loss_history = loss_history or []

    def predict_logit(self, X: np.ndarray) -> np.ndarray:
        X = self._check_width(X)
        scores = np.full(X.shape[0], self.init_score)
        for tree in self.trees:
            scores += self.shrinkage * _tree_predict(tree, X)
        return scores

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "scaling_mode": self.scaling_mode,
            "init_score": self.init_score,
            "shrinkage": self.shrinkage,
            "n_features": self.n_features,
            "trees": [
                {key: tree[key].tolist() for key in tree}
                for tree in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "GBTModel":
        trees = []
        for raw in payload["trees"]:
            trees.append({
                "feature": np.array(raw["feature"], dtype=np.int64),
                "threshold": np.array(raw["threshold"], dtype=np.float64),
                "left": np.array(raw["left"], dtype=np.int64),
                "right": np.array(raw["right"], dtype=np.int64),
                "value": np.array(raw["value"], dtype=np.float64),
            })
        return cls(payload["init_score"], trees, payload["shrinkage"], payload["n_features"])


# --- training ---------------------------------------------------------------

def _descend(params: list, grads, loss_fn, epochs: int, lr: float) -> list:
    """Full-batch gradient descent with backtracking; returns the loss history.

    A step is only taken when it does not increase the loss, so the history
    is non-increasing by construction.
    """
    history = [loss_fn(params)]
    step = lr
    for _ in range(epochs):
        g = grads(params)
        accepted = False
        trial = params
        for _ in range(50):
            trial = [p - step * gi for p, gi in zip(params, g)]
            new_loss = loss_fn(trial)
            if new_loss <= history[-1] + 1e-12:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            history.append(history[-1])
            continue
        for p, t in zip(params, trial):
            p[...] = t
        history.append(new_loss)
        step = min(step * 1.1, lr * 10)
    return history


def _train_logistic(X: np.ndarray, y: np.ndarray, hyper: dict, seed: int) -> LogisticModel:
    epochs = int(hyper.get("epochs", 600))
    lr = float(hyper.get("lr", 0.5))
    l2 = float(hyper.get("l2", 1e-4))
    n, d = X.shape
    w = np.zeros(d)
    b = np.zeros(1)

    def loss(params) -> float:
        pw, pb = params
        z = X @ pw + pb[0]
        return _bce_with_logits(z, y) + 0.5 * l2 * float(pw @ pw)

    def grads(params):
        pw, pb = params
        p = _sigmoid(X @ pw + pb[0])
        resid = (p - y) / n
        return [X.T @ resid + l2 * pw, np.array([resid.sum()])]

    history = _descend([w, b], grads, loss, epochs, lr)
    return LogisticModel(w, float(b[0]), loss_history=history)


def _train_mlp(X: np.ndarray, y: np.ndarray, hyper: dict, seed: int) -> MLPModel:
    hidden = int(hyper.get("hidden", 32))
    epochs = int(hyper.get("epochs", 300))
    lr = float(hyper.get("lr", 0.05))
    l2 = float(hyper.get("l2", 1e-4))
    n, d = X.shape
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, math.sqrt(1.0 / hidden), size=hidden)
    b2 = np.zeros(1)

    def forward(params):
        pw1, pb1, pw2, pb2 = params
        h = np.maximum(X @ pw1 + pb1, 0.0)
        return h, h @ pw2 + pb2[0]

    def loss(params) -> float:
        pw1, _, pw2, _ = params
        _, z = forward(params)
        reg = 0.5 * l2 * (float((pw1 * pw1).sum()) + float(pw2 @ pw2))
        return _bce_with_logits(z, y) + reg

    def grads(params):
        pw1, pb1, pw2, pb2 = params
        h, z = forward(params)
        dz = (_sigmoid(z) - y) / n
        gw2 = h.T @ dz + l2 * pw2
        gb2 = np.array([dz.sum()])
        dh = np.outer(dz, pw2)
        dh[h <= 0.0] = 0.0
        gw1 = X.T @ dh + l2 * pw1
        gb1 = dh.sum(axis=0)
        return [gw1, gb1, gw2, gb2]

    history = _descend([w1, b1, w2, b2], grads, loss, epochs, lr)
    return MLPModel(w1, b1, w2, float(b2[0]), loss_history=history)


def _build_tree(
    X: np.ndarray,
    order: np.ndarray,  # presorted row indices per feature, (n, d)
    g: np.ndarray,
    h: np.ndarray,
    idx: np.ndarray,
    max_depth: int,
    reg_lambda: float,
) -> list:
    """Exact greedy tree on gradient/hessian statistics.

    Candidate splits sit between consecutive distinct sorted values; gains
    depend only on the (g, h) partition, so the structure is invariant to
    monotone rescaling of the inputs.
    """
    nodes: list[_TreeNode] = []

    def leaf_value(sel: np.ndarray) -> float:
        return -g[sel].sum() / (h[sel].sum() + reg_lambda)

    def grow(sel: np.ndarray, depth: int) -> int:
        node_id = len(nodes)
        nodes.append(_TreeNode(value=leaf_value(sel)))
        if depth >= max_depth or len(sel) < 2:
            return node_id

        g_tot = g[sel].sum()
        h_tot = h[sel].sum()
        parent_score = g_tot * g_tot / (h_tot + reg_lambda)
        best_gain = 1e-12
        best: Optional[tuple[int, int, np.ndarray]] = None  # feature, pos, sorted sel

        in_node = np.zeros(X.shape[0], dtype=bool)
        in_node[sel] = True
        for f in range(X.shape[1]):
            ordered = order[:, f][in_node[order[:, f]]]
            vals = X[ordered, f]
            gc = np.cumsum(g[ordered])
            hc = np.cumsum(h[ordered])
            cut = np.nonzero(vals[:-1] < vals[1:])[0]
            if len(cut) == 0:
                continue
            gl, hl = gc[cut], hc[cut]
            gr, hr = g_tot - gl, h_tot - hl
            gains = gl * gl / (hl + reg_lambda) + gr * gr / (hr + reg_lambda) - parent_score
            k = int(np.argmax(gains))
            if gains[k] > best_gain:
                best_gain = float(gains[k])
                best = (f, int(cut[k]), ordered)

        if best is None:
            return node_id
        f, pos, ordered = best
        threshold = 0.5 * (X[ordered[pos], f] + X[ordered[pos + 1], f])
        left_sel = ordered[: pos + 1]
        right_sel = ordered[pos + 1 :]
        left_id = grow(left_sel, depth + 1)
        right_id = grow(right_sel, depth + 1)
        nodes[node_id] = _TreeNode(feature=f, threshold=float(threshold),
                                   left=left_id, right=right_id,
                                   value=nodes[node_id].value)
        return node_id

    grow(idx, 0)
    return nodes


def _train_gbt(X: np.ndarray, y: np.ndarray, hyper: dict, seed: int) -> GBTModel:
    rounds = int(hyper.get("rounds", 100))
    max_depth = int(hyper.get("max_depth", 3))
    shrinkage = float(hyper.get("shrinkage", 0.1))
    reg_lambda = float(hyper.get("reg_lambda", 1.0))
    n, d = X.shape

    base = min(max(float(y.mean()), 1e-6), 1 - 1e-6)
    init_score = math.log(base / (1.0 - base))
    order = np.argsort(X, axis=0, kind="stable")

    scores = np.full(n, init_score)
    trees: list = []
    history = [_bce_with_logits(scores, y)]
    idx_all = np.arange(n)
    for _ in range(rounds):
        p = _sigmoid(scores)
        g = p - y
        h = p * (1.0 - p)
        nodes = _build_tree(X, order, g, h, idx_all, max_depth, reg_lambda)
        tree = _tree_arrays(nodes)
        scores = scores + shrinkage * _tree_predict(tree, X)
        trees.append(tree)
        history.append(_bce_with_logits(scores, y))
    return GBTModel(init_score, trees, shrinkage, d, loss_history=history)


def train(kind: str, matrix, labels: Sequence[int], hyper: Optional[dict] = None, seed: int = 0) -> Predictor:
    """Fit a predictor of the requested kind; deterministic per seed."""
    if kind not in PREDICTOR_KINDS:
        raise ValueError(f"unknown predictor kind {kind!r}")
    X = matrix.values if hasattr(matrix, "values") else np.asarray(matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if X.shape[0] != len(y):
        raise DimensionMismatch(X.shape[0], len(y))
    classes = np.unique(y)
    if len(classes) < 2:
        raise DegenerateLabels()
    if not set(classes.tolist()) <= {0.0, 1.0}:
        raise ValueError("labels must be binary 0/1")
    hyper = dict(hyper or {})
    if kind == "LOGISTIC":
        return _train_logistic(X, y, hyper, seed)
    if kind == "MLP":
        return _train_mlp(X, y, hyper, seed)
    return _train_gbt(X, y, hyper, seed)


def predict_proba(model: Predictor, x: np.ndarray) -> np.ndarray | float:
    """Probability of the positive class; scalar for a single row."""
    arr = np.asarray(x, dtype=np.float64)
    out = model.predict_proba(arr)
    return float(out[0]) if arr.ndim == 1 else out


def predict_logit(model: Predictor, x: np.ndarray) -> np.ndarray | float:
    arr = np.asarray(x, dtype=np.float64)
    out = model.predict_logit(arr)
    return float(out[0]) if arr.ndim == 1 else out


# --- evaluation ---------------------------------------------------------------

def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with midranks, so ties count one half."""
    y = np.asarray(labels, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClassValidation()
    ranks = _midranks(s)
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _midranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass
class PerformanceRow:
    auc: float
    auc_ci_lo: float
    auc_ci_hi: float
    accuracy: float
    sensitivity: float
    precision: float
    f1: float
    specificity: float
    n_boot: int
    model: str = ""
    config: str = ""
    seed: int = 0

    CSV_FIELDS = (
        "model", "config", "seed",
        "auc", "auc_ci_lo", "auc_ci_hi",
        "accuracy", "sensitivity", "precision", "f1", "specificity",
    )

    def as_csv_row(self) -> list[str]:
        out = []
        for name in self.CSV_FIELDS:
            value = getattr(self, name)
            out.append("%.10g" % value if isinstance(value, float) else str(value))
        return out


def confusion_metrics(labels: np.ndarray, probs: np.ndarray, threshold: float = 0.5) -> dict:
    y = np.asarray(labels)
    pred = (np.asarray(probs) >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    tn = int(((pred == 0) & (y == 0)).sum())
    sens = tp / (tp + fn) if tp + fn else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    spec = tn / (tn + fp) if tn + fp else 0.0
    f1 = 2 * prec * sens / (prec + sens) if prec + sens else 0.0
    acc = (tp + tn) / len(y)
    return {
        "accuracy": acc, "sensitivity": sens, "precision": prec,
        "f1": f1, "specificity": spec,
    }


def evaluate(model: Predictor, val_matrix, val_labels: Sequence[int],
             n_boot: int = 1000, seed: int = 0) -> PerformanceRow:
    """Validation metrics at threshold 0.5 plus a percentile bootstrap CI on AUC.

    Bootstrap replicates use child seeds spawned from ``seed`` so iterations
    are order-independent; single-class resamples are skipped.
    """
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    X = val_matrix.values if hasattr(val_matrix, "values") else np.asarray(val_matrix, dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise SingleClassValidation()

    probs = model.predict_proba(X)
    auc = roc_auc(y, probs)
    conf = confusion_metrics(y, probs)

    children = np.random.SeedSequence(seed).spawn(n_boot)
    replicates = []
    for child in children:
        rng = np.random.default_rng(child)
        idx = rng.integers(0, len(y), len(y))
        yb = y[idx]
        if yb.min() == yb.max():
            continue
        replicates.append(roc_auc(yb, probs[idx]))
    reps = np.array(replicates)
    ci_lo, ci_hi = np.percentile(reps, [2.5, 97.5])

    return PerformanceRow(
        auc=auc, auc_ci_lo=float(ci_lo), auc_ci_hi=float(ci_hi),
        accuracy=conf["accuracy"], sensitivity=conf["sensitivity"],
        precision=conf["precision"], f1=conf["f1"], specificity=conf["specificity"],
        n_boot=len(reps),
    )


# --- persistence ----------------------------------------------------------------

_MODEL_CLASSES = {"LOGISTIC": LogisticModel, "MLP": MLPModel, "GBT": GBTModel}


def save_model(model: Predictor, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_dict(), fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> Predictor:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {payload.get('format_version')!r}")
    cls = _MODEL_CLASSES.get(payload.get("kind", ""))
    if cls is None:
        raise ValueError(f"unknown model kind {payload.get('kind')!r}")
    return cls.from_dict(payload)
