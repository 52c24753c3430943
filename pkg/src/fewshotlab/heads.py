"""Episode-level classifier heads fit on support features.

All heads are pure functions of their inputs: zero initialization, no
RNG, and prediction ties always break toward the lowest way index, so
accuracy numbers are deterministic. The ridge head is the one head that
is differentiable with respect to its features (for meta-training
through the closed-form solve); the SGD heads are evaluation-only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, softmax_cross_entropy, solve_psd, transpose
from .models import (
    ParamSet,
    extract_on_graph,
    extractor_layers,
    params_to_tensors,
)


@dataclass(frozen=True)
class Centroid:
    name = "centroid"


@dataclass(frozen=True)
class Ridge:
    lam: float = 1.0
    name = "ridge"

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("ridge lambda must be > 0")


@dataclass(frozen=True)
class LinearSGD:
    steps: int = 100
    lr: float = 0.1
    name = "linear_sgd"

    def __post_init__(self):
        if self.steps < 1 or self.lr < 0:
            raise ValueError("linear_sgd needs steps >= 1, lr >= 0")


@dataclass(frozen=True)
class HingeSGD:
    steps: int = 100
    lr: float = 0.1
    c: float = 1.0
    name = "hinge_sgd"

    def __post_init__(self):
        if self.steps < 1 or self.c <= 0:
            raise ValueError("hinge_sgd needs steps >= 1, C > 0")


@dataclass(frozen=True)
class FinetuneFull:
    steps: int = 10
    lr: float = 0.01
    name = "finetune"


HeadKind = Centroid | Ridge | LinearSGD | HingeSGD | FinetuneFull

HEAD_NAMES = ("centroid", "ridge", "linear_sgd", "hinge_sgd", "finetune")


def head_from_name(name: str) -> HeadKind:
    table = {
        "centroid": Centroid,
        "ridge": Ridge,
        "linear_sgd": LinearSGD,
        "hinge_sgd": HingeSGD,
        "finetune": FinetuneFull,
    }
    if name not in table:
        raise ValueError(f"unknown head {name!r}; choose from {HEAD_NAMES}")
    return table[name]()


def onehot(labels: np.ndarray, classes: int) -> np.ndarray:
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# -- centroid ------------------------------------------------------------


def fit_centroid_head(features: np.ndarray, labels: np.ndarray,
                      n_way: int) -> np.ndarray:
    """Per-way mean of support features."""
    centroids = np.empty((n_way, features.shape[1]))
    for way in range(n_way):
        rows = features[labels == way]
        if len(rows) == 0:
            raise ValueError(f"way {way} has no support examples")
        centroids[way] = rows.mean(axis=0)
    return centroids


def classify_centroid(centroids: np.ndarray, query: np.ndarray) -> np.ndarray:
    d2 = ((query[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


# -- ridge ---------------------------------------------------------------


def fit_ridge_head(features, labels: np.ndarray, n_way: int, lam: float):
    """Closed-form multiclass ridge: W = (Phi^T Phi + lam I)^-1 Phi^T Y.

    Accepts a plain array (evaluation) or a graph tensor, in which case
    the solve is differentiable w.r.t. the features.
    """
    if lam <= 0:
        raise ValueError("lambda must be > 0")
    phi = features if isinstance(features, Tensor) else Tensor(features)
    e = phi.shape[1]
    y = Tensor(onehot(labels, n_way))
    gram = matmul(transpose(phi), phi) + Tensor(lam * np.eye(e))
    w = solve_psd(gram, matmul(transpose(phi), y))
    return w if isinstance(features, Tensor) else w.data


def classify_ridge(w: np.ndarray, query: np.ndarray) -> np.ndarray:
    return np.argmax(query @ w, axis=1)


# -- gradient-descent heads -----------------------------------------------


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=1, keepdims=True)


def fit_linear_sgd_head(features: np.ndarray, labels: np.ndarray, n_way: int,
                        steps: int, lr: float):
    """Full-batch softmax GD from zero init; returns (W [n x e], b [n])."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    b_size, e = features.shape
    y = onehot(labels, n_way)
    w = np.zeros((n_way, e))
    bias = np.zeros(n_way)
    for _ in range(steps):
        g = (_softmax(features @ w.T + bias) - y) / b_size
        w = w - lr * (g.T @ features)
        bias = bias - lr * g.sum(axis=0)
    return w, bias


def hinge_objective(features: np.ndarray, labels: np.ndarray, w: np.ndarray,
                    bias: np.ndarray, c: float) -> tuple[float, float]:
    """Crammer-Singer hinge; returns (total objective, data term)."""
    scores = features @ w.T + bias
    margins = scores + 1.0
    rows = np.arange(len(labels))
    margins[rows, labels] = -np.inf
    data = np.maximum(0.0, margins.max(axis=1) - scores[rows, labels]).mean()
    return data + 0.5 / c * float((w * w).sum()), data


def fit_hinge_sgd_head(features: np.ndarray, labels: np.ndarray, n_way: int,
                       steps: int, lr: float, c: float):
    """Subgradient descent on Crammer-Singer hinge + (1/2C)||W||^2."""
    if steps < 1 or c <= 0:
        raise ValueError("steps must be >= 1 and C > 0")
    b_size, e = features.shape
    rows = np.arange(b_size)
    w = np.zeros((n_way, e))
    bias = np.zeros(n_way)
    for _ in range(steps):
        scores = features @ w.T + bias
        margins = scores + 1.0
        margins[rows, labels] = -np.inf
        worst = np.argmax(margins, axis=1)
        active = margins[rows, worst] - scores[rows, labels] > 0.0
        g = np.zeros_like(scores)
        g[rows[active], worst[active]] += 1.0
        g[rows[active], labels[active]] -= 1.0
        w = w - lr * (g.T @ features / b_size + w / c)
        bias = bias - lr * g.sum(axis=0) / b_size
    return w, bias


def classify_linear(w: np.ndarray, bias: np.ndarray,
                    query: np.ndarray) -> np.ndarray:
    return np.argmax(query @ w.T + bias, axis=1)


# -- full fine-tuning ------------------------------------------------------


def finetune_full(params: ParamSet, support_x: np.ndarray,
                  support_y: np.ndarray, n_way: int, steps: int = 10,
                  lr: float = 0.01) -> ParamSet:
    """Adapt extractor plus a fresh zero-init linear head by full-batch SGD
    on support cross-entropy. The input ParamSet is never modified; the
    returned copy carries the episode head under the name 'head'."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    layers = extractor_layers(params)
    extractor_only = ParamSet({
        key: params[key]
        for key in params.names()
        if key.rsplit(".", 1)[0] != "head"
    })
    embed_dim = params[f"{layers[-1]}.weight"].shape[0]
    tensors = params_to_tensors(extractor_only)
    tensors["head.weight"] = Tensor(np.zeros((n_way, embed_dim)),
                                    requires_grad=True)
    tensors["head.bias"] = Tensor(np.zeros(n_way), requires_grad=True)
    for _ in range(steps):
        feats = extract_on_graph(tensors, support_x, layers)
        logits = matmul(feats, transpose(tensors["head.weight"])) + tensors["head.bias"]
        loss = softmax_cross_entropy(logits, support_y)
        loss.backward()
        for t in tensors.values():
            if t.grad is not None:
                t.data = t.data - lr * t.grad
                t.grad = None
    return ParamSet({k: t.data for k, t in tensors.items()})


def classify_model(params: ParamSet, query: np.ndarray) -> np.ndarray:
    """Predictions of a ParamSet that carries its own 'head' layer."""
    from .models import extract

    feats = extract(params, query)
    scores = feats @ params["head.weight"].T + params["head.bias"]
    return np.argmax(scores, axis=1)


def apply_head(head: HeadKind, params: ParamSet, support_x: np.ndarray,
               support_y: np.ndarray, query_x: np.ndarray,
               n_way: int) -> np.ndarray:
    """Fit the head on support and classify the queries.

    For the frozen-feature heads the extractor runs once per episode; the
    finetune head instead adapts the whole model.
    """
    from .models import extract

    if isinstance(head, FinetuneFull):
        adapted = finetune_full(params, support_x, support_y, n_way,
                                head.steps, head.lr)
        return classify_model(adapted, query_x)
    sup = extract(params, support_x)
    qry = extract(params, query_x)
    if isinstance(head, Centroid):
        return classify_centroid(fit_centroid_head(sup, support_y, n_way), qry)
    if isinstance(head, Ridge):
        return classify_ridge(fit_ridge_head(sup, support_y, n_way, head.lam), qry)
    if isinstance(head, LinearSGD):
        w, b = fit_linear_sgd_head(sup, support_y, n_way, head.steps, head.lr)
        return classify_linear(w, b, qry)
    if isinstance(head, HingeSGD):
        w, b = fit_hinge_sgd_head(sup, support_y, n_way, head.steps, head.lr,
                                  head.c)
        return classify_linear(w, b, qry)
    raise TypeError(f"unknown head kind {head!r}")
