"""Clustering and similarity measurements on features and parameters.

variance_ratio / r_fc_loss compute the intra-class to inter-class
variance ratio (C/N) * sum_ij ||phi_ij - mu_i||^2 / sum_i ||mu_i - mu||^2,
once as a plain number and once on the autodiff tape so it can be used
as a training regularizer. r_hv measures how much the difference vector
between two classes moves when the samples change. All operations are
pure and safe to run concurrently on shared inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .autodiff import Tensor, l2norm, matmul
from .models import ParamSet


class DegenerateInputError(ValueError):
    """Input lacks the variation the measurement needs."""


def _class_index(class_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique classes and per-row positions into them."""
    uniq, inverse = np.unique(np.asarray(class_ids), return_inverse=True)
    return uniq, inverse


def _harmonic_mean_count(counts: np.ndarray) -> float:
    return len(counts) / float((1.0 / counts).sum())


def variance_ratio(features: np.ndarray, class_ids: np.ndarray) -> float:
    """Intra-class to inter-class variance ratio of a feature matrix.

    Homogeneous of degree zero: invariant to translation, rotation, and
    isotropic scaling of the features. Unbalanced class counts enter
    through the harmonic mean.
    """
    features = np.asarray(features, dtype=np.float64)
    uniq, inverse = _class_index(class_ids)
    if len(uniq) < 2:
        raise DegenerateInputError("variance ratio needs >= 2 classes")
    counts = np.bincount(inverse)
    if counts.min() < 2:
        raise DegenerateInputError("every class needs >= 2 examples")
    sums = np.zeros((len(uniq), features.shape[1]))
    np.add.at(sums, inverse, features)
    mu_class = sums / counts[:, None]
    mu_all = features.mean(axis=0)
    within = float(((features - mu_class[inverse]) ** 2).sum())
    between = float(((mu_class - mu_all) ** 2).sum())
    if between == 0.0:
        raise DegenerateInputError("class means coincide (zero between-class variance)")
    c = len(uniq)
    n = _harmonic_mean_count(counts)
    return (c / n) * within / between


def r_fc_loss(features: Tensor, class_ids: np.ndarray) -> Tensor:
    """variance_ratio recorded on the tape so gradients reach the extractor.

    Class means are expressed as constant averaging matrices applied to
    the feature rows, which keeps the backward pass inside the existing
    matmul/elementwise rules.
    """
    uniq, inverse = _class_index(class_ids)
    if len(uniq) < 2:
        raise DegenerateInputError("feature clustering loss needs >= 2 classes")
    counts = np.bincount(inverse)
    if counts.min() < 2:
        raise DegenerateInputError("every class needs >= 2 examples")
    b = features.shape[0]
    c = len(uniq)
    mean_mat = np.zeros((c, b))
    mean_mat[inverse, np.arange(b)] = 1.0 / counts[inverse]
    spread_mat = np.zeros((b, c))
    spread_mat[np.arange(b), inverse] = 1.0

    mu_class = matmul(Tensor(mean_mat), features)  # (c, e)
    within = (features - matmul(Tensor(spread_mat), mu_class)).square().sum()
    mu_all = features.mean(axis=0)
    between = (mu_class - mu_all).square().sum()
    if float(between.data) == 0.0:
        raise DegenerateInputError("class means coincide (zero between-class variance)")
    n = _harmonic_mean_count(counts)
    return (c / n) * within / between


def r_hv(fx1: Tensor, fx2: Tensor, fy1: Tensor, fy2: Tensor) -> Tensor:
    """Hyperplane variation between two samplings of a class pair:
    ||(fx1-fy1)-(fx2-fy2)|| / (||fx1-fy1|| + ||fx2-fy2||), in [0, 1]."""
    d1 = fx1 - fy1
    d2 = fx2 - fy2
    denom = l2norm(d1) + l2norm(d2)
    if float(denom.data) == 0.0:
        raise DegenerateInputError("both class-difference vectors are zero")
    return l2norm(d1 - d2) / denom


def r_hv_mean(features: Tensor, class_ids: np.ndarray) -> Tensor:
    """Mean hyperplane variation over consecutive class pairs of a
    two-per-class batch (classes in batch order, pair i with i+1)."""
    ids = np.asarray(class_ids)
    order: list[int] = []
    seen: set[int] = set()
    for v in ids:
        if int(v) not in seen:
            seen.add(int(v))
            order.append(int(v))
    if len(order) < 2:
        raise DegenerateInputError("hyperplane variation needs >= 2 classes")
    b = features.shape[0]

    def rows_of(cid: int) -> np.ndarray:
        rows = np.flatnonzero(ids == cid)
        if len(rows) < 2:
            raise DegenerateInputError(f"class {cid} needs 2 samples in the batch")
        return rows[:2]

    def pick(row: int) -> Tensor:
        sel = np.zeros((1, b))
        sel[0, row] = 1.0
        return matmul(Tensor(sel), features)

    total = None
    pairs = list(zip(order[:-1], order[1:]))
    for ca, cb in pairs:
        ra, rb = rows_of(ca), rows_of(cb)
        term = r_hv(pick(ra[0]), pick(ra[1]), pick(rb[0]), pick(rb[1]))
        total = term if total is None else total + term
    return total / float(len(pairs))


def sampled_hyperplane_variation(features: np.ndarray, class_ids: np.ndarray,
                                 pairs: int, seed) -> float:
    """Mean hyperplane variation over randomly sampled class pairs with two
    samples drawn from each class (measurement-time counterpart of the
    on-graph batch regularizer)."""
    features = np.asarray(features, dtype=np.float64)
    ids = np.asarray(class_ids)
    uniq = np.unique(ids)
    if len(uniq) < 2:
        raise DegenerateInputError("hyperplane variation needs >= 2 classes")
    rows_of = {int(c): np.flatnonzero(ids == c) for c in uniq}
    for c, rows in rows_of.items():
        if len(rows) < 2:
            raise DegenerateInputError(f"class {c} needs >= 2 examples")
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(pairs):
        ca, cb = rng.choice(len(uniq), size=2, replace=False)
        ra = rng.choice(rows_of[int(uniq[ca])], size=2, replace=False)
        rb = rng.choice(rows_of[int(uniq[cb])], size=2, replace=False)
        d1 = features[ra[0]] - features[rb[0]]
        d2 = features[ra[1]] - features[rb[1]]
        denom = np.linalg.norm(d1) + np.linalg.norm(d2)
        if denom == 0.0:
            raise DegenerateInputError("both class-difference vectors are zero")
        total += float(np.linalg.norm(d1 - d2) / denom)
    return total / pairs


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two representations of the
    same examples: ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) after
    column-centering. Invariant to orthogonal maps and isotropic scaling."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError("representations must cover the same examples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xnorm = np.linalg.norm(xc.T @ xc)
    ynorm = np.linalg.norm(yc.T @ yc)
    if xnorm == 0.0 or ynorm == 0.0:
        raise DegenerateInputError("constant representation has no alignment")
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xnorm * ynorm))


def lda_project(features: np.ndarray, class_ids: np.ndarray,
                out_dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Project onto the top discriminant directions.

    Solves the generalized eigenproblem of between-class scatter against
    ridge-shifted within-class scatter and returns (coordinates, basis)
    with the basis orthonormalized. Needs more classes than output dims.
    """
    features = np.asarray(features, dtype=np.float64)
    uniq, inverse = _class_index(class_ids)
    if len(uniq) < out_dims + 1:
        raise DegenerateInputError(
            f"LDA to {out_dims} dims needs >= {out_dims + 1} classes"
        )
    e = features.shape[1]
    counts = np.bincount(inverse)
    sums = np.zeros((len(uniq), e))
    np.add.at(sums, inverse, features)
    mu_class = sums / counts[:, None]
    mu_all = features.mean(axis=0)
    centered = features - mu_class[inverse]
    s_within = centered.T @ centered
    dm = (mu_class - mu_all) * np.sqrt(counts)[:, None]
    s_between = dm.T @ dm
    shift = 1e-6 * np.trace(s_within) / e
    if shift == 0.0:
        shift = 1e-12
    vals, vecs = eigh(s_between, s_within + shift * np.eye(e))
    top = vecs[:, np.argsort(vals)[::-1][:out_dims]]
    basis, _ = np.linalg.qr(top)
    coords = (features - mu_all) @ basis
    return coords, basis


def _normalized_flat(params: ParamSet) -> np.ndarray:
    """Each weight row and each bias vector scaled to unit norm (zero
    filters left as zero), flattened in name order."""
    pieces = []
    for name in sorted(params.names()):
        arr = params[name]
        if arr.ndim == 2:
            norms = np.linalg.norm(arr, axis=1, keepdims=True)
            safe = np.where(norms == 0.0, 1.0, norms)
            pieces.append((arr / safe).ravel())
        else:
            norm = np.linalg.norm(arr)
            pieces.append(arr / norm if norm > 0 else arr.copy())
    return np.concatenate(pieces)


def filter_norm_distance(a: ParamSet, b: ParamSet) -> float:
    """Euclidean distance between filter-normalized parameter sets;
    invariant to positive per-filter rescaling of either argument."""
    if not a.same_shapes(b):
        raise ValueError("parameter sets have different shapes")
    return float(np.linalg.norm(_normalized_flat(a) - _normalized_flat(b)))


@dataclass(frozen=True)
class HistogramSpec:
    bin_count: int
    lo: float
    hi: float
    counts: tuple[int, ...]

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bin_count + 1)

    @property
    def total(self) -> int:
        return int(sum(self.counts))


def build_histogram(values, bin_count: int, lo: float | None = None,
                    hi: float | None = None) -> HistogramSpec:
    """Histogram with inclusive outermost edges so counts always sum to
    the number of observations."""
    values = np.asarray(values, dtype=np.float64)
    if lo is None:
        lo = float(values.min()) if len(values) else 0.0
    if hi is None:
        hi = float(values.max()) if len(values) else 1.0
    if hi <= lo:
        hi = lo + 1.0
    clipped = np.clip(values, lo, hi)
    counts, _ = np.histogram(clipped, bins=bin_count, range=(lo, hi))
    return HistogramSpec(bin_count, lo, hi, tuple(int(c) for c in counts))
