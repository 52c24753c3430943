"""Few-shot task generation: class universes, episode sampling, CSV datasets.

A universe is an immutable labeled vector dataset with disjoint
train/validation/test class splits. Episodes are n-way k-shot tasks with
disjoint support and query sets, deterministic per seed. All sampling
uses independent RNG streams keyed by the caller's seed so episode
streams reproduce regardless of evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "val", "test")

# default split proportions by class count
SPLIT_FRACTIONS = {"train": 0.64, "val": 0.16, "test": 0.20}


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture universe: isotropic class means of scale
    `mean_scale`, isotropic within-class noise of scale `noise_scale`.

    `nuisance_dim`/`nuisance_scale` optionally add within-class noise along
    a random subspace shared by every class. Purely isotropic universes
    admit no feature map that improves novel-class geometry (any gain on
    training classes is a distortion elsewhere), so benchmarks that are
    meant to reward representation learning need this shared structure,
    the way image nuisances (pose, lighting) are shared across classes.
    """

    num_classes: int
    dim: int
    examples_per_class: int
    mean_scale: float = 1.0
    noise_scale: float = 0.3
    nuisance_dim: int = 0
    nuisance_scale: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.examples_per_class < 1:
            raise ValueError("examples_per_class must be positive")
        if self.mean_scale <= 0:
            raise ValueError("mean_scale must be > 0")
        if self.noise_scale <= 0:
            raise ValueError("noise_scale must be > 0")
        if not 0 <= self.nuisance_dim <= self.dim:
            raise ValueError("nuisance_dim must lie in [0, dim]")
        if self.nuisance_scale < 0:
            raise ValueError("nuisance_scale must be >= 0")


@dataclass(frozen=True)
class Episode:
    """One n-way k-shot task. Way indices (0..n-1) replace class ids."""

    support_x: np.ndarray  # (n*k, d)
    support_y: np.ndarray  # (n*k,) way indices
    query_x: np.ndarray  # (n*q, d)
    query_y: np.ndarray  # (n*q,)
    way_map: dict[int, int]  # class id -> way index

    @property
    def n_way(self) -> int:
        return len(self.way_map)


class ClassUniverse:
    """Labeled vectors partitioned into disjoint train/val/test class splits."""

    def __init__(self, features: np.ndarray, labels: np.ndarray,
                 splits: dict[str, set[int]]):
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            raise ValueError("features must be (n, d) aligned with labels")
        present = set(int(c) for c in np.unique(labels))
        assigned: set[int] = set()
        for name in SPLITS:
            ids = splits.get(name, set())
            if assigned & ids:
                raise ValueError("split class sets must be disjoint")
            assigned |= ids
        if assigned != present:
            raise ValueError("splits must cover exactly the classes present")
        self.features = features
        self.labels = labels
        self.splits = {name: frozenset(splits.get(name, set())) for name in SPLITS}
        self.dim = features.shape[1]
        self._rows_by_class = {
            int(c): np.flatnonzero(labels == c) for c in np.unique(labels)
        }

    @property
    def classes(self) -> list[int]:
        return sorted(self._rows_by_class)

    def split_classes(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return sorted(self.splits[split])

    def class_rows(self, class_id: int) -> np.ndarray:
        return self._rows_by_class[class_id]

    def class_count(self, class_id: int) -> int:
        return len(self._rows_by_class[class_id])

    def check_capacity(self, k_max: int, q_max: int) -> None:
        need = k_max + q_max
        for c, rows in self._rows_by_class.items():
            if len(rows) < need:
                raise ValueError(
                    f"class {c} has {len(rows)} examples, needs {need}"
                )


def _split_by_fraction(class_ids: list[int]) -> dict[str, set[int]]:
    """Assign classes to splits by the default 64/16/20% proportions,
    in order of first appearance."""
    n = len(class_ids)
    n_train = max(1, round(n * SPLIT_FRACTIONS["train"]))
    n_val = max(1, round(n * SPLIT_FRACTIONS["val"]))
    if n_train + n_val >= n:
        n_train = max(1, n - 2)
        n_val = 1
    return {
        "train": set(class_ids[:n_train]),
        "val": set(class_ids[n_train:n_train + n_val]),
        "test": set(class_ids[n_train + n_val:]),
    }


def generate_synthetic(spec: SyntheticSpec,
                       split_counts: tuple[int, int, int] | None = None,
                       ) -> ClassUniverse:
    """Draw class means ~ N(0, mean_scale^2 I) and examples = mean + noise.

    Deterministic for a fixed spec seed. `split_counts` overrides the
    default proportional split with explicit (train, val, test) class
    counts that must sum to num_classes.
    """
    spec.validate()
    rng = np.random.default_rng((spec.seed, 0))
    means = rng.normal(scale=spec.mean_scale,
                       size=(spec.num_classes, spec.dim))
    noise = rng.normal(scale=1.0,
                       size=(spec.num_classes, spec.examples_per_class, spec.dim))
    examples = means[:, None, :] + spec.noise_scale * noise
    if spec.nuisance_dim > 0 and spec.nuisance_scale > 0:
        # shared nuisance subspace: one orthonormal basis for the universe
        basis, _ = np.linalg.qr(rng.normal(size=(spec.dim, spec.nuisance_dim)))
        wobble = rng.normal(
            scale=1.0,
            size=(spec.num_classes, spec.examples_per_class, spec.nuisance_dim))
        examples = examples + spec.nuisance_scale * (wobble @ basis.T)
    features = examples.reshape(-1, spec.dim)
    labels = np.repeat(np.arange(spec.num_classes), spec.examples_per_class)
    ids = list(range(spec.num_classes))
    if split_counts is not None:
        n_tr, n_va, n_te = split_counts
        if n_tr + n_va + n_te != spec.num_classes:
            raise ValueError("split_counts must sum to num_classes")
        splits = {
            "train": set(ids[:n_tr]),
            "val": set(ids[n_tr:n_tr + n_va]),
            "test": set(ids[n_tr + n_va:]),
        }
    else:
        splits = _split_by_fraction(ids)
    universe = ClassUniverse(features, labels, splits)
    universe.class_means = means  # drawn population means, kept for diagnostics
    return universe


def load_csv(path, split_counts: tuple[int, int, int] | None = None) -> ClassUniverse:
    """Load `label,f0,...,f{d-1}` rows; classes split 64/16/20% by first
    appearance unless explicit counts are given."""
    rows: list[tuple[int, list[float]]] = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2 or header[0] != "label":
            raise ValueError(f"{path}: expected header 'label,f0,...'")
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {width + 1} fields, got {len(row)}"
                )
            try:
                label = int(row[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad label {row[0]!r}") from None
            feats = []
            for col, cell in enumerate(row[1:], start=1):
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ValueError(
                        f"{path}:{lineno}: column {col}: non-numeric value {cell!r}"
                    ) from None
            rows.append((label, feats))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    labels = np.array([r[0] for r in rows], dtype=np.int64)
    features = np.array([r[1] for r in rows], dtype=np.float64)
    order: list[int] = []
    seen: set[int] = set()
    for lab in labels:
        if int(lab) not in seen:
            seen.add(int(lab))
            order.append(int(lab))
    if len(order) < 2:
        raise ValueError(f"{path}: need at least 2 classes")
    if split_counts is not None:
        n_tr, n_va, n_te = split_counts
        if n_tr + n_va + n_te != len(order):
            raise ValueError("split_counts must sum to the class count")
        splits = {
            "train": set(order[:n_tr]),
            "val": set(order[n_tr:n_tr + n_va]),
            "test": set(order[n_tr + n_va:]),
        }
    else:
        splits = _split_by_fraction(order)
    return ClassUniverse(features, labels, splits)


def save_csv(universe: ClassUniverse, path) -> None:
    """Write the universe in load_csv format; floats round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(universe.dim)])
        for label, feat in zip(universe.labels, universe.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in feat])


def sample_episode(universe: ClassUniverse, split: str, n: int, k: int,
                   q: int, seed) -> Episode:
    """n classes without replacement, then k+q examples per class without
    replacement; the first k become support. Deterministic per seed."""
    class_ids = universe.split_classes(split)
    if len(class_ids) < n:
        raise ValueError(
            f"split {split!r} has {len(class_ids)} classes, episode needs {n}"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(class_ids), size=n, replace=False)
    way_map: dict[int, int] = {}
    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    for way, idx in enumerate(chosen):
        cid = class_ids[int(idx)]
        rows = universe.class_rows(cid)
        if len(rows) < k + q:
            raise ValueError(
                f"class {cid} has {len(rows)} examples, episode needs {k + q}"
            )
        picked = rng.choice(len(rows), size=k + q, replace=False)
        picked_rows = rows[picked]
        way_map[cid] = way
        sup_x.append(universe.features[picked_rows[:k]])
        qry_x.append(universe.features[picked_rows[k:]])
        sup_y.extend([way] * k)
        qry_y.extend([way] * q)
    return Episode(
        support_x=np.concatenate(sup_x, axis=0),
        support_y=np.array(sup_y, dtype=np.int64),
        query_x=np.concatenate(qry_x, axis=0),
        query_y=np.array(qry_y, dtype=np.int64),
        way_map=way_map,
    )


def batch_for_regularized_training(universe: ClassUniverse,
                                   classes_per_batch: int, seed):
    """Two examples from each of `classes_per_batch` random train classes.

    Rows come out grouped: examples 2i and 2i+1 belong to the i-th chosen
    class, which is what within-class variance estimates need.

    Returns (features, class_ids) with class ids global, not way indices.
    """
    train_ids = universe.split_classes("train")
    if classes_per_batch > len(train_ids):
        raise ValueError(
            f"classes_per_batch {classes_per_batch} exceeds "
            f"{len(train_ids)} train classes"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(train_ids), size=classes_per_batch, replace=False)
    feats, ids = [], []
    for idx in chosen:
        cid = train_ids[int(idx)]
        rows = universe.class_rows(cid)
        if len(rows) < 2:
            raise ValueError(f"class {cid} has fewer than 2 examples")
        picked = rng.choice(len(rows), size=2, replace=False)
        feats.append(universe.features[rows[picked]])
        ids.extend([cid, cid])
    return np.concatenate(feats, axis=0), np.array(ids, dtype=np.int64)
