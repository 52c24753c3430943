"""Monte Carlo verification of the one-shot variance-ratio bound.

Two class distributions X and Y with controlled total variance and mean
separation are sampled; the maximum-margin classifier through one point
of each class is applied to fresh points of X. The empirical accuracy
is checked against the 1 - 32*eps/(1-eps) lower bound, and the proof's
three concentration conditions are tallied against their Chebyshev rate.

Var[.] throughout is the trace of the covariance (total variance), the
reading under which the scalar proof manipulations are dimension-
consistent. Trials are drawn in fixed-size seed-keyed chunks, so any
parallel split over chunks reproduces the serial counts exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("gaussian", "uniform_ball")

CHUNK = 4096


@dataclass(frozen=True)
class ClassPairSpec:
    dim: int
    family: str
    var_x: float
    var_y: float
    separation: float
    trials: int
    seed: int | tuple[int, ...] = 0

    def seed_key(self) -> tuple[int, ...]:
        return self.seed if isinstance(self.seed, tuple) else (self.seed,)

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}")
        if self.var_x <= 0 or self.var_y <= 0:
            raise ValueError("variances must be > 0")
        if self.separation <= 0:
            raise ValueError("separation must be > 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


@dataclass(frozen=True)
class BoundReport:
    eps_target: float
    bound: float
    accuracy: float
    accuracy_se: float
    empirical_ratio: float
    proof_denominator_ratio: float
    condition_rate: float
    chebyshev_bound: float
    trials: int
    passed: bool


def solve_separation_for_ratio(eps: float, var_x: float, var_y: float) -> float:
    """Mean separation that makes the population variance ratio equal eps.

    Uses the equal-mixture identity Var[U] = (Var[X]+Var[Y])/2 + sep^2/4;
    the ratio cannot reach 2 for positive separation.
    """
    if not 0.0 < eps < 2.0:
        raise ValueError("eps must lie in (0, 2)")
    if var_x <= 0 or var_y <= 0:
        raise ValueError("variances must be > 0")
    total = var_x + var_y
    return math.sqrt(4.0 * (total / eps - total / 2.0))


def accuracy_bound(eps: float) -> float:
    """Theorem lower bound 1 - 32*eps/(1-eps), clamped below at 0."""
    if eps >= 1.0:
        return 0.0
    return max(0.0, 1.0 - 32.0 * eps / (1.0 - eps))


def one_shot_classifier(x: np.ndarray, y: np.ndarray, z: np.ndarray) -> int:
    """Maximum-margin rule through training points x (class 1) and y
    (class 2); the boundary itself maps to class 1."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.array_equal(x, y):
        raise ValueError("training points coincide; classifier undefined")
    score = z @ (x - y) - 0.5 * (x @ x) + 0.5 * (y @ y)
    return 1 if score >= 0.0 else 2


def _draw(rng: np.random.Generator, family: str, mean: np.ndarray,
          total_var: float, count: int, dim: int) -> np.ndarray:
    if family == "gaussian":
        return mean + rng.normal(scale=math.sqrt(total_var / dim),
                                 size=(count, dim))
    # uniform in a ball with E||X - mean||^2 = total_var
    radius = math.sqrt(total_var * (dim + 2) / dim)
    direction = rng.normal(size=(count, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(count) ** (1.0 / dim)
    return mean + direction * r[:, None]


def _chunk_counts(total: int) -> list[int]:
    out = [CHUNK] * (total // CHUNK)
    if total % CHUNK:
        out.append(total % CHUNK)
    return out


def verify_bound(spec: ClassPairSpec, eps_target: float) -> BoundReport:
    """Monte Carlo check of the accuracy bound at the spec's geometry.

    Also tallies the proof's three concentration conditions (each of x,
    y, z within delta = separation/4 of its mean) and the empirical
    variance ratio of the sampled mixture.
    """
    spec.validate()
    dim = spec.dim
    mean_x = np.zeros(dim)
    mean_y = np.zeros(dim)
    mean_y[0] = spec.separation
    delta = spec.separation / 4.0

    correct = 0
    conditions = 0
    sum_sq_x = 0.0
    sum_sq_y = 0.0
    sum_x = np.zeros(dim)
    sum_y = np.zeros(dim)
    done = 0
    for chunk_index, count in enumerate(_chunk_counts(spec.trials)):
        rng = np.random.default_rng((*spec.seed_key(), chunk_index))
        xs = _draw(rng, spec.family, mean_x, spec.var_x, count, dim)
        ys = _draw(rng, spec.family, mean_y, spec.var_y, count, dim)
        zs = _draw(rng, spec.family, mean_x, spec.var_x, count, dim)
        scores = (np.einsum("ij,ij->i", zs, xs - ys)
                  - 0.5 * np.einsum("ij,ij->i", xs, xs)
                  + 0.5 * np.einsum("ij,ij->i", ys, ys))
        correct += int((scores >= 0.0).sum())
        cond = ((np.linalg.norm(xs - mean_x, axis=1) < delta)
                & (np.linalg.norm(ys - mean_y, axis=1) < delta)
                & (np.linalg.norm(zs - mean_x, axis=1) < delta))
        conditions += int(cond.sum())
        sum_x += xs.sum(axis=0)
        sum_y += ys.sum(axis=0)
        sum_sq_x += float((xs * xs).sum())
        sum_sq_y += float((ys * ys).sum())
        done += count

    var_x_hat = sum_sq_x / done - float(sum_x @ sum_x) / done**2
    var_y_hat = sum_sq_y / done - float(sum_y @ sum_y) / done**2
    mixture_mean = (sum_x + sum_y) / (2 * done)
    var_u_hat = ((sum_sq_x + sum_sq_y) / (2 * done)
                 - float(mixture_mean @ mixture_mean))
    accuracy = correct / done
    se = math.sqrt(max(accuracy * (1.0 - accuracy), 1e-300) / done)
    bound = accuracy_bound(eps_target)
    total = spec.var_x + spec.var_y
    return BoundReport(
        eps_target=eps_target,
        bound=bound,
        accuracy=accuracy,
        accuracy_se=se,
        empirical_ratio=(var_x_hat + var_y_hat) / var_u_hat,
        proof_denominator_ratio=total / (total + 16.0 * delta**2),
        condition_rate=conditions / done,
        chebyshev_bound=max(0.0, 1.0 - (2.0 * spec.var_x + spec.var_y) / delta**2),
        trials=done,
        passed=accuracy >= bound,
    )


@dataclass(frozen=True)
class ConditionReport:
    delta: float
    frequency: float
    frequency_se: float
    chebyshev_bound: float
    trials: int
    passed: bool


def chebyshev_condition_rate(spec: ClassPairSpec, delta: float) -> ConditionReport:
    """Frequency of the proof's three conditions at a given radius delta,
    compared with the Chebyshev lower bound 1 - (2 Var[X]+Var[Y])/delta^2
    within 3 Monte Carlo standard errors."""
    spec.validate()
    if delta <= 0:
        raise ValueError("delta must be > 0")
    dim = spec.dim
    mean_x = np.zeros(dim)
    mean_y = np.zeros(dim)
    mean_y[0] = spec.separation
    hits = 0
    done = 0
    for chunk_index, count in enumerate(_chunk_counts(spec.trials)):
        rng = np.random.default_rng((*spec.seed_key(), chunk_index))
        xs = _draw(rng, spec.family, mean_x, spec.var_x, count, dim)
        ys = _draw(rng, spec.family, mean_y, spec.var_y, count, dim)
        zs = _draw(rng, spec.family, mean_x, spec.var_x, count, dim)
        cond = ((np.linalg.norm(xs - mean_x, axis=1) < delta)
                & (np.linalg.norm(ys - mean_y, axis=1) < delta)
                & (np.linalg.norm(zs - mean_x, axis=1) < delta))
        hits += int(cond.sum())
        done += count
    freq = hits / done
    se = math.sqrt(max(freq * (1.0 - freq), 1e-300) / done)
    bound = max(0.0, 1.0 - (2.0 * spec.var_x + spec.var_y) / delta**2)
    return ConditionReport(
        delta=delta,
        frequency=freq,
        frequency_se=se,
        chebyshev_bound=bound,
        trials=done,
        passed=freq >= bound - 3.0 * se,
    )


def sweep_bounds(eps_list, dims, families, trials: int, seed: int,
                 var_x: float = 1.0, var_y: float = 1.0):
    """BoundReports over the cross product of settings, with the geometry
    solved from each target ratio."""
    rows = []
    for family in families:
        for dim in dims:
            for eps in eps_list:
                sep = solve_separation_for_ratio(eps, var_x, var_y)
                spec = ClassPairSpec(dim=dim, family=family, var_x=var_x,
                                     var_y=var_y, separation=sep,
                                     trials=trials,
                                     seed=(seed, len(rows)))
                rows.append(((family, dim, eps), verify_bound(spec, eps)))
    return rows
