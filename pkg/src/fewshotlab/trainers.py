"""Training regimes: classical (optionally regularized), Reptile,
weight-clustered Reptile, first-order MAML, and meta-training through the
closed-form ridge head.

Every regime is deterministic given (config, seed). RNG streams are keyed
as (seed, stream, ...): stream 0 initializes parameters, stream 1 feeds
classical batches, stream 2 feeds meta-episodes. Meta updates combine
per-task contributions by their mean, so task order inside a batch only
matters up to float rounding.

Evaluation fans episodes out by index with per-episode seeds and reduces
in index order, which makes reports independent of thread count.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tensor, matmul, softmax_cross_entropy, transpose
from .episodes import ClassUniverse, Episode, batch_for_regularized_training, sample_episode
from .heads import HeadKind, apply_head, fit_ridge_head, finetune_full
from .metrics import HistogramSpec, build_histogram, filter_norm_distance, r_fc_loss, r_hv_mean
from .models import (
    ExtractorSpec,
    ParamSet,
    add_linear_head,
    extract_on_graph,
    extractor_layers,
    init_extractor,
    params_to_tensors,
    tensors_to_params,
)

REGIMES = ("classical", "reptile", "weight_cluster_reptile", "fomaml", "ridge_meta")
REGULARIZERS = ("none", "r_fc", "r_hv")

# best-performing effective consensus-penalty coefficient on the original
# image benchmarks; desk-scale runs rescale it via the sweep command
DEFAULT_CLUSTER_COEFF = 5.0e-5


@dataclass
class TrainConfig:
    regime: str
    input_dim: int
    steps: int = 2000
    n_way: int = 5
    k_shot: int = 1
    q_query: int = 10
    tasks_per_batch: int = 5
    inner_steps: int = 5
    inner_lr: float = 0.05
    outer_lr: float = 0.1
    regularizer: str = "none"
    reg_coeff: float = 0.0
    cluster_coeff: float = 0.0
    classes_per_batch: int = 0  # 0 = all train classes
    ridge_lambda: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32
    lr_decay_every: int = 0  # 0 = constant learning rate
    lr_decay_factor: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("learning rates must be >= 0")
        if self.tasks_per_batch < 1:
            raise ValueError("tasks_per_batch must be >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.reg_coeff < 0 or self.cluster_coeff < 0:
            raise ValueError("coefficients must be >= 0")
        if self.ridge_lambda <= 0:
            raise ValueError("ridge_lambda must be > 0")
        if self.regime == "weight_cluster_reptile" and self.cluster_coeff > 0 \
                and self.tasks_per_batch < 2:
            raise ValueError("weight clustering needs >= 2 tasks per batch")

    def extractor_spec(self) -> ExtractorSpec:
        return ExtractorSpec(self.input_dim, tuple(self.hidden), self.embed_dim)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if "regime" not in data or "input_dim" not in data:
            raise ValueError("train config requires 'regime' and 'input_dim'")
        kwargs = dict(data)
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


@dataclass
class RunRecord:
    regime: str
    losses: list[float]
    seconds: float
    config: dict

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "losses": self.losses,
            "config": self.config,
            "timing": {"seconds": self.seconds},
        }


def _episode_seed(base, index: int) -> tuple:
    return (*base, index) if isinstance(base, tuple) else (base, index)


def _check_finite(params: ParamSet, step: int) -> None:
    for name in params.names():
        if not np.all(np.isfinite(params[name])):
            raise RuntimeError(f"non-finite parameters in {name} at step {step}")


def _decayed_lr(base: float, step: int, every: int, factor: float) -> float:
    if every <= 0:
        return base
    return base * factor ** (step // every)


# -- shared SGD step -----------------------------------------------------


def _model_loss(tensors: dict[str, Tensor], layers: list[str],
                x: np.ndarray, y: np.ndarray):
    feats = extract_on_graph(tensors, x, layers)
    logits = matmul(feats, transpose(tensors["head.weight"])) + tensors["head.bias"]
    return softmax_cross_entropy(logits, y), feats


def _sgd_step_once(tensors: dict[str, Tensor], layers: list[str],
                   x: np.ndarray, y: np.ndarray, lr: float,
                   extra_grad: dict[str, np.ndarray] | None = None) -> float:
    """One full-batch cross-entropy SGD step over every tensor; extra_grad
    entries are added to the loss gradients before the update."""
    loss, _ = _model_loss(tensors, layers, x, y)
    loss.backward()
    for name, t in tensors.items():
        g = t.grad
        if extra_grad is not None and name in extra_grad:
            g = extra_grad[name] if g is None else g + extra_grad[name]
        if g is not None:
            t.data = t.data - lr * g
        t.grad = None
    return loss.item()


def _sgd_adapt(params: ParamSet, x: np.ndarray, y: np.ndarray, steps: int,
               lr: float) -> tuple[ParamSet, float]:
    """`steps` full-batch SGD steps from `params`; returns the adapted copy
    and the last pre-update loss."""
    layers = extractor_layers(params)
    tensors = params_to_tensors(params)
    last = math.nan
    for _ in range(steps):
        last = _sgd_step_once(tensors, layers, x, y, lr)
    return tensors_to_params(tensors), last


def _pooled_task_data(episode: Episode) -> tuple[np.ndarray, np.ndarray]:
    x = np.concatenate([episode.support_x, episode.query_x], axis=0)
    y = np.concatenate([episode.support_y, episode.query_y], axis=0)
    return x, y


# -- classical -------------------------------------------------------------


def train_classical(universe: ClassUniverse, config: TrainConfig,
                    ) -> tuple[ParamSet, RunRecord]:
    """Cross-entropy SGD over all train classes at once, on two-per-class
    batches, optionally regularized by feature clustering or hyperplane
    variation."""
    config.validate()
    start = time.perf_counter()
    train_ids = universe.split_classes("train")
    label_of = {cid: idx for idx, cid in enumerate(train_ids)}
    cpb = config.classes_per_batch or len(train_ids)

    spec = config.extractor_spec()
    params = init_extractor(spec, (config.seed, 0))
    params = add_linear_head(params, config.embed_dim, len(train_ids))
    layers = extractor_layers(params)
    tensors = params_to_tensors(params)

    losses: list[float] = []
    for step in range(config.steps):
        lr = _decayed_lr(config.outer_lr, step, config.lr_decay_every,
                         config.lr_decay_factor)
        x, class_ids = batch_for_regularized_training(
            universe, cpb, (config.seed, 1, step))
        y = np.array([label_of[int(c)] for c in class_ids], dtype=np.int64)
        loss, feats = _model_loss(tensors, layers, x, y)
        if config.reg_coeff != 0.0 and config.regularizer == "r_fc":
            loss = loss + config.reg_coeff * r_fc_loss(feats, class_ids)
        elif config.reg_coeff != 0.0 and config.regularizer == "r_hv":
            loss = loss + config.reg_coeff * r_hv_mean(feats, class_ids)
        value = loss.item()
        if not math.isfinite(value):
            raise RuntimeError(f"non-finite loss at step {step}")
        loss.backward()
        for t in tensors.values():
            if t.grad is not None:
                t.data = t.data - lr * t.grad
            t.grad = None
        losses.append(value)
    final = tensors_to_params(tensors)
    _check_finite(final, config.steps)
    record = RunRecord("classical", losses, time.perf_counter() - start,
                       config.to_dict())
    return final, record


# -- meta steps --------------------------------------------------------------


def reptile_step(params: ParamSet, episodes: list[Episode], eta: float,
                 k_inner: int, gamma: float, adapt=None,
                 ) -> tuple[ParamSet, float]:
    """Move toward task-adapted parameters:
    theta' = theta + (gamma/m) sum_i (theta_i - theta).

    Each task adapts with `k_inner` SGD steps on its pooled support+query
    data starting from `params`; `adapt` overrides the adaptation rule.
    """
    if len(episodes) < 1:
        raise ValueError("need at least one task")
    if adapt is None:
        def adapt(p, ep):
            x, y = _pooled_task_data(ep)
            return _sgd_adapt(p, x, y, k_inner, eta)
    out = params.copy()
    scale = gamma / len(episodes)
    total_loss = 0.0
    for ep in episodes:
        adapted, loss = adapt(params, ep)
        total_loss += loss
        for name in out.names():
            out[name] = out[name] + scale * (adapted[name] - params[name])
    return out, total_loss / len(episodes)


# filters with norm below this are treated as zero by the consensus
# penalty: normalizing them would divide by a numerically meaningless scale
_FILTER_NORM_FLOOR_SQ = 1e-24


def _cluster_penalty_grad(task_params: ParamSet, batch_mean: ParamSet,
                          alpha: float) -> dict[str, np.ndarray]:
    """Per-filter penalty direction 2*alpha*(theta_i - mean)/||filter||^2,
    with the batch mean and normalization factors held constant. Zero-norm
    filters (below the numerical floor) contribute no penalty."""
    grads: dict[str, np.ndarray] = {}
    for name in task_params.names():
        arr = task_params[name]
        diff = arr - batch_mean[name]
        if arr.ndim == 2:
            sq = (arr * arr).sum(axis=1, keepdims=True)
            dead = sq <= _FILTER_NORM_FLOOR_SQ
            safe = np.where(dead, 1.0, sq)
            g = 2.0 * alpha * diff / safe
            g[np.squeeze(dead, axis=1)] = 0.0
        else:
            sq = float(arr @ arr)
            if sq <= _FILTER_NORM_FLOOR_SQ:
                g = np.zeros_like(diff)
            else:
                g = (2.0 * alpha / sq) * diff
        grads[name] = g
    return grads


def _batch_mean(snapshots: list[ParamSet], names: list[str]) -> ParamSet:
    """Mean anchored at the first snapshot so identical task parameters
    yield the exact mean (and hence an exactly-zero penalty)."""
    first = snapshots[0]
    mean = ParamSet()
    for name in names:
        delta = sum(s[name] - first[name] for s in snapshots[1:])
        mean[name] = first[name] + delta / len(snapshots)
    return mean


def weight_cluster_reptile_step(params: ParamSet, episodes: list[Episode],
                                eta: float, gamma: float, alpha: float,
                                k_inner: int) -> tuple[ParamSet, float]:
    """Reptile with the consensus penalty: inner step j of task i descends
    task loss plus alpha * squared filter-normalized distance to the batch
    mean of the previous step's task parameters. All tasks advance step j
    before any advances to j+1; alpha=0 reproduces reptile_step exactly.
    """
    if len(episodes) < 1:
        raise ValueError("need at least one task")
    layers = extractor_layers(params)
    tasks = []
    for ep in episodes:
        x, y = _pooled_task_data(ep)
        tasks.append((params_to_tensors(params), x, y))
    last_losses = [math.nan] * len(tasks)
    names = params.names()
    for _ in range(k_inner):
        if alpha != 0.0:
            snapshot = [tensors_to_params(t) for t, _, _ in tasks]
            mean = _batch_mean(snapshot, names)
            penalties = [
                _cluster_penalty_grad(snap, mean, alpha) for snap in snapshot
            ]
        else:
            penalties = [None] * len(tasks)
        for i, (tensors, x, y) in enumerate(tasks):
            last_losses[i] = _sgd_step_once(tensors, layers, x, y, eta,
                                            extra_grad=penalties[i])
    out = params.copy()
    scale = gamma / len(tasks)
    for tensors, _, _ in tasks:
        adapted = tensors_to_params(tensors)
        for name in names:
            out[name] = out[name] + scale * (adapted[name] - params[name])
    return out, float(np.mean(last_losses))


def _query_grad(params: ParamSet, episode: Episode) -> tuple[dict, float]:
    """Gradient of query cross-entropy at `params` (no update)."""
    layers = extractor_layers(params)
    tensors = params_to_tensors(params)
    loss, _ = _model_loss(tensors, layers, episode.query_x, episode.query_y)
    value = loss.item()
    loss.backward()
    grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for name, t in tensors.items()}
    return grads, value


def fomaml_step(params: ParamSet, episodes: list[Episode], eta: float,
                k_inner: int, gamma: float, adapt=None, query_grad=None,
                ) -> tuple[ParamSet, float]:
    """First-order MAML: adapt on support, apply the query gradient taken
    at the adapted parameters: theta' = theta - (gamma/m) sum_i g_i."""
    if len(episodes) < 1:
        raise ValueError("need at least one task")
    if k_inner < 1:
        raise ValueError("first-order MAML requires at least one inner step")
    if adapt is None:
        def adapt(p, ep):
            return _sgd_adapt(p, ep.support_x, ep.support_y, k_inner, eta)
    if query_grad is None:
        query_grad = _query_grad
    out = params.copy()
    scale = gamma / len(episodes)
    total_loss = 0.0
    for ep in episodes:
        adapted, _ = adapt(params, ep)
        grads, qloss = query_grad(adapted, ep)
        total_loss += qloss
        for name in out.names():
            out[name] = out[name] - scale * grads[name]
    return out, total_loss / len(episodes)


def ridge_meta_step(params: ParamSet, episodes: list[Episode], lam: float,
                    gamma: float) -> tuple[ParamSet, float]:
    """Differentiate query loss through the closed-form ridge head fit on
    support features, and descend the extractor."""
    if len(episodes) < 1:
        raise ValueError("need at least one task")
    layers = extractor_layers(params)
    out = params.copy()
    scale = gamma / len(episodes)
    total_loss = 0.0
    for task_index, ep in enumerate(episodes):
        tensors = params_to_tensors(params)
        sup = extract_on_graph(tensors, ep.support_x, layers)
        try:
            w = fit_ridge_head(sup, ep.support_y, ep.n_way, lam)
        except ArithmeticError as err:
            raise RuntimeError(f"ridge solve failed on task {task_index}: {err}")
        qry = extract_on_graph(tensors, ep.query_x, layers)
        loss = softmax_cross_entropy(matmul(qry, w), ep.query_y)
        total_loss += loss.item()
        loss.backward()
        for name, t in tensors.items():
            if t.grad is not None:
                out[name] = out[name] - scale * t.grad
    return out, total_loss / len(episodes)


# -- outer loop ---------------------------------------------------------------


def meta_outer_loop(universe: ClassUniverse, config: TrainConfig, step_fn,
                    params: ParamSet) -> tuple[ParamSet, list[float]]:
    """Generic driver: per meta-step, sample `tasks_per_batch` train-split
    episodes (seeded by step and task index) and hand them to step_fn."""
    losses: list[float] = []
    for step in range(config.steps):
        episodes = [
            sample_episode(universe, "train", config.n_way, config.k_shot,
                           config.q_query, seed=(config.seed, 2, step, i))
            for i in range(config.tasks_per_batch)
        ]
        params, loss = step_fn(params, episodes, step)
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss at meta-step {step}")
        _check_finite(params, step)
        losses.append(loss)
    return params, losses


def train(universe: ClassUniverse, config: TrainConfig,
          ) -> tuple[ParamSet, RunRecord]:
    """Train under the configured regime; returns final parameters and the
    run record. Meta regimes carry an n-way head in the parameter set,
    ridge_meta is extractor-only, classical carries a head over all train
    classes."""
    config.validate()
    if config.regime == "classical":
        return train_classical(universe, config)
    start = time.perf_counter()
    spec = config.extractor_spec()
    params = init_extractor(spec, (config.seed, 0))
    if config.regime in ("reptile", "weight_cluster_reptile", "fomaml"):
        params = add_linear_head(params, config.embed_dim, config.n_way,
                                 seed=(config.seed, 3))

    if config.regime == "reptile":
        def step_fn(p, eps, step):
            return reptile_step(p, eps, config.inner_lr, config.inner_steps,
                                config.outer_lr)
    elif config.regime == "weight_cluster_reptile":
        def step_fn(p, eps, step):
            return weight_cluster_reptile_step(
                p, eps, config.inner_lr, config.outer_lr,
                config.cluster_coeff, config.inner_steps)
    elif config.regime == "fomaml":
        def step_fn(p, eps, step):
            return fomaml_step(p, eps, config.inner_lr, config.inner_steps,
                               config.outer_lr)
    else:  # ridge_meta
        def step_fn(p, eps, step):
            return ridge_meta_step(p, eps, config.ridge_lambda,
                                   config.outer_lr)

    params, losses = meta_outer_loop(universe, config, step_fn, params)
    record = RunRecord(config.regime, losses, time.perf_counter() - start,
                       config.to_dict())
    return params, record


# -- evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalResult:
    mean: float
    se: float
    episodes: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "se": self.se, "episodes": self.episodes}


def evaluate(params: ParamSet, universe: ClassUniverse, split: str,
             head: HeadKind, n: int, k: int, q: int, episodes: int,
             base_seed: int, threads: int = 1) -> EvalResult:
    """Mean accuracy with one-standard-error radius over seeded episodes.

    Episode i is seeded (base_seed, i) and results reduce in index order,
    so any thread count produces the identical report.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")

    def run_one(i: int) -> float:
        ep = sample_episode(universe, split, n, k, q,
                            seed=_episode_seed(base_seed, i))
        preds = apply_head(head, params, ep.support_x, ep.support_y,
                           ep.query_x, n)
        return float((preds == ep.query_y).mean())

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accs = np.array(list(pool.map(run_one, range(episodes))))
    else:
        accs = np.array([run_one(i) for i in range(episodes)])
    se = float(accs.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else 0.0
    return EvalResult(float(accs.mean()), se, episodes)


def distance_traveled_histogram(params: ParamSet, universe: ClassUniverse,
                                split: str, episodes: int, steps: int,
                                lr: float, n: int = 5, k: int = 1, q: int = 15,
                                base_seed: int = 0, bin_count: int = 30,
                                lo: float = 0.0, hi: float | None = None,
                                threads: int = 1,
                                ) -> tuple[HistogramSpec, np.ndarray]:
    """Filter-normalized distance traveled by the pre-existing parameters
    during full fine-tuning, per episode; returns the histogram and the raw
    distances in episode order.

    The fresh episode head starts from zero, so its filters would jump
    from zero to unit norm regardless of the model under study; distance
    is therefore measured over the layers present before fine-tuning."""
    if episodes < 1:
        raise ValueError("need at least one episode")
    layers = extractor_layers(params)
    before = ParamSet({f"{name}.{kind}": params[f"{name}.{kind}"]
                       for name in layers for kind in ("weight", "bias")})

    def run_one(i: int) -> float:
        ep = sample_episode(universe, split, n, k, q,
                            seed=_episode_seed(base_seed, i))
        adapted = finetune_full(params, ep.support_x, ep.support_y, n,
                                steps, lr)
        moved = ParamSet({key: adapted[key] for key in before.names()})
        return filter_norm_distance(before, moved)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            dists = np.array(list(pool.map(run_one, range(episodes))))
    else:
        dists = np.array([run_one(i) for i in range(episodes)])
    return build_histogram(dists, bin_count, lo, hi), dists
