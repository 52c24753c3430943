"""Command-line entry point.

Subcommands: gen-data, train, eval-matrix, sweep, measure, verify-theorem.
Global flags: --config, --seed, --out, --threads. The default output
directory comes from $FEWSHOTLAB_OUT (falling back to the working
directory). Config schemas are documented in the README; unknown keys are
rejected. Exit code 0 means every requested cell/row succeeded; partial
failures are recorded in the report and exit with 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .episodes import (
    ClassUniverse,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    save_csv,
)
from .heads import HEAD_NAMES, head_from_name
from .metrics import (
    lda_project,
    linear_cka,
    sampled_hyperplane_variation,
    variance_ratio,
)
from .models import extract, load_checkpoint, save_checkpoint
from .reporting import (
    aligned_table,
    atomic_write_text,
    config_hash,
    histogram_figure,
    lda_scatter_figure,
    provenance,
    sweep_figure,
    theorem_figure,
    write_csv,
    write_json,
)
from .theorem import accuracy_bound, solve_separation_for_ratio, sweep_bounds
from .trainers import TrainConfig, distance_traveled_histogram, evaluate, train


class UsageError(ValueError):
    pass


def _check_keys(cfg: dict, allowed: set[str], context: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise UsageError(f"{context}: unknown keys {sorted(unknown)}")


def _load_config(path: str | None, required: bool = True) -> dict:
    if path is None:
        if required:
            raise UsageError("this command requires --config")
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"{path}: invalid JSON ({err})") from None


def _resolve_dataset(block: dict, context: str = "dataset") -> ClassUniverse:
    if not isinstance(block, dict):
        raise UsageError(f"{context} must be an object")
    _check_keys(block, {"csv", "synthetic", "split_counts"}, context)
    counts = block.get("split_counts")
    if counts is not None:
        counts = tuple(int(c) for c in counts)
    if "csv" in block:
        return load_csv(block["csv"], split_counts=counts)
    if "synthetic" in block:
        spec = _synthetic_spec(block["synthetic"], f"{context}.synthetic")
        return generate_synthetic(spec, split_counts=counts)
    raise UsageError(f"{context} needs either 'csv' or 'synthetic'")


def _synthetic_spec(cfg: dict, context: str) -> SyntheticSpec:
    allowed = {"num_classes", "dim", "examples_per_class", "mean_scale",
               "noise_scale", "nuisance_dim", "nuisance_scale", "seed"}
    _check_keys(cfg, allowed, context)
    missing = {"num_classes", "dim", "examples_per_class"} - set(cfg)
    if missing:
        raise UsageError(f"{context}: missing keys {sorted(missing)}")
    return SyntheticSpec(**cfg)


def _out_dir(args) -> str:
    out = args.out or os.environ.get("FEWSHOTLAB_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _effective(config: dict, args) -> tuple[dict, int]:
    """Apply the --seed override and return (config, effective seed)."""
    cfg = json.loads(json.dumps(config))  # deep copy
    seed = args.seed
    if seed is None:
        seed = cfg.get("seed", cfg.get("train", {}).get("seed", 0))
    cfg["seed"] = int(seed)
    if "train" in cfg and isinstance(cfg["train"], dict):
        cfg["train"]["seed"] = int(seed)
    return cfg, int(seed)


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"synthetic", "split_counts", "name", "seed"}, "gen-data")
    cfg, seed = _effective(cfg, args)
    spec_cfg = dict(cfg.get("synthetic") or {})
    spec_cfg["seed"] = seed
    spec = _synthetic_spec(spec_cfg, "synthetic")
    counts = cfg.get("split_counts")
    universe = generate_synthetic(
        spec, split_counts=tuple(counts) if counts else None)
    out = _out_dir(args)
    name = cfg.get("name", "dataset")
    csv_path = os.path.join(out, f"{name}.csv")
    save_csv(universe, csv_path)
    prov = provenance(cfg, seed)
    write_json(os.path.join(out, f"{name}.meta.json"), {
        "config": cfg,
        "provenance": prov,
        "classes": len(universe.classes),
        "dim": universe.dim,
        "examples": int(len(universe.labels)),
        "splits": {k: sorted(v) for k, v in universe.splits.items()},
    })
    print(f"wrote {csv_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"dataset", "train", "name", "seed"}, "train")
    if "dataset" not in cfg or "train" not in cfg:
        raise UsageError("train config needs 'dataset' and 'train'")
    cfg, seed = _effective(cfg, args)
    universe = _resolve_dataset(cfg["dataset"])
    tc = TrainConfig.from_dict(cfg["train"])
    params, record = train(universe, tc)
    out = _out_dir(args)
    name = cfg.get("name", tc.regime)
    prov = provenance(cfg, seed)
    ckpt_path = os.path.join(out, f"{name}.checkpoint.json")
    save_checkpoint(ckpt_path, params, spec={
        "input_dim": tc.input_dim,
        "hidden": list(tc.hidden),
        "embed_dim": tc.embed_dim,
        "regime": tc.regime,
    }, provenance=prov)
    payload = record.to_dict()
    payload["provenance"] = prov
    payload["checkpoint"] = os.path.basename(ckpt_path)
    write_json(os.path.join(out, f"{name}.run.json"), payload)
    print(f"wrote {ckpt_path} (final loss {record.losses[-1]:.4f})")
    return 0


def _eval_cells(universe, checkpoints, head_names, shots, episodes, n_way,
                q_query, split, seed, threads):
    cells = []
    for ckpt_path in checkpoints:
        params, _ = load_checkpoint(ckpt_path)
        name = os.path.basename(ckpt_path).removesuffix(".checkpoint.json")
        for head_name in head_names:
            for shot in shots:
                cell = {"checkpoint": name, "head": head_name, "shot": shot}
                try:
                    result = evaluate(params, universe, split,
                                      head_from_name(head_name), n_way,
                                      shot, q_query, episodes, seed,
                                      threads=threads)
                    cell.update(result.to_dict())
                except Exception as err:  # cell failure must not kill the run
                    cell["failed"] = f"{type(err).__name__}: {err}"
                cells.append(cell)
    return cells


def cmd_eval_matrix(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"dataset", "checkpoints", "heads", "shots", "episodes",
               "n_way", "q_query", "split", "seed"}
    _check_keys(cfg, allowed, "eval-matrix")
    if "dataset" not in cfg or not cfg.get("checkpoints"):
        raise UsageError("eval-matrix config needs 'dataset' and 'checkpoints'")
    cfg, seed = _effective(cfg, args)
    universe = _resolve_dataset(cfg["dataset"])
    head_names = cfg.get("heads", ["centroid", "ridge", "linear_sgd",
                                   "hinge_sgd"])
    for name in head_names:
        if name not in HEAD_NAMES:
            raise UsageError(f"unknown head {name!r}; choose from {HEAD_NAMES}")
    shots = [int(s) for s in cfg.get("shots", [1, 5])]
    episodes = int(cfg.get("episodes", 1000))
    n_way = int(cfg.get("n_way", 5))
    q_query = int(cfg.get("q_query", 15))
    split = cfg.get("split", "test")

    start = time.perf_counter()
    cells = _eval_cells(universe, cfg["checkpoints"], head_names, shots,
                        episodes, n_way, q_query, split, seed, args.threads)
    prov = provenance(cfg, seed)
    out = _out_dir(args)
    write_json(os.path.join(out, "eval_matrix.json"), {
        "cells": cells,
        "config": cfg,
        "provenance": prov,
        "timing": {"seconds": time.perf_counter() - start},
    })

    col_names = [f"{h}/{s}-shot" for h in head_names for s in shots]
    row_names = sorted({c["checkpoint"] for c in cells})
    rows = []
    for ckpt in row_names:
        row = []
        for h in head_names:
            for s in shots:
                cell = next(c for c in cells if c["checkpoint"] == ckpt
                            and c["head"] == h and c["shot"] == s)
                if "failed" in cell:
                    row.append("FAILED")
                else:
                    row.append(f"{cell['mean']:.4f}±{cell['se']:.4f}")
        rows.append(row)
    table = aligned_table(col_names, rows, row_names)
    atomic_write_text(os.path.join(out, "eval_matrix.txt"),
                      f"# config_hash={prov['config_hash']} seed={prov['seed']}\n"
                      + table)
    print(table, end="")
    return 0 if all("failed" not in c for c in cells) else 2


def _set_by_path(cfg: dict, path: str, value) -> None:
    keys = path.split(".")
    node = cfg
    for key in keys[:-1]:
        if not isinstance(node, dict) or key not in node:
            raise UsageError(f"parameter path {path!r} not found in template")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise UsageError(f"parameter path {path!r} not found in template")
    node[keys[-1]] = value


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    _check_keys(cfg, {"template", "parameter", "values", "eval", "seed"},
                "sweep")
    for key in ("template", "parameter", "values"):
        if key not in cfg:
            raise UsageError(f"sweep config needs {key!r}")
    cfg, seed = _effective(cfg, args)
    template = cfg["template"]
    if "dataset" not in template or "train" not in template:
        raise UsageError("sweep template needs 'dataset' and 'train'")
    eval_cfg = cfg.get("eval", {})
    _check_keys(eval_cfg, {"heads", "shots", "episodes", "n_way", "q_query",
                           "split"}, "sweep.eval")
    head_names = eval_cfg.get("heads", ["ridge"])
    for name in head_names:
        if name not in HEAD_NAMES:
            raise UsageError(f"unknown head {name!r}; choose from {HEAD_NAMES}")
    shots = [int(s) for s in eval_cfg.get("shots", [1])]
    episodes = int(eval_cfg.get("episodes", 500))
    n_way = int(eval_cfg.get("n_way", 5))
    q_query = int(eval_cfg.get("q_query", 15))
    split = eval_cfg.get("split", "val")

    start = time.perf_counter()
    universe = _resolve_dataset(template["dataset"])
    rows = []
    failures = 0
    for value in cfg["values"]:
        run_cfg = json.loads(json.dumps(template))
        _set_by_path(run_cfg, cfg["parameter"], value)
        run_cfg.setdefault("train", {})["seed"] = seed
        row = {"value": value}
        try:
            tc = TrainConfig.from_dict(run_cfg["train"])
            params, record = train(universe, tc)
            row["final_loss"] = record.losses[-1]
            for h in head_names:
                for s in shots:
                    res = evaluate(params, universe, split,
                                   head_from_name(h), n_way, s, q_query,
                                   episodes, seed, threads=args.threads)
                    row[f"acc_{h}_{s}shot"] = res.mean
                    row[f"se_{h}_{s}shot"] = res.se
        except Exception as err:
            row["failed"] = f"{type(err).__name__}: {err}"
            failures += 1
        rows.append(row)

    prov = provenance(cfg, seed)
    out = _out_dir(args)
    metric_cols = [f"acc_{h}_{s}shot" for h in head_names for s in shots] \
        + [f"se_{h}_{s}shot" for h in head_names for s in shots]
    header = ["value", "final_loss"] + metric_cols + ["failed"]
    csv_rows = [[row.get(c, "") for c in header] for row in rows]
    write_csv(os.path.join(out, "sweep.csv"), header, csv_rows, prov)
    write_json(os.path.join(out, "sweep.json"), {
        "rows": rows,
        "config": cfg,
        "provenance": prov,
        "timing": {"seconds": time.perf_counter() - start},
    })
    series = {}
    for h in head_names:
        for s in shots:
            key = f"acc_{h}_{s}shot"
            series[f"{h} {s}-shot"] = [row.get(key) for row in rows]
    try:
        values = [float(v) for v in cfg["values"]]
        sweep_figure(os.path.join(out, "sweep.png"), values, series, prov,
                     xlabel=cfg["parameter"])
    except (TypeError, ValueError):
        pass  # non-numeric sweep values get no figure
    print(f"wrote {os.path.join(out, 'sweep.csv')} ({len(rows)} rows)")
    return 0 if failures == 0 else 2


def _split_features(universe, split, per_class, rng):
    ids = universe.split_classes(split)
    feats, labels = [], []
    for cid in ids:
        rows = universe.class_rows(cid)
        take = min(per_class, len(rows))
        picked = rng.choice(len(rows), size=take, replace=False)
        feats.append(universe.features[rows[picked]])
        labels.extend([cid] * take)
    return np.concatenate(feats, axis=0), np.array(labels)


def cmd_measure(args) -> int:
    cfg = _load_config(args.config)
    allowed = {"dataset", "checkpoint", "reference_checkpoint", "split",
               "samples_per_class", "pair_samples", "lda",
               "distance_histogram", "seed"}
    _check_keys(cfg, allowed, "measure")
    if "dataset" not in cfg or "checkpoint" not in cfg:
        raise UsageError("measure config needs 'dataset' and 'checkpoint'")
    cfg, seed = _effective(cfg, args)
    universe = _resolve_dataset(cfg["dataset"])
    params, _ = load_checkpoint(cfg["checkpoint"])
    split = cfg.get("split", "test")
    per_class = int(cfg.get("samples_per_class", 100))
    pair_samples = int(cfg.get("pair_samples", 500))

    start = time.perf_counter()
    rng = np.random.default_rng((seed, 10))
    x, class_ids = _split_features(universe, split, per_class, rng)
    feats = extract(params, x)
    payload = {
        "r_fc": variance_ratio(feats, class_ids),
        "r_hv_mean": sampled_hyperplane_variation(feats, class_ids,
                                                  pair_samples, (seed, 11)),
        "cka": None,
        "n_examples": int(len(feats)),
        "split": split,
        "failures": {},
    }
    prov = provenance(cfg, seed)
    out = _out_dir(args)

    if cfg.get("reference_checkpoint"):
        try:
            ref_params, _ = load_checkpoint(cfg["reference_checkpoint"])
            payload["cka"] = linear_cka(feats, extract(ref_params, x))
        except Exception as err:
            payload["failures"]["cka"] = f"{type(err).__name__}: {err}"

    if cfg.get("lda", True):
        try:
            coords, _ = lda_project(feats, class_ids, out_dims=2)
            write_csv(os.path.join(out, "lda.csv"), ["x", "y", "class"],
                      [[float(cx), float(cy), int(c)]
                       for (cx, cy), c in zip(coords, class_ids)], prov)
            lda_scatter_figure(os.path.join(out, "lda.svg"), coords,
                               class_ids, prov)
        except Exception as err:
            payload["failures"]["lda"] = f"{type(err).__name__}: {err}"

    hist_cfg = cfg.get("distance_histogram")
    if hist_cfg:
        _check_keys(hist_cfg, {"episodes", "steps", "lr", "n_way", "k_shot",
                               "q_query", "bins", "lo", "hi"},
                    "measure.distance_histogram")
        try:
            hist, dists = distance_traveled_histogram(
                params, universe, split,
                episodes=int(hist_cfg.get("episodes", 200)),
                steps=int(hist_cfg.get("steps", 10)),
                lr=float(hist_cfg.get("lr", 0.01)),
                n=int(hist_cfg.get("n_way", 5)),
                k=int(hist_cfg.get("k_shot", 1)),
                q=int(hist_cfg.get("q_query", 15)),
                base_seed=(seed, 12),
                bin_count=int(hist_cfg.get("bins", 30)),
                lo=float(hist_cfg.get("lo", 0.0)),
                hi=hist_cfg.get("hi"),
                threads=args.threads)
            edges = hist.edges
            write_csv(os.path.join(out, "distance_hist.csv"),
                      ["bin_lo", "bin_hi", "count"],
                      [[float(edges[i]), float(edges[i + 1]), hist.counts[i]]
                       for i in range(hist.bin_count)], prov)
            histogram_figure(os.path.join(out, "distance_hist.png"), hist,
                             prov)
            payload["distance_mean"] = float(dists.mean())
        except Exception as err:
            payload["failures"]["distance_histogram"] = \
                f"{type(err).__name__}: {err}"

    payload["provenance"] = prov
    payload["timing"] = {"seconds": time.perf_counter() - start}
    write_json(os.path.join(out, "measure.json"), payload)
    print(json.dumps({k: payload[k] for k in
                      ("r_fc", "r_hv_mean", "cka", "n_examples")}, indent=2))
    return 0 if not payload["failures"] else 2


def cmd_verify_theorem(args) -> int:
    cfg = _load_config(args.config, required=False)
    allowed = {"eps", "dims", "families", "trials", "var_x", "var_y", "seed"}
    _check_keys(cfg, allowed, "verify-theorem")
    cfg, seed = _effective(cfg, args)
    eps_list = [float(e) for e in
                (args.eps.split(",") if args.eps else
                 cfg.get("eps", [0.001, 0.005, 0.01, 0.05, 0.1]))]
    dims = [int(d) for d in
            (args.dims.split(",") if args.dims else cfg.get("dims", [2, 16]))]
    families = (args.families.split(",") if args.families else
                cfg.get("families", ["gaussian", "uniform_ball"]))
    trials = args.trials or int(cfg.get("trials", 100_000))
    var_x = float(cfg.get("var_x", 1.0))
    var_y = float(cfg.get("var_y", 1.0))

    start = time.perf_counter()
    rows = sweep_bounds(eps_list, dims, families, trials, seed,
                        var_x=var_x, var_y=var_y)
    effective_cfg = dict(cfg, eps=eps_list, dims=dims, families=families,
                         trials=trials)
    prov = provenance(effective_cfg, seed)
    out = _out_dir(args)
    payload_rows = []
    for (family, dim, eps), rep in rows:
        payload_rows.append({
            "family": family, "dim": dim, "eps": eps,
            "separation": solve_separation_for_ratio(eps, var_x, var_y),
            "bound": rep.bound, "accuracy": rep.accuracy,
            "accuracy_se": rep.accuracy_se,
            "empirical_ratio": rep.empirical_ratio,
            "proof_denominator_ratio": rep.proof_denominator_ratio,
            "condition_rate": rep.condition_rate,
            "chebyshev_bound": rep.chebyshev_bound,
            "trials": rep.trials, "passed": rep.passed,
        })
    write_json(os.path.join(out, "theorem.json"), {
        "reports": payload_rows,
        "config": effective_cfg,
        "provenance": prov,
        "timing": {"seconds": time.perf_counter() - start},
    })
    header = ["family", "dim", "eps", "bound", "accuracy", "accuracy_se",
              "empirical_ratio", "condition_rate", "chebyshev_bound",
              "passed"]
    write_csv(os.path.join(out, "theorem.csv"), header,
              [[row[h] for h in header] for row in payload_rows], prov)
    theorem_figure(os.path.join(out, "theorem.png"), rows, prov)
    ok = all(row["passed"] for row in payload_rows)
    print(f"{len(payload_rows)} settings, all bounds hold: {ok}")
    return 0 if ok else 2


# -- argument parsing -----------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", help="output directory "
                        "(default: $FEWSHOTLAB_OUT or .)")
    parser.add_argument("--threads", type=int, default=1,
                        help="episode evaluation fan-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshotlab",
        description="Desk-scale few-shot learning laboratory")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, extra in [
        ("gen-data", cmd_gen_data, "generate a synthetic dataset CSV"),
        ("train", cmd_train, "train a model and write a checkpoint"),
        ("eval-matrix", cmd_eval_matrix,
         "cross-evaluate checkpoints against fine-tuning heads"),
        ("sweep", cmd_sweep, "train+eval over a list of parameter values"),
        ("measure", cmd_measure,
         "clustering/similarity measurements of a checkpoint"),
    ]:
        p = sub.add_parser(name, help=extra)
        _add_common(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("verify-theorem",
                       help="Monte Carlo check of the one-shot bound")
    _add_common(p)
    p.add_argument("--eps", help="comma-separated variance ratios")
    p.add_argument("--dims", help="comma-separated dimensions")
    p.add_argument("--families", help="comma-separated distribution families")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per setting")
    p.set_defaults(fn=cmd_verify_theorem)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
