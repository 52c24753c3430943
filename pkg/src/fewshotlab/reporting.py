"""Report emission: canonical JSON, provenance-stamped CSV, and figures.

Every emitted file embeds the config hash and seed of the run that
produced it. JSON payloads keep volatile fields (wall-clock) under a
dedicated "timing" key so reruns are byte-identical everywhere else;
CSV files carry provenance in a leading comment line and contain no
volatile fields at all. Writes are atomic (temp file + rename), so an
interrupted run never leaves a corrupt artifact.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import __version__
from .metrics import HistogramSpec


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def provenance(config: dict, seed: int) -> dict:
    return {
        "config_hash": config_hash(config),
        "seed": seed,
        "version": __version__,
    }


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def write_csv(path, header: list[str], rows, prov: dict) -> None:
    lines = [f"# config_hash={prov['config_hash']} seed={prov['seed']}"]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def aligned_table(col_names: list[str], rows: list[list[str]],
                  row_names: list[str]) -> str:
    """Monospace table with right-padded columns."""
    head = [""] + col_names
    body = [[name] + row for name, row in zip(row_names, rows)]
    widths = [max(len(str(line[i])) for line in [head] + body)
              for i in range(len(head))]
    out = []
    for line in [head] + body:
        out.append("  ".join(str(v).ljust(w) for v, w in zip(line, widths)))
    return "\n".join(out) + "\n"


# -- figures -----------------------------------------------------------------


def _save(fig, path, prov: dict) -> None:
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    fig.text(0.995, 0.005, f"cfg {prov['config_hash']} seed {prov['seed']}",
             ha="right", va="bottom", fontsize=6, color="0.55")
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def lda_scatter_figure(path, coords: np.ndarray, class_ids: np.ndarray,
                       prov: dict) -> None:
    fig, ax = plt.subplots(figsize=(5, 4), constrained_layout=True)
    for cid in np.unique(class_ids):
        rows = class_ids == cid
        ax.scatter(coords[rows, 0], coords[rows, 1], s=12, alpha=0.75,
                   label=f"class {cid}")
    ax.set_xlabel("discriminant 1")
    ax.set_ylabel("discriminant 2")
    ax.legend(fontsize=8)
    _save(fig, path, prov)


def histogram_figure(path, hist: HistogramSpec, prov: dict,
                     xlabel: str = "distance traveled") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2), constrained_layout=True)
    edges = hist.edges
    ax.bar(edges[:-1], hist.counts, width=np.diff(edges), align="edge",
           edgecolor="white")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("episodes")
    _save(fig, path, prov)


def sweep_figure(path, values: list[float], series: dict[str, list[float]],
                 prov: dict, xlabel: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    for label, ys in series.items():
        xs = [v for v, y in zip(values, ys) if y is not None]
        kept = [y for y in ys if y is not None]
        ax.plot(xs, kept, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("accuracy")
    if any(v > 0 for v in values):
        positive = [v for v in values if v > 0]
        if positive and max(positive) / min(positive) > 50:
            ax.set_xscale("symlog", linthresh=min(positive))
    ax.legend(fontsize=8)
    _save(fig, path, prov)


def theorem_figure(path, rows, prov: dict) -> None:
    """rows: [((family, dim, eps), BoundReport), ...]"""
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    combos = sorted({(family, dim) for (family, dim, _), _ in rows})
    for family, dim in combos:
        pts = sorted((eps, rep.accuracy) for (f, d, eps), rep in rows
                     if f == family and d == dim)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                label=f"{family} d={dim}")
    eps_all = sorted({eps for (_, _, eps), _ in rows})
    from .theorem import accuracy_bound

    ax.plot(eps_all, [accuracy_bound(e) for e in eps_all], "k--",
            label="lower bound")
    ax.set_xscale("log")
    ax.set_xlabel("variance ratio")
    ax.set_ylabel("one-shot accuracy")
    ax.legend(fontsize=8)
    _save(fig, path, prov)
