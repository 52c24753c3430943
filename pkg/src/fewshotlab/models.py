"""MLP feature extractors, their parameter sets, and checkpoint IO.

A ParamSet is an ordered mapping of layer name -> {weight [out x in],
bias [out]}. Weight rows play the role of filters wherever per-filter
normalization applies. Checkpoints are JSON with float64 values encoded
as C99 hex literals so round-trips are bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, matmul, relu, transpose


@dataclass(frozen=True)
class ExtractorSpec:
    input_dim: int
    hidden: tuple[int, ...] = (64, 64)
    embed_dim: int = 32

    def __post_init__(self):
        widths = (self.input_dim, *self.hidden, self.embed_dim)
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden, self.embed_dim)
        return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


class ParamSet:
    """Ordered named weight/bias arrays. Copy-on-write discipline: training
    owns its ParamSet, evaluation treats it as read-only."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self._arrays: dict[str, np.ndarray] = {}
        if entries:
            for name, arr in entries.items():
                self[name] = arr

    def __setitem__(self, name: str, arr) -> None:
        self._arrays[name] = np.asarray(arr, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __iter__(self):
        return iter(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._arrays.items()})

    def same_shapes(self, other: "ParamSet") -> bool:
        return sorted(self.names()) == sorted(other.names()) and all(
            self[k].shape == other[k].shape for k in self._arrays
        )

    def allclose(self, other: "ParamSet", atol=0.0, rtol=0.0) -> bool:
        return self.same_shapes(other) and all(
            np.allclose(self[k], other[k], atol=atol, rtol=rtol)
            for k in self._arrays
        )

    def equal(self, other: "ParamSet") -> bool:
        """Bit-exact equality."""
        return self.same_shapes(other) and all(
            np.array_equal(self[k], other[k]) for k in self._arrays
        )


def layer_names(spec: ExtractorSpec) -> list[str]:
    return [f"layer{i}" for i in range(len(spec.layer_dims()))]


def init_extractor(spec: ExtractorSpec, seed, scheme: str = "he") -> ParamSet:
    """He-normal weights (relu stack) and zero biases; `scheme='zeros'`
    gives the untrained all-zero baseline."""
    params = ParamSet()
    rng = np.random.default_rng(seed)
    for name, (out_dim, in_dim) in zip(layer_names(spec), spec.layer_dims()):
        if scheme == "zeros":
            w = np.zeros((out_dim, in_dim))
        elif scheme == "he":
            w = rng.normal(scale=np.sqrt(2.0 / in_dim), size=(out_dim, in_dim))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        params[f"{name}.weight"] = w
        params[f"{name}.bias"] = np.zeros(out_dim)
    return params


def add_linear_head(params: ParamSet, embed_dim: int, classes: int,
                    name: str = "head", seed=None) -> ParamSet:
    """Zero head by default; meta-learned heads pass a seed so their rows
    carry real scale (filter normalization needs non-degenerate filters)."""
    out = params.copy()
    if seed is None:
        out[f"{name}.weight"] = np.zeros((classes, embed_dim))
    else:
        rng = np.random.default_rng(seed)
        out[f"{name}.weight"] = rng.normal(scale=np.sqrt(1.0 / embed_dim),
                                           size=(classes, embed_dim))
    out[f"{name}.bias"] = np.zeros(classes)
    return out


def extractor_layers(params: ParamSet) -> list[str]:
    """Layer names excluding any classification head, in stack order."""
    bases = set()
    for key in params.names():
        base = key.rsplit(".", 1)[0]
        if base != "head":
            bases.add(base)
    return sorted(bases, key=lambda b: int(b.removeprefix("layer")))


def extract(params: ParamSet, x: np.ndarray) -> np.ndarray:
    """Forward pass to the embedding, numpy fast path (no gradients)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be (batch, input_dim)")
    layers = extractor_layers(params)
    h = x
    for i, name in enumerate(layers):
        w, b = params[f"{name}.weight"], params[f"{name}.bias"]
        if h.shape[1] != w.shape[1]:
            raise ValueError(
                f"{name}: input width {h.shape[1]} != expected {w.shape[1]}"
            )
        h = h @ w.T + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def extract_on_graph(param_tensors: dict[str, Tensor], x: np.ndarray,
                     layers: list[str]) -> Tensor:
    """Forward pass recorded on the autodiff tape."""
    h = Tensor(np.asarray(x, dtype=np.float64))
    for i, name in enumerate(layers):
        w = param_tensors[f"{name}.weight"]
        b = param_tensors[f"{name}.bias"]
        h = matmul(h, transpose(w)) + b
        if i < len(layers) - 1:
            h = relu(h)
    return h


def params_to_tensors(params: ParamSet) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in params.items()}


def tensors_to_params(tensors: dict[str, Tensor]) -> ParamSet:
    return ParamSet({k: t.data.copy() for k, t in tensors.items()})


# -- checkpoints ---------------------------------------------------------

CHECKPOINT_FORMAT = "fewshotlab-checkpoint-v1"


def _encode_array(arr: np.ndarray) -> dict:
    return {
        "shape": list(arr.shape),
        "data": [float(v).hex() for v in arr.ravel()],
    }


def _decode_array(obj: dict) -> np.ndarray:
    values = np.array([float.fromhex(v) for v in obj["data"]], dtype=np.float64)
    return values.reshape(obj["shape"])


def checkpoint_payload(params: ParamSet, spec: dict,
                       provenance: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "spec": spec,
        "params": {k: _encode_array(v) for k, v in params.items()},
        "provenance": provenance or {},
    }


def save_checkpoint(path, params: ParamSet, spec: dict,
                    provenance: dict | None = None) -> None:
    payload = checkpoint_payload(params, spec, provenance)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    params = ParamSet({k: _decode_array(v) for k, v in payload["params"].items()})
    return params, payload.get("spec", {})
