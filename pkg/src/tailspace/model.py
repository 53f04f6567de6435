"""Toy feed-forward network with named linear layers and analytic gradients.

Columns of every activation matrix are samples.  A model is a chain of
:class:`LinearSpec` layers; with ``residual=True`` the layers are grouped in
consecutive pairs and each pair's output is added to the pair's input, like a
transformer MLP block without attention.

Any layer can be swapped for an :class:`~tailspace.adapter.AdaptedLayer`.
Once at least one adapter is injected, only adapter factors are trainable;
otherwise every weight and bias is (full fine-tuning).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tspm
from .adapter import AdaptedLayer, forward_parts, merge
from .linalg import DimensionError, as_matrix

ACTIVATIONS = ("identity", "relu", "gelu")
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class LinearSpec:
    name: str
    d_in: int
    d_out: int
    has_bias: bool = True
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"layer {self.name} has empty dimensions")


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    # tanh approximation of GELU
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def activate_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    inner = _GELU_C * (z + 0.044715 * z**3)
    th = np.tanh(inner)
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * z**2)


class StaleCacheError(RuntimeError):
    pass


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    ax: dict[str, np.ndarray]
    output: np.ndarray
    version: int
    use_adapters: bool


class ToyModel:
    def __init__(self, specs, residual: bool = False, weights=None, biases=None):
        self.specs = [s if isinstance(s, LinearSpec) else LinearSpec(**s) for s in specs]
        self.residual = residual
        if not self.specs:
            raise ValueError("a model needs at least one layer")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names in {names}")
        for prev, nxt in zip(self.specs, self.specs[1:]):
            if prev.d_out != nxt.d_in:
                raise DimensionError(f"{prev.name} outputs {prev.d_out} but {nxt.name} takes {nxt.d_in}")
        if residual:
            if len(self.specs) % 2:
                raise ValueError("residual models need an even number of layers")
            for first, second in zip(self.specs[::2], self.specs[1::2]):
                if first.d_in != second.d_out:
                    raise DimensionError(f"block {first.name}/{second.name} does not map back to its input width")
        self.weights: dict[str, np.ndarray] = {}
        self.biases: dict[str, np.ndarray | None] = {}
        for s in self.specs:
            w = np.zeros((s.d_out, s.d_in)) if weights is None else as_matrix(weights[s.name], s.name)
            if w.shape != (s.d_out, s.d_in):
                raise DimensionError(f"weight {s.name} has shape {w.shape}, expected {(s.d_out, s.d_in)}")
            self.weights[s.name] = w
            if s.has_bias:
                b = np.zeros(s.d_out) if biases is None else np.array(biases[s.name], dtype=np.float64)
                self.biases[s.name] = b
            else:
                self.biases[s.name] = None
        self.injected: dict[str, AdaptedLayer] = {}
        self.version = 0

    @classmethod
    def random(cls, specs, seed: int, residual: bool = False, bias_scale: float = 0.1) -> "ToyModel":
        """Gaussian init with std ``1/sqrt(d_in)``."""
        model = cls(specs, residual)
        rng = np.random.default_rng(seed)
        for s in model.specs:
            model.weights[s.name] = rng.standard_normal((s.d_out, s.d_in)) / np.sqrt(s.d_in)
            if s.has_bias:
                model.biases[s.name] = bias_scale * rng.standard_normal(s.d_out)
        return model

    @property
    def d_in(self) -> int:
        return self.specs[0].d_in

    @property
    def d_out(self) -> int:
        return self.specs[-1].d_out

    @property
    def layer_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def spec(self, name: str) -> LinearSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise KeyError(f"no layer named {name!r}")

    def copy(self) -> "ToyModel":
        return copy.deepcopy(self)

    def base_weight(self, name: str) -> np.ndarray:
        """Original (pre-injection) weight of a layer."""
        if name in self.injected:
            return self.injected[name].w_original
        return self.weights[name]

    def effective_weight(self, name: str) -> np.ndarray:
        if name in self.injected:
            return merge(self.injected[name])
        return self.weights[name]

    def bias(self, name: str) -> np.ndarray | None:
        if name in self.injected:
            return self.injected[name].bias
        return self.biases[name]

    def inject(self, name: str, layer: AdaptedLayer) -> None:
        spec = self.spec(name)
        if name in self.injected:
            raise ValueError(f"layer {name} already carries an adapter")
        if layer.w_frozen.shape != (spec.d_out, spec.d_in):
            raise DimensionError(f"adapter for {name} has shape {layer.w_frozen.shape}")
        self.injected[name] = layer
        del self.weights[name]
        del self.biases[name]
        self.version += 1

    @property
    def adapter_mode(self) -> bool:
        return bool(self.injected)

    def parameters(self) -> dict[str, np.ndarray]:
        """Live references to the trainable tensors, keyed by tensor id."""
        params = {}
        if self.adapter_mode:
            for name in self.layer_names:
                if name in self.injected:
                    pair = self.injected[name].adapter
                    params[f"{name}.lora_a"] = pair.a
                    params[f"{name}.lora_b"] = pair.b
            return params
        for name in self.layer_names:
            params[f"{name}.weight"] = self.weights[name]
            if self.biases[name] is not None:
                params[f"{name}.bias"] = self.biases[name]
        return params

    def frozen_tensors(self) -> dict[str, np.ndarray]:
        frozen = {}
        for name, layer in self.injected.items():
            frozen[f"{name}.w_frozen"] = layer.w_frozen
            if layer.bias is not None:
                frozen[f"{name}.bias"] = layer.bias
        if self.adapter_mode:
            for name, w in self.weights.items():
                frozen[f"{name}.weight"] = w
                if self.biases[name] is not None:
                    frozen[f"{name}.bias"] = self.biases[name]
        return frozen

    def mark_updated(self) -> None:
        self.version += 1

    def num_trainable(self) -> int:
        return sum(p.size for p in self.parameters().values())


def forward(model: ToyModel, inputs, use_adapters: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Run the network; with ``use_adapters=False`` injected layers use their original weight."""
    x = as_matrix(inputs, "inputs")
    if x.shape[0] != model.d_in:
        raise DimensionError(f"input has {x.shape[0]} rows, model expects {model.d_in}")
    ins, pres, axs = [], [], {}
    block_in = None
    for i, spec in enumerate(model.specs):
        if model.residual and i % 2 == 0:
            block_in = x
        ins.append(x)
        if spec.name in model.injected and use_adapters:
            z, ax = forward_parts(model.injected[spec.name], x)
            axs[spec.name] = ax
        else:
            z = model.base_weight(spec.name) @ x
            b = model.bias(spec.name)
            if b is not None:
                z = z + b[:, None]
        pres.append(z)
        x = activate(spec.activation, z)
        if model.residual and i % 2 == 1:
            x = x + block_in
    return x, ForwardCache(ins, pres, axs, x, model.version, use_adapters)


def _is_labels(targets) -> bool:
    t = np.asarray(targets)
    return t.ndim == 1 and np.issubdtype(t.dtype, np.integer)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def loss(outputs, targets) -> float:
    """Mean squared error for matrix targets, softmax cross-entropy for integer labels."""
    outputs = np.asarray(outputs, dtype=np.float64)
    if not np.all(np.isfinite(outputs)):
        raise FloatingPointError("non-finite model outputs")
    if _is_labels(targets):
        labels = np.asarray(targets)
        if labels.shape[0] != outputs.shape[1]:
            raise DimensionError(f"{labels.shape[0]} labels for {outputs.shape[1]} samples")
        z = outputs - outputs.max(axis=0, keepdims=True)
        logz = np.log(np.exp(z).sum(axis=0))
        return float(np.mean(logz - z[labels, np.arange(labels.shape[0])]))
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != outputs.shape:
        raise DimensionError(f"targets {targets.shape} do not match outputs {outputs.shape}")
    return float(np.mean((outputs - targets) ** 2))


def loss_grad(outputs: np.ndarray, targets) -> np.ndarray:
    if _is_labels(targets):
        labels = np.asarray(targets)
        g = _softmax(outputs)
        g[labels, np.arange(labels.shape[0])] -= 1.0
        return g / labels.shape[0]
    return 2.0 * (outputs - targets) / outputs.size


def backward(model: ToyModel, cache: ForwardCache, targets) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`loss` for every tensor in ``model.parameters()``."""
    if cache.version != model.version:
        raise StaleCacheError("forward cache predates the latest parameter update")
    if not cache.use_adapters and model.adapter_mode:
        raise StaleCacheError("cache was computed without adapters")
    grads: dict[str, np.ndarray] = {}
    g = loss_grad(cache.output, targets)
    skip = None
    train_all = not model.adapter_mode
    for i in range(len(model.specs) - 1, -1, -1):
        spec = model.specs[i]
        if model.residual and i % 2 == 1:
            skip = g
        gz = g * activate_grad(spec.activation, cache.pre[i])
        x = cache.inputs[i]
        if spec.name in model.injected:
            layer = model.injected[spec.name]
            pair = layer.adapter
            s = pair.scaling
            bt_gz = pair.b.T @ gz
            grads[f"{spec.name}.lora_a"] = s * (bt_gz @ x.T)
            grads[f"{spec.name}.lora_b"] = s * (gz @ cache.ax[spec.name].T)
            g = layer.w_frozen.T @ gz + s * (pair.a.T @ bt_gz)
        else:
            w = model.weights[spec.name]
            if train_all:
                grads[f"{spec.name}.weight"] = gz @ x.T
                if model.biases[spec.name] is not None:
                    grads[f"{spec.name}.bias"] = gz.sum(axis=1)
            g = w.T @ gz
        if model.residual and i % 2 == 0:
            g = g + skip
    order = list(model.parameters())
    return {k: grads[k] for k in order}


def save_model(path: str | os.PathLike, model: ToyModel) -> None:
    """JSON header line listing layer specs and tensors, then one TSPM blob per tensor.

    Injected layers are stored merged, so the checkpoint is a plain model.
    """
    tensors = []
    for s in model.specs:
        tensors.append((f"{s.name}.weight", model.effective_weight(s.name)))
        b = model.bias(s.name)
        if b is not None:
            tensors.append((f"{s.name}.bias", b))
    header = {
        "format": "tailspace-model",
        "version": 1,
        "residual": model.residual,
        "layers": [asdict(s) for s in model.specs],
        "tensors": [name for name, _ in tensors],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, t in tensors:
            tspm.write_matrix(fh, t)


def load_model(path: str | os.PathLike) -> ToyModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "tailspace-model":
            raise tspm.FormatError(f"{path} is not a model checkpoint")
        blobs = {name: tspm.read_matrix(fh) for name in header["tensors"]}
    weights = {}
    biases = {}
    for layer in header["layers"]:
        weights[layer["name"]] = blobs[f"{layer['name']}.weight"]
        if layer["has_bias"]:
            biases[layer["name"]] = blobs[f"{layer['name']}.bias"][:, 0]
    return ToyModel(header["layers"], header["residual"], weights, biases)
