"""Dense feed-forward network with manual backpropagation.

Hidden layers are ``relu(norm(W h + b))`` where ``norm`` is an optional
per-layer standardization with learnable scale and shift; the output layer is
linear with width 1. Parameters are float64 numpy arrays, updated in place by
``training``.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fairlayer.constraints import DimensionMismatch, FairLayerError
from fairlayer.state import read_json, write_json_atomic

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
NORM_EPS = 1e-5


class NonFiniteActivation(FairLayerError):
    """Raised when a forward pass produces NaN or infinite values."""


class ModelFormatError(FairLayerError):
    """Raised when a model document cannot be loaded."""


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator used for every seeded draw in the package."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class MLPModel:
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    layer_norm: bool = False
    gammas: List[np.ndarray] = field(default_factory=list)
    betas: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise DimensionMismatch("need one bias vector per weight matrix")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DimensionMismatch(f"layer {l}: W {W.shape} and b {b.shape} disagree")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionMismatch(
                    f"layer {l} expects {W.shape[1]} inputs, previous layer has "
                    f"{self.weights[l - 1].shape[0]} outputs"
                )
        if self.weights[-1].shape[0] != 1:
            raise DimensionMismatch("output layer must have width 1")
        hidden = self.weights[:-1]
        if self.layer_norm and not self.gammas:
            self.gammas = [np.ones(W.shape[0]) for W in hidden]
            self.betas = [np.zeros(W.shape[0]) for W in hidden]
        if self.layer_norm and len(self.gammas) != len(hidden):
            raise DimensionMismatch("need one normalization scale per hidden layer")
        if not all(np.all(np.isfinite(p)) for p in self.parameters()):
            raise NonFiniteActivation("model parameters must be finite")

    @property
    def widths(self) -> List[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    def parameters(self) -> List[np.ndarray]:
        """All trainable arrays in a fixed order (matches ``backward``)."""
        params: List[np.ndarray] = []
        for l in range(len(self.weights)):
            params += [self.weights[l], self.biases[l]]
            if self.layer_norm and l < len(self.gammas):
                params += [self.gammas[l], self.betas[l]]
        return params

    def copy_parameters(self) -> List[np.ndarray]:
        return [p.copy() for p in self.parameters()]

    def load_parameters(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values):
            p[...] = v


def init_model(
    widths: Sequence[int], layer_norm: bool = False, seed: int = 0,
) -> MLPModel:
    """He-uniform weights U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2 or widths[-1] != 1 or min(widths) < 1:
        raise DimensionMismatch(f"invalid layer widths {widths}")
    rng = philox(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPModel(weights, biases, layer_norm=layer_norm)


# -- Forward / backward --


@dataclass
class _LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    normed: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None
    post: Optional[np.ndarray] = None


def _check_input(model: MLPModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise DimensionMismatch(
            f"batch has shape {X.shape}, model expects {model.input_dim} features"
        )
    return X


def forward_with_cache(model: MLPModel, X: np.ndarray) -> Tuple[np.ndarray, List[_LayerCache]]:
    """Raw outputs z (shape (N,)) and the activations needed by ``backward``."""
    h = _check_input(model, X)
    caches: List[_LayerCache] = []
    last = len(model.weights) - 1
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        pre = h @ W.T + b
        cache = _LayerCache(inputs=h, pre=pre)
        if l < last:
            act = pre
            if model.layer_norm:
                mean = pre.mean(axis=1, keepdims=True)
                inv_std = 1.0 / np.sqrt(pre.var(axis=1, keepdims=True) + NORM_EPS)
                cache.normed = (pre - mean) * inv_std
                cache.inv_std = inv_std
                act = cache.normed * model.gammas[l] + model.betas[l]
            cache.post = act
            h = np.maximum(act, 0.0)
        else:
            h = pre
        caches.append(cache)
    z = h[:, 0]
    if not np.all(np.isfinite(z)):
        raise NonFiniteActivation("forward pass produced non-finite outputs")
    return z, caches


def forward(model: MLPModel, X: np.ndarray) -> np.ndarray:
    return forward_with_cache(model, X)[0]


def backward(model: MLPModel, caches: List[_LayerCache], dz: np.ndarray) -> List[np.ndarray]:
    """Gradients of sum(dz * z) w.r.t. ``model.parameters()``, same order."""
    grad = np.asarray(dz, dtype=float).reshape(-1, 1)
    per_layer: List[List[np.ndarray]] = []
    last = len(model.weights) - 1
    for l in range(last, -1, -1):
        cache = caches[l]
        grads: List[np.ndarray] = []
        if l < last:
            grad = grad * (cache.post > 0)
            if model.layer_norm:
                d_gamma = np.sum(grad * cache.normed, axis=0)
                d_beta = np.sum(grad, axis=0)
                d_norm = grad * model.gammas[l]
                width = d_norm.shape[1]
                grad = cache.inv_std / width * (
                    width * d_norm
                    - d_norm.sum(axis=1, keepdims=True)
                    - cache.normed * np.sum(d_norm * cache.normed, axis=1, keepdims=True)
                )
                grads = [d_gamma, d_beta]
        d_W = grad.T @ cache.inputs
        d_b = grad.sum(axis=0)
        per_layer.append([d_W, d_b] + grads)
        grad = grad @ model.weights[l]
    ordered: List[np.ndarray] = []
    for group in reversed(per_layer):
        ordered += group
    return ordered


# -- Serialization --


def model_to_dict(model: MLPModel) -> Dict[str, Any]:
    last = len(model.weights) - 1
    layers = []
    for l, (W, b) in enumerate(zip(model.weights, model.biases)):
        layer: Dict[str, Any] = {
            "in": int(W.shape[1]),
            "out": int(W.shape[0]),
            "activation": "linear" if l == last else "relu",
            "weights": W.tolist(),
            "bias": b.tolist(),
        }
        if model.layer_norm and l < last:
            layer["norm_scale"] = model.gammas[l].tolist()
            layer["norm_shift"] = model.betas[l].tolist()
        layers.append(layer)
    return {
        "format_version": FORMAT_VERSION,
        "widths": model.widths,
        "layer_norm": model.layer_norm,
        "layers": layers,
    }


def model_from_dict(doc: Dict[str, Any]) -> MLPModel:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format_version {version!r}")
    try:
        layers = doc["layers"]
        weights = [np.array(layer["weights"], dtype=float).reshape(layer["out"], layer["in"]) for layer in layers]
        biases = [np.array(layer["bias"], dtype=float) for layer in layers]
        layer_norm = bool(doc.get("layer_norm", False))
        gammas = [np.array(layer["norm_scale"], dtype=float) for layer in layers[:-1]] if layer_norm else []
        betas = [np.array(layer["norm_shift"], dtype=float) for layer in layers[:-1]] if layer_norm else []
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from exc
    return MLPModel(weights, biases, layer_norm, gammas, betas)


def save_model(model: MLPModel, path: Path, extra: Optional[Dict[str, Any]] = None) -> None:
    """Write the model document; floats use repr so the round trip is exact."""
    doc = model_to_dict(model)
    if extra:
        doc["metadata"] = extra
    write_json_atomic(Path(path), doc)
    log.info("Saved model %s to %s", model.widths, path)


def load_model(path: Path) -> MLPModel:
    return model_from_dict(read_json(Path(path)))
