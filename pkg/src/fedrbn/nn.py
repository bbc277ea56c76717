"""Minimal dense NN core with exact manual backpropagation.

Supports linear, relu and dual-BN layers, enough to train small MLP
classifiers with softmax cross-entropy. All arrays are float64.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .dual_bn import DBNState, dbn_backward, dbn_forward_cached
from .errors import ArgumentError, DimensionError


@dataclass
class Model:
    """Ordered layer list plus parameter stores.

    layers entries are ("linear", d_in, d_out), ("relu",) or ("dbn", p).
    Linear parameters live in ``params`` under "lin{i}.W" / "lin{i}.b";
    each dbn layer owns a DBNState in ``dbn_states`` keyed "dbn{i}".
    ``bn_mode`` is the model-wide path switch h applied to every dbn layer.
    """

    layers: list
    params: dict = field(default_factory=dict)
    dbn_states: dict = field(default_factory=dict)
    bn_mode: int = 0
    training: bool = False

    def set_mode(self, h: int = None, training: bool = None) -> "Model":
        if h is not None:
            if h not in (0, 1):
                raise ArgumentError("bn_mode must be 0 or 1")
            self.bn_mode = h
        if training is not None:
            self.training = training
        return self

    def input_dim(self) -> int:
        for spec in self.layers:
            if spec[0] == "linear":
                return spec[1]
        raise ArgumentError("model has no linear layer")

    def trainable_keys(self) -> list:
        keys = list(self.params.keys())
        for name in self.dbn_states:
            keys.append(f"{name}.w")
            keys.append(f"{name}.b")
        return keys


def build_mlp(dim: int, hidden: list, classes: int, rng: np.random.Generator) -> Model:
    """MLP: dim -> [linear h, dbn, relu]* -> linear classes."""
    layers = []
    params = {}
    dbn_states = {}
    d = dim
    idx = 0
    for h in hidden:
        layers.append(("linear", d, h))
        params[f"lin{idx}.W"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, h))
        params[f"lin{idx}.b"] = np.zeros(h)
        idx += 1
        layers.append(("dbn", h))
        dbn_states[f"dbn{idx}"] = DBNState(channels=h)
        idx += 1
        layers.append(("relu",))
        idx += 1
        d = h
    layers.append(("linear", d, classes))
    params[f"lin{idx}.W"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, classes))
    params[f"lin{idx}.b"] = np.zeros(classes)
    return Model(layers=layers, params=params, dbn_states=dbn_states)


def clone_model(model: Model) -> Model:
    return copy.deepcopy(model)


def _check_input(model: Model, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected 2-d input, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ArgumentError("empty batch")
    if x.shape[1] != model.input_dim():
        raise DimensionError(
            f"input dim {x.shape[1]} != model dim {model.input_dim()}")
    return x


def forward_cached(model: Model, x: np.ndarray):
    """Forward pass keeping per-layer caches for backward()."""
    x = _check_input(model, x)
    caches = []
    out = x
    for i, spec in enumerate(model.layers):
        kind = spec[0]
        if kind == "linear":
            W = model.params[f"lin{i}.W"]
            b = model.params[f"lin{i}.b"]
            if out.shape[1] != W.shape[0]:
                raise DimensionError("layer input width mismatch")
            caches.append(("linear", i, out))
            out = out @ W + b
        elif kind == "relu":
            caches.append(("relu", i, out))
            out = np.maximum(out, 0.0)
        elif kind == "dbn":
            st = model.dbn_states[f"dbn{i}"]
            out, _, cache = dbn_forward_cached(
                st, out, model.bn_mode, model.training)
            caches.append(("dbn", i, cache))
        else:
            raise ArgumentError(f"unknown layer kind {kind!r}")
    return out, caches


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for a batch; dbn layers follow (bn_mode, training)."""
    out, _ = forward_cached(model, x)
    return out


def backward(model: Model, caches: list, dout: np.ndarray):
    """Backpropagate dout through the cached pass.

    Returns (grads keyed like trainable parameters, dinput).
    """
    grads = {}
    d = dout
    for kind, i, cache in reversed(caches):
        if kind == "linear":
            x = cache
            W = model.params[f"lin{i}.W"]
            grads[f"lin{i}.W"] = x.T @ d
            grads[f"lin{i}.b"] = d.sum(axis=0)
            d = d @ W.T
        elif kind == "relu":
            d = d * (cache > 0)
        elif kind == "dbn":
            st = model.dbn_states[f"dbn{i}"]
            d, dw, db = dbn_backward(st, cache, d)
            grads[f"dbn{i}.w"] = dw
            grads[f"dbn{i}.b"] = db
    return grads, d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_onehot(y: np.ndarray, n: int, c: int):
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (n, c):
        raise DimensionError(f"labels shape {y.shape} != ({n}, {c})")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ArgumentError("labels must be one-hot rows")
    return y


def loss_and_grad(model: Model, x: np.ndarray, y_onehot: np.ndarray):
    """Mean softmax cross-entropy, analytic parameter grads and input grad."""
    logits, caches = forward_cached(model, x)
    B, c = logits.shape
    y = _check_onehot(y_onehot, B, c)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(y * logp).sum() / B
    p = np.exp(logp)
    dlogits = (p - y) / B
    grads, dx = backward(model, caches, dlogits)
    return loss, grads, dx


def sgd_step(model: Model, grads: dict, lr: float) -> Model:
    """p <- p - lr * g for every trainable parameter; running stats untouched."""
    if lr < 0:
        raise ArgumentError("learning rate must be non-negative")
    for key, g in grads.items():
        if key in model.params:
            model.params[key] -= lr * g
        else:
            name, _, attr = key.rpartition(".")
            if name not in model.dbn_states or attr not in ("w", "b"):
                raise ArgumentError(f"unknown gradient key {key!r}")
            st = model.dbn_states[name]
            if attr == "w":
                st.weight = st.weight - lr * g
            else:
                st.bias = st.bias - lr * g
    return model


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def predict(model: Model, x: np.ndarray) -> np.ndarray:
    """Eval-mode argmax on the current bn path; ties go to the lowest index."""
    return np.argmax(forward(model, x), axis=1)
