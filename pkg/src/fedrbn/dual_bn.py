"""Dual batch normalization: two statistic paths (clean / noise) sharing one affine.

A DBN layer keeps separate running statistics for clean and perturbed
inputs and switches between them with a model-wide flag h (0 = clean,
1 = noise). Scale and shift are shared by both paths.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

_BUNDLE_MAGIC = b"FPSB"
_BUNDLE_VERSION = 1


@dataclass
class DBNState:
    """Per-layer dual-BN state: clean stats, noise stats, shared affine."""

    channels: int
    clean_mean: np.ndarray = field(default=None)
    clean_var: np.ndarray = field(default=None)
    noise_mean: np.ndarray = field(default=None)
    noise_var: np.ndarray = field(default=None)
    weight: np.ndarray = field(default=None)
    bias: np.ndarray = field(default=None)
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        p = self.channels
        if p <= 0:
            raise ArgumentError("channels must be positive")
        if self.clean_mean is None:
            self.clean_mean = np.zeros(p)
        if self.clean_var is None:
            self.clean_var = np.ones(p)
        if self.noise_mean is None:
            self.noise_mean = np.zeros(p)
        if self.noise_var is None:
            self.noise_var = np.ones(p)
        if self.weight is None:
            self.weight = np.ones(p)
        if self.bias is None:
            self.bias = np.zeros(p)
        for v in (self.clean_mean, self.clean_var, self.noise_mean,
                  self.noise_var, self.weight, self.bias):
            if v.shape != (p,):
                raise DimensionError("statistic vector length != channels")
        if np.any(self.clean_var < 0) or np.any(self.noise_var < 0):
            raise ArgumentError("variances must be non-negative")
        if self.eps <= 0:
            raise ArgumentError("eps must be positive")

    def copy(self) -> "DBNState":
        return DBNState(
            channels=self.channels,
            clean_mean=self.clean_mean.copy(),
            clean_var=self.clean_var.copy(),
            noise_mean=self.noise_mean.copy(),
            noise_var=self.noise_var.copy(),
            weight=self.weight.copy(),
            bias=self.bias.copy(),
            eps=self.eps,
            momentum=self.momentum,
        )

    def path_stats(self, h: int):
        if h == 0:
            return self.clean_mean, self.clean_var
        return self.noise_mean, self.noise_var


def dbn_forward(state: DBNState, x: np.ndarray, h: int, training: bool):
    """Normalize x along the path selected by h; returns (y, state).

    Training mode normalizes by the current batch statistics of path h and
    folds them into that path's running stats (EMA, biased batch variance).
    Eval mode normalizes by the running stats. The inactive path is never
    read or written.
    """
    y, state, _ = dbn_forward_cached(state, x, h, training)
    return y, state


def dbn_forward_cached(state: DBNState, x: np.ndarray, h: int, training: bool):
    """dbn_forward plus the cache needed by the backward pass."""
    if h not in (0, 1):
        raise ArgumentError("h must be 0 or 1")
    if x.ndim != 2 or x.shape[1] != state.channels:
        raise DimensionError(
            f"expected (B, {state.channels}) input, got {x.shape}")
    B = x.shape[0]
    if training:
        if B < 2:
            raise ArgumentError("training batch must have >= 2 samples")
        mu = x.mean(axis=0)
        var = x.var(axis=0)  # biased
        m = state.momentum
        if h == 0:
            state.clean_mean = (1 - m) * state.clean_mean + m * mu
            state.clean_var = (1 - m) * state.clean_var + m * var
        else:
            state.noise_mean = (1 - m) * state.noise_mean + m * mu
            state.noise_var = (1 - m) * state.noise_var + m * var
    else:
        mu, var = state.path_stats(h)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mu) * inv
    y = state.weight * xhat + state.bias
    cache = {"xhat": xhat, "inv": inv, "training": training, "B": B}
    return y, state, cache


def dbn_backward(state: DBNState, cache: dict, dy: np.ndarray):
    """Gradients for a dbn_forward_cached call.

    Returns (dx, dweight, dbias). Training mode backpropagates through the
    batch mean and variance; eval mode treats the normalization as affine.
    """
    xhat, inv = cache["xhat"], cache["inv"]
    dweight = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * state.weight
    if cache["training"]:
        B = cache["B"]
        dx = (inv / B) * (
            B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv
    return dx, dweight, dbias


def export_stats(model) -> list:
    """Deep copy of every DBN layer's running statistics, in layer order.

    Each entry is ((clean_mean, clean_var), (noise_mean, noise_var)).
    """
    if not model.dbn_states:
        raise ArgumentError("model has no dbn layers")
    out = []
    for st in model.dbn_states.values():
        out.append(((st.clean_mean.copy(), st.clean_var.copy()),
                    (st.noise_mean.copy(), st.noise_var.copy())))
    return out


def import_noise_stats(model, stats: list):
    """Overwrite the noise-path running stats; clean stats and parameters untouched."""
    states = list(model.dbn_states.values())
    if len(stats) != len(states):
        raise DimensionError("layer count mismatch")
    for st, (mu_r, var_r) in zip(states, stats):
        mu_r = np.asarray(mu_r, dtype=np.float64)
        var_r = np.asarray(var_r, dtype=np.float64)
        if mu_r.shape != (st.channels,) or var_r.shape != (st.channels,):
            raise DimensionError("channel width mismatch")
        if np.any(var_r < 0):
            raise ArgumentError("noise variance must be non-negative")
        st.noise_mean = mu_r.copy()
        st.noise_var = var_r.copy()
    return model


def serialize_stats(stats: list) -> bytes:
    """Pack per-layer (clean, noise) statistic pairs into the bundle format.

    Layout (little-endian): magic, version u16, layer count u32, per-layer
    channel counts u32, then for each layer the four float64 vectors
    clean mean, clean var, noise mean, noise var.
    """
    parts = [_BUNDLE_MAGIC, struct.pack("<H", _BUNDLE_VERSION),
             struct.pack("<I", len(stats))]
    for (cm, cv), (nm, nv) in stats:
        parts.append(struct.pack("<I", len(cm)))
    for (cm, cv), (nm, nv) in stats:
        for vec in (cm, cv, nm, nv):
            parts.append(np.asarray(vec, dtype="<f8").tobytes())
    return b"".join(parts)


def deserialize_stats(blob: bytes) -> list:
    """Inverse of serialize_stats; bit-exact round trip."""
    if blob[:4] != _BUNDLE_MAGIC:
        raise ArgumentError("bad stats bundle magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != _BUNDLE_VERSION:
        raise ArgumentError(f"unsupported bundle version {version}")
    (n_layers,) = struct.unpack_from("<I", blob, 6)
    off = 10
    channels = []
    for _ in range(n_layers):
        (p,) = struct.unpack_from("<I", blob, off)
        channels.append(p)
        off += 4
    stats = []
    for p in channels:
        vecs = []
        for _ in range(4):
            vecs.append(np.frombuffer(blob, dtype="<f8", count=p, offset=off).copy())
            off += 8 * p
        stats.append(((vecs[0], vecs[1]), (vecs[2], vecs[3])))
    return stats
