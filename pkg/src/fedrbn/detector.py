"""RBF-kernel SVM noise detector on logits, trained by SMO.

The detector classifies logit vectors as clean (0) or adversarial (1) and
drives the two-pass inference pipeline: logits are first computed on the
clean BN path; samples flagged adversarial are re-run on the noise path.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .adversary import AttackConfig, pgd_attack
from .errors import ArgumentError, DegenerateFitError
from .nn import Model, forward

logger = logging.getLogger(__name__)

DEFAULT_C = 10.0

_MODEL_MAGIC = b"FPDM"
_MODEL_VERSION = 1


@dataclass
class DetectorDataset:
    features: np.ndarray  # (n, c) logit vectors
    labels: np.ndarray    # (n,) in {0 clean, 1 adversarial}


@dataclass
class DetectorModel:
    support_vectors: np.ndarray  # (n_sv, c)
    dual_coefs: np.ndarray       # alpha_j * y_j, y in {-1, +1}
    bias: float
    gamma: float
    C: float

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        K = rbf_kernel(X, self.support_vectors, self.gamma)
        return K @ self.dual_coefs + self.bias

    def predict(self, X: np.ndarray) -> np.ndarray:
        """1 = adversarial, 0 = clean."""
        return (self.decision_function(X) > 0).astype(np.int64)


@dataclass
class ConstantDetector:
    """Fallback when fitting is degenerate: always predicts one label."""

    label: int = 0

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        return np.full(X.shape[0], 1.0 if self.label else -1.0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        return np.full(X.shape[0], self.label, dtype=np.int64)


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    d2 = (np.square(A).sum(axis=1)[:, None]
          + np.square(B).sum(axis=1)[None, :]
          - 2.0 * A @ B.T)
    return np.exp(-gamma * np.maximum(d2, 0.0))


def build_detector_dataset(model: Model, val_x: np.ndarray, val_y: np.ndarray,
                           atk: AttackConfig,
                           rng: np.random.Generator = None) -> DetectorDataset:
    """Clean-path logits of each validation sample and its PGD perturbation.

    Rows interleave (f(x), 0) and (f(A(x)), 1), so the dataset is balanced
    with 2 * |val| rows.
    """
    if len(val_x) == 0:
        raise ArgumentError("empty validation set")
    model.set_mode(h=0, training=False)
    clean_logits = forward(model, val_x)
    x_adv = pgd_attack(model, val_x, val_y, atk, rng)
    adv_logits = forward(model, x_adv)
    n, c = clean_logits.shape
    feats = np.empty((2 * n, c))
    feats[0::2] = clean_logits
    feats[1::2] = adv_logits
    labels = np.tile([0, 1], n)
    return DetectorDataset(features=feats, labels=labels)


def dual_objective(K: np.ndarray, y: np.ndarray, alpha: np.ndarray) -> float:
    """Soft-margin dual objective W(alpha) = sum a - 1/2 a' (yy'K) a."""
    ay = alpha * y
    return alpha.sum() - 0.5 * ay @ K @ ay


def fit_svm(data: DetectorDataset, C: float = DEFAULT_C, gamma: float = None,
            tol: float = 1e-3, max_iter: int = 20000) -> DetectorModel:
    """Solve the soft-margin RBF dual by sequential minimal optimization.

    Working pairs are the maximal violating pair of the KKT conditions;
    ties break toward the lowest index, so the solve is deterministic for
    a fixed row order. Terminates when the worst violation is below tol.
    gamma defaults to 1 / n_features.
    """
    X = np.asarray(data.features, dtype=np.float64)
    labels = np.asarray(data.labels)
    if C <= 0:
        raise ArgumentError("C must be > 0")
    if np.unique(labels).size < 2:
        raise DegenerateFitError("detector data contains a single class")
    if gamma is None:
        gamma = 1.0 / X.shape[1]
    if gamma <= 0:
        raise ArgumentError("gamma must be > 0")
    y = np.where(labels == 1, 1.0, -1.0)
    n = X.shape[0]
    K = rbf_kernel(X, X, gamma)

    alpha = np.zeros(n)
    # F = K (alpha*y) - y; the pair (i, j) maximizing F_j - F_i over
    # feasible ascent directions is the maximal violating pair
    F = -y.copy()
    up = lambda: ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = lambda: ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))

    for _ in range(max_iter):
        mask_up, mask_low = up(), low()
        if not mask_up.any() or not mask_low.any():
            break
        Fi = np.where(mask_up, F, np.inf)
        Fj = np.where(mask_low, F, -np.inf)
        i = int(np.argmin(Fi))
        j = int(np.argmax(Fj))
        if F[j] - F[i] <= tol:
            break
        ai_old, aj_old = alpha[i], alpha[j]
        if not _take_step(K, y, alpha, i, j, F[i], F[j], C):
            break
        F += (K[:, i] * (y[i] * (alpha[i] - ai_old))
              + K[:, j] * (y[j] * (alpha[j] - aj_old)))
    b = _solve_bias(F, y, alpha, C)

    sv = alpha > 1e-8
    if not np.any(sv):
        logger.warning("SMO produced no support vectors; constant clean detector")
        return ConstantDetector(label=0)
    return DetectorModel(
        support_vectors=X[sv].copy(),
        dual_coefs=(alpha * y)[sv],
        bias=b,
        gamma=gamma,
        C=C,
    )


def _take_step(K, y, alpha, i, j, Fi, Fj, C):
    """Two-variable subproblem update, clipped to the box and the equality
    constraint; the caller refreshes its F cache from the alpha deltas."""
    ai_old, aj_old = alpha[i], alpha[j]
    if y[i] != y[j]:
        L = max(0.0, aj_old - ai_old)
        H = min(C, C + aj_old - ai_old)
    else:
        L = max(0.0, ai_old + aj_old - C)
        H = min(C, ai_old + aj_old)
    eta = K[i, i] + K[j, j] - 2.0 * K[i, j]
    if eta <= 1e-15:
        eta = 1e-15
    aj = aj_old + y[j] * (Fi - Fj) / eta
    aj = min(H, max(L, aj))
    if abs(aj - aj_old) < 1e-14:
        return False
    ai = ai_old + y[i] * y[j] * (aj_old - aj)
    # snap to the box so bound masks stay exact
    for k, v in ((i, ai), (j, aj)):
        if v < 1e-12:
            v = 0.0
        elif v > C - 1e-12:
            v = C
        alpha[k] = v
    return True


def _solve_bias(F, y, alpha, C):
    """Bias from the free support vectors, else the KKT interval midpoint."""
    free = (alpha > 1e-8) & (alpha < C - 1e-8)
    if free.any():
        return float(-F[free].mean())
    mask_up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    mask_low = ((y < 0) & (alpha < C)) | ((y > 0) & (alpha > 0))
    lo = F[mask_up].min() if mask_up.any() else 0.0
    hi = F[mask_low].max() if mask_low.any() else 0.0
    return float(-(lo + hi) / 2.0)


def fit_detector(data: DetectorDataset, C: float = DEFAULT_C,
                 gamma: float = None):
    """fit_svm with the degenerate single-class case mapped to a constant
    clean detector instead of an error."""
    try:
        return fit_svm(data, C=C, gamma=gamma)
    except DegenerateFitError:
        logger.warning("single-class detector data; falling back to constant clean")
        return ConstantDetector(label=0)


def robust_predict(model: Model, det, x: np.ndarray):
    """Two-pass inference: clean-path logits feed the detector; flagged
    samples are re-run on the noise path. Returns (classes, h_hat)."""
    model.set_mode(h=0, training=False)
    logits = forward(model, np.atleast_2d(x))
    h_hat = det.predict(logits)
    flagged = np.nonzero(h_hat == 1)[0]
    final = logits.copy()
    if flagged.size:
        model.set_mode(h=1)
        final[flagged] = forward(model, np.atleast_2d(x)[flagged])
        model.set_mode(h=0)
    return np.argmax(final, axis=1), h_hat


def serialize_detector(det: DetectorModel) -> bytes:
    """Versioned little-endian record of the fitted detector."""
    if isinstance(det, ConstantDetector):
        return (_MODEL_MAGIC + struct.pack("<HB", _MODEL_VERSION, 0)
                + struct.pack("<B", det.label))
    n_sv, dim = det.support_vectors.shape
    head = (_MODEL_MAGIC + struct.pack("<HB", _MODEL_VERSION, 1)
            + struct.pack("<IIddd", n_sv, dim, det.gamma, det.C, det.bias))
    return (head + det.dual_coefs.astype("<f8").tobytes()
            + det.support_vectors.astype("<f8").tobytes())


def deserialize_detector(blob: bytes):
    if blob[:4] != _MODEL_MAGIC:
        raise ArgumentError("bad detector magic")
    version, kind = struct.unpack_from("<HB", blob, 4)
    if version != _MODEL_VERSION:
        raise ArgumentError(f"unsupported detector version {version}")
    if kind == 0:
        (label,) = struct.unpack_from("<B", blob, 7)
        return ConstantDetector(label=label)
    n_sv, dim, gamma, C, bias = struct.unpack_from("<IIddd", blob, 7)
    off = 7 + struct.calcsize("<IIddd")
    coefs = np.frombuffer(blob, dtype="<f8", count=n_sv, offset=off).copy()
    off += 8 * n_sv
    svs = np.frombuffer(blob, dtype="<f8", count=n_sv * dim, offset=off)
    return DetectorModel(support_vectors=svs.reshape(n_sv, dim).copy(),
                         dual_coefs=coefs, bias=bias, gamma=gamma, C=C)
