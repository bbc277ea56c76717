"""Post-training robustness propagation.

Noise-BN statistics of adversarially trained source users are copied into
standard-training targets after a debiasing correction for the clean-stats
gap between domains, combined across sources by layer-averaged RBF weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dual_bn import DEFAULT_EPS, export_stats, import_noise_stats
from .errors import ArgumentError, DimensionError

DEFAULT_LAMBDA = 0.1
GAMMA_RBF_FACTOR = 100.0  # gamma_rbf defaults to 100 * max channel count


@dataclass
class PropagationConfig:
    debias_lambda: float = DEFAULT_LAMBDA
    gamma_rbf: float = None  # None -> 100 * max_l channels
    debias: bool = True
    reweight: bool = True

    def __post_init__(self):
        if not (0.0 <= self.debias_lambda <= 1.0):
            raise ArgumentError("lambda must be in [0, 1]")
        if self.gamma_rbf is not None and self.gamma_rbf <= 0:
            raise ArgumentError("gamma_rbf must be > 0")


@dataclass
class StatBundle:
    """Per-layer clean and noise running statistics of one model."""

    clean: list   # [(mean, var)] per layer
    noise: list   # [(mean, var)] per layer
    channels: list = field(default=None)
    owner: int = -1

    def __post_init__(self):
        if self.channels is None:
            self.channels = [len(m) for m, _ in self.clean]
        for (m, v) in list(self.clean) + list(self.noise):
            if np.any(np.asarray(v) < 0):
                raise ArgumentError("variances must be non-negative")

    @classmethod
    def from_model(cls, model, owner: int = -1) -> "StatBundle":
        stats = export_stats(model)
        return cls(clean=[c for c, _ in stats], noise=[n for _, n in stats],
                   owner=owner)

    def num_layers(self) -> int:
        return len(self.clean)


def debias_copy(src: StatBundle, tgt: StatBundle, lam: float,
                eps0: float = DEFAULT_EPS) -> list:
    """Estimate the target's noise stats from one source.

    Per layer: mu_hat = mu_s_r + lam * (mu_t - mu_s);
    var_hat = var_s_r * (var_t / (var_s + eps0)) ** lam. The division form
    keeps the estimated variance positive whenever the source's is.
    """
    if src.num_layers() != tgt.num_layers() or src.channels != tgt.channels:
        raise DimensionError("bundle layer structure mismatch")
    out = []
    for (mu_s, var_s), (mu_sr, var_sr), (mu_t, var_t) in zip(
            src.clean, src.noise, tgt.clean):
        mu_hat = mu_sr + lam * (mu_t - mu_s)
        var_hat = var_sr * np.power(var_t / (var_s + eps0), lam)
        out.append((mu_hat, var_hat))
    return out


def similarity_weights(sources: list, target: StatBundle,
                       gamma_rbf: float = None) -> np.ndarray:
    """Normalized layer-averaged RBF weights over sources.

    Per layer: d = ||mu_s - mu_t||^2 + ||sigma_s - sigma_t||^2 on clean
    means and clean standard deviations; raw weight is the layer average of
    exp(-gamma_rbf * d / channels), then normalized to sum 1.
    """
    if not sources:
        raise ArgumentError("need at least one source")
    if gamma_rbf is None:
        gamma_rbf = GAMMA_RBF_FACTOR * max(target.channels)
    raw = np.empty(len(sources))
    for i, src in enumerate(sources):
        acc = 0.0
        for (mu_s, var_s), (mu_t, var_t), p in zip(
                src.clean, target.clean, target.channels):
            d = (np.square(mu_s - mu_t).sum()
                 + np.square(np.sqrt(var_s) - np.sqrt(var_t)).sum())
            acc += np.exp(-gamma_rbf * d / p)
        raw[i] = acc / target.num_layers()
    total = raw.sum()
    if total <= 0:
        # all weights underflowed; fall back to uniform
        return np.full(len(sources), 1.0 / len(sources))
    return raw / total


def pairwise_distances(src: StatBundle, target: StatBundle) -> list:
    """Per-layer clean-statistics distances used by the RBF weighting."""
    out = []
    for (mu_s, var_s), (mu_t, var_t) in zip(src.clean, target.clean):
        out.append(float(np.square(mu_s - mu_t).sum()
                         + np.square(np.sqrt(var_s) - np.sqrt(var_t)).sum()))
    return out


def combine_estimates(estimates: list, alpha: np.ndarray) -> list:
    """alpha-weighted average of per-source (mean, var) layer estimates."""
    n_layers = len(estimates[0])
    out = []
    for l in range(n_layers):
        mu = sum(a * est[l][0] for a, est in zip(alpha, estimates))
        var = sum(a * est[l][1] for a, est in zip(alpha, estimates))
        out.append((mu, var))
    return out


def propagate_stats(target: StatBundle, sources: list,
                    cfg: PropagationConfig) -> tuple:
    """Synthesized noise stats for the target plus the alpha vector used."""
    if not sources:
        raise ArgumentError("no propagation sources")
    if cfg.debias:
        estimates = [debias_copy(s, target, cfg.debias_lambda) for s in sources]
    else:
        estimates = [list(s.noise) for s in sources]
    if cfg.reweight:
        alpha = similarity_weights(sources, target, cfg.gamma_rbf)
    else:
        alpha = np.full(len(sources), 1.0 / len(sources))
    return combine_estimates(estimates, alpha), alpha


def propagate(target, sources: list, cfg: PropagationConfig) -> tuple:
    """Install propagated noise stats into a target user's model.

    target / sources are federation UserState objects; sources must be AT
    users. Returns (target, alpha). Clean stats and trainable parameters
    are untouched.
    """
    at_sources = [u for u in sources if u.q > 0]
    if not at_sources:
        raise ArgumentError("propagation requires at least one AT source")
    tgt_bundle = StatBundle.from_model(target.model, owner=target.user_id)
    src_bundles = [StatBundle.from_model(u.model, owner=u.user_id)
                   for u in at_sources]
    stats, alpha = propagate_stats(tgt_bundle, src_bundles, cfg)
    import_noise_stats(target.model, stats)
    return target, alpha
