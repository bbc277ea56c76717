"""L-infinity PGD attack for adversarial training and robust evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ContractError
from .nn import Model, loss_and_grad, one_hot

# Madry-style defaults: eps 8/255, 7 steps of 2/255.
DEFAULT_EPSILON = 8.0 / 255.0
DEFAULT_STEPS = 7
DEFAULT_STEP_SIZE = 2.0 / 255.0


@dataclass
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    steps: int = DEFAULT_STEPS
    step_size: float = DEFAULT_STEP_SIZE
    random_start: bool = False
    box: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ArgumentError("epsilon must be >= 0")
        if self.steps < 0:
            raise ArgumentError("steps must be >= 0")
        if self.steps > 0 and self.step_size <= 0:
            raise ArgumentError("step_size must be > 0 when steps > 0")
        if self.box[0] >= self.box[1]:
            raise ArgumentError("box lo must be < hi")


def pgd_attack(model: Model, x: np.ndarray, y: np.ndarray,
               cfg: AttackConfig, rng: np.random.Generator = None) -> np.ndarray:
    """Signed-gradient ascent on the loss, projected to the L-inf ball and box.

    The model must be in eval mode (running stats are never touched); the
    caller fixes bn_mode beforehand. y holds integer class labels.
    """
    if model.training:
        raise ContractError("pgd_attack requires an eval-mode model")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = cfg.box
    y_oh = one_hot(np.asarray(y), _num_classes(model))
    if cfg.random_start:
        if rng is None:
            raise ArgumentError("random_start requires an rng")
        x_adv = x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape)
        x_adv = np.clip(x_adv, lo, hi)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        _, _, gx = loss_and_grad(model, x_adv, y_oh)
        x_adv = x_adv + cfg.step_size * np.sign(gx)
        x_adv = np.clip(x_adv, x - cfg.epsilon, x + cfg.epsilon)
        x_adv = np.clip(x_adv, lo, hi)
    return x_adv


def _num_classes(model: Model) -> int:
    for spec in reversed(model.layers):
        if spec[0] == "linear":
            return spec[2]
    raise ArgumentError("model has no linear layer")
