"""Input-space attacks for adversarial training.

The training attack is a single-step fast gradient method with an L2
budget: the input gradient is normalized per image and scaled to epsilon
(default 2.0).  A multi-step projected-gradient L-inf attack is kept as
the baseline it replaced.  Both leave the input batch untouched and keep
pixels inside [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .nn import LossConfig, Model, input_gradient

__all__ = ["AttackConfig", "fgsm_l2", "pgd_linf"]


@dataclass(frozen=True)
class AttackConfig:
    """Which attack to run during training and its budget."""

    kind: str = "fgsm_l2"  # or "pgd_linf"
    epsilon: float = 2.0
    pgd_steps: int = 50
    pgd_step_size: float | None = None  # None -> 2.5 * epsilon / pgd_steps
    sign_first: bool = False  # literal sign-then-rescale FGSM variant

    def __post_init__(self):
        if self.kind not in ("fgsm_l2", "pgd_linf"):
            raise ValidationError(f"unknown attack kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.pgd_steps < 1:
            raise ValidationError("pgd_steps must be >= 1")

    def step_size(self) -> float:
        if self.pgd_step_size is not None:
            return self.pgd_step_size
        return 2.5 * self.epsilon / self.pgd_steps


def fgsm_l2(
    model: Model,
    batch: np.ndarray,
    targets: np.ndarray,
    epsilon: float = 2.0,
    loss_config: LossConfig = LossConfig(),
    sign_first: bool = False,
) -> np.ndarray:
    """One-gradient-step attack with an exact per-image L2 budget.

    ``x' = clip(x + eps * g / ||g||_2, 0, 1)``; images with zero gradient
    pass through unchanged.  ``sign_first`` applies sign() before the
    normalization, the literal signed-gradient reading, kept for
    comparison.
    """
    g = input_gradient(model, batch, targets, loss_config, train_mode=False)
    if sign_first:
        g = np.sign(g)
    flat = g.reshape(len(g), -1)
    norms = np.linalg.norm(flat, axis=1)
    out = np.array(batch, dtype=g.dtype, copy=True)
    nonzero = norms > 0
    if np.any(nonzero):
        scale = np.zeros_like(norms)
        scale[nonzero] = epsilon / norms[nonzero]
        delta = g * scale.reshape((-1,) + (1,) * (g.ndim - 1))
        out[nonzero] = np.clip(out[nonzero] + delta[nonzero], 0.0, 1.0)
    return out


def pgd_linf(
    model: Model,
    batch: np.ndarray,
    targets: np.ndarray,
    epsilon: float,
    steps: int = 50,
    step_size: float | None = None,
    loss_config: LossConfig = LossConfig(),
    rng: np.random.Generator | None = None,
    random_start: bool = True,
) -> np.ndarray:
    """Projected gradient ascent inside the L-inf epsilon ball.

    Starts from a uniform random point in the ball (unless disabled) and
    iterates signed-gradient steps, projecting back onto the ball and the
    [0, 1] pixel range after every step.
    """
    if step_size is None:
        step_size = 2.5 * epsilon / steps
    x0 = np.array(batch, copy=True)
    if random_start:
        if rng is None:
            raise ValidationError("pgd with a random start needs an rng")
        x = np.clip(x0 + rng.uniform(-epsilon, epsilon, size=x0.shape), 0.0, 1.0)
    else:
        x = x0.copy()
    for _ in range(steps):
        g = input_gradient(model, x, targets, loss_config, train_mode=False)
        x = x + step_size * np.sign(g)
        x = np.clip(x, x0 - epsilon, x0 + epsilon)
        x = np.clip(x, 0.0, 1.0)
    return x.astype(batch.dtype, copy=False)
