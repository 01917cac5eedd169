"""Training objectives: MSE, fixed Pseudo-Huber, and the annealed variant."""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import ShapeError, Tensor

OBJECTIVES = ("mse", "ph", "aph")
FIXED_PH_C = 1.0


@dataclass
class AnnealState:
    """Training-progress fraction and the interpolation endpoints for c."""

    alpha: float = 0.0
    c_max: float = 1.0
    c_min: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha {self.alpha} outside [0, 1]")
        if not self.c_max >= self.c_min > 0.0:
            raise ValueError(f"need c_max >= c_min > 0, got {self.c_max}, {self.c_min}")


def anneal_c(state: AnnealState) -> float:
    """Linear interpolation from c_max (start of training) to c_min (end)."""
    return (1.0 - state.alpha) * state.c_max + state.alpha * state.c_min


def _check_shapes(x: Tensor, x_hat: Tensor):
    if x.shape != x_hat.shape:
        raise ShapeError(f"loss shape mismatch: {x.shape} vs {x_hat.shape}")


def mse_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    _check_shapes(x, x_hat)
    diff = x - x_hat
    return (diff * diff).mean()


def pseudo_huber_loss(x: Tensor, x_hat: Tensor, c: float,
                      norm: str = "elementwise") -> Tensor:
    """sqrt(r^2 + c^2) - c, applied per element and averaged.

    The `global` variant takes a single norm over the whole residual
    instead; the elementwise form is the default because it lets small
    velocity errors register next to large onset errors.
    """
    if c <= 0:
        raise ValueError(f"pseudo-huber constant must be positive, got {c}")
    _check_shapes(x, x_hat)
    diff = x - x_hat
    if norm == "elementwise":
        return ((diff * diff + c * c).sqrt() - c).mean()
    if norm == "global":
        return ((diff * diff).sum() + c * c).sqrt() - c
    raise ValueError(f"unknown norm {norm!r}")


def aph_loss(x: Tensor, x_hat: Tensor, c: float, norm: str = "elementwise") -> Tensor:
    return pseudo_huber_loss(x, x_hat, c, norm=norm)


def training_loss(x: Tensor, x_hat: Tensor, objective: str, state: AnnealState,
                  norm: str = "elementwise") -> Tensor:
    """Dispatch on the ablation switch: mse | ph (fixed c) | aph (annealed c)."""
    if objective == "mse":
        return mse_loss(x, x_hat)
    if objective == "ph":
        return pseudo_huber_loss(x, x_hat, FIXED_PH_C, norm=norm)
    if objective == "aph":
        return pseudo_huber_loss(x, x_hat, anneal_c(state), norm=norm)
    raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
