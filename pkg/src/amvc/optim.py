"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    exp_avg: np.ndarray,
    exp_avg_sq: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
    weight_decay: float,
) -> None:
    """One in-place AdamW update of a single parameter block.

    Weight decay is decoupled and applied multiplicatively before the
    bias-corrected adaptive step. ``step`` is the 1-based step count
    including this update.
    """
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if exp_avg.shape != param.shape or exp_avg_sq.shape != param.shape:
        raise ShapeError(f"moment shape does not match parameter {param.shape}")
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    exp_avg *= beta1
    exp_avg += (1.0 - beta1) * grad
    exp_avg_sq *= beta2
    exp_avg_sq += (1.0 - beta2) * (grad * grad)
    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step
    denom = np.sqrt(exp_avg_sq / bias2) + eps
    param -= lr * (exp_avg / bias1) / denom


class AdamW:
    """Optimizer state (first/second moments, step counter) for a parameter dict.

    Parameters with ``grad is None`` at step time are decayed but receive no
    adaptive update, mirroring a zero gradient.
    """

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
    ):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.exp_avg_sq = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adamw_update(
                p.data,
                grad,
                self.exp_avg[name],
                self.exp_avg_sq[name],
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
