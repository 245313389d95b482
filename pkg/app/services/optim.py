from typing import Dict, Literal

import numpy as np

from app.core.errors import NumericError
from app.services.autodiff import Tensor


def learning_rate_at(base_lr: float, step: int, schedule: Literal["constant", "inverse"]) -> float:
    """alpha_s for a 1-based step. `inverse` (alpha/s) satisfies sum alpha_s = inf and
    sum alpha_s^2 < inf."""
    if schedule == "inverse":
        return base_lr / max(step, 1)
    return base_lr


class Adam:
    """Bias-corrected adaptive-moment optimizer over a named parameter dict."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        schedule: Literal["constant", "inverse"] = "constant",
    ):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.schedule = schedule
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> float:
        """Applies one update from the accumulated `.grad`s and returns the step size used."""
        self.t += 1
        lr = learning_rate_at(self.lr, self.t, self.schedule)
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {name} became non-finite at optimizer step {self.t}")
        return lr
