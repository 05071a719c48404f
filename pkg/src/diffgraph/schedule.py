"""Noise schedules and the closed-form forward/reverse diffusion algebra.

All schedule arithmetic is done in 64-bit regardless of model precision: the
cumulative product alpha_bar underflows badly in 32-bit accumulation.  The
boundary convention alpha_bar(0) = 1 makes the t=1 formulas total and lets the
final reverse step land exactly on the model's clean-data prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances beta_t with alpha_t = 1 - beta_t and the cumulative
    signal-retention factors alpha_bar_t, t = 1..T (arrays are 0-indexed)."""

    betas: np.ndarray
    kind: str = "linear"
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "alphas", 1.0 - b)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @property
    def T(self) -> int:
        return self.betas.size

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar_t with the boundary convention alpha_bar_0 = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step index t={t} outside [1, {self.T}]")

    def to_config(self) -> dict:
        """Serializable form; arrays are recomputed on load, which is
        bit-identical under the 64-bit contract."""
        return {"T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end, "kind": self.kind}

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        if cfg.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {cfg.get('kind')!r}")
        return linear_schedule(int(cfg["T"]), float(cfg["beta_start"]), float(cfg["beta_end"]))


def linear_schedule(T: int = DEFAULT_T,
                    beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Betas linearly interpolated inclusive of both endpoints."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, kind="linear", beta_start=beta_start, beta_end=beta_end)


def _check_shapes(a, b, what: str) -> None:
    sa = np.shape(a)
    sb = np.shape(b)
    if sa != sb:
        raise ValueError(f"{what}: shape mismatch {sa} vs {sb}")


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Closed-form forward marginal: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    _check_shapes(x0, eps, "q_sample")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def x0_from_eps(x_t, eps, t: int, sched: NoiseSchedule):
    """Invert the forward marginal for the clean signal given the noise."""
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def eps_from_x0(x_t, x0, t: int, sched: NoiseSchedule):
    """Invert the forward marginal for the noise given the clean signal."""
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def ddpm_sigma(t: int, sched: NoiseSchedule) -> float:
    """Reverse-step noise scale that turns the generalized step into ancestral
    DDPM sampling: sigma_t^2 = (1 - ab_{t-1}) (1 - ab_t / ab_{t-1}) / (1 - ab_t).

    With ab_0 = 1 this gives sigma_1 = 0.
    """
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    num = (1.0 - ab_prev) * (1.0 - ab_t / ab_prev)
    return math.sqrt(max(num / (1.0 - ab_t), 0.0))


def ddim_step(x_t, x0_pred, t: int, t_prev: int, sigma: float, eps_draw, sched: NoiseSchedule):
    """One generalized reverse step:

        x_{t_prev} = sqrt(ab_{t_prev}) x0_pred
                     + sqrt(1 - ab_{t_prev} - sigma^2) eps_hat
                     + sigma eps_draw

    where eps_hat is the noise implied by (x_t, x0_pred).  sigma = 0 gives the
    deterministic DDIM step; sigma = ddpm_sigma(t) with t_prev = t - 1 gives
    the DDPM posterior.  t_prev = 0 lands on x0_pred exactly.
    """
    if not t_prev < t:
        raise ValueError(f"t_prev={t_prev} must be < t={t}")
    ab_prev = sched.alpha_bar(t_prev)
    if sigma * sigma > 1.0 - ab_prev + 1e-15:
        raise ValueError(f"sigma^2={sigma * sigma} exceeds 1 - alpha_bar({t_prev})={1.0 - ab_prev}")
    eps_hat = eps_from_x0(x_t, x0_pred, t, sched)
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_pred + dir_coef * eps_hat
    if sigma > 0.0:
        _check_shapes(x_t, eps_draw, "ddim_step")
        out = out + sigma * eps_draw
    return out


def ddim_subsequence(T: int, steps: int) -> list[int]:
    """Strictly decreasing, uniform-stride step indices starting at T.

    The sampler takes one extra hop from the last listed index to t = 0
    (alpha_bar_0 = 1), which lands on the model's clean prediction.
    """
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, T={T}], got {steps}")
    if steps == 1:
        return [T]
    stride = max(1, (T - 1) // (steps - 1))
    return [T - i * stride for i in range(steps)]
