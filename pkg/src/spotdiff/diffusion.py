"""Masked diffusion over expression vectors: corruption, loss, sampling.

The forward corruption draws a product-Bernoulli(abar_t) visibility mask and
zeroes masked coordinates. Training supervises only masked coordinates:

    loss = w_t * || (1 - m_t) * (x_hat0 - x0) ||_2^2,   w_t = revive_t

Sampling starts fully masked (x_T = 0, m_T = 0) and walks the reverse chain:
sample m_{t-1}, predict x_hat0 = f(x_t, t, v), calibrate
x_tilde0 = m_t * x_t + (1 - m_t) * x_hat0, then x_{t-1} = m_{t-1} * x_tilde0.
Revealed coordinates are never overwritten. A K-step inference budget runs
the same loop on the subsampled schedule, feeding the model the original
timestep at each visited grid point.

Variants:
  - mask_diff           mask token at masked coordinates (default)
  - mask_diff_randmask  masked coordinates carry standard-normal fills that
                        are value-embedded (no mask token)
  - gauss_diff          DDPM-style Gaussian corruption of all coordinates
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .maskproc import MaskedExpression
from .schedule import VisibilitySchedule, subsample_indices, subsample_schedule

DIFFUSION_VARIANTS = ("mask_diff", "mask_diff_randmask", "gauss_diff")


class DivergenceError(RuntimeError):
    """Raised when the model emits non-finite values."""


@dataclass(frozen=True)
class GaussianSchedule:
    """DDPM beta schedule with cumulative visibility products."""

    betas: np.ndarray
    alpha_bar: np.ndarray  # cumulative products, length = steps

    @staticmethod
    def linear(steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "GaussianSchedule":
        betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
        if not np.all((alpha_bar > 0.0) & (alpha_bar < 1.0)):
            raise ValueError("invalid beta schedule: cumulative products must lie in (0, 1)")
        return GaussianSchedule(betas=betas, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: VisibilitySchedule
    variant: str = "mask_diff"
    gauss: GaussianSchedule | None = None
    gauss_infer_steps: int = 50

    def __post_init__(self) -> None:
        if self.variant not in DIFFUSION_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "gauss_diff" and self.gauss is None:
            object.__setattr__(self, "gauss", GaussianSchedule.linear())


def corrupt(x0: np.ndarray, t: int, cfg: DiffusionConfig, rng: np.random.Generator) -> MaskedExpression:
    """Single-sample forward corruption at timestep t (mask variants)."""
    if not (1 <= t <= cfg.schedule.T):
        raise ValueError(f"t must be in 1..T, got {t}")
    x0 = np.asarray(x0, dtype=np.float64)
    abar = cfg.schedule.alpha_bar[t]
    m = (rng.random(x0.shape) < abar).astype(np.int8)
    x = x0 * m
    if cfg.variant == "mask_diff_randmask":
        fill = rng.standard_normal(x0.shape)
        x = x + (1 - m) * fill
    return MaskedExpression(x=x, m=m)


def corrupt_batch(
    X0: np.ndarray, ts: np.ndarray, cfg: DiffusionConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized corruption: (B, G) data and (B,) timesteps -> (X_t, M_t)."""
    abar = cfg.schedule.alpha_bar[ts][:, None]
    M = (rng.random(X0.shape) < abar).astype(np.int8)
    X = X0 * M
    if cfg.variant == "mask_diff_randmask":
        X = X + (1 - M) * rng.standard_normal(X0.shape)
    return X, M


def training_loss(x0: np.ndarray, x_hat0: np.ndarray, m_t: np.ndarray, w_t: float) -> float:
    """Weighted squared error over masked coordinates of one sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    x_hat0 = np.asarray(x_hat0, dtype=np.float64)
    if x0.shape != x_hat0.shape or x0.shape != np.asarray(m_t).shape:
        raise ValueError("length mismatch")
    if not (w_t > 0.0):
        raise ValueError("w_t must be > 0")
    resid = (1 - np.asarray(m_t)) * (x_hat0 - x0)
    return float(w_t * np.sum(resid**2))


def training_loss_batch(
    x0: torch.Tensor, x_hat0: torch.Tensor, m_t: torch.Tensor, w_t: torch.Tensor
) -> torch.Tensor:
    """Batch objective: mean over samples of the per-sample weighted sum."""
    per_sample = ((1.0 - m_t) * (x_hat0 - x0) ** 2).sum(dim=-1)
    return (w_t * per_sample).mean()


def calibrate(x_t, m_t, x_hat0):
    """Copy visible coordinates from x_t, fill masked ones from x_hat0.

    Works on numpy arrays and torch tensors alike.
    """
    if x_t.shape != m_t.shape or x_t.shape != x_hat0.shape:
        raise ValueError("length mismatch")
    return m_t * x_t + (1 - m_t) * x_hat0


def _predict(model, X: np.ndarray, M: np.ndarray, V: np.ndarray, t: int) -> np.ndarray:
    dtype = model.dtype
    xt = torch.from_numpy(np.ascontiguousarray(X)).to(dtype)
    mt = torch.from_numpy(np.ascontiguousarray(M)).to(dtype)
    vt = torch.from_numpy(np.ascontiguousarray(V)).to(dtype)
    tt = torch.full((X.shape[0],), float(t), dtype=dtype)
    with torch.no_grad():
        out = model.predict_x0(xt, mt, vt, tt)
    xhat = out.cpu().numpy().astype(np.float64)
    if not np.all(np.isfinite(xhat)):
        raise DivergenceError(f"non-finite model output at t={t}")
    return xhat


def sample_many(
    V: np.ndarray, model, cfg: DiffusionConfig, K: int, rng: np.random.Generator
) -> np.ndarray:
    """Reverse-process sampling for a batch of condition vectors (N, C) -> (N, G)."""
    if cfg.variant == "gauss_diff":
        return gauss_sample_many(V, model, cfg, rng)
    full_T = cfg.schedule.T
    sub = subsample_schedule(cfg.schedule, K)
    idx = subsample_indices(full_T, K)
    N = V.shape[0]
    G = model.backbone.cfg.G
    x = np.zeros((N, G), dtype=np.float64)
    m = np.zeros((N, G), dtype=np.int8)
    for j in range(sub.T, 0, -1):
        revived = rng.random((N, G)) < sub.revive_at(j)
        m_prev = np.maximum(m, revived.astype(np.int8))
        if cfg.variant == "mask_diff_randmask":
            x_in = x + (1 - m) * rng.standard_normal((N, G))
        else:
            x_in = x
        xhat = _predict(model, x_in, m, V, idx[j])
        x_tilde = calibrate(x, m, xhat)
        x = m_prev * x_tilde
        m = m_prev
    return x


def sample(v: np.ndarray, model, cfg: DiffusionConfig, K: int, rng: np.random.Generator) -> np.ndarray:
    """Sample one expression vector for a single condition vector."""
    return sample_many(np.asarray(v, dtype=np.float64)[None, :], model, cfg, K, rng)[0]


# --- Gaussian-diffusion variant family ------------------------------------


def gauss_corrupt(
    x0: np.ndarray, t: int, gsched: GaussianSchedule, rng: np.random.Generator
) -> np.ndarray:
    """q(x_t | x_0) = N(sqrt(abar_t) x0, (1 - abar_t) I); t in 1..steps."""
    if not (1 <= t <= len(gsched.alpha_bar)):
        raise ValueError(f"t must be in 1..{len(gsched.alpha_bar)}")
    ab = gsched.alpha_bar[t - 1]
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * rng.standard_normal(
        np.asarray(x0).shape
    )


def gauss_loss(x0: torch.Tensor, x_hat0: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all coordinates."""
    return ((x_hat0 - x0) ** 2).mean()


def gauss_inference_grid(steps: int, infer_steps: int) -> list[int]:
    """Descending timesteps for ancestral sampling with a reduced budget."""
    grid = np.unique(np.linspace(1, steps, infer_steps).round().astype(int))
    return list(grid[::-1])


def gauss_sample_many(
    V: np.ndarray, model, cfg: DiffusionConfig, rng: np.random.Generator
) -> np.ndarray:
    """Ancestral sampling through the x0-parameterized posterior mean."""
    gsched = cfg.gauss
    N = V.shape[0]
    G = model.backbone.cfg.G
    grid = gauss_inference_grid(len(gsched.alpha_bar), cfg.gauss_infer_steps)
    x = rng.standard_normal((N, G))
    ones = np.ones((N, G), dtype=np.int8)
    for i, t in enumerate(grid):
        xhat = _predict(model, x, ones, V, t)
        t_prev = grid[i + 1] if i + 1 < len(grid) else 0
        ab_t = gsched.alpha_bar[t - 1]
        ab_prev = gsched.alpha_bar[t_prev - 1] if t_prev >= 1 else 1.0
        alpha_eff = ab_t / ab_prev
        beta_eff = 1.0 - alpha_eff
        mean = (np.sqrt(ab_prev) * beta_eff * xhat + np.sqrt(alpha_eff) * (1.0 - ab_prev) * x) / (
            1.0 - ab_t
        )
        if t_prev >= 1:
            var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
            x = mean + np.sqrt(var) * rng.standard_normal((N, G))
        else:
            x = mean
    if model.normalization is not None:
        mu, sigma = model.normalization
        x = x * sigma[None, :] + mu[None, :]
    return x
