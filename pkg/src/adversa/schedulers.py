"""Noise schedules, closed-form DDPM noising, and deterministic DDIM sampling.

Step indices run 1..K; index 0 stands for the clean sample with
``alpha_bar[0] = 1``.  All functions accept numpy arrays or torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, ShapeError

KINDS = ("linear", "scaled-linear", "constant")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    K: int
    beta_start: float
    beta_end: float
    betas: np.ndarray       # index 0 unused (0.0)
    alphas: np.ndarray
    alpha_bar: np.ndarray   # alpha_bar[0] == 1

    def header(self) -> dict:
        return {"kind": self.kind, "K": self.K, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def sqrt_ab(self, k):
        return np.sqrt(self.alpha_bar[k])

    def sqrt_one_minus_ab(self, k):
        return np.sqrt(1.0 - self.alpha_bar[k])


def make_schedule(K: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Precompute beta / alpha / alpha-bar tables.

    ``constant`` uses ``beta_start`` for every step; ``scaled-linear`` is
    linear in sqrt(beta), as in latent diffusion models.
    """
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if kind == "linear":
        b = np.linspace(beta_start, beta_end, K, dtype=np.float64)
    elif kind == "scaled-linear":
        b = np.linspace(beta_start**0.5, beta_end**0.5, K, dtype=np.float64) ** 2
    elif kind == "constant":
        b = np.full(K, beta_start, dtype=np.float64)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if not (np.all(b > 0) and np.all(b < 1)):
        raise ConfigurationError("betas must lie in (0, 1)")
    betas = np.concatenate([[0.0], b])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return NoiseSchedule(kind, K, float(beta_start), float(beta_end), betas, alphas, alpha_bar)


def schedule_from_header(h: dict) -> NoiseSchedule:
    return make_schedule(int(h["K"]), h["kind"], float(h["beta_start"]), float(h["beta_end"]))


def _coef(table: np.ndarray, k, like):
    """Table lookup broadcast against ``like`` (scalar k, or one k per leading item)."""
    if np.ndim(k) == 0:
        return float(table[int(k)])
    try:
        import torch

        if isinstance(like, torch.Tensor):
            kk = k.detach().cpu().numpy() if isinstance(k, torch.Tensor) else np.asarray(k)
            v = torch.as_tensor(table[kk], dtype=like.dtype, device=like.device)
            return v.reshape(-1, *([1] * (like.ndim - 1)))
    except ImportError:  # pragma: no cover
        pass
    v = table[np.asarray(k)]
    return v.reshape(-1, *([1] * (np.ndim(like) - 1)))


def _check_k(k, K: int, lo: int = 1) -> None:
    kk = np.asarray(k.detach().cpu() if hasattr(k, "detach") else k)
    if np.any(kk < lo) or np.any(kk > K):
        raise DomainError(f"step {kk} outside [{lo}, {K}]")


def add_noise(z0, k, e, sched: NoiseSchedule):
    """``z_k = sqrt(ab_k) z0 + sqrt(1 - ab_k) e``."""
    _check_k(k, sched.K)
    if tuple(np.shape(z0)) != tuple(np.shape(e)):
        raise ShapeError(f"z0 {tuple(np.shape(z0))} and e {tuple(np.shape(e))} differ in shape")
    a = _coef(np.sqrt(sched.alpha_bar), k, z0)
    s = _coef(np.sqrt(1.0 - sched.alpha_bar), k, z0)
    return a * z0 + s * e


def noised_mask(m, k, e, sched: NoiseSchedule):
    """The binary latent mask pushed through the same closed form as the sample."""
    if tuple(np.shape(m)) != tuple(np.shape(e)):
        raise ShapeError(f"mask {tuple(np.shape(m))} and noise {tuple(np.shape(e))} differ in shape")
    return add_noise(m, k, e, sched)


def ddim_step(z_k, k: int, k_prev: int, e_hat, sched: NoiseSchedule):
    """One deterministic (eta = 0) DDIM update from step ``k`` to ``k_prev``."""
    if not (sched.K >= k > k_prev >= 0):
        raise DomainError(f"need K >= k > k_prev >= 0, got k={k}, k_prev={k_prev}")
    ab, ab_prev = float(sched.alpha_bar[k]), float(sched.alpha_bar[k_prev])
    z0_hat = (z_k - (1.0 - ab) ** 0.5 * e_hat) / ab**0.5
    return ab_prev**0.5 * z0_hat + (1.0 - ab_prev) ** 0.5 * e_hat


def ddim_timesteps(k_start: int, n_steps: int) -> list[int]:
    """Descending, de-duplicated steps from ``k_start`` towards 1."""
    if n_steps <= 0 or k_start <= 0:
        return []
    ks = np.round(np.linspace(k_start, 1, min(n_steps, k_start))).astype(int)
    return sorted(set(int(k) for k in ks), reverse=True)


def ddim_sample(z_K, denoiser: Callable, steps: Sequence[int], sched: NoiseSchedule):
    """Run DDIM along ``steps`` (strictly decreasing, each in [1, K]) down to step 0.

    ``denoiser(z, k)`` returns the predicted noise.
    """
    steps = [int(k) for k in steps]
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise DomainError(f"step sequence {steps} is not strictly decreasing")
    if steps and (steps[0] > sched.K or steps[-1] < 1):
        raise DomainError(f"steps must lie in [1, {sched.K}]")
    z = z_K
    for k, k_prev in zip(steps, steps[1:] + [0]):
        z = ddim_step(z, k, k_prev, denoiser(z, k), sched)
    return z
