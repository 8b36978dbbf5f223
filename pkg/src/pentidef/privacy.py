"""Client-side Gaussian perturbation of model weights (distributed DP)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .neuralcore import ModelWeights

DEFAULT_SIGMA_BOUNDS = (0.0, 0.2)


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float
    sensitivity: float = 1.0
    clip_norm: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.sensitivity < 0:
            raise ValueError("sensitivity must be >= 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be > 0")


@dataclass(frozen=True)
class NoisyUpdate:
    weights: ModelWeights
    sigma: float
    client_id: str = ""
    round: int = 0


def gaussian_sigma(budget: PrivacyBudget) -> float:
    """Noise scale of the classical Gaussian mechanism for (epsilon, delta)."""
    if budget.delta >= 1.25:
        raise ValueError("delta must be < 1.25")
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * budget.sensitivity / budget.epsilon


def sample_noise_level(seed, bounds=DEFAULT_SIGMA_BOUNDS) -> float:
    low, high = float(bounds[0]), float(bounds[1])
    if not 0.0 <= low <= high:
        raise ValueError(f"noise bounds must satisfy 0 <= low <= high, got {bounds}")
    if low == high:
        return low
    return float(np.random.default_rng(seed).uniform(low, high))


def clip_update(w: ModelWeights, clip_norm: float) -> ModelWeights:
    """Rescale so the global L2 norm over all parameters is at most ``clip_norm``."""
    if not clip_norm > 0:
        raise ValueError("clip_norm must be > 0")
    norm = float(np.linalg.norm(w.flat()))
    if norm <= clip_norm:
        return w.copy()
    scale = clip_norm / norm
    return w.map(lambda a: a * scale)


def _box_muller(rng: np.random.Generator, n: int) -> np.ndarray:
    # explicit transform of seeded uniforms keeps the noise platform-stable
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1], keeps log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def gaussian_noise(seed, n: int, sigma: float) -> np.ndarray:
    return sigma * _box_muller(np.random.default_rng(seed), n)


def perturb(w: ModelWeights, sigma: float, seed, client_id: str = "", round: int = 0) -> NoisyUpdate:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return NoisyUpdate(w.copy(), 0.0, client_id, round)
    flat = w.flat() + gaussian_noise(seed, w.n_params, sigma)
    return NoisyUpdate(ModelWeights.from_flat(w.spec, flat), float(sigma), client_id, round)
