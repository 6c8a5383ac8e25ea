"""Adam and DP-Adam: per-sample clipping, Gaussian gradient noise, Poisson batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import make_rng


@dataclass(frozen=True)
class DpConfig:
    clip: float = 1.0
    noise_std: float = 0.0
    sample_rate: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 < self.sample_rate <= 1:
            raise ValueError("sample_rate must lie in (0, 1]")


def poisson_sample(n: int, q: float, seed: int, step: int) -> np.ndarray:
    """Indices in ``[0, n)``, each kept independently with probability ``q``.

    The draw depends only on ``(seed, step)``; the result may be empty.
    """
    if not 0 < q <= 1:
        raise ValueError("sampling rate must lie in (0, 1]")
    if q == 1:
        return np.arange(n)
    rng = make_rng(seed, "poisson", step)
    return np.flatnonzero(rng.random(n) < q)


def per_sample_norms(grads: dict[str, np.ndarray]) -> np.ndarray:
    """L2 norm of each sample's gradient across all tensors."""
    sq = None
    for g in grads.values():
        s = np.square(g, dtype=np.float64).reshape(g.shape[0], int(np.prod(g.shape[1:]))).sum(axis=1)
        sq = s if sq is None else sq + s
    return np.sqrt(sq)


def clip_per_sample(grads: dict[str, np.ndarray], clip: float) -> dict[str, np.ndarray]:
    norms = per_sample_norms(grads)
    factor = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    return {
        k: g * factor.reshape((-1,) + (1,) * (g.ndim - 1)).astype(g.dtype, copy=False)
        for k, g in grads.items()
    }


def clip_and_noise(per_sample_grads: dict[str, np.ndarray], cfg: DpConfig, n_total: int,
                   step: int = 0) -> dict[str, np.ndarray]:
    """Clip each sample to norm ``cfg.clip``, sum, add noise, and normalize.

    The sum is divided by the expected batch size ``q * n_total`` (not the
    realized one), keeping the sensitivity of the numerator at ``clip``.
    """
    clipped = clip_per_sample(per_sample_grads, cfg.clip)
    rng = make_rng(cfg.seed, "grad-noise", step) if cfg.noise_std > 0 else None
    scale = 1.0 / (cfg.sample_rate * n_total)
    out = {}
    for name in sorted(clipped):
        g = clipped[name]
        total = g.sum(axis=0, dtype=np.float64)
        if rng is not None:
            total = total + cfg.noise_std * rng.standard_normal(total.shape)
        out[name] = (total * scale).astype(g.dtype)
    return out


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if set(grads) != set(self.params):
            raise ValueError("gradient names do not match the optimized parameters")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, p in self.params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(state: Adam, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    state.step(grads)
    return state.params
