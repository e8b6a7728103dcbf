"""Synthetic 2-D datasets and unnormalized targets for density experiments.

Samplers return (n, 2) float64 arrays; targets return per-row log p-tilde and
its input gradient, the calling convention the variational loss expects.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError

LOG_2PI = np.log(2.0 * np.pi)


class TwoGaussMixture:
    """Equal-weight pair of unit-covariance Gaussians at +-(offset, 0)."""

    def __init__(self, offset: float = 2.0):
        self.mu = np.array([offset, 0.0])

    def sample(self, rng: np.random.Generator, n: int):
        comp = rng.integers(0, 2, size=n)
        centers = np.where(comp[:, None] == 0, self.mu, -self.mu)
        return centers + rng.standard_normal((n, 2))

    def logpdf(self, x):
        x = np.atleast_2d(x)
        la = -0.5 * np.sum((x - self.mu) ** 2, axis=1) - LOG_2PI
        lb = -0.5 * np.sum((x + self.mu) ** 2, axis=1) - LOG_2PI
        m = np.maximum(la, lb)
        return m + np.log(0.5 * np.exp(la - m) + 0.5 * np.exp(lb - m))

    def mc_entropy(self, rng: np.random.Generator, n: int = 1_000_000) -> float:
        """Monte-Carlo differential entropy -E[log p]."""
        return -float(np.mean(self.logpdf(self.sample(rng, n))))


def two_moons(rng: np.random.Generator, n: int, noise: float = 0.08):
    """Two interleaved half-circles with Gaussian jitter, centered near origin."""
    n1 = n // 2
    t1 = rng.uniform(0.0, np.pi, size=n1)
    t2 = rng.uniform(0.0, np.pi, size=n - n1)
    upper = np.column_stack([np.cos(t1), np.sin(t1)])
    lower = np.column_stack([1.0 - np.cos(t2), 0.5 - np.sin(t2)])
    pts = np.vstack([upper, lower]) - np.array([0.5, 0.25])
    return pts + noise * rng.standard_normal(pts.shape)


def delta_dataset(point, n: int):
    """All rows equal to `point` (training signal comes from the noising step)."""
    return np.tile(np.asarray(point, dtype=np.float64)[None, :], (n, 1))


# ---------------------------------------------------------------------------
# unnormalized variational targets


def gauss_target(mu):
    """log p-tilde(x) = -0.5 ||x - mu||^2 (standard normal shifted to mu)."""
    mu = np.asarray(mu, dtype=np.float64)

    def log_unnorm(x):
        diff = np.atleast_2d(x) - mu
        return -0.5 * np.sum(diff * diff, axis=1), -diff

    return log_unnorm


def ring_target(radius: float = 2.0, sharp: float = 4.0):
    """log p-tilde(x) = -sharp * (||x|| - radius)^2, a ring-shaped density."""

    def log_unnorm(x):
        x = np.atleast_2d(x)
        r = np.sqrt(np.sum(x * x, axis=1))
        safe = np.maximum(r, 1e-12)
        val = -sharp * (r - radius) ** 2
        grad = (-2.0 * sharp * (r - radius) / safe)[:, None] * x
        return val, grad

    return log_unnorm


# ---------------------------------------------------------------------------
# registries used by the CLI


def make_dataset(name: str, rng: np.random.Generator, n: int):
    if name == "two-gauss":
        return TwoGaussMixture().sample(rng, n)
    if name == "two-moons":
        return two_moons(rng, n)
    if name == "delta":
        return delta_dataset([0.5, -0.25], n)
    raise ConfigError(f"unknown dataset {name!r} (two-gauss, two-moons, delta)")


def make_target(name: str):
    if name == "gauss-offset":
        return gauss_target([3.0, -2.0]), 2
    if name == "ring":
        return ring_target(), 2
    raise ConfigError(f"unknown target {name!r} (gauss-offset, ring)")
