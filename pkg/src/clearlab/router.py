"""Per-sample, per-layer PEFT activation decisions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("clean", "deterministic", "random", "noisy", "always_on", "always_off")


@dataclass
class RoutingPolicy:
    strategy: str = "clean"
    gamma: float = 1.0
    threshold: float = 0.5
    eval_gamma: float = 1.0  # activation prob at inference; 1 => all-ones masks

    def __post_init__(self):
        self.strategy = self.strategy.lower()
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("gamma", "threshold", "eval_gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def activation_prob(p: np.ndarray, policy: RoutingPolicy) -> np.ndarray:
    """Per-sample probability that any given layer routes through PEFT."""
    p = np.asarray(p, dtype=float)
    if ((p < 0) | (p > 1) | ~np.isfinite(p)).any():
        raise ValueError("clean probability must lie in [0, 1]")
    s = policy.strategy
    if s == "clean":
        return policy.gamma * p
    if s == "noisy":
        return policy.gamma * (1.0 - p)
    if s == "random":
        return np.full_like(p, 0.5)
    if s == "deterministic":
        return (p >= policy.threshold).astype(float)
    if s == "always_on":
        return np.ones_like(p)
    return np.zeros_like(p)


def masks_from_uniforms(p: np.ndarray, uniforms: np.ndarray, policy: RoutingPolicy) -> np.ndarray:
    """Bernoulli masks (n, L) from pre-drawn uniforms in [0, 1)."""
    prob = activation_prob(p, policy)
    return (uniforms < prob[:, None]).astype(np.float64)


def sample_mask(p: float, num_layers: int, policy: RoutingPolicy, rng: np.random.Generator) -> np.ndarray:
    """One sample's routing mask: ``num_layers`` independent decisions."""
    u = rng.random((1, num_layers))
    return masks_from_uniforms(np.array([p]), u, policy)[0]


def inference_mask(num_layers: int, policy: RoutingPolicy | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Eval-time mask: clean probability pinned to 1, so layers fire with prob eval_gamma."""
    g = 1.0 if policy is None else policy.eval_gamma
    if g >= 1.0:
        return np.ones(num_layers)
    if rng is None:
        raise ValueError("a stochastic inference mask (eval_gamma < 1) needs an rng")
    return (rng.random(num_layers) < g).astype(np.float64)


class RoutingStream:
    """Uniform draws keyed by (seed, epoch, purpose) and indexed by sample id.

    A sample's decisions therefore do not depend on batch composition or
    order.  ``draw`` numbers independent rounds (e.g. ensemble members).
    """

    PURPOSES = {"train": 0, "ensemble": 1, "eval": 2}

    def __init__(self, seed: int, epoch: int, purpose: str, num_samples: int, num_layers: int):
        self.key = (seed, epoch, self.PURPOSES[purpose])
        self.shape = (num_samples, num_layers)
        self._cache: dict[int, np.ndarray] = {}

    def uniforms(self, sample_ids: np.ndarray, draw: int = 0) -> np.ndarray:
        if draw not in self._cache:
            rng = np.random.default_rng([*self.key, draw])
            self._cache[draw] = rng.random(self.shape)
        return self._cache[draw][sample_ids]

    def masks(self, sample_ids: np.ndarray, p: np.ndarray, policy: RoutingPolicy, draw: int = 0) -> np.ndarray:
        return masks_from_uniforms(p, self.uniforms(sample_ids, draw), policy)


def routing_stats(masks: np.ndarray, corrupted: np.ndarray) -> dict:
    """Mean active layers overall and split by hidden corruption flag."""
    active = masks.sum(axis=1)
    corrupted = np.asarray(corrupted, dtype=bool)
    return {
        "mean_active": float(active.mean()) if active.size else 0.0,
        "mean_active_clean": float(active[~corrupted].mean()) if (~corrupted).any() else 0.0,
        "mean_active_noisy": float(active[corrupted].mean()) if corrupted.any() else 0.0,
    }
