"""Two-component 1-D Gaussian mixture over per-sample losses.

The component with the smaller mean models correctly labelled samples; its
posterior responsibility is the clean probability used for routing.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

VAR_FLOOR = 1e-4  # floor on each component's std
_LOG_2PI = np.log(2.0 * np.pi)


class DegenerateFit(ValueError):
    """All losses (near-)identical; no two-component structure to recover."""


@dataclass
class LossCache:
    losses: np.ndarray
    epoch: int
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=float)
        if not np.isfinite(self.losses).all() or (self.losses < 0).any():
            raise ValueError("LossCache: losses must be finite and non-negative")

    def __len__(self) -> int:
        return len(self.losses)


@dataclass
class GmmFit:
    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    converged: bool = False
    iterations: int = 0
    log_likelihood: list[float] = field(default_factory=list)
    degenerate: bool = False

    def as_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "stds": self.stds.tolist(), "converged": self.converged,
                "iterations": self.iterations, "degenerate": self.degenerate}

    @classmethod
    def uniform(cls) -> "GmmFit":
        """Placeholder returned for degenerate data: every posterior is 0.5."""
        return cls(np.array([0.5, 0.5]), np.zeros(2), np.ones(2), degenerate=True)


def _log_joint(x: np.ndarray, w, mu, sd) -> np.ndarray:
    z = (x[:, None] - mu) / sd
    return np.log(w) - np.log(sd) - 0.5 * _LOG_2PI - 0.5 * z * z


def fit_em(losses, max_iter: int = 100, tol: float = 1e-6) -> GmmFit:
    """EM for a two-Gaussian mixture, initialised from the 25th/75th percentiles.

    Raises :class:`DegenerateFit` when every loss lies within 1e-9 of the others.
    """
    x = np.asarray(losses.losses if isinstance(losses, LossCache) else losses, dtype=float)
    if x.size < 4:
        raise ValueError(f"fit_em needs at least 4 samples, got {x.size}")
    if np.ptp(x) <= 1e-9:
        raise DegenerateFit("all losses identical")

    mu = np.percentile(x, [25.0, 75.0])
    if mu[1] - mu[0] <= 1e-12:
        mu = np.array([x.min(), x.max()])
    w = np.array([0.5, 0.5])
    sd = np.full(2, max(x.std() / 2.0, VAR_FLOOR))

    history: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        lj = _log_joint(x, w, mu, sd)
        m = lj.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(lj - m).sum(axis=1))
        ll = float(log_norm.sum())
        if history and abs(ll - history[-1]) < tol:
            history.append(ll)
            converged = True
            break
        history.append(ll)
        resp = np.exp(lj - log_norm[:, None])
        nk = resp.sum(axis=0) + 1e-300
        w = nk / x.size
        mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - mu) ** 2).sum(axis=0) / nk
        sd = np.maximum(np.sqrt(var), VAR_FLOOR)

    order = np.argsort(mu, kind="stable")
    return GmmFit(w[order], mu[order], sd[order], converged, it, history)


def fit_or_uniform(losses, **kw) -> GmmFit:
    try:
        return fit_em(losses, **kw)
    except DegenerateFit:
        return GmmFit.uniform()


def clean_posterior(fit: GmmFit, loss) -> np.ndarray | float:
    """Posterior probability that ``loss`` came from the smaller-mean component."""
    scalar = np.ndim(loss) == 0
    x = np.atleast_1d(np.asarray(loss, dtype=float))
    if fit.degenerate:
        p = np.full(x.shape, 0.5)
    else:
        lj = _log_joint(x, fit.weights, fit.means, fit.stds)
        p = expit(lj[:, 0] - lj[:, 1])
    return float(p[0]) if scalar else p


def crossing_point(fit: GmmFit) -> float:
    """Loss in [mu0, mu1] where both weighted densities are equal (bisection)."""
    lo, hi = float(fit.means[0]), float(fit.means[1])
    f = lambda v: clean_posterior(fit, v) - 0.5  # noqa: E731
    if f(lo) * f(hi) > 0:
        raise ValueError("no crossing between the component means")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def normalize_losses(losses: np.ndarray) -> np.ndarray:
    """Min-max scaling to [0, 1] (optional preprocessing before the fit)."""
    losses = np.asarray(losses, dtype=float)
    span = np.ptp(losses)
    return np.zeros_like(losses) if span == 0 else (losses - losses.min()) / span
