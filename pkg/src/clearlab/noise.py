"""Label corruption: symmetric, single-flip (asymmetric) and instance-dependent."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import Dataset

KINDS = ("symmetric", "asymmetric", "instance", "none")


class NoiseError(ValueError):
    pass


@dataclass
class NoiseSpec:
    kind: str = "symmetric"
    rate: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind == "instancedependent":
            self.kind = "instance"
        if self.kind not in KINDS:
            raise NoiseError(f"noise kind must be one of {KINDS}, got {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise NoiseError(f"noise rate must lie in [0, 1), got {self.rate}")


def build_symmetric(num_classes: int, rate: float) -> np.ndarray:
    """Keep the label with prob 1-rate, else move uniformly to another class."""
    if not 0.0 <= rate < (num_classes - 1) / num_classes:
        raise NoiseError(f"symmetric rate must lie in [0, {(num_classes - 1) / num_classes:.4f}), got {rate}")
    T = np.full((num_classes, num_classes), rate / (num_classes - 1))
    np.fill_diagonal(T, 1.0 - rate)
    return T


def build_asymmetric(num_classes: int, rate: float) -> np.ndarray:
    """Single-flip noise: class i goes to (i + 1) mod C with prob ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise NoiseError(f"asymmetric rate must lie in [0, 1), got {rate}")
    T = np.eye(num_classes) * (1.0 - rate)
    idx = np.arange(num_classes)
    T[idx, (idx + 1) % num_classes] += rate
    return T


def check_transition(T: np.ndarray) -> None:
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise NoiseError(f"transition matrix must be square, got {T.shape}")
    if (T < 0).any() or np.abs(T.sum(axis=1) - 1.0).max() > 1e-9:
        raise NoiseError("transition matrix must be row-stochastic")


def _guard(dataset: Dataset) -> None:
    if dataset.split != "train":
        raise NoiseError(f"refusing to corrupt the '{dataset.split}' split; only training labels are noised")


def _relabel(dataset: Dataset, new_labels: np.ndarray) -> Dataset:
    exs = [dataclasses.replace(e, given_label=int(y)) for e, y in zip(dataset.examples, new_labels)]
    return dataset.with_examples(exs)


def apply_matrix_noise(dataset: Dataset, T: np.ndarray, seed: int = 0) -> Dataset:
    """Resample each given label from row ``T[true_label]``."""
    _guard(dataset)
    check_transition(T)
    y = dataset.true
    if y.size and (y.min() < 0 or y.max() >= T.shape[0]):
        raise NoiseError("labels out of range for the transition matrix")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(T, axis=1)
    u = rng.random(y.size)
    new = (u[:, None] >= cdf[y]).sum(axis=1)
    return _relabel(dataset, np.minimum(new, T.shape[0] - 1))


def margin_noise(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-two classes and ``tau = 1/2 - (f_u - f_s)^2 / 2`` from class probabilities."""
    order = np.argsort(-probs, axis=1, kind="stable")
    u, s = order[:, 0], order[:, 1]
    rows = np.arange(len(probs))
    gap = probs[rows, u] - probs[rows, s]
    return u, s, 0.5 - 0.5 * gap * gap


def calibrate_scale(tau: np.ndarray, target_rate: float, tol: float = 1e-4) -> float:
    """Bisection on ``c`` so that mean(min(c * tau, 1)) hits ``target_rate``."""
    tau = np.asarray(tau, dtype=float)
    reach = float((tau > 0).mean())
    if target_rate > reach - tol:
        raise NoiseError(f"target rate {target_rate} unreachable; max achievable is {reach:.4f}")
    rate = lambda c: float(np.minimum(c * tau, 1.0).mean())  # noqa: E731
    lo, hi = 0.0, 1.0
    while rate(hi) < target_rate:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target_rate:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def flip_probabilities(probs: np.ndarray, true_labels: np.ndarray, target_rate: float):
    """Per-sample flip probability and flip destination for instance noise.

    The destination is the probe's second most confident class; when that is
    the sample's own label (the probe got it wrong) the top class is used so
    that a flip always changes the label.
    """
    u, s, tau = margin_noise(probs)
    c = calibrate_scale(tau, target_rate)
    dest = np.where(s == true_labels, u, s)
    return np.minimum(c * tau, 1.0), dest, tau


def apply_instance_noise(dataset: Dataset, probe_probs: np.ndarray, target_rate: float,
                         seed: int = 0) -> Dataset:
    """Flip toward the runner-up class with probability proportional to ``tau``.

    ``probe_probs`` are class probabilities from a classifier trained on the
    uncorrupted data, one row per example.
    """
    _guard(dataset)
    probs = np.asarray(probe_probs, dtype=float)
    if probs.shape != (len(dataset), dataset.num_classes):
        raise NoiseError(f"probe probabilities must be ({len(dataset)}, {dataset.num_classes})")
    y = dataset.true
    flip_p, dest, _ = flip_probabilities(probs, y, target_rate)
    rng = np.random.default_rng(seed)
    flip = rng.random(len(y)) < flip_p
    return _relabel(dataset, np.where(flip, dest, y))


def train_probe(dataset: Dataset, model_cfg, base, seed: int = 0, epochs: int = 2,
                lr: float = 1e-3) -> np.ndarray:
    """Fully fine-tune a fresh classifier on clean labels; return its probabilities."""
    from .model import Encoder, ModelConfig
    from .trainer import fit_plain

    cfg = ModelConfig(**{**dataclasses.asdict(model_cfg), "peft_kind": "full"})
    model = Encoder(cfg, base, seed=seed)
    ids, pad = dataset.encode(cfg.max_len)
    fit_plain(model, ids, pad, dataset.true, epochs=epochs, lr=lr, seed=seed)
    return model.predict_proba(ids, pad)


def corrupt(dataset: Dataset, spec: NoiseSpec, probe_probs: np.ndarray | None = None) -> Dataset:
    if spec.kind == "none" or spec.rate == 0.0:
        _guard(dataset)
        return dataset
    C = dataset.num_classes
    if spec.kind == "symmetric":
        return apply_matrix_noise(dataset, build_symmetric(C, spec.rate), spec.seed)
    if spec.kind == "asymmetric":
        return apply_matrix_noise(dataset, build_asymmetric(C, spec.rate), spec.seed)
    if probe_probs is None:
        raise NoiseError("instance-dependent noise needs probe probabilities")
    return apply_instance_noise(dataset, probe_probs, spec.rate, spec.seed)
