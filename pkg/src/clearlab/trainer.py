"""Warm-up, GMM refits, routed training with consistency regularisation, metrics."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import Dataset
from .gmm import GmmFit, LossCache, clean_posterior, fit_or_uniform, normalize_losses
from .model import BaseWeights, Encoder, ModelConfig
from .noise import NoiseSpec, corrupt
from .router import RoutingPolicy, RoutingStream, inference_mask, routing_stats

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    warmup_epochs: int = 3
    num_forwards: int = 5
    consistency_weight: float = 1.0
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    avg_window: int = 5
    ensemble: str = "fresh"  # or "cached"
    normalize_losses: bool = False
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-6
    memorization_every: int = 1  # 0: final epoch only
    eval_batch: int = 500

    def __post_init__(self):
        if not 1 <= self.warmup_epochs <= self.epochs:
            raise ValueError(f"warmup_epochs must lie in [1, epochs={self.epochs}], got {self.warmup_epochs}")
        if self.num_forwards < 1:
            raise ValueError("num_forwards must be >= 1")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")
        if self.ensemble not in ("fresh", "cached"):
            raise ValueError(f"ensemble must be 'fresh' or 'cached', got {self.ensemble!r}")
        if not 1 <= self.avg_window <= self.epochs:
            raise ValueError("avg_window must lie in [1, epochs]")


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self) -> None:
        """One update; parameters without a gradient are treated as zero-gradient."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            v *= self.beta2
            if g is not None:
                m += (1.0 - self.beta1) * g
                v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# single steps


@dataclass
class StepResult:
    ce: float
    consistency: float
    per_sample_ce: np.ndarray
    probs: np.ndarray


def clear_step(model: Encoder, opt: Adam, ids, pad, labels, gates=None, targets=None,
               consistency_weight: float = 0.0) -> StepResult:
    """CE on given labels plus ``consistency_weight`` * CE toward ``targets``; one Adam update."""
    model.zero_grad()
    with Tape() as tape:
        logits = model.forward(ids, pad, gates)
        ce = ad.cross_entropy(logits, labels)
        loss = ad.mean(ce)
        cons_val = 0.0
        if targets is not None and consistency_weight > 0:
            cons = ad.mean(ad.soft_cross_entropy(logits, targets))
            cons_val = cons.item()
            loss = ad.add(loss, ad.mul(cons, consistency_weight))
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite loss {value}")
    tape.backward(loss)
    opt.step()
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    return StepResult(float(ce.data.mean()), cons_val, ce.data.copy(), probs)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 7]).permutation(n)


def run_epoch(model, opt, ids, pad, labels, order, batch_size, gates=None, targets=None,
              consistency_weight=0.0):
    """One pass in ``order``; returns per-sample CE (original indexing), probs and means."""
    n = len(ids)
    losses = np.zeros(n)
    probs = np.zeros((n, model.config.num_classes))
    ce_sum = cons_sum = 0.0
    for s in range(0, n, batch_size):
        b = order[s:s + batch_size]
        res = clear_step(model, opt, ids[b], pad[b], labels[b],
                         None if gates is None else gates[b],
                         None if targets is None else targets[b], consistency_weight)
        losses[b] = res.per_sample_ce
        probs[b] = res.probs
        ce_sum += res.ce * len(b)
        cons_sum += res.consistency * len(b)
    return losses, probs, ce_sum / n, cons_sum / n


def fit_plain(model: Encoder, ids, pad, labels, epochs: int, lr: float = 1e-3, seed: int = 0,
              batch_size: int = 32) -> list[np.ndarray]:
    """Standard fine-tuning with plain CE; returns each epoch's per-sample losses."""
    opt = Adam(model.trainable_parameters(), lr=lr)
    out = []
    for epoch in range(1, epochs + 1):
        losses, *_ = run_epoch(model, opt, ids, pad, labels, epoch_order(seed, epoch, len(ids)), batch_size)
        out.append(losses)
    return out


def warmup(model: Encoder, opt: Adam, ids, pad, labels, k: int, seed: int = 0,
           batch_size: int = 32, start_epoch: int = 1, on_epoch: Callable | None = None) -> LossCache:
    """``k`` epochs of all-layers-on CE training; caches the last epoch's per-sample losses."""
    if k < 1:
        raise ValueError("warm-up needs k >= 1")
    cache = None
    for epoch in range(start_epoch, start_epoch + k):
        losses, probs, ce, _ = run_epoch(model, opt, ids, pad, labels,
                                         epoch_order(seed, epoch, len(ids)), batch_size)
        cache = LossCache(losses, epoch)
        if on_epoch is not None:
            on_epoch(epoch, cache, probs, ce)
    return cache


# ---------------------------------------------------------------------------
# ensemble targets


@dataclass
class PredictionBuffer:
    """Per-sample class distributions used as consistency targets."""

    dists: np.ndarray  # (n, N, C)
    epoch: int

    def __post_init__(self):
        if np.abs(self.dists.sum(axis=-1) - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("PredictionBuffer: stored rows must be distributions")

    def mean(self) -> np.ndarray:
        f = self.dists.mean(axis=1)
        return f / f.sum(axis=1, keepdims=True)


def ensemble_predict(snapshot: Encoder | None, ids, pad, p, num_forwards: int, policy: RoutingPolicy,
                     stream: RoutingStream, sample_ids, batch_size: int = 500) -> PredictionBuffer:
    """``num_forwards`` routed forwards of the frozen snapshot, each with fresh masks.

    A sample's prediction depends only on its own mask, so each distinct
    (sample, mask) pair is evaluated once and shared between members.
    """
    if snapshot is None:
        raise ValueError("ensemble_predict needs a previous-epoch snapshot (still in warm-up?)")
    n, L = len(ids), snapshot.config.num_layers
    masks = np.stack([stream.masks(sample_ids, p, policy, draw=k) for k in range(num_forwards)])
    codes = (masks * (1 << np.arange(L))).sum(axis=-1).astype(np.int64)  # (N, n)
    keys = codes * n + np.arange(n)
    uniq, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    rows, code = uniq % n, uniq // n
    # sorted by mask code, so batches mostly share one routing pattern
    gates = ((code[:, None] >> np.arange(L)) & 1).astype(np.float64)
    probs = snapshot.predict_proba(ids[rows], pad[rows], gates, batch_size)
    dists = probs[inverse.reshape(num_forwards, n)]  # (N, n, C)
    return PredictionBuffer(np.ascontiguousarray(dists.transpose(1, 0, 2)), stream.key[1])


class CachedPredictions:
    """Rolling window of the last N epochs' training-forward distributions."""

    def __init__(self, size: int):
        self.size = size
        self.history: list[np.ndarray] = []

    def push(self, probs: np.ndarray) -> None:
        self.history = (self.history + [probs.copy()])[-self.size:]

    def buffer(self, epoch: int) -> PredictionBuffer:
        return PredictionBuffer(np.stack(self.history, axis=1), epoch)


# ---------------------------------------------------------------------------
# diagnostics


def accuracy_and_loss(probs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    if len(labels) == 0:
        return 0.0, 0.0
    acc = 100.0 * float((probs.argmax(axis=1) == labels).mean())
    loss = float(-np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300)).mean())
    return acc, loss


def memorization_report(model: Encoder, ids, pad, given, corrupted, batch_size: int = 500) -> dict:
    """Train accuracy / mean CE against the given labels, split by corruption flag."""
    corrupted = np.asarray(corrupted, dtype=bool)
    probs = model.predict_proba(ids, pad, np.ones((len(ids), model.config.num_layers)), batch_size)
    c_acc, c_loss = accuracy_and_loss(probs[~corrupted], given[~corrupted])
    n_acc, n_loss = accuracy_and_loss(probs[corrupted], given[corrupted])
    return {"clean_acc": c_acc, "clean_loss": c_loss, "noisy_acc": n_acc, "noisy_loss": n_loss,
            "n_clean": int((~corrupted).sum()), "n_noisy": int(corrupted.sum())}


def auc(scores: np.ndarray, positive: np.ndarray) -> float | None:
    """Area under ROC of ``scores`` for ``positive`` vs the rest (Mann-Whitney)."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(positive.sum()), int((~positive).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    r = rankdata(scores)
    return float((r[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def peak_and_average(acc: list[float], window: int) -> tuple[float, float]:
    if not acc:
        raise ValueError("no accuracies recorded")
    return float(max(acc)), float(np.mean(acc[-window:]))


@dataclass
class RunMetrics:
    epochs: list[dict] = field(default_factory=list)
    window: int = 5
    summary: dict = field(default_factory=dict)

    @property
    def test_acc(self) -> list[float]:
        return [e["test_acc"] for e in self.epochs]

    @property
    def peak(self) -> float:
        return peak_and_average(self.test_acc, self.window)[0]

    @property
    def average(self) -> float:
        return peak_and_average(self.test_acc, self.window)[1]


class MetricsSink:
    """Line-delimited JSON writer; each record is flushed as soon as it is written."""

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# full runs


def _track(tc: TrainConfig, epoch: int) -> bool:
    every = tc.memorization_every
    return epoch == tc.epochs or (every > 0 and epoch % every == 0)


def _eval(model: Encoder, ids, pad, labels, batch: int) -> float:
    gates = np.tile(inference_mask(model.config.num_layers), (len(ids), 1))
    probs = model.predict_proba(ids, pad, gates, batch)
    return accuracy_and_loss(probs, labels)[0]


def run_experiment(model_cfg: ModelConfig, train_cfg: TrainConfig, policy: RoutingPolicy,
                   train_set: Dataset, test_set: Dataset, base: BaseWeights | None,
                   noise: NoiseSpec | None = None, probe_probs: np.ndarray | None = None,
                   metrics_path: str | Path | None = None, header: dict | None = None) -> RunMetrics:
    """Warm-up, then per epoch: GMM on last epoch's losses, snapshot, routed training, eval."""
    sink = MetricsSink(metrics_path)
    if header is not None:
        sink.write({"type": "config", "schema": METRICS_SCHEMA, **header})
    if noise is not None:
        train_set = corrupt(train_set, noise, probe_probs)
    tc = train_cfg
    L = model_cfg.num_layers
    ids, pad = train_set.encode(model_cfg.max_len)
    given, corrupted, sids = train_set.given, train_set.corrupted, train_set.ids
    t_ids, t_pad = test_set.encode(model_cfg.max_len)
    t_y = test_set.true
    n = len(ids)
    n_ids = int(sids.max()) + 1

    model = Encoder(model_cfg, base, seed=tc.seed)
    theta_before = model.frozen_checksum()
    opt = Adam(model.trainable_parameters(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    metrics = RunMetrics(window=tc.avg_window)
    cache: LossCache | None = None
    cached_preds = CachedPredictions(tc.num_forwards)
    use_reg = tc.consistency_weight > 0

    def record(epoch, phase, ce, cons, rstats, fit, p, forwards):
        rec = {"type": "epoch", "epoch": epoch, "phase": phase,
               "test_acc": _eval(model, t_ids, t_pad, t_y, tc.eval_batch),
               "train_ce": ce, "train_consistency": cons, "routing": rstats,
               "gmm": None if fit is None else fit.as_dict(),
               "clean_auc": None if p is None else auc(p, ~corrupted), "forwards": forwards}
        if _track(tc, epoch):
            rec.update(memorization_report(model, ids, pad, given, corrupted, tc.eval_batch))
        metrics.epochs.append(rec)
        sink.write(rec)
        log.debug("epoch %d %s test_acc=%.2f", epoch, phase, rec["test_acc"])

    try:
        for epoch in range(1, tc.epochs + 1):
            order = epoch_order(tc.seed, epoch, n)
            start = model.forward_count
            if epoch <= tc.warmup_epochs:
                losses, probs, ce, cons = run_epoch(model, opt, ids, pad, given, order, tc.batch_size)
                cache = LossCache(losses, epoch, sids)
                if use_reg and tc.ensemble == "cached":
                    cached_preds.push(probs)
                rstats = routing_stats(np.ones((n, L)), corrupted)
                record(epoch, "warmup", ce, cons, rstats, None, None,
                       {"train": model.forward_count - start, "ensemble": 0})
                continue

            # GMM on the previous epoch's cached losses: no extra forwards
            x = normalize_losses(cache.losses) if tc.normalize_losses else cache.losses
            fit: GmmFit = fit_or_uniform(x, max_iter=tc.gmm_max_iter, tol=tc.gmm_tol)
            p = np.clip(clean_posterior(fit, x), 0.0, 1.0)
            gates = RoutingStream(tc.seed, epoch, "train", n_ids, L).masks(sids, p, policy)
            targets = None
            ens_forwards = 0
            if use_reg:
                if tc.ensemble == "fresh":
                    snapshot = model.copy()
                    stream = RoutingStream(tc.seed, epoch, "ensemble", n_ids, L)
                    targets = ensemble_predict(snapshot, ids, pad, p, tc.num_forwards, policy,
                                               stream, sids, tc.eval_batch).mean()
                    ens_forwards = snapshot.forward_count
                elif cached_preds.history:
                    targets = cached_preds.buffer(epoch).mean()
            start = model.forward_count
            losses, probs, ce, cons = run_epoch(model, opt, ids, pad, given, order, tc.batch_size,
                                                gates, targets, tc.consistency_weight)
            cache = LossCache(losses, epoch, sids)
            if use_reg and tc.ensemble == "cached":
                cached_preds.push(probs)
            record(epoch, "routed", ce, cons, routing_stats(gates, corrupted), fit, p,
                   {"train": model.forward_count - start, "ensemble": ens_forwards})
    except (TrainingAborted, ad.NumericFault) as exc:
        sink.write({"type": "abort", "epoch": len(metrics.epochs) + 1, "error": str(exc)})
        raise

    theta_after = model.frozen_checksum()
    return _finish_run(metrics, sink, model_cfg, theta_before, theta_after)


def run_baseline(model_cfg: ModelConfig, train_cfg: TrainConfig, train_set: Dataset, test_set: Dataset,
                 base: BaseWeights | None, noise: NoiseSpec | None = None,
                 probe_probs: np.ndarray | None = None, metrics_path=None, header=None) -> RunMetrics:
    """Plain PEFT (or full) fine-tuning: CE on given labels, all modules on, no routing."""
    sink = MetricsSink(metrics_path)
    if header is not None:
        sink.write({"type": "config", "schema": METRICS_SCHEMA, **header})
    if noise is not None:
        train_set = corrupt(train_set, noise, probe_probs)
    tc = train_cfg
    ids, pad = train_set.encode(model_cfg.max_len)
    given, corrupted = train_set.given, train_set.corrupted
    t_ids, t_pad = test_set.encode(model_cfg.max_len)
    model = Encoder(model_cfg, base, seed=tc.seed)
    theta_before = model.frozen_checksum()
    opt = Adam(model.trainable_parameters(), tc.lr, tc.beta1, tc.beta2, tc.adam_eps)
    metrics = RunMetrics(window=tc.avg_window)
    L = model_cfg.num_layers
    for epoch in range(1, tc.epochs + 1):
        start = model.forward_count
        _, _, ce, cons = run_epoch(model, opt, ids, pad, given, epoch_order(tc.seed, epoch, len(ids)),
                                   tc.batch_size)
        used = model.forward_count - start
        rec = {"type": "epoch", "epoch": epoch, "phase": "warmup",
               "test_acc": _eval(model, t_ids, t_pad, test_set.true, tc.eval_batch),
               "train_ce": ce, "train_consistency": cons,
               "routing": routing_stats(np.ones((len(ids), L)), corrupted), "gmm": None,
               "clean_auc": None, "forwards": {"train": used, "ensemble": 0}}
        if _track(tc, epoch):
            rec.update(memorization_report(model, ids, pad, given, corrupted, tc.eval_batch))
        metrics.epochs.append(rec)
        sink.write(rec)
    return _finish_run(metrics, sink, model_cfg, theta_before, model.frozen_checksum())


def _finish_run(metrics: RunMetrics, sink: MetricsSink, model_cfg: ModelConfig, before: str, after: str):
    peak, avg = peak_and_average(metrics.test_acc, metrics.window)
    last = metrics.epochs[-1]
    metrics.summary = {
        "type": "summary", "schema": METRICS_SCHEMA, "peak": peak, "average": avg,
        "gap": peak - avg, "window": metrics.window,
        "final_clean_acc": last.get("clean_acc"), "final_noisy_acc": last.get("noisy_acc"),
        "theta_checksum_before": before, "theta_checksum_after": after,
        "theta_unchanged": before == after,
    }
    sink.write(metrics.summary)
    return metrics
