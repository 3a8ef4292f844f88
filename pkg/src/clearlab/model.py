"""Toy post-LN transformer encoder with frozen base weights and gated PEFT deltas.

A model is three name->Tensor dicts: ``base`` (frozen pretrained weights,
including the untied masked-token head used for pretraining), ``delta`` (the
PEFT parameters) and ``head`` (the task classifier).  ``forward`` takes a
per-sample, per-layer gate matrix; a zero gate makes that layer run on the
base weights alone.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import MASK_ID, PAD_ID, Dataset

PEFT_KINDS = ("adapter", "lora", "bitfit", "prompt", "full")
CHECKPOINT_FORMAT = 1
NEG_INF = -1e9


@dataclass
class ModelConfig:
    num_layers: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 128
    vocab_size: int = 200
    max_len: int = 13
    num_classes: int = 5
    peft_kind: str = "adapter"
    adapter_dim: int = 16
    lora_rank: int = 4
    lora_scale: float = 1.0
    prompt_len: int = 20

    def __post_init__(self):
        if self.peft_kind == "none":
            self.peft_kind = "full"
        if self.peft_kind not in PEFT_KINDS:
            raise ValueError(f"peft_kind must be one of {PEFT_KINDS}, got {self.peft_kind!r}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


# biases swapped per sample by BitFit routing
BITFIT_BIASES = ("q.b", "k.b", "v.b", "o.b", "ln1.b", "ff1.b", "ff2.b", "ln2.b")


def base_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, V = cfg.hidden, cfg.ffn, cfg.vocab_size
    shapes = {"emb.tok": (V, d), "emb.pos": (cfg.max_len, d), "emb.ln.g": (d,), "emb.ln.b": (d,)}
    for l in range(cfg.num_layers):
        p = f"l{l}."
        for m in "qkvo":
            shapes[p + m + ".W"] = (d, d)
            shapes[p + m + ".b"] = (d,)
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ff1.W": (d, f), p + "ff1.b": (f,),
                       p + "ff2.W": (f, d), p + "ff2.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,)})
    shapes["mlm.W"] = (d, V)
    shapes["mlm.b"] = (V,)
    return shapes


def delta_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, r = cfg.hidden, cfg.adapter_dim
    shapes: dict[str, tuple[int, ...]] = {}
    for l in range(cfg.num_layers):
        p = f"l{l}."
        if cfg.peft_kind == "adapter":
            for site in ("ad_attn", "ad_ffn"):
                shapes.update({f"{p}{site}.down.W": (d, r), f"{p}{site}.down.b": (r,),
                               f"{p}{site}.up.W": (r, d), f"{p}{site}.up.b": (d,)})
        elif cfg.peft_kind == "lora":
            for m in "qv":
                shapes[f"{p}lora_{m}.A"] = (d, cfg.lora_rank)
                shapes[f"{p}lora_{m}.B"] = (cfg.lora_rank, d)
        elif cfg.peft_kind == "bitfit":
            for b in BITFIT_BIASES:
                shapes[f"{p}bitfit.{b}"] = (cfg.ffn,) if b == "ff1.b" else (d,)
        elif cfg.peft_kind == "prompt":
            shapes[f"{p}prompt"] = (cfg.prompt_len, d)
    return shapes


def head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {"head.W": (cfg.hidden, cfg.num_classes), "head.b": (cfg.num_classes,)}


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Parameter counts by group, computed from shapes alone (no allocation)."""
    def total(shapes):
        return int(sum(np.prod(s) for s in shapes.values()))
    counts = {"base": total(base_shapes(cfg)), "delta": total(delta_shapes(cfg)),
              "head": total(head_shapes(cfg))}
    counts["total"] = counts["base"] + counts["delta"] + counts["head"]
    counts["trainable"] = counts["total"] if cfg.peft_kind == "full" else counts["delta"] + counts["head"]
    return counts


def peft_ratio(cfg: ModelConfig) -> float:
    """Share (in percent) of all parameters that belong to the PEFT delta."""
    c = count_parameters(cfg)
    return 100.0 * c["delta"] / c["total"]


BERT_BASE = dict(num_layers=12, hidden=768, heads=12, ffn=3072, vocab_size=30522, max_len=512)


# ---------------------------------------------------------------------------
# initialisation


def _init_base(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in base_shapes(cfg).items():
        if name.endswith(".g"):
            out[name] = np.ones(shape)
        elif name.endswith(".b"):
            out[name] = np.zeros(shape)
        elif name.startswith("emb."):
            out[name] = rng.normal(0.0, 1.0, shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return out


def _init_delta(cfg: ModelConfig, base: dict[str, np.ndarray], rng: np.random.Generator):
    out = {}
    for name, shape in delta_shapes(cfg).items():
        if name.endswith(".up.W") or name.endswith(".B") or name.endswith(".up.b"):
            out[name] = np.zeros(shape)  # delta starts as the identity perturbation
        elif name.endswith(".down.b"):
            out[name] = np.zeros(shape)
        elif ".bitfit." in name:
            l, b = name.split(".bitfit.")
            out[name] = base[f"{l}.{b}"].copy()
        elif name.endswith("prompt"):
            out[name] = rng.normal(0.0, 1.0, shape)
        else:
            out[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
    return out


def _init_head(cfg: ModelConfig, rng: np.random.Generator):
    return {"head.W": rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), (cfg.hidden, cfg.num_classes)),
            "head.b": np.zeros(cfg.num_classes)}


@dataclass
class BaseWeights:
    """Frozen pretrained encoder weights (plus the masked-token head)."""

    config: ModelConfig
    params: dict[str, np.ndarray] = field(repr=False)

    def checksum(self) -> str:
        return _digest(self.params)


def _digest(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# model


class Encoder:
    """Base encoder + PEFT delta + classifier head."""

    def __init__(self, cfg: ModelConfig, base: BaseWeights | dict | None = None, seed: int = 0):
        self.config = cfg
        rng = np.random.default_rng(seed)
        if base is None:
            arrays = _init_base(cfg, np.random.default_rng([seed, 1]))
        else:
            arrays = base.params if isinstance(base, BaseWeights) else base
            arrays = {k: v.copy() for k, v in arrays.items()}
        full = cfg.peft_kind == "full"
        self.base = {k: Tensor(v, requires_grad=full, name=k) for k, v in arrays.items()}
        self.delta = {k: Tensor(v, requires_grad=True, name=k)
                      for k, v in _init_delta(cfg, arrays, rng).items()}
        self.head = {k: Tensor(v, requires_grad=True, name=k) for k, v in _init_head(cfg, rng).items()}
        self.forward_count = 0

    # -- parameter views ---------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {**self.base, **self.delta, **self.head}

    def trainable_parameters(self) -> dict[str, Tensor]:
        if self.config.peft_kind == "full":
            return {k: v for k, v in self.base.items() if not k.startswith("mlm.")} | self.head
        return {**self.delta, **self.head}

    def frozen_checksum(self) -> str:
        return _digest({k: v.data for k, v in self.base.items()})

    def base_weights(self) -> BaseWeights:
        return BaseWeights(self.config, {k: v.data.copy() for k, v in self.base.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def copy(self) -> "Encoder":
        """Independent snapshot; later updates to ``self`` do not reach it."""
        other = object.__new__(Encoder)
        other.config = self.config
        other.forward_count = 0
        for group in ("base", "delta", "head"):
            src = getattr(self, group)
            setattr(other, group, {k: Tensor(v.data.copy(), v.requires_grad, k) for k, v in src.items()})
        return other

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.grad = None

    # -- forward -----------------------------------------------------------
    def hidden_states(self, ids: np.ndarray, pad_mask: np.ndarray, gates: np.ndarray | None = None) -> Tensor:
        """Final-layer token states (B, T, d).

        ``gates`` is (B, L) with entries in {0, 1}; None means every PEFT
        layer is active.
        """
        cfg = self.config
        B, T = ids.shape
        if T > cfg.max_len:
            raise ad.ShapeError("forward", ids.shape, (cfg.max_len,))
        if gates is not None:
            gates = np.asarray(gates, dtype=float)
            if gates.shape != (B, cfg.num_layers):
                raise ValueError(f"routing mask shape {gates.shape} != (batch={B}, layers={cfg.num_layers})")
        P = self.base
        pos = Tensor(P["emb.pos"].data[:T]) if not P["emb.pos"].requires_grad else None
        x = ad.embedding(P["emb.tok"], ids)
        if pos is None:
            pos = ad.reshape(ad.embedding(P["emb.pos"], np.arange(T)), (1, T, cfg.hidden))
        x = ad.layer_norm(ad.add(x, pos), P["emb.ln.g"], P["emb.ln.b"])
        key_bias = np.where(pad_mask > 0, 0.0, NEG_INF)[:, None, None, :]
        for l in range(cfg.num_layers):
            g = None if gates is None else gates[:, l]
            x = self._layer(l, x, key_bias, g)
        self.forward_count += B
        return x

    def forward(self, ids: np.ndarray, pad_mask: np.ndarray, gates: np.ndarray | None = None) -> Tensor:
        """Class logits (B, C) from mean-pooled real-token states."""
        h = self.hidden_states(ids, pad_mask, gates)
        B, T = ids.shape
        pool = (pad_mask / pad_mask.sum(axis=1, keepdims=True))[:, None, :]
        pooled = ad.reshape(ad.matmul(Tensor(pool), h), (B, self.config.hidden))
        return ad.linear(pooled, self.head["head.W"], self.head["head.b"])

    __call__ = forward

    def _layer(self, l: int, x: Tensor, key_bias: np.ndarray, g: np.ndarray | None) -> Tensor:
        cfg = self.config
        P, D = self.base, self.delta
        p = f"l{l}."
        kind = cfg.peft_kind
        B, T, d = x.shape
        H, dh = cfg.heads, d // cfg.heads
        # gate states: "on" for every sample, "off" for every sample, or mixed
        on = g is None or bool(g.all())
        off = g is not None and not g.any()
        gate = None if (on or off) else Tensor(g.reshape(B, 1, 1))

        def bias(name):
            if kind != "bitfit" or off:
                return P[p + name]
            train = D[p + "bitfit." + name]
            if on:
                return train
            # per-sample choice between trainable and stored pretrained bias
            return ad.add(ad.mul(gate, train), Tensor((1.0 - g).reshape(B, 1, 1) * P[p + name].data))

        def gated(t):
            return t if gate is None else ad.mul(gate, t)

        def proj(m):
            out = ad.linear(x, P[p + m + ".W"], bias(m + ".b"))
            if kind == "lora" and m in "qv" and not off:
                low = ad.matmul(ad.matmul(x, D[f"{p}lora_{m}.A"]), D[f"{p}lora_{m}.B"])
                if cfg.lora_scale != 1.0:
                    low = ad.mul(low, cfg.lora_scale)
                out = ad.add(out, gated(low))
            return out

        q, k, v = proj("q"), proj("k"), proj("v")
        kb = key_bias
        if kind == "prompt" and not off:
            prompt = D[p + "prompt"]
            n = prompt.shape[0]
            pk = ad.linear(prompt, P[p + "k.W"], P[p + "k.b"])
            pv = ad.linear(prompt, P[p + "v.W"], P[p + "v.b"])
            k = ad.concat([ad.broadcast_to(pk, (B, n, d)), k], axis=1)
            v = ad.concat([ad.broadcast_to(pv, (B, n, d)), v], axis=1)
            # gated-off samples cannot attend to the prompt keys
            pb = np.zeros((B, 1, 1, n))
            if g is not None:
                pb[g == 0] = NEG_INF
            kb = np.concatenate([pb, np.broadcast_to(key_bias, (B, 1, 1, T))], axis=-1)
        Tk = k.shape[1]
        qh = ad.transpose(ad.reshape(q, (B, T, H, dh)), (0, 2, 1, 3))
        kh = ad.transpose(ad.reshape(k, (B, Tk, H, dh)), (0, 2, 3, 1))
        vh = ad.transpose(ad.reshape(v, (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = ad.add(ad.mul(ad.matmul(qh, kh), 1.0 / np.sqrt(dh)), Tensor(kb))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), vh)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
        a = ad.linear(ctx, P[p + "o.W"], bias("o.b"))
        if kind == "adapter" and not off:
            a = ad.add(a, gated(self._adapter(p + "ad_attn", a)))
        x = ad.layer_norm(ad.add(x, a), P[p + "ln1.g"], bias("ln1.b"))
        f = ad.gelu(ad.linear(x, P[p + "ff1.W"], bias("ff1.b")))
        f = ad.linear(f, P[p + "ff2.W"], bias("ff2.b"))
        if kind == "adapter" and not off:
            f = ad.add(f, gated(self._adapter(p + "ad_ffn", f)))
        return ad.layer_norm(ad.add(x, f), P[p + "ln2.g"], bias("ln2.b"))

    def _adapter(self, site: str, h: Tensor) -> Tensor:
        D = self.delta
        z = ad.gelu(ad.linear(h, D[site + ".down.W"], D[site + ".down.b"]))
        return ad.linear(z, D[site + ".up.W"], D[site + ".up.b"])

    # -- eval helpers ------------------------------------------------------
    def predict_proba(self, ids, pad_mask, gates=None, batch_size: int = 500) -> np.ndarray:
        out = []
        for s in range(0, len(ids), batch_size):
            sl = slice(s, s + batch_size)
            g = None if gates is None else gates[sl]
            z = self.forward(ids[sl], pad_mask[sl], g).data
            z = np.exp(z - z.max(axis=1, keepdims=True))
            out.append(z / z.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes))


# ---------------------------------------------------------------------------
# masked-token pretraining of the base


def _mlm_batch(ids: np.ndarray, rng: np.random.Generator, mask_prob: float):
    pick = (rng.random(ids.shape) < mask_prob) & (ids != PAD_ID)
    pick[:, 0] = False  # never the [CLS] slot
    # guarantee one target per row
    lengths = (ids != PAD_ID).sum(axis=1)
    forced = 1 + (rng.random(len(ids)) * np.maximum(lengths - 1, 1)).astype(int)
    pick[np.arange(len(ids)), np.minimum(forced, ids.shape[1] - 1)] |= lengths > 1
    pick &= ids != PAD_ID
    masked = np.where(pick, MASK_ID, ids)
    return masked, pick


def mlm_loss(model: Encoder, ids: np.ndarray, pad_mask: np.ndarray, rng: np.random.Generator,
             mask_prob: float = 0.15) -> Tensor:
    masked, pick = _mlm_batch(ids, rng, mask_prob)
    h = model.hidden_states(masked, pad_mask)
    B, T, d = h.shape
    logits = ad.linear(h, model.base["mlm.W"], model.base["mlm.b"])
    per_tok = ad.cross_entropy(ad.reshape(logits, (B * T, -1)), ids.reshape(-1))
    w = pick.reshape(-1) / max(pick.sum(), 1)
    return ad.sum_(ad.mul(per_tok, Tensor(w)))


def pretrain_base(corpus: Dataset, cfg: ModelConfig, steps: int = 300, seed: int = 0,
                  lr: float = 1e-3, batch_size: int = 64) -> BaseWeights:
    """Train the encoder on masked-token prediction over ``corpus``; return frozen weights."""
    from .trainer import Adam  # noqa: cyclic at import time

    if len(corpus) == 0:
        raise ValueError("pretrain_base: empty corpus")
    full_cfg = ModelConfig(**{**asdict(cfg), "peft_kind": "full"})
    model = Encoder(full_cfg, None, seed=seed)
    ids, pad = corpus.encode(cfg.max_len)
    rng = np.random.default_rng([seed, 2])
    params = {k: v for k, v in model.base.items()}
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        idx = rng.choice(len(ids), size=min(batch_size, len(ids)), replace=False)
        model.zero_grad()
        with Tape() as tape:
            loss = mlm_loss(model, ids[idx], pad[idx], rng)
        tape.backward(loss)
        opt.step()
    return BaseWeights(cfg, {k: v.data.copy() for k, v in model.base.items()})


# ---------------------------------------------------------------------------
# checkpoints: one .npz holding a JSON header plus every array by group/name


def save_checkpoint(model: Encoder, path: str | Path) -> None:
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(model.config)}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for group in ("base", "delta", "head"):
        for k, v in getattr(model, group).items():
            arrays[f"{group}/{k}"] = v.data
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path: str | Path) -> Encoder:
    with np.load(path) as z:
        header = json.loads(z["__header__"].tobytes().decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')}")
        cfg = ModelConfig(**header["config"])
        groups: dict[str, dict[str, np.ndarray]] = {"base": {}, "delta": {}, "head": {}}
        for key in z.files:
            if key == "__header__":
                continue
            group, name = key.split("/", 1)
            groups[group][name] = z[key]
    model = Encoder(cfg, groups["base"])
    for group in ("delta", "head"):
        target = getattr(model, group)
        if set(target) != set(groups[group]):
            raise ValueError(f"{path}: {group} parameters do not match config")
        for k, v in groups[group].items():
            target[k].data = v.copy()
    return model
