"""Quantization-aware training with a bit-level sparsity penalty.

Total loss = cross-entropy + coeff * (number of set bits in the hidden QCFS
outputs, averaged over the batch). Bit extraction has no useful derivative,
so the penalty's gradient is injected at each activation as
coeff * T * 1{0 < a < lambda}.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .ann import AnnModel, ConvBnBlock, QcfsActivation, ann_forward, levels_of_activation, qcfs
from .data import Dataset
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Loss became NaN/Inf; training aborted."""


@dataclass
class TrainConfig:
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    schedule: str = "cosine"
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    lam_min: float = 1e-3

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0 or self.epochs < 1 or self.batch < 1:
            raise ValueError("weight_decay >= 0, epochs >= 1 and batch >= 1 required")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class RegularizerConfig:
    coeff: float = 0.0

    def __post_init__(self):
        if self.coeff < 0:
            raise ValueError("regularizer coefficient must be >= 0")


@dataclass
class History:
    loss: list = field(default_factory=list)
    ce: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    bit_density: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def popcount(levels) -> np.ndarray:
    levels = np.asarray(levels, dtype=np.int64)
    count = np.zeros(levels.shape, dtype=np.int64)
    while np.any(levels):
        count += levels & 1
        levels = levels >> 1
    return count


def sparsity_loss(activations, acts, timesteps: int | None = None, coeff: float = 1.0) -> float:
    """coeff * total number of one-bits over the given hidden activations.

    ``activations`` and ``acts`` are parallel lists (one entry per hidden
    block; the output layer is never included).
    """
    if coeff == 0:
        return 0.0
    total = 0
    for a, act in zip(activations, acts):
        if timesteps is not None and (1 << timesteps) != act.q_steps:
            raise ValueError(f"bit count needs T = log2(Q) = {act.bits}, got {timesteps}")
        total += int(popcount(levels_of_activation(a, act)).sum())
    return coeff * float(total)


def sparsity_grad(a, act: QcfsActivation, timesteps: int, coeff: float):
    """Surrogate derivative of the bit penalty w.r.t. a: coeff * T * 1{0 < a < lambda}."""
    a = np.asarray(a)
    return np.where((a > 0) & (a < act.lam), coeff * timesteps, 0.0)


def _bit_penalty(a: Tensor, act: QcfsActivation, timesteps: int) -> Tensor:
    """Tape op: value = number of set bits, gradient = T * 1{0 < a < lambda}."""
    k = np.rint(a.data.astype(np.float64) * act.q_steps / act.lam).astype(np.int64)
    value = np.asarray(popcount(k).sum(), dtype=a.dtype)

    def _bw(g):
        return (sparsity_grad(a.data, act, timesteps, 1.0).astype(a.dtype) * g,)

    return tn.custom_op(value, (a,), _bw)


def mean_bit_density(model: AnnModel, images, batch: int = 256) -> float:
    """Fraction of one-bits over all hidden activation bit planes."""
    ones = total = 0
    for i in range(0, len(images), batch):
        _, acts = ann_forward(model, images[i:i + batch])
        for a, blk in zip(acts, model.blocks):
            ones += int(popcount(levels_of_activation(a, blk.act)).sum())
            total += a.size * blk.act.bits
    return ones / total if total else 0.0


def evaluate(model: AnnModel, data: Dataset, batch: int = 256) -> float:
    correct = 0
    for i in range(0, len(data), batch):
        logits, _ = ann_forward(model, data.images[i:i + batch])
        correct += int(np.sum(np.argmax(logits, axis=1) == data.labels[i:i + batch]))
    return correct / max(len(data), 1)


class _Params:
    """Tensor views of the model's trainable arrays plus optimizer state."""

    def __init__(self, model: AnnModel):
        self.model = model
        self.items = []     # (tensor, decay, setter)
        self.lams = []
        self.running_var = []
        for blk in model.blocks:
            self._add(blk, "weight", True)
            self._add(blk, "gamma", False)
            self._add(blk, "beta", False)
            lam = Tensor(np.array([blk.act.lam], dtype=np.float32), requires_grad=True)
            self.lams.append(lam)
            self.items.append((lam, False, None))
            self.running_var.append((blk.sigma.astype(np.float64) ** 2 - 1e-5).clip(min=0))
        self._add(model.head, "weight", True)
        self._add(model.head, "bias", False)
        self.velocity = [np.zeros_like(t.data) for t, _, _ in self.items]

    def _add(self, owner, attr, decay):
        t = Tensor(getattr(owner, attr), requires_grad=True)
        setattr(owner, attr, t.data)
        self.items.append((t, decay, (owner, attr)))

    def tensor(self, owner, attr) -> Tensor:
        for t, _, setter in self.items:
            if setter is not None and setter[0] is owner and setter[1] == attr:
                return t
        raise KeyError(attr)

    def zero_grad(self):
        for t, _, _ in self.items:
            t.grad = None


def _forward_train(model: AnnModel, params: _Params, x, cfg: TrainConfig, coeff: float):
    h = Tensor(x)
    acts, penalties = [], []
    bi = 0
    for layer in model.layers:
        if isinstance(layer, ConvBnBlock):
            h = tn.conv2d(h, params.tensor(layer, "weight"), layer.stride, layer.padding)
            h, mean, var = tn.batchnorm_train(h, params.tensor(layer, "gamma"),
                                              params.tensor(layer, "beta"), cfg.bn_eps)
            m = h.data.size // h.shape[1]
            unbiased = var * (m / max(m - 1, 1))
            layer.mu = (cfg.bn_momentum * layer.mu + (1 - cfg.bn_momentum) * mean).astype(np.float32)
            rv = params.running_var[bi]
            params.running_var[bi] = cfg.bn_momentum * rv + (1 - cfg.bn_momentum) * unbiased
            layer.sigma = tn.stabilized_sigma(params.running_var[bi], cfg.bn_eps).astype(np.float32)
            h = qcfs(h, params.lams[bi], layer.act)
            acts.append(h)
            if coeff > 0:
                penalties.append(_bit_penalty(h, layer.act, layer.act.bits))
            bi += 1
        else:
            h = tn.avgpool2d(h, layer.size)
    logits = tn.linear(tn.flatten(h), params.tensor(model.head, "weight"), params.tensor(model.head, "bias"))
    return logits, acts, penalties


def train(model: AnnModel, data: Dataset, tcfg: TrainConfig | None = None,
          rcfg: RegularizerConfig | None = None) -> tuple[AnnModel, History]:
    """Train ``model`` in place with SGD + momentum; returns (model, history).

    Weight decay touches conv and head weights only. BN uses batch
    statistics in training and keeps running estimates (stored as sigma =
    sqrt(var + eps)) for inference and conversion.
    """
    tcfg = tcfg or TrainConfig()
    rcfg = rcfg or RegularizerConfig()
    rng = np.random.default_rng(tcfg.seed)
    params = _Params(model)
    hist = History()
    n = len(data)
    for epoch in range(tcfg.epochs):
        if tcfg.schedule == "cosine":
            lr = tcfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / tcfg.epochs))
        else:
            lr = tcfg.lr
        order = rng.permutation(n)
        tot_loss = tot_ce = tot_sp = 0.0
        correct = 0
        for start in range(0, n, tcfg.batch):
            idx = order[start:start + tcfg.batch]
            x, y = data.images[idx], data.labels[idx]
            params.zero_grad()
            with Tape():
                logits, acts, penalties = _forward_train(model, params, x, tcfg, rcfg.coeff)
                ce = tn.cross_entropy(logits, y)
                loss = ce
                sp_val = 0.0
                if penalties:
                    sp = penalties[0]
                    for p in penalties[1:]:
                        sp = tn.add(sp, p)
                    sp_val = sp.item() / len(idx)
                    loss = tn.add(ce, tn.mul(sp, rcfg.coeff / len(idx)))
            if not np.isfinite(loss.item()):
                raise TrainingDivergedError(
                    f"loss became {loss.item()} at epoch {epoch + 1}, batch starting {start}; "
                    f"lr={lr:.4g}, coeff={rcfg.coeff}")
            tn.backward(loss)
            _sgd_step(params, lr, tcfg)
            tot_loss += loss.item() * len(idx)
            tot_ce += ce.item() * len(idx)
            tot_sp += sp_val * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
        hist.loss.append(tot_loss / n)
        hist.ce.append(tot_ce / n)
        hist.sparsity.append(tot_sp / n)
        hist.train_accuracy.append(correct / n)
        hist.lr.append(lr)
        log.debug("epoch %d loss %.4f acc %.3f", epoch + 1, tot_loss / n, correct / n)
    hist.bit_density.append(mean_bit_density(model, data.images))
    return model, hist


def _sgd_step(params: _Params, lr: float, cfg: TrainConfig):
    for i, (t, decay, setter) in enumerate(params.items):
        if t.grad is None:
            continue
        g = t.grad.astype(np.float32)
        if decay and cfg.weight_decay:
            g = g + np.float32(cfg.weight_decay) * t.data
        v = params.velocity[i]
        v *= np.float32(cfg.momentum)
        v += g
        t.data -= np.float32(lr) * v
    for blk, lam in zip(params.model.blocks, params.lams):
        lam.data[0] = max(float(lam.data[0]), cfg.lam_min)
        blk.act.lam = float(lam.data[0])
