"""AdamW with cosine annealing and the per-step training routine."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .data import CELL, SceneSample, downsample_labels
from .losses import LossWeights, Targets, compute_loss
from .metrics import ConfusionMatrix
from .model import PBSeg, semantic_inference
from .tensor import Tensor, no_grad


class NonFiniteLossError(FloatingPointError):
    pass


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class AdamW:
    """Adam moments with decoupled weight decay (applied as ``p -= lr*wd*p``)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sample_targets(sample: SceneSample) -> Targets:
    return Targets.from_raster(downsample_labels(sample.label_raster, CELL), sample.num_classes)


def train_step(
    model: PBSeg,
    batch: Sequence[SceneSample],
    opt: AdamW,
    lr: float,
    weights: LossWeights | None = None,
) -> float:
    """Forward, loss, backward and one optimizer update; returns the mean loss."""
    weights = weights or LossWeights.from_config(model.config)
    total = 0.0
    for sample in batch:
        preds = model(Tensor(sample.image))
        # matching needs finite costs, so catch bad predictions before it
        finite = all(np.isfinite(p.class_logits.data).all() and np.isfinite(p.mask_logits.data).all() for p in preds)
        value = math.nan
        if finite:
            loss, _ = compute_loss(preds, sample_targets(sample), weights)
            value = loss.item()
        if not math.isfinite(value):
            opt.zero_grad()
            raise NonFiniteLossError(f"non-finite loss {value} on scene seed {sample.seed}")
        (loss * (1.0 / len(batch))).backward()
        total += value
    opt.step(lr)
    opt.zero_grad()
    return total / len(batch)


def predict_raster(model: PBSeg, image: np.ndarray) -> np.ndarray:
    with no_grad():
        preds = model(Tensor(image))
    return semantic_inference(preds[-1])[1]


def evaluate(model: PBSeg, samples: Sequence[SceneSample]) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.config.num_classes)
    for s in samples:
        cm.accumulate(s.label_raster, predict_raster(model, s.image))
    return cm
