"""Matching costs and the deep-supervised mask-classification loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from . import tensor as T
from .matching import MatchResult, hungarian
from .model import MaskPrediction, ModelConfig
from .tensor import Tensor


@dataclass
class Targets:
    labels: np.ndarray  # G class ids
    masks: np.ndarray  # G x h x w binary

    @classmethod
    def from_raster(cls, raster: np.ndarray, num_classes: int) -> "Targets":
        present = [c for c in range(num_classes) if np.any(raster == c)]
        masks = np.stack([(raster == c) for c in present]).astype(np.float64) if present else np.zeros((0, *raster.shape))
        return cls(np.array(present, dtype=np.int64), masks)


@dataclass
class LossWeights:
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    null: float = 0.1

    @classmethod
    def from_config(cls, config: ModelConfig) -> "LossWeights":
        return cls(config.lambda_cls, config.lambda_bce, config.lambda_dice, config.null_weight)


def sigmoid_bce(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of logits against {0,1} targets."""
    return (T.softplus(logits) - logits * Tensor(targets)).mean()


def dice_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over masks of ``1 - (2 sum(s*g) + 1) / (sum(s) + sum(g) + 1)``, ``s = sigmoid``."""
    s = T.sigmoid(logits.reshape(logits.shape[0], -1))
    g = np.asarray(targets, dtype=np.float64).reshape(s.shape)
    num = (s * Tensor(g)).sum(axis=1) * 2.0 + 1.0
    den = s.sum(axis=1) + (g.sum(axis=1) + 1.0)
    return (1.0 - num / den).mean()


def class_loss(class_logits: Tensor, target_classes: np.ndarray, null_class: int, null_weight: float) -> Tensor:
    """Weighted cross-entropy; the null class is down-weighted."""
    logp = T.log_softmax(class_logits, axis=-1)
    L = class_logits.shape[0]
    w = np.where(target_classes == null_class, null_weight, 1.0)
    pick = np.zeros(logp.shape)
    pick[np.arange(L), target_classes] = w
    return -(logp * Tensor(pick)).sum() / float(w.sum())


def match_cost(pred: MaskPrediction, targets: Targets, weights: LossWeights) -> np.ndarray:
    """``G x L`` pairwise cost from class probability, mask BCE and Dice."""
    probs = softmax(pred.class_logits.data, axis=-1)
    L = probs.shape[0]
    x = pred.mask_logits.data.reshape(L, -1)
    P = x.shape[1]
    y = targets.masks.reshape(len(targets.labels), P)
    cost_cls = -probs[:, targets.labels].T
    sp = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    cost_bce = (sp.sum(axis=1)[None, :] - y @ x.T) / P
    s = expit(x)
    cost_dice = 1.0 - (2.0 * (y @ s.T) + 1.0) / (s.sum(axis=1)[None, :] + y.sum(axis=1)[:, None] + 1.0)
    return weights.cls * cost_cls + weights.bce * cost_bce + weights.dice * cost_dice


def hungarian_match(pred: MaskPrediction, targets: Targets, weights: LossWeights) -> MatchResult:
    L = pred.class_logits.shape[0]
    if len(targets.labels) > L:
        raise ValueError(f"{len(targets.labels)} ground-truth masks exceed {L} queries")
    return hungarian(match_cost(pred, targets, weights))


def layer_loss(pred: MaskPrediction, targets: Targets, match: MatchResult, weights: LossWeights) -> Tensor:
    L, C1 = pred.class_logits.shape
    null = C1 - 1
    target_classes = np.full(L, null, dtype=np.int64)
    target_classes[match.assignment] = targets.labels
    loss = class_loss(pred.class_logits, target_classes, null, weights.null) * weights.cls
    if len(targets.labels):
        matched = T.take(pred.mask_logits, match.assignment, axis=0)
        loss = loss + sigmoid_bce(matched, targets.masks) * weights.bce
        loss = loss + dice_loss(matched, targets.masks) * weights.dice
    return loss


def compute_loss(
    preds: list[MaskPrediction],
    targets: Targets,
    weights: LossWeights,
    matches: list[MatchResult] | None = None,
) -> tuple[Tensor, list[MatchResult]]:
    """Sum of per-prediction losses, each with its own bipartite matching.

    Passing ``matches`` freezes the assignment (used for gradient checks).
    """
    if matches is None:
        matches = [hungarian_match(p, targets, weights) for p in preds]
    total = None
    for pred, match in zip(preds, matches):
        term = layer_loss(pred, targets, match, weights)
        total = term if total is None else total + term
    return total, matches
