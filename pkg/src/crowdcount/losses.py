"""Training objectives: confidence-weighted density loss, confidence guiding
loss, weather cross-entropy, and their combination

    total = density - lambda_c * confidence (+ lambda_w * weather).

The density term is, per level, the Euclidean norm over all pixels of
CM * (target - prediction), weighted by a per-level factor; the confidence
term is the sum of log confidences, which is always <= 0 and rewards gates
near 1. Both are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F

from .annotations import Weather
from .network import PredictionPyramid

LEVELS = (3, 4, 5, 6)

# Per-level weighting for the deeper backbone, whose finest refinement sits
# on a shallower stage: down-weight level 3.
RESNET_LEVEL_WEIGHTS = {3: 0.1, 4: 1.0, 5: 1.0, 6: 1.0}


@dataclass
class LossConfig:
    lambda_c: float = 1.0
    lambda_w: float = 0.01
    level_weights: dict[int, float] = field(
        default_factory=lambda: {lv: 1.0 for lv in LEVELS}
    )
    class_weights: Optional[torch.Tensor] = None  # 4-vector, defaults to uniform
    reduction: str = "sum-norm"  # "sum-norm" (Euclidean norm) or "mean-square"

    def __post_init__(self):
        if self.lambda_c < 0 or self.lambda_w < 0:
            raise ValueError("lambda_c and lambda_w must be nonnegative")
        if self.reduction not in ("sum-norm", "mean-square"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def _gated(pyramid: PredictionPyramid, level: int, target: torch.Tensor):
    pred = pyramid.density(level)
    cm = pyramid.confidence(level)
    if cm is None:
        return pred, target
    return cm * pred, cm * target


def density_loss(
    pyramid: PredictionPyramid,
    targets: dict[int, torch.Tensor],
    level_weights: Optional[dict[int, float]] = None,
    reduction: str = "sum-norm",
) -> torch.Tensor:
    """Sum over levels of weighted per-sample norms, averaged over the batch."""
    total = None
    for level in LEVELS:
        target = targets[level]
        pred = pyramid.density(level)
        if pred.shape != target.shape:
            raise ValueError(
                f"level {level}: prediction shape {tuple(pred.shape)} != "
                f"target shape {tuple(target.shape)}"
            )
        gated_pred, gated_target = _gated(pyramid, level, target)
        diff = gated_target - gated_pred
        if reduction == "sum-norm":
            per_sample = diff.flatten(1).norm(p=2, dim=1)
        else:
            per_sample = diff.flatten(1).pow(2).mean(dim=1)
        weight = 1.0 if level_weights is None else level_weights.get(level, 1.0)
        term = weight * per_sample.mean()
        total = term if total is None else total + term
    return total


def confidence_loss(pyramid: PredictionPyramid) -> torch.Tensor:
    """Sum of log confidences over every gated level, batch-averaged; <= 0."""
    total = None
    for level in LEVELS:
        cm = pyramid.confidence(level)
        if cm is None:
            continue  # implicit all-ones gate contributes log 1 = 0
        if (cm <= 0).any():
            raise ValueError("confidence values must be positive")
        term = cm.log().flatten(1).sum(dim=1).mean()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


def weather_loss(
    weather_logits: torch.Tensor,
    labels: torch.Tensor,
    class_weights: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Class-weighted cross-entropy over the 4 weather classes."""
    if weather_logits.dim() == 1:
        weather_logits = weather_logits.unsqueeze(0)
    if labels.dim() == 0:
        labels = labels.unsqueeze(0)
    if ((labels < 0) | (labels >= weather_logits.shape[1])).any():
        raise ValueError("weather label out of range")
    if class_weights is None:
        return F.cross_entropy(weather_logits, labels)
    # Plain average of per-sample weighted terms (no renormalization by the
    # weight sum), so each class's contribution is linear in its weight.
    class_weights = class_weights.to(weather_logits.dtype)
    per_sample = F.cross_entropy(weather_logits, labels, reduction="none")
    return (class_weights[labels] * per_sample).mean()


def inverse_frequency_weights(weathers: list[Weather]) -> torch.Tensor:
    """N_total / (n_classes * N_class) per class, computed from the train split.

    Absent classes get weight 0 (they can never appear in the loss).
    """
    counts = torch.zeros(4)
    for w in weathers:
        counts[w.value] += 1
    total = counts.sum()
    weights = torch.where(
        counts > 0, total / (4.0 * counts), torch.zeros_like(counts)
    )
    return weights


def total_loss(
    pyramid: PredictionPyramid,
    targets: dict[int, torch.Tensor],
    weather_labels: Optional[torch.Tensor],
    config: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Combined objective plus a component breakdown for logging."""
    l_d = density_loss(pyramid, targets, config.level_weights, config.reduction)
    l_c = confidence_loss(pyramid)
    total = l_d - config.lambda_c * l_c
    l_w_val = 0.0
    if pyramid.weather_logits is not None:
        if weather_labels is None:
            raise ValueError("class-conditioned model requires weather labels")
        l_w = weather_loss(pyramid.weather_logits, weather_labels, config.class_weights)
        total = total + config.lambda_w * l_w
        l_w_val = float(l_w.item())
    elif weather_labels is not None:
        raise ValueError("weather labels supplied to an unconditioned model")
    components = {
        "L_f": float(total.item()),
        "L_d": float(l_d.item()),
        "L_c": float(l_c.item()),
        "L_w": l_w_val,
    }
    return total, components
