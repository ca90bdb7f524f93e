"""Training objective: BCE+Dice supervised loss, cross-consistency loss and
the Gaussian warm-up weight for the unsupervised term.

The Dice term is batch-aggregated (sums over the whole batch, smoothing 1e-5)
and the BCE term is the pixel-mean computed in the numerically stable logits
form, weighted 0.5.  The consistency distance is the pixel-mean squared error
between auxiliary probability maps and the detached main probability map.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import NumericalError

DICE_SMOOTH = 1e-5
BCE_WEIGHT = 0.5


@dataclass
class WarmupSchedule:
    """lambda(t) = w_max * exp(-5 (1 - t/t_max)^2), clamped to w_max past t_max."""

    w_max: float = 0.1
    t_max: int = 1

    def validate(self):
        errs = []
        if self.w_max <= 0:
            errs.append(f"w_max must be > 0, got {self.w_max}")
        if self.t_max < 1:
            errs.append(f"t_max must be >= 1, got {self.t_max}")
        return errs


@dataclass
class LossReport:
    supervised: float
    unsupervised: float
    lam: float
    total: float
    per_decoder_supervised: list = field(default_factory=list)  # aux_1..aux_K, main


def bce_dice(logits, target):
    """0.5 * BCE + Dice loss between logits and a binary target of equal shape."""
    if logits.shape != target.shape:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target must be binary (values in {0,1})")
    target = target.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, target)
    p = torch.sigmoid(logits)
    inter = (p * target).sum()
    dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (p.sum() + target.sum() + DICE_SMOOTH)
    return BCE_WEIGHT * bce + dice


def supervised_loss(outputs, target):
    """Mean BCE+Dice over the main and all auxiliary decoders on labeled data.

    Returns (loss, per_decoder) with per_decoder ordered aux_1..aux_K, main.
    """
    per_decoder = [bce_dice(a, target) for a in outputs.aux_logits]
    per_decoder.append(bce_dice(outputs.main_logits, target))
    loss = torch.stack(per_decoder).mean()
    return loss, [float(v.detach()) for v in per_decoder]


def consistency_loss(outputs):
    """Pixel-mean squared difference between each auxiliary probability map and
    the main probability map, averaged over decoders.

    The main map is detached: no gradient reaches the main decoder through
    this term.
    """
    if not outputs.aux_logits:
        raise ValueError("consistency loss needs at least one auxiliary output")
    p_main = torch.sigmoid(outputs.main_logits).detach()
    terms = [F.mse_loss(torch.sigmoid(a), p_main) for a in outputs.aux_logits]
    return torch.stack(terms).mean()


def lambda_at(step, schedule):
    """Gaussian warm-up weight at an optimization step."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= schedule.t_max:
        return schedule.w_max
    return schedule.w_max * math.exp(-5.0 * (1.0 - step / schedule.t_max) ** 2)


def total_loss(supervised, unsupervised, step, schedule, per_decoder=()):
    """Combine the loss components into a LossReport; total = sup + lambda * unsup."""
    sup = float(supervised)
    unsup = float(unsupervised)
    for name, v in (("supervised", sup), ("unsupervised", unsup)):
        if not math.isfinite(v):
            raise NumericalError(f"{name} loss is not finite: {v}")
    lam = lambda_at(step, schedule)
    return LossReport(sup, unsup, lam, sup + lam * unsup, list(per_decoder))
