#!/usr/bin/env python3
"""
Loss terms added to the FAT objective: the class trigger bank and its auxiliary
loss, the prediction regularizer, weight-outlier suppression and the l2 / clipping
baselines it is compared with.
"""
from typing import Sequence

import torch

from .nn_core import ModelState
from .utils import InputError

OUTLIER_MODES = ("magnitude", "signed")
TRIGGER_DECAY = 0.9
TRIGGER_BLEND = 0.1


class TriggerBank:
    """
    Per-class momentum estimate of the class-consistent sign pattern.

    Attributes:
        values: Tensor [K, *image_shape], zero at construction
        decay: Weight of the previous estimate
        blend: Weight of the batch mean
    """

    def __init__(self, num_classes: int, image_shape: Sequence[int],
                 decay: float = TRIGGER_DECAY, blend: float = TRIGGER_BLEND):
        self.values = torch.zeros((num_classes, *image_shape))
        self.decay = decay
        self.blend = blend

    @property
    def num_classes(self) -> int:
        return int(self.values.shape[0])

    def update(self, t: int, rows: torch.Tensor) -> "TriggerBank":
        """
        values[t] <- decay * values[t] + blend * mean(rows); rows are detached.

        Raises:
            InputError: If rows is empty or t is not a class of the bank
        """
        if not 0 <= int(t) < self.num_classes:
            raise InputError(f"Class {t} outside [0, {self.num_classes - 1}]")
        if rows.shape[0] == 0:
            raise InputError(f"No rows of class {t} to update the trigger bank with")
        self.values[int(t)] = self.decay * self.values[int(t)] + self.blend * rows.detach().mean(dim=0)
        return self

    def update_from_batch(self, signs: torch.Tensor, labels: torch.Tensor) -> "TriggerBank":
        """Updates every class present in labels; absent classes are untouched."""
        for t in torch.unique(labels).tolist():
            self.update(t, signs[labels == t])
        return self


def update_trigger_bank(bank: TriggerBank, t: int, rows: torch.Tensor) -> TriggerBank:
    return bank.update(t, rows)


def _safe_norm(diff: torch.Tensor) -> torch.Tensor:
    """Euclidean norm whose gradient at zero is zero instead of NaN."""
    squared = (diff * diff).sum()
    return torch.where(squared > 0, squared.clamp_min(1e-30).sqrt(), torch.zeros_like(squared))


def aux_trigger_loss(signs: torch.Tensor, labels: torch.Tensor, bank: TriggerBank, alpha: float,
                     per_example: bool = False) -> torch.Tensor:
    """
    -alpha * sum over classes present of || sign pattern of class t - bank[t] ||_2.

    Args:
        signs: Sign batch, possibly carrying a gradient to the model
        labels: Label batch
        bank: Trigger bank; never receives gradient
        alpha: Loss weight
        per_example: Average per-example distances instead of using the class-mean pattern

    Returns:
        Scalar tensor (<= 0)
    """
    if alpha == 0:
        return torch.zeros((), dtype=signs.dtype)
    total = torch.zeros((), dtype=signs.dtype)
    targets = bank.values.detach().to(signs.dtype)
    for t in torch.unique(labels).tolist():
        rows = signs[labels == t]
        if per_example:
            total = total + torch.stack([_safe_norm(row - targets[t]) for row in rows]).mean()
        else:
            total = total + _safe_norm(rows.mean(dim=0) - targets[t])
    return -alpha * total


def prediction_regularizer(logits_adv: torch.Tensor, logits_init: torch.Tensor, beta: float) -> torch.Tensor:
    """beta * batch mean of ||f(x + delta) - f(x + delta0)||^2."""
    if beta == 0:
        return torch.zeros((), dtype=logits_adv.dtype)
    return beta * ((logits_adv - logits_init) ** 2).sum(dim=1).mean()


def _conv_weights(model: ModelState):
    names = model.conv_layer_names
    if not names:
        raise InputError("Weight regularizers need at least one conv layer")
    for name in names:
        weight = model.layer(name).weight
        if weight.numel() == 0:
            raise InputError(f"Conv layer '{name}' has no weights")
        yield name, weight


def weight_outlier_loss(model: ModelState, eta: float, alpha_reg: float, mode: str = "magnitude") -> torch.Tensor:
    """
    Exponential penalty on conv weights far from their layer's mean magnitude.

    For each conv layer with mean magnitude w_bar, every weight contributes
    exp(d / (w_bar + alpha_reg) - eta) * d, where d = | |w| - w_bar | in magnitude
    mode and d = | w - w_bar | in signed mode.

    Args:
        model: Model whose conv layers are penalized
        eta: Deviation threshold (> 0)
        alpha_reg: Stabilizer added to the mean magnitude
        mode: magnitude or signed

    Raises:
        InputError: If the model has no conv layer, a conv layer is empty or mode is unknown
    """
    if mode not in OUTLIER_MODES:
        raise InputError(f"Unknown outlier mode '{mode}', expected one of {OUTLIER_MODES}")
    total = None
    for _, weight in _conv_weights(model):
        magnitude = weight.abs()
        w_bar = magnitude.mean()
        deviation = (magnitude - w_bar).abs() if mode == "magnitude" else (weight - w_bar).abs()
        term = (torch.exp(deviation / (w_bar + alpha_reg) - eta) * deviation).sum()
        total = term if total is None else total + term
    return total


def l2_baseline(model: ModelState, lam: float) -> torch.Tensor:
    """lam * sum of squared conv weights."""
    total = None
    for _, weight in _conv_weights(model):
        term = (weight * weight).sum()
        total = term if total is None else total + term
    return lam * total


def clip_baseline(model: ModelState, eta: float) -> ModelState:
    """
    Clamps every conv weight to |w| <= eta * w_bar, with w_bar the layer's mean magnitude before clipping.

    Raises:
        InputError: If eta is not positive
    """
    if eta <= 0:
        raise InputError(f"Clip threshold must be positive, got {eta}")
    with torch.no_grad():
        for _, weight in _conv_weights(model):
            threshold = float(eta * weight.abs().mean())
            weight.clamp_(-threshold, threshold)
    return model
