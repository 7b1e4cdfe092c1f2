#!/usr/bin/env python3
"""
Perturbation generation: random starts, FGSM signs, the FGSM-RS delta rule,
per-example momentum starts for FGSM-MEP, multi-step PGD and suite evaluation.
"""
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from .nn_core import ModelState, forward, per_example_loss_and_input_grad
from .utils import InputError, NumericError, log

DELTA_DISTRIBUTIONS = ("uniform", "gaussian")
DEFAULT_SUITE = ["clean", "perturbed", "fgsm", "pgd10", "pgd20", "pgd50"]

_PGD_NAME = re.compile(r"^pgd(\d+)$")


@dataclass
class PerturbationBatch:
    """
    Additive perturbation bounded in infinity norm.

    Attributes:
        delta: Tensor shaped like the image batch
        budget: Infinity-norm bound xi
    """
    delta: torch.Tensor
    budget: float

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """x + delta clamped to the image range."""
        return torch.clamp(x + self.delta, 0.0, 1.0)

    def within_budget(self) -> bool:
        return bool((self.delta.abs() <= self.budget).all())


def _generator(rng_seed: Optional[int], generator: Optional[torch.Generator]) -> Optional[torch.Generator]:
    if generator is not None:
        return generator
    if rng_seed is None:
        return None
    gen = torch.Generator()
    gen.manual_seed(int(rng_seed))
    return gen


def init_delta_random(shape: Sequence[int], xi: float, rng_seed: Optional[int] = None,
                      generator: Optional[torch.Generator] = None,
                      distribution: str = "uniform") -> PerturbationBatch:
    """
    Draws a random start inside the xi ball.

    Args:
        shape: Shape of the perturbation
        xi: Budget (>= 0)
        rng_seed: Seed for a private generator (ignored when generator is given)
        generator: Generator to consume
        distribution: uniform on [-xi, xi], or a standard normal clipped to [-xi, xi]

    Raises:
        InputError: If xi is negative or the distribution is unknown
    """
    if xi < 0:
        raise InputError(f"Budget must be non-negative, got {xi}")
    if distribution not in DELTA_DISTRIBUTIONS:
        raise InputError(f"Unknown delta distribution '{distribution}'")
    gen = _generator(rng_seed, generator)
    if distribution == "uniform":
        delta = (torch.rand(tuple(shape), generator=gen) * 2.0 - 1.0) * xi
    else:
        delta = torch.randn(tuple(shape), generator=gen)
    return PerturbationBatch(torch.clamp(delta, -xi, xi), xi)


def straight_through_sign(g: torch.Tensor) -> torch.Tensor:
    """sign(g) in the forward pass, identity in the backward pass."""
    return torch.sign(g).detach() + (g - g.detach())


def fgsm_sign(model: ModelState, x: torch.Tensor, delta0: torch.Tensor, y: torch.Tensor,
              training: bool = False, create_graph: bool = False) -> torch.Tensor:
    """
    sign of the input gradient of the cross-entropy at clamp(x + delta0).

    Args:
        model: Model under attack
        x: Clean images
        delta0: Start perturbation
        y: Labels
        training: Forward in training mode (batch statistics)
        create_graph: Keep the graph to the parameters; the result then carries a
            straight-through gradient so penalties on it reach the model

    Returns:
        Tensor like x with entries in {-1, 0, +1}
    """
    x_start = torch.clamp(x + delta0, 0.0, 1.0)
    if not create_graph:
        _, grad = per_example_loss_and_input_grad(model, x_start, y, training=training)
        return torch.sign(grad)

    x_var = x_start.detach().requires_grad_(True)
    with torch.enable_grad():
        logits = forward(model, x_var, training=training)
        loss = F.cross_entropy(logits, y)
        if not torch.isfinite(loss):
            raise NumericError("Non-finite loss while computing FGSM signs",
                               {"loss": float(loss.detach()), "epoch": model.epoch})
        grad, = torch.autograd.grad(loss, x_var, create_graph=True)
    return straight_through_sign(grad)


def fgsm_rs_delta(delta0: torch.Tensor, signs: torch.Tensor, epsilon: float, xi: float) -> PerturbationBatch:
    """
    One FGSM step from delta0 of size epsilon, clipped to [-xi, xi] elementwise.

    Raises:
        InputError: If epsilon or xi is negative
    """
    if epsilon < 0 or xi < 0:
        raise InputError(f"epsilon and xi must be non-negative, got {epsilon}, {xi}")
    return PerturbationBatch(torch.clamp(delta0 + epsilon * signs, -xi, xi), xi)


class MepBuffer:
    """
    Per-example momentum perturbations for FGSM-MEP, indexed by stable example id.

    Attributes:
        rows: Tensor [num_examples, C, H, W]
        initialized: Bool tensor [num_examples]
        decay: Momentum decay mu in [0, 1)
        xi: Budget every row is clipped to
    """

    def __init__(self, num_examples: int, image_shape: Sequence[int], xi: float, decay: float = 0.9,
                 distribution: str = "uniform"):
        if not 0.0 <= decay < 1.0:
            raise InputError(f"MEP decay must be in [0, 1), got {decay}")
        self.rows = torch.zeros((num_examples, *image_shape))
        self.initialized = torch.zeros(num_examples, dtype=torch.bool)
        self.decay = float(decay)
        self.xi = float(xi)
        self.distribution = distribution

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def _check_ids(self, ids: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(ids, dtype=torch.long)
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= len(self)):
            bad = ids[(ids < 0) | (ids >= len(self))].tolist()
            raise InputError(f"Unknown example ids {bad[:5]} (buffer holds {len(self)})")
        return ids

    def init(self, ids, generator: Optional[torch.Generator] = None) -> PerturbationBatch:
        """Stored rows for ids; rows never written before get a random start first."""
        ids = self._check_ids(ids)
        cold = ids[~self.initialized[ids]]
        if cold.numel():
            start = init_delta_random((cold.numel(), *self.rows.shape[1:]), self.xi,
                                      generator=generator, distribution=self.distribution)
            self.rows[cold] = start.delta
            self.initialized[cold] = True
        return PerturbationBatch(torch.clamp(self.rows[ids], -self.xi, self.xi), self.xi)

    def update(self, ids, signs: torch.Tensor, epsilon: float) -> "MepBuffer":
        """row <- clip(mu * row + epsilon * signs, -xi, xi)"""
        ids = self._check_ids(ids)
        new_rows = torch.clamp(self.decay * self.rows[ids] + epsilon * signs.detach(), -self.xi, self.xi)
        self.rows[ids] = new_rows
        self.initialized[ids] = True
        return self


def mep_init(buffer: MepBuffer, ids, generator: Optional[torch.Generator] = None) -> PerturbationBatch:
    return buffer.init(ids, generator)


def mep_update(buffer: MepBuffer, ids, signs: torch.Tensor, epsilon: float) -> MepBuffer:
    return buffer.update(ids, signs, epsilon)


def pgd_attack(model: ModelState, x: torch.Tensor, y: torch.Tensor, steps: int, step_size: float,
               xi: float, restarts: int = 1, random_start: bool = True, keep_best: bool = True,
               generator: Optional[torch.Generator] = None, training: bool = False) -> torch.Tensor:
    """
    Iterated sign ascent projected onto the xi ball around x and onto [0, 1].

    Args:
        model: Model under attack
        x: Clean images
        y: Labels
        steps: Number of ascent steps (>= 1)
        step_size: Size of each sign step
        xi: Budget
        restarts: Independent starts; the per-example result with maximal loss is kept
        random_start: Start uniformly inside the ball instead of at x
        keep_best: Return each example's highest-loss iterate rather than the last one
        generator: Generator for random starts
        training: Forward in training mode

    Returns:
        Adversarial images
    """
    if steps < 1:
        raise InputError(f"PGD needs at least one step, got {steps}")
    if restarts < 1:
        raise InputError(f"PGD needs at least one restart, got {restarts}")
    if xi == 0:
        return x.clone()

    lower = torch.clamp(x - xi, 0.0, 1.0)
    upper = torch.clamp(x + xi, 0.0, 1.0)
    best_x = x.clone()
    best_loss = torch.full((x.shape[0],), -float("inf"))

    for _ in range(restarts):
        if random_start:
            x_adv = init_delta_random(x.shape, xi, generator=generator).apply(x)
        else:
            x_adv = x.clone()
        run_x = x_adv.clone()
        run_loss = torch.full((x.shape[0],), -float("inf"))
        for _ in range(steps):
            losses, grad = per_example_loss_and_input_grad(model, x_adv, y, training=training)
            if keep_best:
                improved = losses > run_loss
                run_x[improved] = x_adv[improved]
                run_loss = torch.where(improved, losses, run_loss)
            x_adv = torch.min(torch.max(x_adv + step_size * torch.sign(grad), lower), upper)
        with torch.no_grad():
            final_losses = F.cross_entropy(forward(model, x_adv, training=training), y, reduction="none")
        improved = final_losses > run_loss if keep_best else torch.ones_like(final_losses, dtype=torch.bool)
        run_x[improved] = x_adv[improved]
        run_loss = torch.where(improved, final_losses, run_loss)

        better = run_loss > best_loss
        best_x[better] = run_x[better]
        best_loss = torch.where(better, run_loss, best_loss)
    return best_x


def parse_attack_name(name: str) -> Tuple[str, int]:
    """
    Maps a suite entry to (kind, steps): clean, perturbed, fgsm or pgdN.

    Raises:
        InputError: On an unknown name
    """
    if name in ("clean", "perturbed"):
        return name, 0
    if name == "fgsm":
        return name, 1
    match = _PGD_NAME.match(name)
    if match and int(match.group(1)) >= 1:
        return "pgd", int(match.group(1))
    raise InputError(f"Unknown attack '{name}' (expected clean, perturbed, fgsm or pgdN)")


@dataclass
class AttackSuite:
    """
    Attacks evaluated by evaluate().

    Attributes:
        attacks: Names among clean, perturbed, fgsm, pgdN
        xi: Evaluation budget
        step_size: PGD step size (xi / 4 when None)
        restarts: PGD restarts
        batch_size: Evaluation batch size
        seed: Seed for perturbed starts and PGD random starts
    """
    attacks: List[str] = field(default_factory=lambda: list(DEFAULT_SUITE))
    xi: float = 16 / 255
    step_size: Optional[float] = None
    restarts: int = 1
    batch_size: int = 256
    seed: int = 0

    def resolved_step_size(self) -> float:
        return self.xi / 4 if self.step_size is None else self.step_size

    def validate(self) -> None:
        for name in self.attacks:
            parse_attack_name(name)
        if self.xi < 0:
            raise InputError(f"Attack budget must be non-negative, got {self.xi}")


def evaluate(model: ModelState, dataset, suite: AttackSuite, show_progress: bool = False) -> Dict[str, float]:
    """
    Top-1 accuracy (percent) under every attack of the suite.

    Args:
        model: Model to evaluate (evaluation mode is used throughout)
        dataset: ImageDataset
        suite: Attacks and their parameters
        show_progress: Show a progress bar

    Returns:
        Ordered mapping '<attack>_acc' -> accuracy in [0, 100]
    """
    suite.validate()
    if len(dataset) == 0:
        raise InputError("Cannot evaluate on an empty dataset")
    parsed = [(name, *parse_attack_name(name)) for name in suite.attacks]
    correct = {name: 0 for name in suite.attacks}
    generator = torch.Generator()
    generator.manual_seed(int(suite.seed))
    step_size = suite.resolved_step_size()

    batches = dataset.loader(suite.batch_size, shuffle=False)
    for x, y, _ in tqdm(batches, desc="Evaluating", unit="batch", leave=False, disable=not show_progress):
        for name, kind, steps in parsed:
            if kind == "clean":
                x_eval = x
            elif kind == "perturbed":
                x_eval = init_delta_random(x.shape, suite.xi, generator=generator).apply(x)
            elif kind == "fgsm":
                signs = fgsm_sign(model, x, torch.zeros_like(x), y)
                x_eval = fgsm_rs_delta(torch.zeros_like(x), signs, suite.xi, suite.xi).apply(x)
            else:
                x_eval = pgd_attack(model, x, y, steps, step_size, suite.xi, suite.restarts,
                                    generator=generator)
            with torch.no_grad():
                preds = forward(model, x_eval).argmax(dim=1)
            correct[name] += int((preds == y).sum())

    total = len(dataset)
    results = OrderedDict((f"{name}_acc", 100.0 * correct[name] / total) for name in suite.attacks)
    log.debug("Evaluation: " + ", ".join(f"{k}={v:.2f}" for k, v in results.items()))
    return results
