#!/usr/bin/env python3
"""
Error-minimizing (unlearnable) poisons and the experiments that train on them:
the transfer of the weight-outlier constraint, the random-noise defense and the
clean-accuracy comparison across poisoning paradigms.
"""
import json
import time
import hashlib
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .attacks import AttackSuite, evaluate, init_delta_random
from .checkpoint import read_container, write_container
from .datasets import ImageDataset
from .diagnostics import weight_histogram
from .fat_train import TrainConfig, train
from .nn_core import ModelState, loss_and_param_grad, per_example_loss_and_input_grad, sgd_step
from .utils import FormatError, InputError, log, print_section_header

POISON_MODES = ("class_wise", "sample_wise")
TRANSFER_TRAINERS = ("standard", "adversarial", "standard_lreg")
# surrogate settings generate_poison reads
SURROGATE_FIELDS = ("batch_size", "lr_max", "momentum", "weight_decay")


@dataclass
class PoisonSpec:
    """
    Parameters of the error-minimizing poison and of the paradigm experiments.

    Attributes:
        budget: Infinity-norm bound of every perturbation
        mode: class_wise (one perturbation per class) or sample_wise
        generator_epochs: Outer rounds of the bi-level loop
        surrogate_steps: Surrogate optimizer steps per round
        perturb_steps: Perturbation steps per batch and round
        step_size: Perturbation step size (budget / 10 when None)
        stop_accuracy: Surrogate accuracy (percent) on poisoned data that ends generation
        noise_scale: Scale of the uniform-noise defense
        poison_rate: Fraction of rows relabelled by the patch backdoor
        patch_size: Side of the backdoor patch
        target_class: Backdoor target class
        seed: Seed for the surrogate, the random starts and data order
    """
    budget: float = 8 / 255
    mode: str = "class_wise"
    generator_epochs: int = 5
    surrogate_steps: int = 10
    perturb_steps: int = 20
    step_size: Optional[float] = None
    stop_accuracy: float = 99.0
    noise_scale: float = 8 / 255
    poison_rate: float = 0.1
    patch_size: int = 3
    target_class: int = 0
    seed: int = 0

    @property
    def resolved_step_size(self) -> float:
        return self.budget / 10 if self.step_size is None else self.step_size

    def validate(self) -> None:
        if self.budget < 0:
            raise InputError(f"Poison budget must be non-negative, got {self.budget}")
        if self.mode not in POISON_MODES:
            raise InputError(f"Unknown poison mode '{self.mode}', expected one of {POISON_MODES}")
        if self.generator_epochs < 1 or self.surrogate_steps < 0 or self.perturb_steps < 1:
            raise InputError("generator_epochs and perturb_steps must be >= 1, surrogate_steps >= 0")
        if not 0.0 <= self.poison_rate <= 1.0:
            raise InputError(f"poison_rate must be in [0, 1], got {self.poison_rate}")


class PoisonedDataset:
    """
    A base dataset with class-wise or sample-wise additive perturbations.

    Attributes:
        base: Clean ImageDataset
        perturbations: Tensor [K, C, H, W] (class_wise) or [N, C, H, W] (sample_wise)
        mode: class_wise or sample_wise
        budget: Infinity-norm bound of the perturbations
        fingerprint: Hash of the generation settings and base data (poison_fingerprint)
        applied: Whether materialize() has been called
    """

    def __init__(self, base: ImageDataset, perturbations: torch.Tensor, mode: str, budget: float,
                 fingerprint: Optional[str] = None):
        expected = base.num_classes if mode == "class_wise" else len(base)
        if perturbations.shape[0] != expected or tuple(perturbations.shape[1:]) != base.image_shape:
            raise InputError(f"Perturbations {tuple(perturbations.shape)} do not fit a {mode} poison "
                             f"of {len(base)} images shaped {base.image_shape}")
        self.base = base
        self.perturbations = perturbations
        self.mode = mode
        self.budget = float(budget)
        self.fingerprint = fingerprint
        self.applied = False

    def per_example(self) -> torch.Tensor:
        if self.mode == "class_wise":
            return self.perturbations[self.base.labels]
        return self.perturbations

    def materialize(self) -> ImageDataset:
        """The poisoned images (clamped to [0, 1]) with the base labels and ids."""
        self.applied = True
        return self.base.with_images(torch.clamp(self.base.images + self.per_example(), 0.0, 1.0))

    def save(self, path: str) -> None:
        metadata = {"mode": self.mode, "budget": self.budget, "base_size": len(self.base),
                    "num_classes": self.base.num_classes, "fingerprint": self.fingerprint}
        write_container(path, metadata, {("poison", "perturbations"): ("poison", self.perturbations.numpy())})
        log.info(f"Saved {self.mode} poison ({self.perturbations.shape[0]} perturbations) to {path}")

    @classmethod
    def load(cls, path: str, base: ImageDataset) -> "PoisonedDataset":
        """
        Raises:
            FormatError: If the container holds no perturbations or belongs to another base dataset
        """
        metadata, tensors = read_container(path)
        if ("poison", "perturbations") not in tensors:
            raise FormatError("No poison perturbations in container", path, 0)
        if int(metadata.get("base_size", -1)) != len(base):
            raise FormatError(f"Poison was generated for {metadata.get('base_size')} images, "
                              f"base has {len(base)}", path, 0)
        perturbations = torch.from_numpy(tensors[("poison", "perturbations")][1].copy())
        return cls(base, perturbations, metadata["mode"], metadata["budget"], metadata.get("fingerprint"))


def poison_fingerprint(dataset: ImageDataset, spec: PoisonSpec, surrogate_cfg: Optional[TrainConfig] = None) -> str:
    """Hash of everything generate_poison depends on: the spec, the surrogate optimizer and the base data."""
    cfg = surrogate_cfg or TrainConfig()
    settings = {"spec": asdict(spec), "surrogate": {name: getattr(cfg, name) for name in SURROGATE_FIELDS}}
    digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode("utf-8"))
    digest.update(dataset.images.contiguous().numpy().tobytes())
    digest.update(dataset.labels.contiguous().numpy().tobytes())
    return digest.hexdigest()[:16]


def _surrogate(dataset: ImageDataset, seed: int) -> ModelState:
    channels, size, _ = dataset.image_shape
    return ModelState.reference(channels, dataset.num_classes, size, rng_seed=seed)


def generate_poison(dataset: ImageDataset, spec: PoisonSpec, surrogate_cfg: Optional[TrainConfig] = None,
                    show_progress: bool = False) -> PoisonedDataset:
    """
    Alternates surrogate training on the poisoned data with perturbation steps that
    minimize the same loss, projecting onto the budget ball after every step.

    Stops after spec.generator_epochs rounds or once the surrogate fits the poisoned
    data above spec.stop_accuracy.

    Args:
        dataset: Clean training data
        spec: Poison parameters
        surrogate_cfg: Optimizer settings of the surrogate (lr_max, momentum, weight_decay, batch_size)
        show_progress: Show progress bars
    """
    spec.validate()
    cfg = surrogate_cfg or TrainConfig()
    count = dataset.num_classes if spec.mode == "class_wise" else len(dataset)
    if spec.budget == 0:
        log.warning("Poison budget is 0; returning the dataset unperturbed")
        return PoisonedDataset(dataset, torch.zeros((count, *dataset.image_shape)), spec.mode, 0.0,
                               poison_fingerprint(dataset, spec, cfg))

    print_section_header(f"Generating {spec.mode} poison (budget {spec.budget:.4f})")
    budget = spec.budget
    step = spec.resolved_step_size
    generator = torch.Generator()
    generator.manual_seed(int(spec.seed))
    perturbations = init_delta_random((count, *dataset.image_shape), budget, generator=generator).delta
    surrogate = _surrogate(dataset, spec.seed)

    for round_index in range(spec.generator_epochs):
        loader = dataset.loader(cfg.batch_size, seed=spec.seed * 1000 + round_index)
        batches = iter(loader)
        for _ in range(spec.surrogate_steps):
            try:
                x, y, ids = next(batches)
            except StopIteration:
                batches = iter(loader)
                x, y, ids = next(batches)
            keys = y if spec.mode == "class_wise" else ids
            x_poison = torch.clamp(x + perturbations[keys], 0.0, 1.0)
            _, grads = loss_and_param_grad(surrogate, x_poison, y)
            sgd_step(surrogate, grads, cfg.lr_max, cfg.momentum, cfg.weight_decay)

        for x, y, ids in tqdm(loader, desc=f"Poison round {round_index + 1}", unit="batch", leave=False,
                              disable=not show_progress):
            keys = y if spec.mode == "class_wise" else ids
            for _ in range(spec.perturb_steps):
                x_poison = torch.clamp(x + perturbations[keys], 0.0, 1.0)
                _, grad = per_example_loss_and_input_grad(surrogate, x_poison, y)
                if spec.mode == "class_wise":
                    grad = torch.zeros_like(perturbations).index_add_(0, y, grad)
                    perturbations = torch.clamp(perturbations - step * torch.sign(grad), -budget, budget)
                else:
                    perturbations[ids] = torch.clamp(perturbations[ids] - step * torch.sign(grad), -budget, budget)

        poisoned = PoisonedDataset(dataset, perturbations, spec.mode, budget).materialize()
        accuracy = evaluate(surrogate, poisoned, AttackSuite(["clean"]))["clean_acc"]
        log.info(f"Poison round {round_index + 1}/{spec.generator_epochs}: surrogate accuracy {accuracy:.2f}%")
        if accuracy > spec.stop_accuracy:
            break
    return PoisonedDataset(dataset, perturbations, spec.mode, budget, poison_fingerprint(dataset, spec, cfg))


def random_noise_defense(poisoned, noise_scale: float, seed: int = 0) -> ImageDataset:
    """
    Adds i.i.d. uniform noise on [-noise_scale, noise_scale] and clamps to [0, 1].

    Args:
        poisoned: PoisonedDataset (materialized here) or ImageDataset
        noise_scale: Noise half-width
        seed: Noise seed
    """
    if isinstance(poisoned, PoisonedDataset):
        if poisoned.mode != "sample_wise":
            log.warning("Random-noise defense is meant for sample-wise poisons")
        poisoned = poisoned.materialize()
    if noise_scale == 0:
        return poisoned
    noise = init_delta_random(poisoned.images.shape, noise_scale, rng_seed=seed).delta
    return poisoned.with_images(torch.clamp(poisoned.images + noise, 0.0, 1.0))


def inject_patch_backdoor(dataset: ImageDataset, target_class: int = 0, poison_rate: float = 0.1,
                          patch_size: int = 3, seed: int = 0) -> ImageDataset:
    """
    Stamps a bottom-right checkerboard patch on a random poison_rate share of the rows
    and relabels them as target_class.
    """
    n = len(dataset)
    rng = np.random.default_rng(seed)
    rows = torch.as_tensor(np.sort(rng.choice(n, size=int(round(poison_rate * n)), replace=False)), dtype=torch.long)
    grid = torch.arange(patch_size)
    patch = ((grid[:, None] + grid[None, :]) % 2).to(dataset.images.dtype)
    images = dataset.images.clone()
    labels = dataset.labels.clone()
    images[rows, :, -patch_size:, -patch_size:] = patch
    labels[rows] = int(target_class)
    return ImageDataset(images, labels, dataset.num_classes, dataset.ids.clone())


def train_and_score(name: str, train_data: ImageDataset, test_data: ImageDataset, cfg: TrainConfig,
                    show_progress: bool) -> "OrderedDict[str, float]":
    """Trains a fresh reference model with cfg and reports clean test accuracy, wall-clock seconds and max r."""
    channels, size, _ = train_data.image_shape
    model = ModelState.reference(channels, train_data.num_classes, size, rng_seed=cfg.seed)
    started = time.time()
    train(model, train_data, cfg, eval_data=test_data, show_progress=show_progress)
    seconds = time.time() - started
    clean = evaluate(model, test_data, AttackSuite(["clean"]))["clean_acc"]
    log.info(f"{name}: clean test accuracy {clean:.2f}% in {seconds:.1f}s")
    return OrderedDict([("clean_test_acc", clean), ("seconds", seconds),
                        ("max_r", weight_histogram(model).overall_max_r())])


def transfer_experiment(train_data: ImageDataset, test_data: ImageDataset, spec: PoisonSpec, cfg: TrainConfig,
                        trainers: Sequence[str] = TRANSFER_TRAINERS, poisoned: Optional[PoisonedDataset] = None,
                        show_progress: bool = False) -> pd.DataFrame:
    """
    Trains each configuration on the poisoned data with the same epochs, cyclic schedule and data order.

    Trainers: standard (clean objective), adversarial (PGD at the poison budget),
    standard_lreg (clean objective plus weight-outlier suppression).

    Returns:
        DataFrame with trainer, budget, clean_test_acc, seconds and max_r columns
    """
    unknown = sorted(set(trainers) - set(TRANSFER_TRAINERS))
    if unknown:
        raise InputError(f"Unknown trainers {unknown}, expected a subset of {TRANSFER_TRAINERS}")
    poisoned = poisoned or generate_poison(train_data, spec, cfg, show_progress)
    data = poisoned.materialize()
    configs = {
        "standard": replace(cfg, method="standard", regularizers=[], lr_schedule="cyclic"),
        "adversarial": replace(cfg, method="pgd", xi=spec.budget, regularizers=[], lr_schedule="cyclic"),
        "standard_lreg": replace(cfg, method="standard", regularizers=["outlier"], lr_schedule="cyclic"),
    }
    rows = []
    for name in trainers:
        print_section_header(f"Transfer trainer: {name}")
        scores = train_and_score(name, data, test_data, configs[name], show_progress)
        rows.append(OrderedDict([("trainer", name), ("budget", spec.budget)] + list(scores.items())))
    return pd.DataFrame(rows, columns=["trainer", "budget", "clean_test_acc", "seconds", "max_r"])


def paradigm_comparison(train_data: ImageDataset, test_data: ImageDataset, spec: PoisonSpec, cfg: TrainConfig,
                        poisoned: Optional[PoisonedDataset] = None, show_progress: bool = False) -> pd.DataFrame:
    """
    Clean test accuracy of models trained on the original data, a patch-backdoored copy,
    the original data under FGSM-MEP and the unlearnable copy.

    The expected ordering is original ~ standard_backdoor > co_affected_mep >> unlearnable.
    """
    poisoned = poisoned or generate_poison(train_data, spec, cfg, show_progress)
    standard = replace(cfg, method="standard", regularizers=[])
    cells = [
        ("original", train_data, standard),
        ("standard_backdoor", inject_patch_backdoor(train_data, spec.target_class, spec.poison_rate,
                                                    spec.patch_size, spec.seed), standard),
        ("co_affected_mep", train_data, replace(cfg, method="fgsm_mep", regularizers=[])),
        ("unlearnable", poisoned.materialize(), standard),
    ]
    rows = []
    for name, data, cell_cfg in cells:
        print_section_header(f"Paradigm: {name}")
        scores = train_and_score(name, data, test_data, cell_cfg, show_progress)
        rows.append({"paradigm": name, "clean_test_acc": scores["clean_test_acc"], "seconds": scores["seconds"]})
    return pd.DataFrame(rows, columns=["paradigm", "clean_test_acc", "seconds"])
