#!/usr/bin/env python3
"""
Recovery recipes for CO-affected checkpoints (VFT, LP, RF, RFT, RSFT), the
recurrence probe and the three-seed stability protocol.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .attacks import AttackSuite, evaluate
from .fat_train import CoReport, FastAdversarialTrainer, MetricsRecord, TrainConfig, co_detect
from .nn_core import ModelState, reinit_layers
from .utils import InputError, log, print_section_header

RECIPE_KINDS = ("vft", "lp", "rf", "rft", "rsft")
DATA_MODES = ("clean", "adversarial")
STABLE_MARK = "★"
CO_MARK = "○"
REPORT_COLUMNS = [("Clean", "clean_acc"), ("Perturbed", "perturbed_acc"), ("FGSM", "fgsm_acc"),
                  ("PGD10", "pgd10_acc"), ("PGD20", "pgd20_acc"), ("PGD50", "pgd50_acc")]


@dataclass
class FinetuneRecipe:
    """
    One recovery recipe.

    Attributes:
        kind: vft, lp, rf, rft or rsft
        k: Size of the layer prefix the recipe acts on
        lambda_shift: Weight of the RSFT weight-shift penalty
        epochs: Fine-tuning epochs
        data_mode: clean or adversarial fine-tuning data
        lr_scale: Fine-tuning learning rate as a fraction of lr_max
        lp_from: LP trains the first k layers, or the last k with 'last'
        shift_penalty: cosine (1 - cos) or inner (negative inner product)
        freeze_bn_stats: Keep batchnorm statistics fixed while fine-tuning
    """
    kind: str = "vft"
    k: int = 2
    lambda_shift: float = 0.0
    epochs: int = 1
    data_mode: str = "clean"
    lr_scale: float = 0.1
    lp_from: str = "first"
    shift_penalty: str = "cosine"
    freeze_bn_stats: bool = False

    @property
    def name(self) -> str:
        suffix = "Clean" if self.data_mode == "clean" else "Adv"
        return f"{self.kind.upper()}-CO-{suffix}"

    def validate(self, num_layers: int) -> None:
        """
        Raises:
            InputError: On an unknown kind or mode, or a k / lambda_shift that does not fit the recipe
        """
        if self.kind not in RECIPE_KINDS:
            raise InputError(f"Unknown recipe '{self.kind}', expected one of {RECIPE_KINDS}")
        if self.data_mode not in DATA_MODES:
            raise InputError(f"Unknown data mode '{self.data_mode}', expected one of {DATA_MODES}")
        if self.lp_from not in ("first", "last"):
            raise InputError(f"lp_from must be 'first' or 'last', got '{self.lp_from}'")
        if self.shift_penalty not in ("cosine", "inner"):
            raise InputError(f"shift_penalty must be 'cosine' or 'inner', got '{self.shift_penalty}'")
        if self.kind != "vft" and not 1 <= self.k <= num_layers:
            raise InputError(f"Recipe {self.kind} needs 1 <= k <= {num_layers}, got {self.k}")
        if self.lambda_shift < 0:
            raise InputError(f"lambda_shift must be non-negative, got {self.lambda_shift}")
        if self.lambda_shift > 0 and self.kind != "rsft":
            raise InputError(f"lambda_shift applies to rsft only, got it for {self.kind}")
        if self.epochs < 1 or self.lr_scale <= 0:
            raise InputError("Recipe epochs must be >= 1 and lr_scale positive")


def shift_penalty(theta_init: torch.Tensor, lam: float, mode: str = "cosine"):
    """
    Loss term penalizing movement away from theta_init:
    lam * (1 - cos(theta, theta_init)) or -lam * <theta, theta_init>.
    """
    reference = theta_init.detach()

    def term(model: ModelState, logits: torch.Tensor) -> torch.Tensor:
        theta = model.parameter_vector()
        if mode == "inner":
            return -lam * torch.dot(theta, reference)
        cosine = torch.dot(theta, reference) / (theta.norm() * reference.norm()).clamp_min(1e-12)
        return lam * (1.0 - cosine)

    return term


def prepare_recipe(model_co: ModelState, recipe: FinetuneRecipe, seed: int = 0):
    """
    Copies the checkpoint and applies the recipe's reinitialization and freeze mask.

    Returns:
        Tuple of (model, extra loss terms)
    """
    recipe.validate(len(model_co.specs))
    model = model_co.clone()
    model.reset_optimizer()
    names = model.layer_names
    k = recipe.k
    terms = []

    if recipe.kind == "lp":
        trained = names[:k] if recipe.lp_from == "first" else names[len(names) - k:]
        model.freeze(set(names) - set(trained))
    elif recipe.kind in ("rf", "rft", "rsft"):
        reinit_layers(model, k, seed)
        if recipe.kind == "rf":
            model.freeze(names[:k])
        if recipe.kind == "rsft" and recipe.lambda_shift > 0:
            terms.append(shift_penalty(model.parameter_vector().detach().clone(),
                                       recipe.lambda_shift, recipe.shift_penalty))
    log.info(f"Recipe {recipe.name}: k={k}, frozen={sorted(model.mask.frozen) or 'none'}")
    return model, terms


def apply_recipe(model_co: ModelState, recipe: FinetuneRecipe, clean_data, cfg: TrainConfig,
                 seed: int = 0, eval_data=None, show_progress: bool = False) -> ModelState:
    """
    Fine-tunes a copy of model_co with the recipe.

    VFT trains everything; LP trains only the first k layers; RF reinitializes and
    freezes the first k layers; RFT reinitializes the first k layers and trains
    everything; RSFT is RFT plus the weight-shift penalty.

    Args:
        model_co: CO-affected checkpoint (left untouched)
        recipe: Recipe
        clean_data: Fine-tuning data
        cfg: Training configuration the checkpoint was produced with
        seed: Seed for reinitialization and data order
        eval_data: Evaluation data for the per-epoch metrics
        show_progress: Show progress bars

    Returns:
        The fine-tuned model with its freeze mask cleared
    """
    model, terms = prepare_recipe(model_co, recipe, seed)
    ft_cfg = replace(cfg,
                     method="standard" if recipe.data_mode == "clean" else "fgsm_rs",
                     epochs=recipe.epochs,
                     lr_schedule="constant",
                     lr_max=cfg.lr_max * recipe.lr_scale,
                     regularizers=[],
                     freeze_bn_stats=recipe.freeze_bn_stats,
                     seed=seed)
    FastAdversarialTrainer(model, clean_data, ft_cfg, eval_data=eval_data, show_progress=show_progress,
                           extra_loss_terms=terms).fit()
    model.freeze([])
    model.freeze_bn_stats = False
    model.reset_optimizer()
    return model


@dataclass
class RecoveryReport:
    """
    Outcome of a recipe across seeds.

    Attributes:
        recipe: Recipe name, e.g. VFT-CO-Clean
        pre: Suite accuracies of the untouched CO checkpoint
        post: Suite accuracies after the recipe, averaged over seeds
        recurrence: CoReport of the continued FAT per seed
        probe_metrics: Per-seed metrics of the continued FAT (row 0 is the recovered model)
        seeds: Seeds in run order
    """
    recipe: str
    pre: Dict[str, float] = field(default_factory=dict)
    post: Dict[str, float] = field(default_factory=dict)
    recurrence: List[CoReport] = field(default_factory=list)
    probe_metrics: List[MetricsRecord] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)

    @property
    def stability_runs(self) -> List[bool]:
        return [not report.co_occurred for report in self.recurrence]

    @property
    def st_string(self) -> str:
        return "".join(STABLE_MARK if stable else CO_MARK for stable in self.stability_runs)

    def _mean_rows(self, pick) -> Dict[str, float]:
        rows = [pick(metrics) for metrics in self.probe_metrics if len(metrics)]
        if not rows:
            return {}
        return {key: float(np.mean([row[key] for row in rows])) for key in rows[0]}

    def to_text(self) -> str:
        """Renders best/final rows with Clean, Perturbed, FGSM and PGD columns plus the ST marks."""
        def fmt(row: Dict[str, float]) -> str:
            return "  ".join(f"{row[key]:9.2f}" if key in row else f"{'-':>9}" for _, key in REPORT_COLUMNS)

        header = f"{'Method':<16}{'':<8}" + "  ".join(f"{title:>9}" for title, _ in REPORT_COLUMNS) + "  ST"
        lines = [header, "-" * len(header)]
        lines.append(f"{'CO checkpoint':<16}{'pre':<8}{fmt(self.pre)}")
        lines.append(f"{self.recipe:<16}{'post':<8}{fmt(self.post)}")
        best = self._mean_rows(lambda m: m.best("pgd10_acc"))
        final = self._mean_rows(lambda m: m.final())
        if best:
            lines.append(f"{'':<16}{'best':<8}{fmt(best)}")
            lines.append(f"{'':<16}{'final':<8}{fmt(final)}  {self.st_string}")
        else:
            lines.append(f"{'':<16}{'':<8}{'':<{len(fmt(self.pre))}}  {self.st_string}")
        return "\n".join(lines)


def recurrence_probe(model_recovered: ModelState, dataset, cfg: TrainConfig, extra_fat_epochs: int,
                     seeds: Sequence[int] = (0,), eval_data=None, recipe_name: str = "",
                     show_progress: bool = False) -> RecoveryReport:
    """
    Continues plain FGSM-RS training from the recovered model and checks whether CO returns.

    Each seed trains its own copy; row 0 of every probe record is the recovered model itself.
    """
    report = RecoveryReport(recipe=recipe_name, seeds=list(seeds))
    for seed in seeds:
        if extra_fat_epochs <= 0:
            report.recurrence.append(CoReport(False))
            report.probe_metrics.append(MetricsRecord())
            continue
        probe_cfg = replace(cfg, method="fgsm_rs", epochs=extra_fat_epochs, regularizers=[], seed=seed)
        trainer = FastAdversarialTrainer(model_recovered.clone(), dataset, probe_cfg, eval_data=eval_data,
                                         show_progress=show_progress)
        row0 = {"epoch": 0, "lr": 0.0}
        row0.update(evaluate(trainer.model, trainer.eval_data, trainer.eval_suite))
        _, metrics = trainer.fit()
        probe = MetricsRecord([row0] + metrics.rows)
        verdict = co_detect(probe, class_count=model_recovered.num_classes)
        log.info(f"Recurrence probe seed {seed}: {'CO recurred at epoch ' + str(verdict.epoch) if verdict.co_occurred else 'stable'}")
        report.recurrence.append(verdict)
        report.probe_metrics.append(probe)
    return report


def stability_protocol(model_co: ModelState, recipe: FinetuneRecipe, dataset, cfg: TrainConfig,
                       seeds: Sequence[int] = (0, 1, 2), probe_epochs: int = 10, eval_data=None,
                       suite: Optional[AttackSuite] = None, show_progress: bool = False) -> RecoveryReport:
    """
    apply_recipe followed by recurrence_probe for every seed.

    Returns:
        RecoveryReport with pre/post suite accuracies and one ST mark per seed
    """
    print_section_header(f"Stability protocol {recipe.name}")
    eval_data = eval_data if eval_data is not None else dataset
    suite = suite or AttackSuite(xi=cfg.xi, seed=cfg.seed)
    report = RecoveryReport(recipe=recipe.name, seeds=list(seeds))
    report.pre = dict(evaluate(model_co, eval_data.head(cfg.eval_size), suite))
    posts = []
    for seed in seeds:
        recovered = apply_recipe(model_co, recipe, dataset, cfg, seed=seed, eval_data=eval_data,
                                 show_progress=show_progress)
        posts.append(evaluate(recovered, eval_data.head(cfg.eval_size), suite))
        probe = recurrence_probe(recovered, dataset, cfg, probe_epochs, seeds=[seed], eval_data=eval_data,
                                 recipe_name=recipe.name, show_progress=show_progress)
        report.recurrence.extend(probe.recurrence)
        report.probe_metrics.extend(probe.probe_metrics)
    report.post = {key: float(np.mean([post[key] for post in posts])) for key in posts[0]}
    log.info(f"{recipe.name}: ST {report.st_string}")
    return report
