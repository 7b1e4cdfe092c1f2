#!/usr/bin/env python3
"""
Fast adversarial training loops (FGSM-RS, FGSM-MEP), the PGD and clean baselines,
per-epoch metrics and the catastrophic-overfitting detector.
"""
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F
from tqdm import tqdm

from .attacks import (AttackSuite, MepBuffer, evaluate, fgsm_rs_delta, fgsm_sign,
                      init_delta_random, pgd_attack)
from .checkpoint import save_checkpoint
from .diagnostics import accuracy_ordering_check
from .nn_core import LossTerm, ModelState, cyclic_lr, forward, loss_and_param_grad, sgd_step
from .regularizers import (TriggerBank, aux_trigger_loss, clip_baseline, l2_baseline,
                           prediction_regularizer, weight_outlier_loss)
from .utils import InputError, NumericError, format_duration, log

TRAIN_METHODS = ("fgsm_rs", "fgsm_mep", "pgd", "standard")
REGULARIZERS = ("aux", "outlier", "l2", "clip", "r_pred")
LR_SCHEDULES = ("cyclic", "constant")

METRIC_COLUMNS = [
    "epoch", "lr", "clean_acc", "perturbed_acc", "fgsm_acc", "pgd10_acc",
    "train_loss_clean", "train_loss_adv",
    "reg_aux", "reg_outlier", "reg_l2", "reg_r_pred", "reg_shift",
]
EPOCH_EVAL_ATTACKS = ["clean", "perturbed", "fgsm", "pgd10"]


@dataclass
class TrainConfig:
    """
    Hyperparameters of one training run.

    Attributes:
        method: fgsm_rs, fgsm_mep, pgd or standard
        xi: Training budget
        epsilon: FGSM step size (1.25 * xi when None)
        epochs: Number of epochs
        batch_size: Mini-batch size
        lr_max: Peak learning rate
        momentum: SGD momentum
        weight_decay: SGD weight decay
        lr_schedule: cyclic or constant
        alpha_aux: Weight of the trigger auxiliary loss
        beta: Weight of the prediction regularizer
        eta: Outlier threshold (also the clipping threshold)
        alpha_reg: Stabilizer of the outlier loss
        l2_lambda: Weight of the l2 baseline
        regularizers: Enabled terms among aux, outlier, l2, clip, r_pred
        mep_decay: Momentum decay of the FGSM-MEP buffer
        delta_init: uniform or gaussian random start
        outlier_mode: magnitude or signed deviation
        aux_mode: class_mean or per_example
        pgd_train_steps: Steps of the PGD training attack
        eval_size: Test images evaluated after every epoch
        seed: Seed for random starts and data order
        freeze_bn_stats: Keep batchnorm statistics fixed during training
    """
    method: str = "fgsm_rs"
    xi: float = 16 / 255
    epsilon: Optional[float] = None
    epochs: int = 30
    batch_size: int = 128
    lr_max: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cyclic"
    alpha_aux: float = 1e-2
    beta: float = 10.0
    eta: float = 10.0
    alpha_reg: float = 1e-5
    l2_lambda: float = 5e-3
    regularizers: List[str] = field(default_factory=list)
    mep_decay: float = 0.9
    delta_init: str = "uniform"
    outlier_mode: str = "magnitude"
    aux_mode: str = "class_mean"
    pgd_train_steps: int = 5
    eval_size: int = 500
    seed: int = 0
    freeze_bn_stats: bool = False

    @property
    def step_size(self) -> float:
        return 1.25 * self.xi if self.epsilon is None else self.epsilon

    def validate(self) -> None:
        """
        Raises:
            InputError: If any field is outside its valid range
        """
        if self.method not in TRAIN_METHODS:
            raise InputError(f"Unknown training method '{self.method}', expected one of {TRAIN_METHODS}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise InputError(f"Unknown lr schedule '{self.lr_schedule}'")
        unknown = sorted(set(self.regularizers) - set(REGULARIZERS))
        if unknown:
            raise InputError(f"Unknown regularizers {unknown}, expected a subset of {REGULARIZERS}")
        if self.aux_mode not in ("class_mean", "per_example"):
            raise InputError(f"Unknown aux mode '{self.aux_mode}'")
        if self.xi < 0 or self.step_size < 0:
            raise InputError("xi and epsilon must be non-negative")
        for name in ("alpha_aux", "beta", "alpha_reg", "l2_lambda", "lr_max", "momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.eta <= 0:
            raise InputError(f"eta must be positive, got {self.eta}")
        if self.epochs < 1 or self.batch_size < 1 or self.eval_size < 1 or self.pgd_train_steps < 1:
            raise InputError("epochs, batch_size, eval_size and pgd_train_steps must be >= 1")

    def uses(self, regularizer: str) -> bool:
        """True when the regularizer is enabled with a nonzero weight."""
        weights = {"aux": self.alpha_aux, "outlier": 1.0, "l2": self.l2_lambda,
                   "clip": 1.0, "r_pred": self.beta}
        if regularizer == "r_pred" and self.method == "fgsm_mep":
            return self.beta != 0
        return regularizer in self.regularizers and weights[regularizer] != 0


class MetricsRecord:
    """
    One row per completed epoch with the METRIC_COLUMNS fields.
    """

    def __init__(self, rows: Optional[List[Dict[str, float]]] = None):
        self.rows: List[Dict[str, float]] = []
        for row in rows or []:
            self.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def append(self, row: Dict[str, float]) -> None:
        for key in ("clean_acc", "perturbed_acc", "fgsm_acc", "pgd10_acc"):
            value = row.get(key)
            if value is not None and not 0.0 <= value <= 100.0:
                raise InputError(f"{key}={value} outside [0, 100]")
        self.rows.append({column: row.get(column, 0.0) for column in METRIC_COLUMNS})

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRIC_COLUMNS)

    def save_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self.to_dataframe().to_csv(path, index=False, float_format="%.6f")

    @classmethod
    def load_csv(cls, path: str) -> "MetricsRecord":
        frame = pd.read_csv(path)
        missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
        if missing:
            raise InputError(f"Metrics file {path} lacks columns {missing}")
        return cls(frame[METRIC_COLUMNS].to_dict(orient="records"))

    def best(self, column: str = "pgd10_acc") -> Dict[str, float]:
        """Earliest row with the maximal value of column."""
        if not self.rows:
            raise InputError("No epochs recorded")
        return max(self.rows, key=lambda row: (row[column], -row["epoch"]))

    def final(self) -> Dict[str, float]:
        if not self.rows:
            raise InputError("No epochs recorded")
        return self.rows[-1]


@dataclass
class CoReport:
    """
    Verdict of co_detect.

    Attributes:
        co_occurred: Whether catastrophic overfitting was detected
        epoch: First epoch flagged, or None
        ordering_holds: Accuracy-ordering check at that epoch, when it could be evaluated
    """
    co_occurred: bool
    epoch: Optional[int] = None
    ordering_holds: Optional[bool] = None


def co_detect(metrics: MetricsRecord, collapse_ratio: float = 0.2, gap: float = 5.0,
              class_count: Optional[int] = None) -> CoReport:
    """
    Flags the first epoch whose PGD-10 accuracy falls below collapse_ratio times the
    best earlier PGD-10 accuracy while FGSM accuracy stays within gap points of clean accuracy.

    Args:
        metrics: Per-epoch record
        collapse_ratio: Relative PGD-10 collapse threshold
        gap: Allowed FGSM deficit against clean accuracy, in points
        class_count: Number of classes; enables the accuracy-ordering check

    Returns:
        CoReport
    """
    rows = metrics.rows
    if len(rows) < 2:
        return CoReport(False)
    prior_max = rows[0]["pgd10_acc"]
    for row in rows[1:]:
        if prior_max > 0 and row["pgd10_acc"] < collapse_ratio * prior_max \
                and row["fgsm_acc"] >= row["clean_acc"] - gap:
            ordering = accuracy_ordering_check(row, class_count) if class_count else None
            return CoReport(True, int(row["epoch"]), ordering)
        prior_max = max(prior_max, row["pgd10_acc"])
    return CoReport(False)


def best_final_summary(metrics: MetricsRecord) -> Dict[str, Dict[str, float]]:
    """Best (maximal PGD-10) and final rows."""
    return {"best": metrics.best("pgd10_acc"), "final": metrics.final()}


class FastAdversarialTrainer:
    """
    Runs one training configuration on a ModelState.

    Attributes:
        model: Model being trained (mutated in place)
        train_data: Training ImageDataset
        cfg: TrainConfig
        eval_data: Fixed evaluation subset
        metrics: MetricsRecord filled epoch by epoch
        bank: TriggerBank when the auxiliary loss is enabled
        mep: MepBuffer for fgsm_mep
        checkpoint_dir: Directory for per-epoch, best-pgd10 and final checkpoints
    """

    def __init__(self, model: ModelState, train_data, cfg: TrainConfig, eval_data=None,
                 checkpoint_dir: Optional[str] = None, show_progress: bool = True,
                 extra_loss_terms: Sequence[LossTerm] = (),
                 should_stop: Optional[Callable[[], bool]] = None,
                 metrics_path: Optional[str] = None):
        cfg.validate()
        if len(train_data) == 0:
            raise InputError("Training set is empty")
        self.model = model
        self.train_data = train_data
        self.cfg = cfg
        self.eval_data = (eval_data if eval_data is not None else train_data).head(cfg.eval_size)
        self.checkpoint_dir = checkpoint_dir
        self.metrics_path = metrics_path or (os.path.join(checkpoint_dir, "metrics.csv") if checkpoint_dir else None)
        self.show_progress = show_progress
        self.extra_loss_terms = list(extra_loss_terms)
        self.should_stop = should_stop or (lambda: False)
        self.metrics = MetricsRecord()
        self.epoch_seconds: List[float] = []
        self.model.freeze_bn_stats = cfg.freeze_bn_stats

        self.generator = torch.Generator()
        self.generator.manual_seed(int(cfg.seed))
        self.bank = TriggerBank(model.num_classes, model.input_shape) if cfg.uses("aux") else None
        self.mep = (MepBuffer(len(train_data), model.input_shape, cfg.xi, cfg.mep_decay, cfg.delta_init)
                    if cfg.method == "fgsm_mep" else None)
        self.eval_suite = AttackSuite(list(EPOCH_EVAL_ATTACKS), xi=cfg.xi, seed=cfg.seed)
        self._step_regs: Dict[str, float] = {}
        self._pending_signs: Optional[torch.Tensor] = None
        self._co_logged = False

    def _record(self, key: str, term: LossTerm) -> LossTerm:
        def recorded(model: ModelState, logits: torch.Tensor) -> torch.Tensor:
            value = term(model, logits)
            self._step_regs[key] = self._step_regs.get(key, 0.0) + float(value.detach())
            return value
        return recorded

    def learning_rate(self, epoch: int, iteration: int, iterations: int) -> float:
        if self.cfg.lr_schedule == "constant":
            return self.cfg.lr_max
        return cyclic_lr(epoch + (iteration + 1) / iterations, self.cfg.epochs, self.cfg.lr_max)

    def _perturb(self, x: torch.Tensor, y: torch.Tensor, ids: torch.Tensor,
                 terms: List[LossTerm]) -> torch.Tensor:
        """Builds the training input for the configured method and appends attack-dependent terms."""
        cfg = self.cfg
        model = self.model
        if cfg.method == "standard":
            return x
        if cfg.method == "pgd":
            return pgd_attack(model, x, y, cfg.pgd_train_steps, cfg.xi / 4, cfg.xi,
                              keep_best=False, generator=self.generator, training=True)

        if cfg.method == "fgsm_mep":
            delta0 = self.mep.init(ids, self.generator).delta
        else:
            delta0 = init_delta_random(x.shape, cfg.xi, generator=self.generator,
                                       distribution=cfg.delta_init).delta
        use_aux = self.bank is not None
        signs = fgsm_sign(model, x, delta0, y, training=True, create_graph=use_aux)
        x_adv = fgsm_rs_delta(delta0, signs.detach(), cfg.step_size, cfg.xi).apply(x)

        if use_aux:
            bank = self.bank
            per_example = cfg.aux_mode == "per_example"
            terms.append(self._record("reg_aux", lambda m, logits: aux_trigger_loss(
                signs, y, bank, cfg.alpha_aux, per_example)))
        if cfg.uses("r_pred"):
            x_init = torch.clamp(x + delta0, 0.0, 1.0)
            terms.append(self._record("reg_r_pred", lambda m, logits: prediction_regularizer(
                logits, forward(m, x_init, training=True), cfg.beta)))
        if self.mep is not None:
            self.mep.update(ids, signs.detach(), cfg.step_size)
        if use_aux:
            self._pending_signs = signs.detach()
        return x_adv

    def train_step(self, x: torch.Tensor, y: torch.Tensor, ids: torch.Tensor, lr: float) -> Dict[str, float]:
        """
        One optimizer step on a batch.

        Returns:
            Dictionary with train_loss_clean, train_loss_adv and the regularizer values of the step
        """
        cfg = self.cfg
        self._step_regs = {}
        self._pending_signs = None
        terms: List[LossTerm] = []
        x_train = self._perturb(x, y, ids, terms)

        if cfg.uses("outlier"):
            terms.append(self._record("reg_outlier", lambda m, logits: weight_outlier_loss(
                m, cfg.eta, cfg.alpha_reg, cfg.outlier_mode)))
        if cfg.uses("l2"):
            terms.append(self._record("reg_l2", lambda m, logits: l2_baseline(m, cfg.l2_lambda)))
        for term in self.extra_loss_terms:
            terms.append(self._record("reg_shift", term))

        if cfg.method == "standard":
            clean_loss = None
        else:
            with torch.no_grad():
                clean_loss = float(F.cross_entropy(forward(self.model, x), y))

        total, grads = loss_and_param_grad(self.model, x_train, y, terms, training=True)
        sgd_step(self.model, grads, lr, cfg.momentum, cfg.weight_decay)
        if self._pending_signs is not None:
            self.bank.update_from_batch(self._pending_signs, y)

        adv_loss = total - sum(self._step_regs.values())
        result = {"train_loss_adv": adv_loss,
                  "train_loss_clean": adv_loss if clean_loss is None else clean_loss}
        result.update(self._step_regs)
        return result

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        """Trains one epoch, applies end-of-epoch clipping, evaluates and records a metrics row."""
        cfg = self.cfg
        started = time.time()
        loader = self.train_data.loader(cfg.batch_size, seed=cfg.seed * 1000 + epoch)
        iterations = len(loader)
        sums: Dict[str, float] = {}
        lr = 0.0
        bar = tqdm(loader, desc=f"Epoch {epoch + 1}/{cfg.epochs}", unit="batch", leave=False,
                   disable=not self.show_progress)
        for iteration, (x, y, ids) in enumerate(bar):
            lr = self.learning_rate(epoch, iteration, iterations)
            try:
                step = self.train_step(x, y, ids, lr)
            except NumericError as e:
                e.payload.update({"epoch": epoch + 1, "batch": iteration})
                raise
            for key, value in step.items():
                sums[key] = sums.get(key, 0.0) + value
            bar.set_postfix(loss=f"{step['train_loss_adv']:.3f}", lr=f"{lr:.4f}")

        if cfg.uses("clip"):
            clip_baseline(self.model, cfg.eta)
        self.model.epoch += 1

        accuracies = evaluate(self.model, self.eval_data, self.eval_suite)
        row: Dict[str, Any] = {"epoch": epoch + 1, "lr": lr}
        row.update(accuracies)
        row.update({key: value / iterations for key, value in sums.items()})
        self.metrics.append(row)
        seconds = time.time() - started
        self.epoch_seconds.append(seconds)
        log.info(f"Epoch {epoch + 1}/{cfg.epochs}: clean {row['clean_acc']:.2f} | "
                 f"FGSM {row['fgsm_acc']:.2f} | PGD-10 {row['pgd10_acc']:.2f} | "
                 f"loss {row.get('train_loss_adv', 0.0):.4f} ({format_duration(seconds)})")

        report = co_detect(self.metrics, class_count=self.model.num_classes)
        if report.co_occurred and not self._co_logged:
            log.warning(f"Catastrophic overfitting detected at epoch {report.epoch}")
            self._co_logged = True
        return row

    def _save(self, name: str) -> None:
        if self.checkpoint_dir:
            save_checkpoint(self.model, os.path.join(self.checkpoint_dir, f"{name}.ckpt"))

    def fit(self) -> Tuple[ModelState, MetricsRecord]:
        """
        Runs the remaining epochs.

        Returns:
            Tuple of (model, metrics)

        Raises:
            NumericError: After persisting the last good model as last-good.ckpt
        """
        cfg = self.cfg
        log.info(f"Training {cfg.method} for {cfg.epochs} epochs (xi={cfg.xi:.4f}, "
                 f"regularizers={sorted(r for r in REGULARIZERS if cfg.uses(r)) or 'none'})")
        best_pgd10 = -1.0
        for epoch in range(cfg.epochs):
            if self.should_stop():
                log.warning(f"Stop requested, ending training after epoch {epoch}")
                break
            last_good = self.model.clone()
            try:
                row = self.train_epoch(epoch)
            except NumericError as e:
                log.error(f"Numeric failure in epoch {epoch + 1}: {e} {e.payload}")
                if self.checkpoint_dir:
                    save_checkpoint(last_good, os.path.join(self.checkpoint_dir, "last-good.ckpt"))
                raise
            if self.metrics_path:
                self.metrics.save_csv(self.metrics_path)
                pd.DataFrame({"epoch": range(1, len(self.epoch_seconds) + 1), "seconds": self.epoch_seconds}).to_csv(
                    os.path.join(os.path.dirname(os.path.abspath(self.metrics_path)), "timings.csv"), index=False)
            self._save(f"epoch-{epoch + 1:03d}")
            if row["pgd10_acc"] > best_pgd10:
                best_pgd10 = row["pgd10_acc"]
                self._save("best-pgd10")
        self._save("final")
        return self.model, self.metrics


def train(model: ModelState, dataset, cfg: TrainConfig, **kwargs) -> Tuple[ModelState, MetricsRecord]:
    """Trains with cfg.method; keyword arguments go to FastAdversarialTrainer."""
    return FastAdversarialTrainer(model, dataset, cfg, **kwargs).fit()


def train_fgsm_rs(model: ModelState, dataset, cfg: TrainConfig, **kwargs) -> Tuple[ModelState, MetricsRecord]:
    return train(model, dataset, replace(cfg, method="fgsm_rs"), **kwargs)


def train_fgsm_mep(model: ModelState, dataset, cfg: TrainConfig, **kwargs) -> Tuple[ModelState, MetricsRecord]:
    return train(model, dataset, replace(cfg, method="fgsm_mep"), **kwargs)


def train_pgd(model: ModelState, dataset, cfg: TrainConfig, **kwargs) -> Tuple[ModelState, MetricsRecord]:
    return train(model, dataset, replace(cfg, method="pgd"), **kwargs)


def train_standard(model: ModelState, dataset, cfg: TrainConfig, **kwargs) -> Tuple[ModelState, MetricsRecord]:
    return train(model, dataset, replace(cfg, method="standard"), **kwargs)
