#!/usr/bin/env python3
"""
Diagnostics of CO-affected models: inter-class distances of FGSM sign patterns,
2D projections, weight-deviation histograms, similarity curves, trigger probes
and the accuracy-ordering check.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import stats

from .attacks import fgsm_rs_delta, fgsm_sign, init_delta_random
from .nn_core import ModelState, forward
from .utils import InputError, log

DEFAULT_HISTOGRAM_EDGES = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, float("inf")]
SIMILARITY_COLUMNS = ["epoch", "interclass_pred_sim", "intraclass_pred_sim",
                      "intraclass_perturb_sim", "intraclass_advexample_sim"]


def collect_sign_samples(model: ModelState, dataset, xi: float, samples_per_class: Optional[int] = None,
                         seed: int = 0, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    """
    FGSM sign patterns at a uniform random start, one flattened row per example.

    Args:
        model: Model (evaluation mode)
        dataset: ImageDataset
        xi: Budget of the random start
        samples_per_class: Cap per class (all examples when None)
        seed: Seed of the random starts
        batch_size: Batch size

    Returns:
        Tuple of (signs [N, D] float32, labels [N])
    """
    if samples_per_class is not None:
        dataset = dataset.head(samples_per_class * dataset.num_classes)
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    signs, labels = [], []
    for x, y, _ in dataset.loader(batch_size, shuffle=False):
        delta0 = init_delta_random(x.shape, xi, generator=generator).delta
        signs.append(fgsm_sign(model, x, delta0, y).reshape(x.shape[0], -1).numpy())
        labels.append(y.numpy())
    return np.concatenate(signs).astype(np.float32), np.concatenate(labels)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """
    Exact 1-D Wasserstein-1 distance between two empirical samples.

    Equal sizes use sorted matching; unequal sizes fall back to scipy.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InputError("Wasserstein distance needs nonempty samples")
    if a.size != b.size:
        return float(stats.wasserstein_distance(a, b))
    # sorting the gaps fixes the summation order, so reflected inputs give the same value
    return float(np.mean(np.sort(np.abs(np.sort(a) - np.sort(b)))))


def random_directions(dim: int, projections: int, seed: int) -> np.ndarray:
    """Seeded unit vectors, one per row."""
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((projections, dim))
    return directions / np.linalg.norm(directions, axis=1, keepdims=True)


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, projections: int = 64, seed: int = 0,
                       directions: Optional[np.ndarray] = None) -> float:
    """
    Average over unit directions of the 1-D Wasserstein distance of the projected samples.

    Args:
        a: Samples [N, D]
        b: Samples [M, D]
        projections: Number of random directions (ignored when directions is given)
        seed: Seed of the random directions
        directions: Explicit directions [P, D]
    """
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise InputError(f"Sample dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if directions is None:
        directions = random_directions(a.shape[1], projections, seed)
    return float(np.mean([wasserstein_1d(a @ u, b @ u) for u in directions]))


@dataclass
class DistanceMatrix:
    """
    Pairwise class distances.

    Attributes:
        values: Symmetric K x K matrix with zero diagonal
        class_counts: Samples per class
    """
    values: np.ndarray
    class_counts: List[int]

    def off_diagonal_mean(self) -> float:
        k = self.values.shape[0]
        if k < 2:
            return 0.0
        return float(self.values[~np.eye(k, dtype=bool)].mean())

    def to_dataframe(self) -> pd.DataFrame:
        k = self.values.shape[0]
        return pd.DataFrame(self.values, index=[f"class_{i}" for i in range(k)],
                            columns=[f"class_{j}" for j in range(k)])


def distance_matrix_from_samples(samples: np.ndarray, labels: np.ndarray, num_classes: int,
                                 projections: int = 64, seed: int = 0) -> DistanceMatrix:
    """
    Sliced Wasserstein distances between the per-class sample sets.

    All class pairs share the same projection directions.

    Raises:
        InputError: If fewer than two classes are present or a present class has fewer than two samples
    """
    samples = np.asarray(samples).reshape(len(samples), -1)
    labels = np.asarray(labels)
    counts = [int((labels == c).sum()) for c in range(num_classes)]
    present = [c for c in range(num_classes) if counts[c] > 0]
    if len(present) < 2:
        raise InputError(f"Need at least two classes, found {present}")
    for c in present:
        if counts[c] < 2:
            raise InputError(f"Class {c} has {counts[c]} sample(s); at least 2 are required")

    directions = random_directions(samples.shape[1], projections, seed)
    values = np.zeros((num_classes, num_classes))
    groups = {c: samples[labels == c] for c in present}
    for i_pos, i in enumerate(present):
        for j in present[i_pos + 1:]:
            distance = sliced_wasserstein(groups[i], groups[j], directions=directions)
            values[i, j] = values[j, i] = distance
    return DistanceMatrix(values, counts)


def sign_distance_matrix(model: ModelState, dataset, xi: float, projections: int = 64,
                         seed: int = 0, samples_per_class: Optional[int] = 100) -> DistanceMatrix:
    """
    Inter-class sliced Wasserstein distances of the model's FGSM sign patterns.
    """
    signs, labels = collect_sign_samples(model, dataset, xi, samples_per_class, seed)
    matrix = distance_matrix_from_samples(signs, labels, dataset.num_classes, projections, seed)
    log.info(f"Sign distance matrix: off-diagonal mean {matrix.off_diagonal_mean():.4f}")
    return matrix


def embed_2d(samples: np.ndarray, labels: Sequence[int]) -> List[Tuple[np.ndarray, int]]:
    """
    Projects samples onto the top two principal axes of the centered sample matrix.

    Rank-deficient input falls back to the first two coordinates.

    Returns:
        List of (point [2], label)
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    labels = [int(label) for label in labels]
    num_classes = len(set(labels))
    if len(samples) < 10 * num_classes:
        log.warning(f"Embedding {len(samples)} samples of {num_classes} classes; projection may be unstable")
    centered = samples - samples.mean(axis=0, keepdims=True)
    rank = np.linalg.matrix_rank(centered) if len(samples) > 1 else 0
    if rank < 2:
        log.warning(f"Sample matrix has rank {rank}; using the first two coordinates")
        coords = np.zeros((len(samples), 2))
        width = min(2, samples.shape[1])
        coords[:, :width] = samples[:, :width]
    else:
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        coords = centered @ vt[:2].T
    return [(coords[i], labels[i]) for i in range(len(samples))]


@dataclass
class WeightHistogram:
    """
    Per conv layer, percentages of weights per bucket of r = ||w| - w_bar| / w_bar.

    Attributes:
        edges: Bucket edges (last may be inf)
        percentages: Layer name -> percentage per bucket
        max_r: Layer name -> largest r
    """
    edges: List[float]
    percentages: Dict[str, List[float]] = field(default_factory=dict)
    max_r: Dict[str, float] = field(default_factory=dict)

    def overall_max_r(self) -> float:
        return max(self.max_r.values()) if self.max_r else 0.0

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for layer, percents in self.percentages.items():
            for i, percent in enumerate(percents):
                rows.append({"layer": layer, "bucket_low": self.edges[i], "bucket_high": self.edges[i + 1],
                             "percent": percent, "max_r": self.max_r[layer]})
        return pd.DataFrame(rows, columns=["layer", "bucket_low", "bucket_high", "percent", "max_r"])


def deviation_ratios(weights: np.ndarray) -> np.ndarray:
    magnitude = np.abs(np.asarray(weights, dtype=np.float64)).ravel()
    w_bar = magnitude.mean()
    if w_bar == 0:
        return np.zeros_like(magnitude)
    return np.abs(magnitude - w_bar) / w_bar


def weight_histogram(model: ModelState, edges: Sequence[float] = tuple(DEFAULT_HISTOGRAM_EDGES)) -> WeightHistogram:
    """
    Buckets the deviation ratio r of every conv weight.

    Raises:
        InputError: If the model has no conv layer or edges are not increasing
    """
    edges = [float(edge) for edge in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise InputError(f"Histogram edges must be increasing, got {edges}")
    if not model.conv_layer_names:
        raise InputError("Weight histogram needs at least one conv layer")
    histogram = WeightHistogram(edges)
    buckets = len(edges) - 1
    for name in model.conv_layer_names:
        r = deviation_ratios(model.layer(name).weight.detach().cpu().numpy())
        index = np.clip(np.searchsorted(edges, r, side="right") - 1, 0, buckets - 1)
        counts = np.bincount(index, minlength=buckets)
        histogram.percentages[name] = (100.0 * counts / r.size).tolist()
        histogram.max_r[name] = float(r.max())
    return histogram


def pairwise_cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity in [-1, 1]; zero rows give 0."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    dots = np.einsum("ij,ij->i", a, b)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a) * np.einsum("ij,ij->i", b, b))
    cosine = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    return np.clip(cosine, -1.0, 1.0)


@dataclass
class SimilarityCurves:
    """One row per checkpoint with the SIMILARITY_COLUMNS fields."""
    rows: List[Dict[str, float]] = field(default_factory=list)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=SIMILARITY_COLUMNS)

    def column(self, name: str) -> List[float]:
        return [row[name] for row in self.rows]


def sample_pairs(labels: np.ndarray, count: int, same_class: bool, rng: np.random.Generator) -> np.ndarray:
    """Draws count index pairs of distinct examples with equal (or different) labels."""
    pairs = []
    attempts = 0
    while len(pairs) < count and attempts < count * 50:
        i, j = rng.integers(0, len(labels), size=2)
        attempts += 1
        if i != j and (labels[i] == labels[j]) == same_class:
            pairs.append((i, j))
    if not pairs:
        raise InputError(f"No {'same' if same_class else 'cross'}-class pairs available")
    return np.asarray(pairs)


def similarity_curves(model_series: Sequence[ModelState], dataset, xi: float, pair_samples: int = 256,
                      seed: int = 0, epsilon: Optional[float] = None) -> SimilarityCurves:
    """
    Cosine similarities per checkpoint over fixed random pairs: predictions on FGSM-RS
    adversarial examples (cross-class and same-class), perturbations and adversarial examples (same-class).

    Args:
        model_series: Checkpoints in epoch order
        dataset: ImageDataset
        xi: Budget
        pair_samples: Pairs per similarity
        seed: Seed for pairs and random starts
        epsilon: FGSM step (1.25 * xi when None)
    """
    if not model_series:
        raise InputError("similarity_curves needs at least one checkpoint")
    epsilon = 1.25 * xi if epsilon is None else epsilon
    labels = dataset.labels.numpy()
    rng = np.random.default_rng(seed)
    intra = sample_pairs(labels, pair_samples, True, rng)
    inter = sample_pairs(labels, pair_samples, False, rng)
    x, y = dataset.images, dataset.labels

    curves = SimilarityCurves()
    for model in model_series:
        generator = torch.Generator()
        generator.manual_seed(int(seed))
        delta0 = init_delta_random(x.shape, xi, generator=generator).delta
        signs = fgsm_sign(model, x, delta0, y)
        adv = fgsm_rs_delta(delta0, signs, epsilon, xi)
        x_adv = adv.apply(x)
        with torch.no_grad():
            preds = torch.softmax(forward(model, x_adv), dim=1).numpy()
        perturb = (x_adv - x).reshape(len(x), -1).numpy()
        examples = x_adv.reshape(len(x), -1).numpy()
        curves.rows.append({
            "epoch": model.epoch,
            "interclass_pred_sim": float(pairwise_cosine(preds[inter[:, 0]], preds[inter[:, 1]]).mean()),
            "intraclass_pred_sim": float(pairwise_cosine(preds[intra[:, 0]], preds[intra[:, 1]]).mean()),
            "intraclass_perturb_sim": float(pairwise_cosine(perturb[intra[:, 0]], perturb[intra[:, 1]]).mean()),
            "intraclass_advexample_sim": float(pairwise_cosine(examples[intra[:, 0]], examples[intra[:, 1]]).mean()),
        })
    return curves


def extract_ucd_trigger(source, t: int, xi: float, labels: Optional[Sequence[int]] = None) -> torch.Tensor:
    """
    Class-t sign pattern scaled so its infinity norm equals xi.

    Args:
        source: TriggerBank, or sign samples [N, ...] together with labels
        t: Class
        xi: Budget
        labels: Labels of the sign samples

    Raises:
        InputError: If sign samples come without labels or hold no row of class t
    """
    if hasattr(source, "values") and isinstance(getattr(source, "values"), torch.Tensor):
        pattern = source.values[int(t)].detach().clone()
    else:
        if labels is None:
            raise InputError("Sign samples need labels to extract a class trigger")
        samples = torch.as_tensor(np.asarray(source), dtype=torch.float32)
        mask = torch.as_tensor(np.asarray(labels)) == int(t)
        if not bool(mask.any()):
            raise InputError(f"No sign samples of class {t}")
        pattern = samples[mask].mean(dim=0)
    peak = float(pattern.abs().max()) if pattern.numel() else 0.0
    if peak == 0.0:
        return torch.zeros_like(pattern)
    return torch.clamp(pattern * (xi / peak), -xi, xi)


@dataclass
class InjectionReport:
    """
    Effect of adding a trigger to clean inputs.

    Attributes:
        clean_acc: Accuracy on clean inputs (percent)
        injected_acc: Accuracy with the trigger added
        accuracy_delta: injected_acc - clean_acc
        clean_target_rate: Percentage predicted as target_class on clean inputs
        injected_target_rate: Same with the trigger added
    """
    clean_acc: float
    injected_acc: float
    accuracy_delta: float
    clean_target_rate: float
    injected_target_rate: float


def inject_trigger(model: ModelState, x: torch.Tensor, y: torch.Tensor, trigger: torch.Tensor,
                   strength: float, target_class: int) -> InjectionReport:
    """Adds strength * trigger to x (clamped to [0, 1]) and compares predictions."""
    trigger = trigger.reshape(1, *x.shape[1:])
    x_injected = torch.clamp(x + strength * trigger, 0.0, 1.0)
    with torch.no_grad():
        clean_pred = forward(model, x).argmax(dim=1)
        injected_pred = forward(model, x_injected).argmax(dim=1)
    n = max(1, x.shape[0])
    clean_acc = 100.0 * float((clean_pred == y).sum()) / n
    injected_acc = 100.0 * float((injected_pred == y).sum()) / n
    return InjectionReport(
        clean_acc=clean_acc,
        injected_acc=injected_acc,
        accuracy_delta=injected_acc - clean_acc,
        clean_target_rate=100.0 * float((clean_pred == target_class).sum()) / n,
        injected_target_rate=100.0 * float((injected_pred == target_class).sum()) / n,
    )


TRIGGER_COLUMNS = ["class", "clean_target_rate", "injected_target_rate", "clean_acc", "injected_acc",
                   "accuracy_delta"]


def trigger_injection_table(model: ModelState, dataset, signs: np.ndarray, labels: np.ndarray, xi: float,
                            strength: float = 1.0) -> pd.DataFrame:
    """
    Extracts the trigger of every class from sign samples and injects it into the clean inputs.

    Args:
        model: Checkpoint under test
        dataset: Clean inputs; row i must be the input sign sample i was computed on
        signs: Sign samples [N, D] from collect_sign_samples
        labels: Labels of the sign samples
        xi: Trigger budget
        strength: Multiplier of the injected trigger

    Returns:
        DataFrame with TRIGGER_COLUMNS, one row per class present in labels
    """
    x, y = dataset.images[:len(labels)], dataset.labels[:len(labels)]
    rows = []
    for t in sorted(set(int(label) for label in labels)):
        trigger = extract_ucd_trigger(signs, t, xi, labels=labels)
        report = inject_trigger(model, x, y, trigger, strength, t)
        rows.append({"class": t, "clean_target_rate": report.clean_target_rate,
                     "injected_target_rate": report.injected_target_rate, "clean_acc": report.clean_acc,
                     "injected_acc": report.injected_acc, "accuracy_delta": report.accuracy_delta})
    return pd.DataFrame(rows, columns=TRIGGER_COLUMNS)


def accuracy_ordering_check(row: Mapping[str, float], class_count: int, tol: float = 5.0,
                            tol2: float = 5.0, strict: bool = False) -> bool:
    """
    Ordering of accuracies expected after CO: adversarial (FGSM) accuracy comparable to clean
    accuracy, perturbed accuracy close to clean accuracy, and clean accuracy well above chance.

    Args:
        row: Mapping with clean_acc, perturbed_acc and fgsm_acc
        class_count: Number of classes
        tol: Allowed adversarial deficit (against clean, or against perturbed when strict)
        tol2: Allowed |perturbed - clean| gap
        strict: Compare adversarial with perturbed accuracy using tol = 2
    """
    clean = row["clean_acc"]
    perturbed = row["perturbed_acc"]
    adversarial = row["fgsm_acc"]
    chance = 100.0 / class_count
    if strict:
        adversarial_ok = adversarial >= perturbed - 2.0
    else:
        adversarial_ok = adversarial >= clean - tol
    return bool(adversarial_ok and abs(perturbed - clean) <= tol2 and clean > 2 * chance)
