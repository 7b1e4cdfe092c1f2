#!/usr/bin/env python3
"""
Unit tests for unlearnable poisons and their experiments.
"""
import unittest
import os
import shutil
import tempfile

import torch

from src.datasets import DatasetSpec, ImageDataset, load_dataset
from src.fat_train import TrainConfig
from src.unlearnable import (PoisonedDataset, PoisonSpec, generate_poison, inject_patch_backdoor,
                             paradigm_comparison, poison_fingerprint, random_noise_defense, transfer_experiment)
from src.utils import FormatError, InputError


def fast_spec(**overrides) -> PoisonSpec:
    values = dict(budget=8 / 255, generator_epochs=1, surrogate_steps=1, perturb_steps=2, seed=0)
    values.update(overrides)
    return PoisonSpec(**values)


def fast_config(**overrides) -> TrainConfig:
    values = dict(epochs=1, batch_size=8, eval_size=8, pgd_train_steps=1)
    values.update(overrides)
    return TrainConfig(**values)


class TestPoisonedDataset(unittest.TestCase):
    """Test cases for PoisonedDataset."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.base = ImageDataset(torch.full((4, 1, 2, 2), 0.5), torch.tensor([0, 1, 0, 1]), 2)

    def tearDown(self):
        """Tear down test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_class_wise_materialize(self):
        """Test that each row receives its class perturbation, clamped to [0, 1]."""
        perturbations = torch.stack([torch.full((1, 2, 2), 0.1), torch.full((1, 2, 2), -0.7)])
        data = PoisonedDataset(self.base, perturbations, "class_wise", 0.7).materialize()
        self.assertTrue(torch.allclose(data.images[0], torch.full((1, 2, 2), 0.6)))
        self.assertTrue(torch.equal(data.images[1], torch.zeros(1, 2, 2)))
        self.assertTrue(torch.equal(data.labels, self.base.labels))

    def test_shape_checked(self):
        """Test that perturbations must match the mode."""
        with self.assertRaises(InputError):
            PoisonedDataset(self.base, torch.zeros(2, 1, 2, 2), "sample_wise", 0.1)
        with self.assertRaises(InputError):
            PoisonedDataset(self.base, torch.zeros(2, 1, 3, 3), "class_wise", 0.1)

    def test_save_load(self):
        """Test persisting a poison and reloading it against its base."""
        path = os.path.join(self.temp_dir, "poison.ckpt")
        perturbations = torch.rand(4, 1, 2, 2) * 0.02 - 0.01
        PoisonedDataset(self.base, perturbations, "sample_wise", 0.01).save(path)
        loaded = PoisonedDataset.load(path, self.base)
        self.assertEqual(loaded.mode, "sample_wise")
        self.assertTrue(torch.equal(loaded.perturbations, perturbations))

        PoisonedDataset(self.base, perturbations, "sample_wise", 0.01, fingerprint="abc123").save(path)
        self.assertEqual(PoisonedDataset.load(path, self.base).fingerprint, "abc123")

        other = ImageDataset(torch.zeros(6, 1, 2, 2), torch.zeros(6, dtype=torch.long), 2)
        with self.assertRaises(FormatError):
            PoisonedDataset.load(path, other)


class TestGeneratePoison(unittest.TestCase):
    """Test cases for poison generation."""

    def setUp(self):
        self.train_data, self.test_data = load_dataset(
            DatasetSpec(subset_size=16, test_size=8, class_count=2, image_size=8))

    def test_spec_validation(self):
        """Test that invalid poison settings are rejected."""
        for bad in (dict(budget=-0.1), dict(mode="patch"), dict(generator_epochs=0), dict(poison_rate=1.5)):
            with self.assertRaises(InputError):
                PoisonSpec(**bad).validate()

    def test_fingerprint(self):
        """Test that the fingerprint is stable and tracks the spec, the surrogate and the data."""
        base = poison_fingerprint(self.train_data, fast_spec(), fast_config())
        self.assertEqual(base, poison_fingerprint(self.train_data, fast_spec(), fast_config()))
        self.assertNotEqual(base, poison_fingerprint(self.train_data, fast_spec(perturb_steps=3), fast_config()))
        self.assertNotEqual(base, poison_fingerprint(self.train_data, fast_spec(), fast_config(lr_max=0.2)))
        self.assertNotEqual(base, poison_fingerprint(self.test_data, fast_spec(), fast_config()))
        self.assertEqual(base, poison_fingerprint(self.train_data, fast_spec(), fast_config(epochs=3)))
        self.assertEqual(generate_poison(self.train_data, fast_spec(), fast_config()).fingerprint, base)

    def test_zero_budget(self):
        """Test that a zero budget leaves the data unperturbed."""
        poisoned = generate_poison(self.train_data, fast_spec(budget=0.0), fast_config())
        self.assertTrue(torch.equal(poisoned.materialize().images, self.train_data.images))

    def test_class_wise_within_budget(self):
        """Test one perturbation per class inside the budget."""
        poisoned = generate_poison(self.train_data, fast_spec(), fast_config())
        self.assertEqual(tuple(poisoned.perturbations.shape), (2, 3, 8, 8))
        self.assertLessEqual(float(poisoned.perturbations.abs().max()), 8 / 255 + 1e-7)

    def test_sample_wise_within_budget(self):
        """Test one perturbation per example inside the budget."""
        poisoned = generate_poison(self.train_data, fast_spec(mode="sample_wise"), fast_config())
        self.assertEqual(tuple(poisoned.perturbations.shape), (16, 3, 8, 8))
        self.assertLessEqual(float(poisoned.perturbations.abs().max()), 8 / 255 + 1e-7)


class TestDefensesAndBackdoor(unittest.TestCase):
    """Test cases for the noise defense and patch backdoor."""

    def setUp(self):
        self.dataset = ImageDataset(torch.full((10, 1, 4, 4), 0.5), torch.arange(10) % 2, 2)

    def test_noise_bounded(self):
        """Test that defense noise stays within its scale."""
        noisy = random_noise_defense(self.dataset, 0.05, seed=1)
        self.assertLessEqual(float((noisy.images - self.dataset.images).abs().max()), 0.05 + 1e-7)
        self.assertIs(random_noise_defense(self.dataset, 0.0), self.dataset)

    def test_patch_backdoor(self):
        """Test that the poison rate share is patched and relabelled."""
        backdoored = inject_patch_backdoor(self.dataset, target_class=1, poison_rate=0.3, patch_size=2, seed=0)
        changed = (backdoored.images != self.dataset.images).flatten(1).any(dim=1)
        self.assertEqual(int(changed.sum()), 3)
        self.assertTrue((backdoored.labels[changed] == 1).all())
        row = int(torch.nonzero(changed)[0])
        self.assertEqual(backdoored.images[row, 0, -2:, -2:].tolist(), [[0.0, 1.0], [1.0, 0.0]])


class TestExperiments(unittest.TestCase):
    """Test cases for the transfer and paradigm experiments."""

    def setUp(self):
        self.train_data, self.test_data = load_dataset(
            DatasetSpec(subset_size=16, test_size=8, class_count=2, image_size=8))
        self.poisoned = generate_poison(self.train_data, fast_spec(), fast_config())

    def test_transfer_table(self):
        """Test one row per trainer with the poison budget."""
        frame = transfer_experiment(self.train_data, self.test_data, fast_spec(), fast_config(),
                                    trainers=["standard", "standard_lreg"], poisoned=self.poisoned)
        self.assertEqual(frame["trainer"].tolist(), ["standard", "standard_lreg"])
        self.assertEqual(list(frame.columns), ["trainer", "budget", "clean_test_acc", "seconds", "max_r"])
        self.assertTrue(((frame["clean_test_acc"] >= 0) & (frame["clean_test_acc"] <= 100)).all())

    def test_transfer_unknown_trainer(self):
        """Test that unknown trainers are rejected."""
        with self.assertRaises(InputError):
            transfer_experiment(self.train_data, self.test_data, fast_spec(), fast_config(),
                                trainers=["trades"], poisoned=self.poisoned)

    def test_paradigm_rows(self):
        """Test the four paradigms in order."""
        frame = paradigm_comparison(self.train_data, self.test_data, fast_spec(), fast_config(),
                                    poisoned=self.poisoned)
        self.assertEqual(frame["paradigm"].tolist(),
                         ["original", "standard_backdoor", "co_affected_mep", "unlearnable"])


if __name__ == "__main__":
    unittest.main()
