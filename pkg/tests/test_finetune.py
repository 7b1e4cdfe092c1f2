#!/usr/bin/env python3
"""
Unit tests for recovery recipes and the stability protocol.
"""
import unittest

import torch

from src.attacks import AttackSuite
from src.datasets import DatasetSpec, load_dataset
from src.fat_train import CoReport, MetricsRecord, TrainConfig
from src.finetune import (CO_MARK, STABLE_MARK, FinetuneRecipe, RecoveryReport, apply_recipe, prepare_recipe,
                          recurrence_probe, shift_penalty, stability_protocol)
from src.nn_core import ModelState, reinit_layers
from src.utils import InputError


def tiny_model(seed: int = 0) -> ModelState:
    return ModelState.reference(3, 2, 8, rng_seed=seed, widths=(4, 4))


def tiny_config(**overrides) -> TrainConfig:
    values = dict(epochs=1, batch_size=8, eval_size=8, seed=0)
    values.update(overrides)
    return TrainConfig(**values)


class TestFinetuneRecipe(unittest.TestCase):
    """Test cases for FinetuneRecipe."""

    def test_name(self):
        """Test recipe display names."""
        self.assertEqual(FinetuneRecipe("rsft", data_mode="adversarial").name, "RSFT-CO-Adv")
        self.assertEqual(FinetuneRecipe("vft").name, "VFT-CO-Clean")

    def test_validate(self):
        """Test that invalid recipes are rejected."""
        for bad in (FinetuneRecipe("sft"), FinetuneRecipe("rf", k=0), FinetuneRecipe("lp", k=6),
                    FinetuneRecipe("rft", lambda_shift=0.1), FinetuneRecipe("rsft", lambda_shift=-1.0),
                    FinetuneRecipe(data_mode="mixed"), FinetuneRecipe(epochs=0)):
            with self.assertRaises(InputError):
                bad.validate(5)
        FinetuneRecipe("vft", k=0).validate(5)


class TestPrepareRecipe(unittest.TestCase):
    """Test cases for reinitialization and freeze masks."""

    def setUp(self):
        self.model_co = tiny_model(seed=4)
        self.names = self.model_co.layer_names

    def test_lp_freezes_suffix(self):
        """Test that linear probing trains only the first k layers."""
        model, terms = prepare_recipe(self.model_co, FinetuneRecipe("lp", k=2))
        self.assertEqual(model.mask.frozen, frozenset(self.names[2:]))
        self.assertEqual(terms, [])
        last, _ = prepare_recipe(self.model_co, FinetuneRecipe("lp", k=1, lp_from="last"))
        self.assertEqual(last.mask.frozen, frozenset(self.names[:-1]))

    def test_rf_reinitializes_and_freezes(self):
        """Test that RF matches a fresh draw of the prefix and freezes it."""
        model, _ = prepare_recipe(self.model_co, FinetuneRecipe("rf", k=2), seed=7)
        expected = reinit_layers(self.model_co.clone(), 2, 7)
        self.assertTrue(torch.equal(model.parameter_vector(self.names[:2]), expected.parameter_vector(self.names[:2])))
        self.assertTrue(torch.equal(model.parameter_vector(self.names[2:]),
                                    self.model_co.parameter_vector(self.names[2:])))
        self.assertEqual(model.mask.frozen, frozenset(self.names[:2]))

    def test_rft_trains_everything(self):
        """Test that RFT leaves nothing frozen and the checkpoint untouched."""
        before = self.model_co.parameter_vector().clone()
        model, _ = prepare_recipe(self.model_co, FinetuneRecipe("rft", k=2), seed=1)
        self.assertEqual(model.mask.frozen, frozenset())
        self.assertTrue(torch.equal(self.model_co.parameter_vector(), before))
        self.assertFalse(torch.equal(model.parameter_vector(), before))

    def test_rsft_shift_term(self):
        """Test the weight-shift penalty at and away from its reference."""
        model, terms = prepare_recipe(self.model_co, FinetuneRecipe("rsft", k=2, lambda_shift=0.5))
        self.assertEqual(len(terms), 1)
        self.assertAlmostEqual(float(terms[0](model, None)), 0.0, places=5)

        theta = self.model_co.parameter_vector().detach()
        inner = shift_penalty(theta, 2.0, mode="inner")
        self.assertAlmostEqual(float(inner(self.model_co, None)), -2.0 * float(theta @ theta), places=3)


class TestApplyRecipe(unittest.TestCase):
    """Test cases for apply_recipe and the recurrence probe."""

    def setUp(self):
        self.train_data, self.test_data = load_dataset(
            DatasetSpec(subset_size=16, test_size=8, class_count=2, image_size=8))
        self.model_co = tiny_model(seed=2)

    def test_lp_keeps_frozen_layers(self):
        """Test that layers outside the probed prefix keep their weights."""
        names = self.model_co.layer_names
        recovered = apply_recipe(self.model_co, FinetuneRecipe("lp", k=2), self.train_data, tiny_config())
        self.assertTrue(torch.equal(recovered.parameter_vector(names[2:]),
                                    self.model_co.parameter_vector(names[2:])))
        self.assertFalse(torch.equal(recovered.parameter_vector(names[:2]),
                                     self.model_co.parameter_vector(names[:2])))
        self.assertEqual(recovered.mask.frozen, frozenset())

    def test_rsft_without_penalty_is_rft(self):
        """Test that RSFT with a zero shift weight fine-tunes exactly like RFT."""
        rsft = apply_recipe(self.model_co, FinetuneRecipe("rsft", k=2, lambda_shift=0.0), self.train_data,
                            tiny_config(), seed=3)
        rft = apply_recipe(self.model_co, FinetuneRecipe("rft", k=2), self.train_data, tiny_config(), seed=3)
        self.assertTrue(torch.equal(rsft.parameter_vector(), rft.parameter_vector()))

    def test_lp_over_all_layers_is_vft(self):
        """Test that probing every layer fine-tunes exactly like VFT."""
        k = len(self.model_co.layer_names)
        lp = apply_recipe(self.model_co, FinetuneRecipe("lp", k=k), self.train_data, tiny_config(), seed=1)
        vft = apply_recipe(self.model_co, FinetuneRecipe("vft"), self.train_data, tiny_config(), seed=1)
        self.assertTrue(torch.equal(lp.parameter_vector(), vft.parameter_vector()))

    def test_adversarial_data_mode(self):
        """Test adversarial fine-tuning runs and leaves a finite model."""
        recovered = apply_recipe(self.model_co, FinetuneRecipe("rft", k=1, data_mode="adversarial"),
                                 self.train_data, tiny_config())
        recovered.check_finite()

    def test_probe_without_epochs(self):
        """Test that no extra epochs counts as stable."""
        report = recurrence_probe(self.model_co, self.train_data, tiny_config(), 0, seeds=[0, 1])
        self.assertEqual(report.st_string, STABLE_MARK * 2)

    def test_probe_rows(self):
        """Test that the probe prepends the recovered model as epoch 0."""
        report = recurrence_probe(self.model_co, self.train_data, tiny_config(), 1, seeds=[3],
                                  eval_data=self.test_data)
        self.assertEqual(report.probe_metrics[0].column("epoch"), [0, 1])
        self.assertEqual(len(report.st_string), 1)

    def test_stability_protocol(self):
        """Test one ST mark per seed and averaged post accuracies."""
        suite = AttackSuite(attacks=["clean", "fgsm", "pgd10"], xi=8 / 255)
        report = stability_protocol(self.model_co, FinetuneRecipe("vft"), self.train_data, tiny_config(),
                                    seeds=(0, 1), probe_epochs=1, eval_data=self.test_data, suite=suite)
        self.assertEqual(report.seeds, [0, 1])
        self.assertEqual(len(report.st_string), 2)
        self.assertEqual(set(report.post), {"clean_acc", "fgsm_acc", "pgd10_acc"})
        self.assertIn(report.recipe, report.to_text())


class TestRecoveryReport(unittest.TestCase):
    """Test cases for RecoveryReport rendering."""

    def test_st_string_and_text(self):
        """Test ST marks and the rendered table."""
        rows = [{"epoch": 0, "clean_acc": 50.0, "perturbed_acc": 49.0, "fgsm_acc": 30.0, "pgd10_acc": 25.0},
                {"epoch": 1, "clean_acc": 52.0, "perturbed_acc": 51.0, "fgsm_acc": 31.0, "pgd10_acc": 26.0}]
        report = RecoveryReport(recipe="RSFT-CO-Clean",
                                pre={"clean_acc": 80.0, "fgsm_acc": 79.0},
                                post={"clean_acc": 52.0, "fgsm_acc": 31.0},
                                recurrence=[CoReport(False), CoReport(True, 3), CoReport(False)],
                                probe_metrics=[MetricsRecord(rows)] * 3, seeds=[0, 1, 2])
        self.assertEqual(report.st_string, STABLE_MARK + CO_MARK + STABLE_MARK)
        text = report.to_text()
        self.assertIn("RSFT-CO-Clean", text)
        self.assertTrue(text.splitlines()[-1].endswith(report.st_string))
        self.assertIn("80.00", text)


if __name__ == "__main__":
    unittest.main()
