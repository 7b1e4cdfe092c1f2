#!/usr/bin/env python3
"""
Unit tests for perturbation generation and attack evaluation.
"""
import unittest

import torch

from src.attacks import (AttackSuite, MepBuffer, PerturbationBatch, evaluate, fgsm_rs_delta, fgsm_sign,
                         init_delta_random, mep_init, mep_update, parse_attack_name, pgd_attack,
                         straight_through_sign)
from src.datasets import ImageDataset
from src.nn_core import LayerSpec, ModelState
from src.utils import InputError


def linear_head(weight=((1.0,), (-1.0,)), bias=(0.0, 0.0)) -> ModelState:
    model = ModelState([LayerSpec("fc", "linear", 1, 2)], (1, 1, 1))
    with torch.no_grad():
        model.layer("fc").weight.copy_(torch.tensor(weight))
        model.layer("fc").bias.copy_(torch.tensor(bias))
    return model


class TestRandomStart(unittest.TestCase):
    """Test cases for init_delta_random."""

    def test_within_budget(self):
        """Test that both distributions stay inside the ball."""
        for distribution in ("uniform", "gaussian"):
            batch = init_delta_random((64, 3, 4, 4), 8 / 255, rng_seed=1, distribution=distribution)
            self.assertTrue(batch.within_budget())
            self.assertEqual(tuple(batch.delta.shape), (64, 3, 4, 4))

    def test_seeded(self):
        """Test that the same seed gives the same start."""
        first = init_delta_random((5, 2), 0.1, rng_seed=3).delta
        second = init_delta_random((5, 2), 0.1, rng_seed=3).delta
        self.assertTrue(torch.equal(first, second))

    def test_zero_budget(self):
        """Test that a zero budget gives a zero start."""
        self.assertTrue(torch.equal(init_delta_random((3,), 0.0, rng_seed=0).delta, torch.zeros(3)))

    def test_invalid(self):
        """Test that a negative budget or unknown distribution is rejected."""
        with self.assertRaises(InputError):
            init_delta_random((3,), -0.1)
        with self.assertRaises(InputError):
            init_delta_random((3,), 0.1, distribution="laplace")

    def test_apply_clamps(self):
        """Test that applying a perturbation stays in [0, 1]."""
        batch = PerturbationBatch(torch.tensor([0.5, -0.5]), 0.5)
        self.assertTrue(torch.equal(batch.apply(torch.tensor([0.8, 0.2])), torch.tensor([1.0, 0.0])))


class TestFgsm(unittest.TestCase):
    """Test cases for FGSM signs and the delta rule."""

    def test_sign_on_linear_head(self):
        """Test the gradient sign of a 2-class linear head."""
        model = linear_head()
        x = torch.full((2, 1, 1, 1), 0.5)
        signs = fgsm_sign(model, x, torch.zeros_like(x), torch.tensor([0, 1]))
        self.assertEqual(signs.flatten().tolist(), [-1.0, 1.0])

    def test_straight_through(self):
        """Test that the straight-through sign passes gradients unchanged."""
        g = torch.tensor([0.3, -2.0, 0.0], requires_grad=True)
        out = straight_through_sign(g)
        self.assertEqual(out.tolist(), [1.0, -1.0, 0.0])
        (out * torch.tensor([1.0, 2.0, 3.0])).sum().backward()
        self.assertEqual(g.grad.tolist(), [1.0, 2.0, 3.0])

    def test_create_graph_reaches_parameters(self):
        """Test that a penalty on straight-through signs has parameter gradients."""
        model = linear_head()
        x = torch.full((2, 1, 1, 1), 0.5)
        signs = fgsm_sign(model, x, torch.zeros_like(x), torch.tensor([0, 1]), create_graph=True)
        signs.sum().backward()
        self.assertIsNotNone(model.layer("fc").weight.grad)

    def test_delta_rule(self):
        """Test one step of size epsilon clipped to the budget."""
        xi = 0.1
        delta0 = torch.tensor([0.0, 0.09, -0.05])
        signs = torch.tensor([1.0, 1.0, -1.0])
        batch = fgsm_rs_delta(delta0, signs, 1.25 * xi, xi)
        self.assertTrue(torch.allclose(batch.delta, torch.tensor([0.1, 0.1, -0.1])))
        batch = fgsm_rs_delta(torch.zeros(2), torch.tensor([1.0, -1.0]), 0.02, xi)
        self.assertTrue(torch.allclose(batch.delta, torch.tensor([0.02, -0.02])))

    def test_delta_rule_invalid(self):
        """Test that negative step sizes are rejected."""
        with self.assertRaises(InputError):
            fgsm_rs_delta(torch.zeros(1), torch.ones(1), -1.0, 0.1)


class TestMepBuffer(unittest.TestCase):
    """Test cases for per-example momentum perturbations."""

    def test_cold_rows_initialized_once(self):
        """Test that a row keeps its stored value after the first draw."""
        buffer = MepBuffer(4, (1, 2, 2), xi=0.1)
        gen = torch.Generator()
        gen.manual_seed(0)
        first = mep_init(buffer, [1, 2], gen).delta
        second = mep_init(buffer, [1, 2], gen).delta
        self.assertTrue(torch.equal(first, second))
        self.assertEqual(buffer.initialized.tolist(), [False, True, True, False])
        self.assertTrue((first.abs() <= 0.1).all())

    def test_update_recurrence(self):
        """Test row <- clip(mu * row + epsilon * sign)."""
        buffer = MepBuffer(2, (1,), xi=0.1, decay=0.5)
        buffer.rows[:] = torch.tensor([[0.08], [-0.04]])
        buffer.initialized[:] = True
        mep_update(buffer, [0, 1], torch.tensor([[1.0], [-1.0]]), epsilon=0.05)
        self.assertTrue(torch.allclose(buffer.rows, torch.tensor([[0.09], [-0.07]])))
        mep_update(buffer, [0], torch.tensor([[1.0]]), epsilon=0.1)
        self.assertAlmostEqual(float(buffer.rows[0, 0]), 0.1, places=6)

    def test_unknown_ids(self):
        """Test that ids outside the buffer are rejected."""
        buffer = MepBuffer(2, (1,), xi=0.1)
        with self.assertRaises(InputError):
            buffer.init([2])
        with self.assertRaises(InputError):
            buffer.update([-1], torch.ones(1, 1), 0.1)

    def test_decay_range(self):
        """Test that decay outside [0, 1) is rejected."""
        with self.assertRaises(InputError):
            MepBuffer(2, (1,), xi=0.1, decay=1.0)


class TestPgd(unittest.TestCase):
    """Test cases for pgd_attack."""

    def test_moves_against_label(self):
        """Test that PGD walks to the edge of the ball on a linear head."""
        model = linear_head()
        x = torch.full((1, 1, 1, 1), 0.5)
        x_adv = pgd_attack(model, x, torch.tensor([0]), steps=5, step_size=0.05, xi=0.1, random_start=False)
        self.assertAlmostEqual(float(x_adv), 0.4, places=6)

    def test_projection(self):
        """Test that results stay in the ball and in [0, 1]."""
        model = ModelState.reference(3, 4, 8, rng_seed=2, widths=(4, 4))
        x = torch.rand(6, 3, 8, 8)
        gen = torch.Generator()
        gen.manual_seed(0)
        x_adv = pgd_attack(model, x, torch.arange(6) % 4, steps=3, step_size=0.02, xi=0.03, restarts=2,
                           generator=gen)
        self.assertLessEqual(float((x_adv - x).abs().max()), 0.03 + 1e-6)
        self.assertGreaterEqual(float(x_adv.min()), 0.0)
        self.assertLessEqual(float(x_adv.max()), 1.0)

    def test_single_step_matches_fgsm(self):
        """Test that one full-budget step from the clean input is the FGSM example."""
        model = ModelState.reference(3, 4, 8, rng_seed=5, widths=(4,))
        gen = torch.Generator()
        gen.manual_seed(3)
        x = torch.rand(5, 3, 8, 8, generator=gen)
        y = torch.arange(5) % 4
        xi = 8 / 255
        pgd = pgd_attack(model, x, y, steps=1, step_size=xi, xi=xi, random_start=False, keep_best=False)
        zero = torch.zeros_like(x)
        fgsm = fgsm_rs_delta(zero, fgsm_sign(model, x, zero, y), xi, xi).apply(x)
        self.assertTrue(torch.equal(pgd, fgsm))

    def test_zero_budget(self):
        """Test that a zero budget returns the clean input."""
        model = linear_head()
        x = torch.rand(3, 1, 1, 1)
        self.assertTrue(torch.equal(pgd_attack(model, x, torch.zeros(3, dtype=torch.long), 4, 0.1, 0.0), x))

    def test_invalid_steps(self):
        """Test that zero steps or restarts are rejected."""
        model = linear_head()
        x = torch.rand(1, 1, 1, 1)
        with self.assertRaises(InputError):
            pgd_attack(model, x, torch.tensor([0]), 0, 0.1, 0.1)
        with self.assertRaises(InputError):
            pgd_attack(model, x, torch.tensor([0]), 1, 0.1, 0.1, restarts=0)


class TestEvaluate(unittest.TestCase):
    """Test cases for suite evaluation."""

    def test_parse_attack_name(self):
        """Test suite name parsing."""
        self.assertEqual(parse_attack_name("clean"), ("clean", 0))
        self.assertEqual(parse_attack_name("fgsm"), ("fgsm", 1))
        self.assertEqual(parse_attack_name("pgd50"), ("pgd", 50))
        for bad in ("pgd0", "cw", "pgd"):
            with self.assertRaises(InputError):
                parse_attack_name(bad)

    def test_linear_head_accuracies(self):
        """Test accuracies where the attack budget flips every prediction."""
        model = linear_head(bias=(-0.3, 0.3))
        dataset = ImageDataset(torch.full((8, 1, 1, 1), 0.5), torch.zeros(8, dtype=torch.long), 2)
        suite = AttackSuite(attacks=["clean", "perturbed", "fgsm", "pgd10"], xi=0.3, step_size=0.1)
        results = evaluate(model, dataset, suite)
        self.assertEqual(list(results), ["clean_acc", "perturbed_acc", "fgsm_acc", "pgd10_acc"])
        self.assertEqual(results["clean_acc"], 100.0)
        self.assertEqual(results["fgsm_acc"], 0.0)
        self.assertEqual(results["pgd10_acc"], 0.0)
        self.assertTrue(0.0 <= results["perturbed_acc"] <= 100.0)

    def test_small_budget_keeps_accuracy(self):
        """Test that a budget too small to cross the boundary changes nothing."""
        model = linear_head(bias=(-0.3, 0.3))
        dataset = ImageDataset(torch.full((4, 1, 1, 1), 0.5), torch.zeros(4, dtype=torch.long), 2)
        results = evaluate(model, dataset, AttackSuite(attacks=["fgsm", "pgd20"], xi=0.1))
        self.assertEqual(results["fgsm_acc"], 100.0)
        self.assertEqual(results["pgd20_acc"], 100.0)

    def test_empty_dataset(self):
        """Test that an empty dataset is rejected."""
        dataset = ImageDataset(torch.zeros(0, 1, 1, 1), torch.zeros(0, dtype=torch.long), 2)
        with self.assertRaises(InputError):
            evaluate(linear_head(), dataset, AttackSuite(attacks=["clean"]))


if __name__ == "__main__":
    unittest.main()
