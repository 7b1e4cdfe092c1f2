#!/usr/bin/env python3
"""
Unit tests for the experiment runner on a tiny synthetic configuration.
"""
import unittest
import os
import json
import shutil
import tempfile

import pandas as pd
import torch

from src.checkpoint import read_container, save_checkpoint
from src.config_manager import ConfigManager
from src.datasets import load_dataset
from src.finetune import CO_MARK, STABLE_MARK
from src.nn_core import ModelState
from src.runner import (FAILED_MARK, RUN_STATE_FILE, SUMMARY_COLUMNS, config_fingerprint, run_attack_eval,
                        run_experiment, run_finetune_experiment, run_unlearnable, st_string, summary_text, sweep)
from src.unlearnable import PoisonedDataset, poison_fingerprint
from src.utils import InputError


def tiny_document(output_dir: str, seeds=(0, 1)) -> dict:
    return {
        "dataset": {"subset_size": 16, "test_size": 8, "class_count": 2, "image_size": 8},
        "train": {"epochs": 2, "batch_size": 8, "eval_size": 8, "pgd_train_steps": 1},
        "attack": {"suite": ["clean", "fgsm", "pgd10"]},
        "finetune": {"probe_epochs": 1},
        "diagnostics": {"samples_per_class": 4, "projections": 4, "pair_samples": 4},
        "unlearnable": {"mode": "sample_wise", "generator_epochs": 1, "surrogate_steps": 1, "perturb_steps": 1,
                        "trainers": ["standard"]},
        "experiment": {"name": "unit", "seeds": list(seeds), "output_dir": output_dir},
    }


def summary_row(seed, status="completed", co=False):
    row = {column: 50.0 for column in SUMMARY_COLUMNS}
    row.update(seed=seed, status=status, co_occurred=co, co_epoch=3 if co else None)
    return row


class TestSummaries(unittest.TestCase):
    """Test cases for ST strings and summary text."""

    def test_st_string(self):
        """Test one mark per seed, including failed seeds and CSV-read flags."""
        rows = [summary_row(0), summary_row(1, co=True), summary_row(2, status="failed: NumericError"),
                dict(summary_row(3), co_occurred="True"), dict(summary_row(4), co_occurred=float("nan"))]
        self.assertEqual(st_string(rows), STABLE_MARK + CO_MARK + FAILED_MARK + CO_MARK + STABLE_MARK)

    def test_summary_text(self):
        """Test the Best/Final block and the failure lines."""
        text = summary_text("unit", [summary_row(0), summary_row(1, status="failed: diverged")])
        self.assertIn("best", text)
        self.assertIn("final", text)
        self.assertIn("seed 1: failed: diverged", text)
        self.assertIn("no completed seeds", summary_text("unit", [summary_row(0, status="failed: x")]))

    def test_fingerprint(self):
        """Test that the fingerprint ignores key order and tracks values."""
        self.assertEqual(config_fingerprint({"a": 1, "b": 2}), config_fingerprint({"b": 2, "a": 1}))
        self.assertNotEqual(config_fingerprint({"a": 1}), config_fingerprint({"a": 2}))


class TestRunExperiment(unittest.TestCase):
    """Test cases for run_experiment and the commands built on its artifacts."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        self.cm = ConfigManager.from_dict(tiny_document(self.temp_dir))

    def tearDown(self):
        """Tear down test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_artifacts_and_idempotence(self):
        """Test per-seed artifacts, the summary and a no-op re-run."""
        run_dir = run_experiment(self.cm, show_progress=False)
        self.assertEqual(run_dir, os.path.join(self.temp_dir, "unit"))
        for name in ("summary.csv", "summary.txt", "config.json", "run.log", RUN_STATE_FILE):
            self.assertTrue(os.path.exists(os.path.join(run_dir, name)), name)
        for seed in (0, 1):
            seed_dir = os.path.join(run_dir, f"seed-{seed}")
            for name in ("metrics.csv", "timings.csv", "eval.csv", "final.ckpt", "best-pgd10.ckpt",
                         "histogram_best.csv", "distance_final.csv", "embedding_final.csv", "trigger_final.csv",
                         "similarity.csv"):
                self.assertTrue(os.path.exists(os.path.join(seed_dir, name)), f"seed-{seed}/{name}")

        summary = pd.read_csv(os.path.join(run_dir, "summary.csv"))
        self.assertEqual(summary["seed"].tolist(), [0, 1])
        self.assertEqual(summary["status"].tolist(), ["completed", "completed"])
        eval_frame = pd.read_csv(os.path.join(run_dir, "seed-0", "eval.csv"))
        self.assertEqual(eval_frame["checkpoint"].tolist(), ["best", "final"])
        self.assertIn("pgd10_acc", eval_frame.columns)
        distances = pd.read_csv(os.path.join(run_dir, "seed-0", "distance_final.csv"), index_col=0)
        self.assertEqual(distances.shape, (2, 2))
        self.assertEqual(distances.iloc[0, 0], 0.0)
        triggers = pd.read_csv(os.path.join(run_dir, "seed-0", "trigger_final.csv"))
        self.assertEqual(triggers["class"].tolist(), [0, 1])
        self.assertTrue(((triggers["injected_target_rate"] >= 0) & (triggers["injected_target_rate"] <= 100)).all())

        with open(os.path.join(run_dir, RUN_STATE_FILE)) as f:
            state = json.load(f)
        self.assertEqual(sorted(state["completed"]), ["0", "1"])

        final_ckpt = os.path.join(run_dir, "seed-0", "final.ckpt")
        stamp = os.path.getmtime(final_ckpt)
        run_experiment(self.cm, show_progress=False)
        self.assertEqual(os.path.getmtime(final_ckpt), stamp)

    def test_stop_before_seeds(self):
        """Test that a stop request before the first seed leaves no completed seed."""
        run_dir = run_experiment(self.cm, show_progress=False, should_stop=lambda: True)
        summary = pd.read_csv(os.path.join(run_dir, "summary.csv"))
        self.assertEqual(len(summary), 0)
        self.assertFalse(os.path.exists(os.path.join(run_dir, "seed-0")))

    def test_attack_eval(self):
        """Test evaluating a standalone checkpoint."""
        checkpoint = os.path.join(self.temp_dir, "model.ckpt")
        save_checkpoint(ModelState.reference(3, 2, 8, rng_seed=0), checkpoint)
        frame = run_attack_eval(self.cm, checkpoint, show_progress=False)
        self.assertEqual(list(frame.columns), ["checkpoint", "epoch", "clean_acc", "fgsm_acc", "pgd10_acc"])
        self.assertTrue(os.path.exists(os.path.join(self.temp_dir, "eval-model.csv")))
        self.assertFalse(os.path.exists(os.path.join(self.temp_dir, "eval.csv")))
        with self.assertRaises(FileNotFoundError):
            run_attack_eval(self.cm, os.path.join(self.temp_dir, "absent.ckpt"))

    def test_attack_eval_keeps_run_eval(self):
        """Test that evaluating a seed checkpoint leaves the seed's best/final eval rows in place."""
        seed_dir = os.path.join(self.temp_dir, "unit", "seed-0")
        os.makedirs(seed_dir)
        pd.DataFrame([{"checkpoint": "best", "clean_acc": 60.0}, {"checkpoint": "final", "clean_acc": 70.0}]).to_csv(
            os.path.join(seed_dir, "eval.csv"), index=False)
        checkpoint = os.path.join(seed_dir, "final.ckpt")
        save_checkpoint(ModelState.reference(3, 2, 8, rng_seed=0), checkpoint)

        run_attack_eval(self.cm, checkpoint, show_progress=False)
        run_eval = pd.read_csv(os.path.join(seed_dir, "eval.csv"))
        self.assertEqual(run_eval["checkpoint"].tolist(), ["best", "final"])
        attack_eval = pd.read_csv(os.path.join(seed_dir, "eval-final.csv"))
        self.assertEqual(attack_eval["checkpoint"].tolist(), ["final.ckpt"])

    def test_finetune_experiment(self):
        """Test the recovery report files for one seed."""
        checkpoint = os.path.join(self.temp_dir, "co.ckpt")
        save_checkpoint(ModelState.reference(3, 2, 8, rng_seed=1), checkpoint)
        cm = ConfigManager.from_dict(tiny_document(self.temp_dir, seeds=[0]))
        report, out_dir = run_finetune_experiment(cm, checkpoint, show_progress=False)
        self.assertEqual(os.path.basename(out_dir), "finetune-VFT-CO-Clean-k2")
        for name in ("report.txt", "recovery.csv", "probe-seed-0.csv"):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)
        self.assertEqual(len(report.st_string), 1)
        recovery = pd.read_csv(os.path.join(out_dir, "recovery.csv"))
        self.assertEqual(recovery["stage"].tolist(), ["pre", "post"])

    def test_finetune_needs_checkpoint(self):
        """Test that fine-tuning without a checkpoint is rejected."""
        with self.assertRaises(InputError):
            run_finetune_experiment(self.cm, None, show_progress=False)

    def test_unlearnable(self):
        """Test the sample-wise poison tables and poison reuse."""
        tables = run_unlearnable(self.cm, show_progress=False)
        self.assertEqual(sorted(tables), ["noise_defense", "transfer"])
        out_dir = os.path.join(self.temp_dir, "unit", "unlearnable-sample_wise-8-255")
        for name in ("poison.ckpt", "transfer.csv", "noise_defense.csv"):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)
        stamp = os.path.getmtime(os.path.join(out_dir, "poison.ckpt"))
        run_unlearnable(self.cm, show_progress=False)
        self.assertEqual(os.path.getmtime(os.path.join(out_dir, "poison.ckpt")), stamp)

    def test_unlearnable_regenerates_poison(self):
        """Test that force and changed settings replace a saved poison while equal settings reuse it."""
        document = tiny_document(self.temp_dir)
        document["unlearnable"].update({"run_transfer": False, "noise_scale": 0.0})
        cm = ConfigManager.from_dict(document)
        train_data, _ = load_dataset(cm.get_dataset_spec())
        fingerprint = poison_fingerprint(train_data, cm.get_poison_spec(), cm.get_train_config(0))
        out_dir = os.path.join(self.temp_dir, "unit", "unlearnable-sample_wise-8-255")
        os.makedirs(out_dir)
        poison_path = os.path.join(out_dir, "poison.ckpt")

        def plant_blank_poison():
            zeros = torch.zeros((len(train_data), *train_data.image_shape))
            PoisonedDataset(train_data, zeros, "sample_wise", 8 / 255, fingerprint).save(poison_path)

        def saved_poison():
            metadata, tensors = read_container(poison_path)
            return metadata["fingerprint"], tensors[("poison", "perturbations")][1]

        plant_blank_poison()
        run_unlearnable(cm, show_progress=False)
        self.assertFalse(saved_poison()[1].any())

        run_unlearnable(cm, show_progress=False, force=True)
        self.assertEqual(saved_poison()[0], fingerprint)
        self.assertTrue(saved_poison()[1].any())

        plant_blank_poison()
        document["unlearnable"]["perturb_steps"] = 2
        changed = ConfigManager.from_dict(document)
        run_unlearnable(changed, show_progress=False)
        stamped, perturbations = saved_poison()
        self.assertEqual(stamped, poison_fingerprint(train_data, changed.get_poison_spec(),
                                                     changed.get_train_config(0)))
        self.assertNotEqual(stamped, fingerprint)
        self.assertTrue(perturbations.any())


class TestSweep(unittest.TestCase):
    """Test cases for one-axis sweeps."""

    def setUp(self):
        """Set up test fixtures."""
        self.temp_dir = tempfile.mkdtemp()
        document = tiny_document(self.temp_dir, seeds=[0])
        document["train"]["epochs"] = 1
        document["diagnostics"].update({"distance_matrix": False, "embedding": False, "similarity": False})
        self.cm = ConfigManager.from_dict(document)

    def tearDown(self):
        """Tear down test fixtures."""
        shutil.rmtree(self.temp_dir, ignore_errors=True)

    def test_invalid_axis(self):
        """Test that unknown axes and empty value lists are rejected."""
        with self.assertRaises(InputError):
            sweep(self.cm, "gamma", [1.0])
        with self.assertRaises(InputError):
            sweep(self.cm, "beta", [])

    def test_beta_sweep(self):
        """Test one row per value and one cell directory per value."""
        frame = sweep(self.cm, "beta", [0.0, 2.0], show_progress=False)
        self.assertEqual(frame["value"].tolist(), [0.0, 2.0])
        self.assertEqual(frame["st"].map(len).tolist(), [1, 1])
        run_dir = os.path.join(self.temp_dir, "unit")
        self.assertTrue(os.path.exists(os.path.join(run_dir, "sweep_beta.csv")))
        with open(os.path.join(run_dir, "sweep-beta", "beta=2.0", "config.json")) as f:
            cell = json.load(f)
        self.assertEqual(cell["train"]["beta"], 2.0)
        self.assertIn("r_pred", cell["train"]["regularizers"])


if __name__ == "__main__":
    unittest.main()
