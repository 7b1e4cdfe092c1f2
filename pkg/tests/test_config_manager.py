#!/usr/bin/env python3
"""
Unit tests for ConfigManager.
"""
import unittest
import os
import tempfile
import json

from src.config_manager import ConfigManager, default_config, parse_override
from src.utils import InputError


class TestConfigManager(unittest.TestCase):
    """Test cases for ConfigManager."""

    def setUp(self):
        """Set up test fixtures."""
        self.config_data = {
            "dataset": {"source": "synthetic", "subset_size": 200, "test_size": 100, "class_count": 4},
            "train": {"method": "fgsm_mep", "xi": "16/255", "epochs": 3, "regularizers": ["aux"]},
            "attack": {"suite": ["clean", "pgd20"], "xi_eval": "8/255"},
            "experiment": {"name": "unit", "seeds": [3, 4], "output_dir": "out"},
        }

        with tempfile.NamedTemporaryFile(delete=False, mode="w", suffix=".json") as temp_file:
            json.dump(self.config_data, temp_file)
            self.config_path = temp_file.name
        self.saved_path = self.config_path + ".saved.json"

    def tearDown(self):
        """Tear down test fixtures."""
        for path in (self.config_path, self.saved_path):
            if os.path.exists(path):
                os.unlink(path)

    def test_load_config(self):
        """Test that the file is merged over the defaults."""
        config_manager = ConfigManager(self.config_path)
        self.assertEqual(config_manager.config["train"]["method"], "fgsm_mep")
        self.assertEqual(config_manager.config["train"]["batch_size"], 128)
        self.assertEqual(config_manager.config["finetune"], default_config()["finetune"])

    def test_defaults_only(self):
        """Test that no file yields the default configuration."""
        self.assertEqual(ConfigManager().config, default_config())

    def test_missing_file(self):
        """Test that a missing file raises FileNotFoundError."""
        with self.assertRaises(FileNotFoundError):
            ConfigManager("/non/existent/config.json")

    def test_unknown_keys_rejected(self):
        """Test that unknown sections and keys are rejected."""
        with open(self.config_path, "w") as f:
            json.dump({"train": {"learning_rate": 0.1}}, f)
        with self.assertRaises(InputError):
            ConfigManager(self.config_path)
        with self.assertRaises(InputError):
            ConfigManager(overrides=["model.depth=18"])

    def test_get_train_config(self):
        """Test typed training configuration with exact fractions."""
        cfg = ConfigManager(self.config_path).get_train_config(seed=5)
        self.assertEqual(cfg.xi, 16 / 255)
        self.assertEqual(cfg.step_size, 1.25 * (16 / 255))
        self.assertEqual(cfg.epochs, 3)
        self.assertEqual(cfg.seed, 5)
        self.assertEqual(cfg.regularizers, ["aux"])

    def test_get_attack_suite(self):
        """Test the attack suite uses xi_eval when set."""
        suite = ConfigManager(self.config_path).get_attack_suite()
        self.assertEqual(suite.attacks, ["clean", "pgd20"])
        self.assertEqual(suite.xi, 8 / 255)

        suite = ConfigManager().get_attack_suite()
        self.assertEqual(suite.xi, 16 / 255)

    def test_get_dataset_spec(self):
        """Test the dataset spec getter."""
        spec = ConfigManager(self.config_path).get_dataset_spec()
        self.assertEqual((spec.source, spec.subset_size, spec.test_size, spec.class_count),
                         ("synthetic", 200, 100, 4))

    def test_overrides(self):
        """Test --set style overrides applied after the file."""
        config_manager = ConfigManager(self.config_path, ["train.beta=2.5", "train.regularizers=aux,outlier",
                                                          "finetune.recipe=rsft", "unlearnable.budget=4/255"])
        self.assertEqual(config_manager.config["train"]["beta"], 2.5)
        self.assertEqual(config_manager.config["train"]["regularizers"], ["aux", "outlier"])
        self.assertEqual(config_manager.get_recipe().kind, "rsft")
        self.assertEqual(config_manager.get_poison_spec().budget, 4 / 255)

    def test_parse_override(self):
        """Test parsing of single override assignments."""
        self.assertEqual(parse_override("train.epochs=10"), ("train", "epochs", 10))
        self.assertEqual(parse_override("train.xi=16/255"), ("train", "xi", "16/255"))
        self.assertEqual(parse_override("attack.suite=clean,pgd50"), ("attack", "suite", ["clean", "pgd50"]))
        self.assertEqual(parse_override("attack.suite=[\"fgsm\"]"), ("attack", "suite", ["fgsm"]))
        self.assertEqual(parse_override("unlearnable.run_transfer=false"), ("unlearnable", "run_transfer", False))
        for bad in ("epochs=10", "train.epochs"):
            with self.assertRaises(InputError):
                parse_override(bad)

    def test_invalid_values(self):
        """Test that out-of-range values are reported by the getters."""
        with self.assertRaises(InputError):
            ConfigManager(overrides=["train.epochs=2.5"]).get_train_config()
        with self.assertRaises(InputError):
            ConfigManager(overrides=["experiment.seeds=[]"]).get_seeds()

    def test_histogram_edges(self):
        """Test that 'inf' edges are parsed."""
        edges = ConfigManager().get_histogram_edges()
        self.assertEqual(edges[0], 0.0)
        self.assertEqual(edges[-1], float("inf"))

    def test_round_trip(self):
        """Test that parse, serialize, parse is the identity."""
        config_manager = ConfigManager(self.config_path)
        config_manager.save(self.saved_path)
        reloaded = ConfigManager(self.saved_path)
        self.assertEqual(reloaded.config, config_manager.config)
        self.assertEqual(ConfigManager.from_dict(config_manager.to_dict()).config, config_manager.config)

    def test_get_output_dir(self):
        """Test the run directory layout."""
        self.assertEqual(ConfigManager(self.config_path).get_output_dir(), os.path.join("out", "unit"))
        self.assertEqual(ConfigManager(self.config_path).get_seeds(), [3, 4])

    def test_get_value(self):
        """Test getting a value."""
        config_manager = ConfigManager(self.config_path)
        self.assertEqual(config_manager.get_value("attack")["suite"], ["clean", "pgd20"])
        self.assertEqual(config_manager.get_value("non_existent", "default"), "default")

    def test_get_nested_value(self):
        """Test getting a nested value."""
        config_manager = ConfigManager(self.config_path)
        self.assertEqual(config_manager.get_nested_value(["train", "method"]), "fgsm_mep")
        self.assertEqual(config_manager.get_nested_value(["train", "non_existent"], "default"), "default")
        self.assertEqual(config_manager.get_nested_value(["non_existent", "key"], "default"), "default")


if __name__ == "__main__":
    unittest.main()
