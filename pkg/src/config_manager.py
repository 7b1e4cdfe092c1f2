#!/usr/bin/env python3
"""
Configuration manager for FAT laboratory experiments.
"""
import os
import copy
import json
from typing import Any, Dict, List, Optional, Sequence

from .attacks import AttackSuite
from .datasets import DATA_ROOT_ENV, DatasetSpec
from .fat_train import TrainConfig
from .finetune import FinetuneRecipe
from .unlearnable import PoisonSpec
from .utils import InputError, log, parse_fraction, validate_config

DEFAULT_CONFIG: Dict[str, Dict[str, Any]] = {
    "dataset": {
        "source": "synthetic",
        "root": None,
        "subset_size": 5000,
        "test_size": 1000,
        "class_count": 10,
        "image_size": 32,
        "channels": 3,
        "seed": 0,
    },
    "train": {
        "method": "fgsm_rs",
        "xi": 16 / 255,
        "epsilon": None,
        "epochs": 30,
        "batch_size": 128,
        "lr_max": 0.1,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "lr_schedule": "cyclic",
        "alpha_aux": 1e-2,
        "beta": 10.0,
        "eta": 10.0,
        "alpha_reg": 1e-5,
        "l2_lambda": 5e-3,
        "regularizers": [],
        "mep_decay": 0.9,
        "delta_init": "uniform",
        "outlier_mode": "magnitude",
        "aux_mode": "class_mean",
        "pgd_train_steps": 5,
        "eval_size": 500,
        "freeze_bn_stats": False,
    },
    "attack": {
        "suite": ["clean", "perturbed", "fgsm", "pgd10", "pgd20", "pgd50"],
        "xi_eval": None,
        "step_size": None,
        "restarts": 1,
        "batch_size": 256,
    },
    "finetune": {
        "recipe": "vft",
        "k": 2,
        "lambda_shift": 0.0,
        "epochs": 1,
        "data_mode": "clean",
        "lr_scale": 0.1,
        "probe_epochs": 10,
        "lp_from": "first",
        "shift_penalty": "cosine",
        "freeze_bn_stats": False,
        "checkpoint": None,
    },
    "diagnostics": {
        "distance_matrix": True,
        "histogram": True,
        "similarity": True,
        "embedding": True,
        "trigger": True,
        "trigger_strength": 1.0,
        "projections": 64,
        "pair_samples": 256,
        "samples_per_class": 100,
        "histogram_edges": [0, 0.5, 1, 2, 4, 8, 16, "inf"],
        "co_collapse_ratio": 0.2,
        "co_gap": 5.0,
    },
    "unlearnable": {
        "budget": 8 / 255,
        "mode": "class_wise",
        "generator_epochs": 5,
        "surrogate_steps": 10,
        "perturb_steps": 20,
        "step_size": None,
        "stop_accuracy": 99.0,
        "noise_scale": 8 / 255,
        "poison_rate": 0.1,
        "patch_size": 3,
        "target_class": 0,
        "run_transfer": True,
        "run_paradigms": False,
        "trainers": ["standard", "adversarial", "standard_lreg"],
    },
    "experiment": {
        "name": "fat-desk",
        "seeds": [0, 1, 2],
        "output_dir": "runs",
        "workers": 1,
    },
}


def default_config() -> Dict[str, Dict[str, Any]]:
    return copy.deepcopy(DEFAULT_CONFIG)


def parse_override(assignment: str) -> tuple:
    """
    Parses 'section.key=value'. The value is read as a JSON literal when possible;
    list-valued keys also accept comma-separated words, everything else stays a string.

    Returns:
        Tuple of (section, key, value)

    Raises:
        InputError: If the assignment is malformed
    """
    if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
        raise InputError(f"Override must look like section.key=value, got '{assignment}'")
    path, raw = assignment.split("=", 1)
    section, key = path.strip().split(".", 1)
    raw = raw.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
        default = DEFAULT_CONFIG.get(section, {}).get(key)
        if isinstance(default, list):
            value = [item.strip() for item in raw.split(",") if item.strip()]
    return section, key, value


class ConfigManager:
    """
    Manages configuration loading, overrides and validation.

    Attributes:
        config_path: Path to the configuration file (None for defaults only)
        config: Effective configuration (defaults, then file, then overrides)
    """

    def __init__(self, config_path: Optional[str] = None, overrides: Sequence[str] = ()):
        """
        Initialize the ConfigManager.

        Args:
            config_path: Path to a JSON configuration file
            overrides: 'section.key=value' assignments applied after the file

        Raises:
            FileNotFoundError: If the configuration file is not found
            json.JSONDecodeError: If the configuration file is not valid JSON
            InputError: If the configuration is invalid
        """
        self.config_path = config_path
        self.config = self._load_config(overrides)

    @classmethod
    def from_dict(cls, config: Dict[str, Dict[str, Any]]) -> "ConfigManager":
        """
        Builds a manager from an in-memory document (sweep cells, worker processes).

        Raises:
            InputError: If the document has unknown sections or keys
        """
        validate_config(config, DEFAULT_CONFIG)
        manager = cls.__new__(cls)
        manager.config_path = None
        manager.config = default_config()
        for section, values in config.items():
            manager.config[section].update(copy.deepcopy(values))
        return manager

    def _load_config(self, overrides: Sequence[str]) -> Dict[str, Dict[str, Any]]:
        config = default_config()
        if self.config_path:
            log.info(f"Loading configuration from: {self.config_path}")
            try:
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    file_config = json.load(f)
            except FileNotFoundError:
                log.error(f"Configuration file not found: {self.config_path}")
                raise
            except json.JSONDecodeError:
                log.error(f"Invalid JSON format in configuration file: {self.config_path}")
                raise
            validate_config(file_config, DEFAULT_CONFIG)
            for section, values in file_config.items():
                config[section].update(values)

        if overrides:
            patch: Dict[str, Dict[str, Any]] = {}
            for assignment in overrides:
                section, key, value = parse_override(assignment)
                patch.setdefault(section, {})[key] = value
            validate_config(patch, DEFAULT_CONFIG)
            for section, values in patch.items():
                config[section].update(values)

        validate_config(config, DEFAULT_CONFIG)
        log.info("Configuration loaded successfully.")
        return config

    def _number(self, section: str, key: str) -> Optional[float]:
        value = self.config[section][key]
        return None if value is None else parse_fraction(value)

    def _int(self, section: str, key: str) -> int:
        value = self._number(section, key)
        if value is None or value != int(value):
            raise InputError(f"{section}.{key} must be an integer, got {self.config[section][key]!r}")
        return int(value)

    def get_dataset_spec(self) -> DatasetSpec:
        section = self.config["dataset"]
        return DatasetSpec(
            source=section["source"],
            root=section["root"] or os.environ.get(DATA_ROOT_ENV),
            subset_size=self._int("dataset", "subset_size"),
            test_size=self._int("dataset", "test_size"),
            class_count=self._int("dataset", "class_count"),
            image_size=self._int("dataset", "image_size"),
            channels=self._int("dataset", "channels"),
            seed=self._int("dataset", "seed"),
        )

    def get_train_config(self, seed: int = 0) -> TrainConfig:
        """
        Builds the TrainConfig for one seed.

        Raises:
            InputError: If a value is outside its valid range
        """
        section = self.config["train"]
        cfg = TrainConfig(
            method=section["method"],
            xi=self._number("train", "xi"),
            epsilon=self._number("train", "epsilon"),
            epochs=self._int("train", "epochs"),
            batch_size=self._int("train", "batch_size"),
            lr_max=self._number("train", "lr_max"),
            momentum=self._number("train", "momentum"),
            weight_decay=self._number("train", "weight_decay"),
            lr_schedule=section["lr_schedule"],
            alpha_aux=self._number("train", "alpha_aux"),
            beta=self._number("train", "beta"),
            eta=self._number("train", "eta"),
            alpha_reg=self._number("train", "alpha_reg"),
            l2_lambda=self._number("train", "l2_lambda"),
            regularizers=list(section["regularizers"]),
            mep_decay=self._number("train", "mep_decay"),
            delta_init=section["delta_init"],
            outlier_mode=section["outlier_mode"],
            aux_mode=section["aux_mode"],
            pgd_train_steps=self._int("train", "pgd_train_steps"),
            eval_size=self._int("train", "eval_size"),
            seed=int(seed),
            freeze_bn_stats=section["freeze_bn_stats"],
        )
        cfg.validate()
        return cfg

    def get_attack_suite(self, seed: int = 0) -> AttackSuite:
        xi_eval = self._number("attack", "xi_eval")
        suite = AttackSuite(
            attacks=list(self.config["attack"]["suite"]),
            xi=self._number("train", "xi") if xi_eval is None else xi_eval,
            step_size=self._number("attack", "step_size"),
            restarts=self._int("attack", "restarts"),
            batch_size=self._int("attack", "batch_size"),
            seed=int(seed),
        )
        suite.validate()
        return suite

    def get_recipe(self) -> FinetuneRecipe:
        section = self.config["finetune"]
        return FinetuneRecipe(
            kind=section["recipe"],
            k=self._int("finetune", "k"),
            lambda_shift=self._number("finetune", "lambda_shift"),
            epochs=self._int("finetune", "epochs"),
            data_mode=section["data_mode"],
            lr_scale=self._number("finetune", "lr_scale"),
            lp_from=section["lp_from"],
            shift_penalty=section["shift_penalty"],
            freeze_bn_stats=section["freeze_bn_stats"],
        )

    def get_poison_spec(self) -> PoisonSpec:
        spec = PoisonSpec(
            budget=self._number("unlearnable", "budget"),
            mode=self.config["unlearnable"]["mode"],
            generator_epochs=self._int("unlearnable", "generator_epochs"),
            surrogate_steps=self._int("unlearnable", "surrogate_steps"),
            perturb_steps=self._int("unlearnable", "perturb_steps"),
            step_size=self._number("unlearnable", "step_size"),
            stop_accuracy=self._number("unlearnable", "stop_accuracy"),
            noise_scale=self._number("unlearnable", "noise_scale"),
            poison_rate=self._number("unlearnable", "poison_rate"),
            patch_size=self._int("unlearnable", "patch_size"),
            target_class=self._int("unlearnable", "target_class"),
            seed=self._int("dataset", "seed"),
        )
        spec.validate()
        return spec

    def get_histogram_edges(self) -> List[float]:
        edges = []
        for edge in self.config["diagnostics"]["histogram_edges"]:
            edges.append(float("inf") if str(edge).strip().lower() in ("inf", "infinity") else parse_fraction(edge))
        return edges

    def get_seeds(self) -> List[int]:
        seeds = [int(parse_fraction(seed)) for seed in self.config["experiment"]["seeds"]]
        if not seeds:
            raise InputError("experiment.seeds must list at least one seed")
        return seeds

    def get_output_dir(self) -> str:
        """Run directory: <output_dir>/<name>."""
        experiment = self.config["experiment"]
        return os.path.join(experiment["output_dir"], experiment["name"])

    def get_value(self, key: str, default: Any = None) -> Any:
        """
        Get a section (or top-level value) from the configuration.

        Args:
            key: Configuration key
            default: Default value if key is not found

        Returns:
            Configuration value, or default if not found
        """
        return self.config.get(key, default)

    def get_nested_value(self, keys: list, default: Any = None) -> Any:
        """
        Get a nested value from the configuration.

        Args:
            keys: List of keys to traverse
            default: Default value if key is not found

        Returns:
            Configuration value, or default if not found
        """
        current = self.config
        for key in keys:
            if isinstance(current, dict) and key in current:
                current = current[key]
            else:
                return default
        return current

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return copy.deepcopy(self.config)

    def save(self, path: str) -> None:
        """Writes the effective configuration as JSON."""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.config, f, indent=2, sort_keys=True)
        log.debug(f"Configuration saved to {path}")
