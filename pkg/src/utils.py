#!/usr/bin/env python3
"""
Utility functions for the FAT laboratory.
"""
import os
import json
import random
import logging
import datetime as dt
from fractions import Fraction
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from colorama import Fore, Style, init

# Initialize colorama
init(autoreset=True)

# Setup logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)
log = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class InputError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class NumericError(RuntimeError):
    """
    Raised when a loss or parameter becomes non-finite.

    Attributes:
        payload: Diagnostic values captured at the failure point
    """

    def __init__(self, message: str, payload: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.payload = payload or {}


class FormatError(ValueError):
    """
    Raised when a dataset or checkpoint file is malformed.

    Attributes:
        path: File being parsed
        offset: Byte offset of the malformed record or header
    """

    def __init__(self, message: str, path: str = "", offset: int = 0):
        super().__init__(f"{message} (file={path}, offset={offset})")
        self.path = path
        self.offset = offset


def parse_fraction(value: Union[str, int, float, Fraction]) -> float:
    """
    Parses a number written as 'a/b', a decimal string or a plain number.

    Args:
        value: Value to parse

    Returns:
        The value as a float, computed from the exact fraction

    Raises:
        InputError: If the value cannot be parsed

    Examples:
        >>> parse_fraction("16/255") == 16 / 255
        True
    """
    if isinstance(value, bool):
        raise InputError(f"Expected a number, got boolean {value}")
    if isinstance(value, (int, float, Fraction)):
        return float(value)
    try:
        return float(Fraction(str(value).strip()))
    except (ValueError, ZeroDivisionError) as e:
        raise InputError(f"Cannot parse number '{value}': {e}") from e


def format_duration(seconds: float) -> str:
    """
    Formats a duration in seconds as H:MM:SS.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted duration string
    """
    return str(dt.timedelta(seconds=int(round(max(0.0, seconds)))))


def set_seed(seed: int) -> torch.Generator:
    """
    Seeds python, numpy and torch global generators.

    Args:
        seed: Integer seed

    Returns:
        A fresh torch.Generator seeded with the same value
    """
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def attach_run_log(run_dir: str) -> logging.Handler:
    """
    Mirrors log output into run_dir/run.log.

    Args:
        run_dir: Run directory

    Returns:
        The attached handler; pass it to detach_run_log when the run ends
    """
    os.makedirs(run_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(run_dir, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S'))
    log.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    """Removes and closes a handler created by attach_run_log."""
    log.removeHandler(handler)
    handler.close()


def print_banner():
    """Prints a formatted application banner."""
    banner = f"""
{Fore.CYAN}╔═══════════════════════════════════════════════════╗
{Fore.CYAN}║ {Fore.YELLOW}   Fast Adversarial Training Laboratory          {Fore.CYAN} ║
{Fore.CYAN}║ {Fore.YELLOW}   catastrophic overfitting / backdoor probes    {Fore.CYAN} ║
{Fore.CYAN}╚═══════════════════════════════════════════════════╝
{Fore.YELLOW}[Press Ctrl+C at any time to stop after the current epoch]
"""
    print(banner)


def print_section_header(title: str):
    """
    Prints a formatted section header.

    Args:
        title: Header title text
    """
    print(f"\n{Fore.CYAN}╔{'═' * (len(title) + 8)}╗")
    print(f"{Fore.CYAN}║    {Fore.YELLOW}{title}{Fore.CYAN}    ║")
    print(f"{Fore.CYAN}╚{'═' * (len(title) + 8)}╝{Style.RESET_ALL}")


def print_final_success():
    """Prints a final success message box."""
    print(f"\n{Fore.GREEN}╔{'═' * 45}╗")
    print(f"{Fore.GREEN}║{' ' * 45}║")
    print(f"{Fore.GREEN}║   {Fore.YELLOW}Process completed successfully!{' ' * 10}{Fore.GREEN}║")
    print(f"{Fore.GREEN}║{' ' * 45}║")
    print(f"{Fore.GREEN}╚{'═' * 45}╝{Style.RESET_ALL}")


def validate_config(config: Dict[str, Any], schema: Dict[str, Dict[str, Any]]) -> None:
    """
    Validates a sectioned configuration against a schema of default values.

    Args:
        config: Configuration dictionary (section -> key -> value)
        schema: Default configuration with the same layout

    Raises:
        TypeError: If configuration or a section is not a dictionary
        InputError: If a section or key is unknown, or a value has the wrong type
    """
    if not isinstance(config, dict):
        raise TypeError(f"Configuration must be a dictionary, got {type(config)}")

    unknown_sections = sorted(set(config) - set(schema))
    if unknown_sections:
        raise InputError(f"Unknown configuration sections: {', '.join(unknown_sections)}")

    for section, values in config.items():
        if not isinstance(values, dict):
            raise TypeError(f"Section '{section}' must be a dictionary, got {type(values)}")
        unknown_keys = sorted(set(values) - set(schema[section]))
        if unknown_keys:
            raise InputError(f"Unknown keys in section '{section}': {', '.join(unknown_keys)}")
        for key, value in values.items():
            default = schema[section][key]
            if value is None or default is None:
                continue
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise InputError(f"{section}.{key} must be a boolean, got {value!r}")
            elif isinstance(default, (int, float)):
                parse_fraction(value)
            elif isinstance(default, list) and not isinstance(value, list):
                raise InputError(f"{section}.{key} must be a list, got {value!r}")
            elif isinstance(default, str) and not isinstance(value, str):
                raise InputError(f"{section}.{key} must be a string, got {value!r}")


def save_progress_state(state_file: str, progress_data: Dict[str, Any]) -> bool:
    """
    Saves run progress (completed seeds, failures) for idempotent re-runs.

    Args:
        state_file: Path to the state file
        progress_data: Dictionary of progress data to save

    Returns:
        True if successful, False otherwise
    """
    try:
        state_dir = os.path.dirname(os.path.abspath(state_file))
        if state_dir:
            os.makedirs(state_dir, exist_ok=True)
        with open(state_file, 'w', encoding='utf-8') as f:
            json.dump(progress_data, f, indent=2, sort_keys=True)
        log.debug(f"Progress state saved to {state_file}")
        return True
    except (OSError, IOError) as e:
        log.error(f"Failed to save progress state to {state_file}: {e}")
        return False
    except (TypeError, ValueError) as e:
        log.error(f"Failed to serialize progress data: {e}")
        return False


def load_progress_state(state_file: str) -> Dict[str, Any]:
    """
    Loads the progress state from a file.

    Args:
        state_file: Path to the state file

    Returns:
        Dictionary of progress data, or empty dict if file not found or invalid
    """
    try:
        with open(state_file, 'r', encoding='utf-8') as f:
            data = json.load(f)
            log.debug(f"Progress state loaded from {state_file}")
            return data
    except FileNotFoundError:
        log.debug(f"No progress state file found at {state_file}")
        return {}
    except json.JSONDecodeError as e:
        log.warning(f"Invalid JSON in progress state file {state_file}: {e}")
        return {}
    except (OSError, IOError) as e:
        log.warning(f"Error reading progress state file {state_file}: {e}")
        return {}
