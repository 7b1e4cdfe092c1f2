#!/usr/bin/env python3
"""
Main entry for the FAT laboratory: training runs, fine-tuning recovery, attack
evaluation, diagnostics, unlearnable examples, sweeps and plots.
"""
import os
import sys
import argparse
import logging
import signal
from typing import List, Optional

try:
    from .utils import print_banner, print_section_header, print_final_success, parse_fraction, log
    from .config_manager import ConfigManager
    from .checkpoint import load_checkpoint
    from .datasets import load_dataset
    from .fat_train import MetricsRecord, co_detect
    from .plots import emit_plots
    from . import runner
except ImportError:
    from utils import print_banner, print_section_header, print_final_success, parse_fraction, log  # type: ignore
    from config_manager import ConfigManager  # type: ignore
    from checkpoint import load_checkpoint  # type: ignore
    from datasets import load_dataset  # type: ignore
    from fat_train import MetricsRecord, co_detect  # type: ignore
    from plots import emit_plots  # type: ignore
    import runner  # type: ignore

# Global flag for graceful shutdown
_shutdown_requested = False


# --- Signal handler ---
def signal_handler(sig, frame):
    """First signal stops after the current epoch; a second one exits immediately."""
    global _shutdown_requested
    try:
        signal_name = signal.Signals(sig).name
    except (AttributeError, ValueError):
        signal_name = f"SIG{sig}"
    if _shutdown_requested:
        log.warning(f"\nSecond {signal_name}, exiting now")
        sys.exit(130 if sig == signal.SIGINT else 128 + sig)
    log.warning(f"\nProcess interrupted by user ({signal_name}). Stopping after the current epoch...")
    _shutdown_requested = True


def shutdown_requested() -> bool:
    return _shutdown_requested


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Path to configuration JSON file (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration value (repeatable)")
    common.add_argument("--force", action="store_true", help="Re-run work already recorded as complete")
    common.add_argument("--workers", type=int, default=None, help="Worker processes for independent seeds")
    common.add_argument("--quiet", "-q", action="store_true", help="Disable progress bars")
    common.add_argument("--debug", "-d", action="store_true", help="Enable debug logs")

    parser = argparse.ArgumentParser(
        description="Fast adversarial training laboratory",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s train --config config.json
  %(prog)s train --set train.regularizers=aux --set experiment.name=fgsm-rs-aux
  %(prog)s finetune --checkpoint runs/fat-desk/seed-0/final.ckpt --recipe vft --k 2
  %(prog)s attack-eval --checkpoint runs/fat-desk/seed-0/final.ckpt --attack pgd50 --eps 8/255
  %(prog)s unlearnable --budget 4/255 --mode class --no-run-transfer
  %(prog)s sweep --axis beta --values 0.1,1,10,100
  %(prog)s plot
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="Train every configured seed, then diagnose and evaluate")

    finetune = sub.add_parser("finetune", parents=[common], help="Recover a CO checkpoint with a recipe")
    finetune.add_argument("--checkpoint", help="CO-affected checkpoint")
    finetune.add_argument("--recipe", choices=["vft", "lp", "rf", "rft", "rsft"], help="Fine-tuning recipe")
    finetune.add_argument("--k", type=int, help="Number of leading layers the recipe touches")
    finetune.add_argument("--data", choices=["clean", "adv", "adversarial"],
                          help="Fine-tuning data (adv is short for adversarial)")
    finetune.add_argument("--probe-epochs", type=int, help="Extra FGSM-RS epochs of the recurrence probe")

    attack = sub.add_parser("attack-eval", parents=[common], help="Evaluate a checkpoint under attacks")
    attack.add_argument("--checkpoint", required=True, help="Checkpoint to evaluate")
    attack.add_argument("--attack", action="append", help="Attack name: clean, perturbed, fgsm or pgdN (repeatable)")
    attack.add_argument("--steps", type=int, help="PGD steps; turns every pgd attack into pgd<steps>")
    attack.add_argument("--eps", help="Evaluation budget, e.g. 8/255")
    attack.add_argument("--step-size", help="PGD step size, e.g. 2/255")

    diagnose = sub.add_parser("diagnose", parents=[common], help="Recompute diagnostics for trained seeds")
    diagnose.add_argument("--seed", type=int, action="append", help="Seed directory to diagnose (repeatable)")

    unlearnable = sub.add_parser("unlearnable", parents=[common], help="Unlearnable-example experiments")
    unlearnable.add_argument("--budget", help="Poison budget, e.g. 8/255")
    unlearnable.add_argument("--mode", choices=["class", "sample"], help="Class-wise or sample-wise poison")
    unlearnable.add_argument("--run-transfer", action=argparse.BooleanOptionalAction, default=None,
                             help="Train (or with --no-run-transfer skip) the transfer trainers on the poison")

    sweep = sub.add_parser("sweep", parents=[common], help="One-axis hyperparameter sweep")
    sweep.add_argument("--axis", required=True, choices=sorted(runner.SWEEP_AXES), help="Hyperparameter")
    sweep.add_argument("--values", required=True, help="Comma-separated values, fractions allowed")
    sweep.add_argument("--checkpoint", help="CO checkpoint for the k axis")

    plot = sub.add_parser("plot", parents=[common], help="Render PNG twins for the run's CSV files")
    plot.add_argument("--run-dir", help="Run directory (experiment output directory when omitted)")
    return parser


def command_overrides(args: argparse.Namespace) -> List[str]:
    """Maps subcommand flags onto configuration overrides; explicit --set values come last."""
    overrides: List[str] = []

    def add(section: str, key: str, value) -> None:
        if value is not None:
            overrides.append(f"{section}.{key}={value}")

    if args.command == "finetune":
        add("finetune", "recipe", args.recipe)
        add("finetune", "k", args.k)
        add("finetune", "data_mode", {"adv": "adversarial"}.get(args.data, args.data))
        add("finetune", "probe_epochs", args.probe_epochs)
    elif args.command == "attack-eval":
        attacks = args.attack
        if attacks and args.steps is not None:
            attacks = [f"pgd{args.steps}" if name.startswith("pgd") else name for name in attacks]
        elif args.steps is not None:
            attacks = ["clean", f"pgd{args.steps}"]
        if attacks:
            overrides.append(f"attack.suite={','.join(attacks)}")
        add("attack", "xi_eval", args.eps)
        add("attack", "step_size", args.step_size)
    elif args.command == "unlearnable":
        add("unlearnable", "budget", args.budget)
        add("unlearnable", "mode", {"class": "class_wise", "sample": "sample_wise"}.get(args.mode))
        if args.run_transfer is not None:
            add("unlearnable", "run_transfer", "true" if args.run_transfer else "false")
    return overrides + list(args.overrides)


def validate_arguments(args: argparse.Namespace) -> None:
    """
    Validate command-line arguments.

    Raises:
        FileNotFoundError: If the config file or a checkpoint doesn't exist
        ValueError: If arguments are invalid
    """
    if args.config and not os.path.isfile(args.config):
        raise FileNotFoundError(f"Configuration file not found: {args.config}")
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint and not os.path.isfile(checkpoint):
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    if args.workers is not None and args.workers < 1:
        raise ValueError(f"--workers must be positive, got {args.workers}")


def log_overrides(cfg: ConfigManager, overrides: List[str]) -> List[str]:
    """Logs the effective value of every overridden key; returns the logged lines."""
    lines = []
    for assignment in overrides:
        path = assignment.split("=", 1)[0].strip()
        value = cfg.get_nested_value(path.split(".", 1), default="<unset>")
        lines.append(f"{path} = {value!r}")
        log.info(f"Override: {lines[-1]}")
    return lines


def run_diagnose(cfg: ConfigManager, seeds: List[int]) -> int:
    run_dir = cfg.get_output_dir()
    _, test_data = load_dataset(cfg.get_dataset_spec())
    written = 0
    for seed in seeds:
        seed_dir = os.path.join(run_dir, f"seed-{seed}")
        metrics_path = os.path.join(seed_dir, "metrics.csv")
        if not os.path.exists(metrics_path):
            log.warning(f"No metrics for seed {seed} in {seed_dir}, skipping")
            continue
        metrics = MetricsRecord.load_csv(metrics_path)
        final = load_checkpoint(os.path.join(seed_dir, "final.ckpt"))
        section = cfg.get_value("diagnostics")
        co = co_detect(metrics, parse_fraction(section["co_collapse_ratio"]), parse_fraction(section["co_gap"]),
                       class_count=final.num_classes)
        written += len(runner.diagnose_checkpoints(cfg, seed_dir, test_data, seed,
                                                   co.epoch if co.co_occurred else None))
    log.info(f"Wrote {written} diagnostic files")
    return written


# --- Main function ---
def main(argv: Optional[List[str]] = None) -> int:
    """
    Main entry point for the FAT laboratory.

    Returns:
        Exit code (0 for success, non-zero for failure)
    """
    # Register signal handlers for graceful shutdown
    signal.signal(signal.SIGINT, signal_handler)
    if hasattr(signal, 'SIGTERM'):
        signal.signal(signal.SIGTERM, signal_handler)

    args = build_parser().parse_args(argv)

    # Setup logging
    if args.debug:
        log.setLevel(logging.DEBUG)
        log.info("Debug logging enabled")

    print_banner()
    show_progress = not args.quiet

    try:
        validate_arguments(args)
        overrides = command_overrides(args)
        cfg = ConfigManager(args.config, overrides)
        print_section_header(f"Setup: {args.command}")
        log.info(f"Config: {args.config or 'defaults'}")
        log_overrides(cfg, overrides)
        log.info(f"Output: {cfg.get_output_dir()}")

        if args.command == "train":
            run_dir = runner.run_experiment(cfg, force=args.force, workers=args.workers,
                                            show_progress=show_progress, should_stop=shutdown_requested)
            log.info(f"Summary written to {os.path.join(run_dir, 'summary.txt')}")
        elif args.command == "finetune":
            report, out_dir = runner.run_finetune_experiment(cfg, args.checkpoint, show_progress)
            print(report.to_text())
            log.info(f"Report written to {os.path.join(out_dir, 'report.txt')}")
        elif args.command == "attack-eval":
            runner.run_attack_eval(cfg, args.checkpoint, show_progress=show_progress)
        elif args.command == "diagnose":
            run_diagnose(cfg, args.seed or cfg.get_seeds())
        elif args.command == "unlearnable":
            runner.run_unlearnable(cfg, show_progress, force=args.force)
        elif args.command == "sweep":
            values = [value.strip() for value in args.values.split(",") if value.strip()]
            runner.sweep(cfg, args.axis, values, force=args.force, workers=args.workers,
                         show_progress=show_progress, should_stop=shutdown_requested, checkpoint=args.checkpoint)
        elif args.command == "plot":
            emitted, missing = emit_plots(args.run_dir or cfg.get_output_dir())
            if missing:
                log.warning(f"{len(missing)} artifacts missing or unrenderable")

        if _shutdown_requested:
            log.warning("Stopped on request; re-run the same command to resume")
            return 130

        print_final_success()
        log.info("All done successfully.")
        return 0

    except KeyboardInterrupt:
        log.warning("\nProcess interrupted by user")
        return 130
    except (FileNotFoundError, ValueError) as e:
        log.error(f"Configuration error: {e}")
        return 1
    except RuntimeError as e:
        log.error(f"Runtime error: {e}")
        return 1
    except Exception as e:
        log.exception("Fatal error:")
        return 1


if __name__ == "__main__":
    sys.exit(main())
