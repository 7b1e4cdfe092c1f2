#!/usr/bin/env python3
"""
Experiment runner: per-seed training with diagnostics and evaluation, fine-tuning
recovery, unlearnable-example experiments and one-axis hyperparameter sweeps.

Every artifact lands under the run directory <experiment.output_dir>/<experiment.name>.
"""
import os
import glob
import copy
import json
import hashlib
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .attacks import evaluate
from .checkpoint import load_checkpoint
from .config_manager import ConfigManager
from .datasets import ImageDataset, load_dataset
from .diagnostics import (collect_sign_samples, distance_matrix_from_samples, embed_2d,
                          similarity_curves, trigger_injection_table, weight_histogram)
from .fat_train import FastAdversarialTrainer, co_detect
from .finetune import CO_MARK, STABLE_MARK, RecoveryReport, stability_protocol
from .nn_core import ModelState
from .unlearnable import (PoisonedDataset, generate_poison, paradigm_comparison, poison_fingerprint,
                          random_noise_defense, train_and_score, transfer_experiment)
from .utils import (FormatError, InputError, attach_run_log, detach_run_log, load_progress_state, log,
                    parse_fraction, print_section_header, save_progress_state, set_seed)

RUN_STATE_FILE = "run_state.json"
FAILED_MARK = "✗"
SUMMARY_COLUMNS = ["seed", "status", "best_epoch", "best_clean_acc", "best_pgd10_acc",
                   "final_clean_acc", "final_fgsm_acc", "final_pgd10_acc", "co_occurred", "co_epoch"]
EVAL_CHECKPOINTS = (("best", "best-pgd10.ckpt"), ("final", "final.ckpt"))
# axis -> (section, key, regularizer the axis weights)
SWEEP_AXES = {
    "beta": ("train", "beta", None),
    "alpha_aux": ("train", "alpha_aux", "aux"),
    "eta": ("train", "eta", "outlier"),
    "k": ("finetune", "k", None),
}


def config_fingerprint(config: Dict[str, Any]) -> str:
    """Stable hash of a configuration document."""
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def _build_model(dataset: ImageDataset, seed: int) -> ModelState:
    channels, size, _ = dataset.image_shape
    return ModelState.reference(channels, dataset.num_classes, size, rng_seed=seed)


def diagnose_checkpoints(cm: ConfigManager, seed_dir: str, dataset: ImageDataset, seed: int = 0,
                         co_epoch: Optional[int] = None) -> List[str]:
    """
    Computes the enabled diagnostics for the best, final and (when CO fired) CO-epoch
    checkpoints of one seed, plus similarity curves over all epoch checkpoints.

    Args:
        cm: Configuration
        seed_dir: Directory holding the seed's checkpoints
        dataset: Data the diagnostics are measured on
        seed: Seed for random starts and projections
        co_epoch: Epoch flagged by co_detect

    Returns:
        Paths of the written CSV files
    """
    section = cm.config["diagnostics"]
    xi = cm.get_train_config(seed).xi
    per_class = int(parse_fraction(section["samples_per_class"]))
    projections = int(parse_fraction(section["projections"]))
    sampled = dataset.head(per_class * dataset.num_classes)
    tags = [(tag, os.path.join(seed_dir, name)) for tag, name in EVAL_CHECKPOINTS]
    if co_epoch is not None:
        tags.append(("co", os.path.join(seed_dir, f"epoch-{co_epoch:03d}.ckpt")))

    written = []

    def write(frame: pd.DataFrame, name: str, index: bool = False) -> None:
        path = os.path.join(seed_dir, name)
        frame.to_csv(path, index=index, float_format="%.6f")
        written.append(path)

    for tag, path in tags:
        if not os.path.exists(path):
            log.warning(f"Checkpoint {path} missing, skipping {tag} diagnostics")
            continue
        model = load_checkpoint(path)
        if section["histogram"]:
            write(weight_histogram(model, cm.get_histogram_edges()).to_dataframe(), f"histogram_{tag}.csv")
        if not (section["distance_matrix"] or section["embedding"] or section["trigger"]):
            continue
        signs, labels = collect_sign_samples(model, sampled, xi, seed=seed)
        if section["distance_matrix"]:
            try:
                matrix = distance_matrix_from_samples(signs, labels, dataset.num_classes, projections, seed)
                write(matrix.to_dataframe(), f"distance_{tag}.csv", index=True)
                log.info(f"{tag}: sign distance off-diagonal mean {matrix.off_diagonal_mean():.4f}")
            except InputError as e:
                log.warning(f"Distance matrix for {tag} skipped: {e}")
        if section["embedding"]:
            points = embed_2d(signs, labels)
            write(pd.DataFrame([{"x": float(p[0]), "y": float(p[1]), "label": label} for p, label in points],
                               columns=["x", "y", "label"]), f"embedding_{tag}.csv")
        if section["trigger"]:
            table = trigger_injection_table(model, sampled, signs, labels, xi,
                                            parse_fraction(section["trigger_strength"]))
            write(table, f"trigger_{tag}.csv")
            if not table.empty:
                log.info(f"{tag}: mean injected target rate {table['injected_target_rate'].mean():.2f}%")

    if section["similarity"]:
        epoch_paths = sorted(glob.glob(os.path.join(seed_dir, "epoch-*.ckpt")))
        if epoch_paths:
            models = [load_checkpoint(path) for path in epoch_paths]
            curves = similarity_curves(models, sampled, xi,
                                       int(parse_fraction(section["pair_samples"])), seed)
            write(curves.to_dataframe(), "similarity.csv")
    return written


def run_seed(config: Dict[str, Any], seed: int, run_dir: str, show_progress: bool = False,
             should_stop: Optional[Callable[[], bool]] = None) -> Dict[str, Any]:
    """
    Train, diagnose, evaluate and persist one seed. Top-level so worker processes can run it.

    Returns:
        Summary row with the SUMMARY_COLUMNS fields

    Raises:
        NumericError: When training diverges (last-good.ckpt is kept)
    """
    cm = ConfigManager.from_dict(config)
    seed_dir = os.path.join(run_dir, f"seed-{seed}")
    os.makedirs(seed_dir, exist_ok=True)
    set_seed(seed)

    train_data, test_data = load_dataset(cm.get_dataset_spec())
    cfg = cm.get_train_config(seed)
    model = _build_model(train_data, seed)
    trainer = FastAdversarialTrainer(model, train_data, cfg, eval_data=test_data, checkpoint_dir=seed_dir,
                                     show_progress=show_progress, should_stop=should_stop)
    model, metrics = trainer.fit()
    if len(metrics) < cfg.epochs:
        raise RuntimeError(f"Seed {seed} stopped after {len(metrics)} of {cfg.epochs} epochs")

    section = cm.config["diagnostics"]
    co = co_detect(metrics, parse_fraction(section["co_collapse_ratio"]), parse_fraction(section["co_gap"]),
                   class_count=model.num_classes)
    diagnose_checkpoints(cm, seed_dir, test_data, seed, co.epoch if co.co_occurred else None)

    suite = cm.get_attack_suite(seed)
    rows = []
    for tag, name in EVAL_CHECKPOINTS:
        path = os.path.join(seed_dir, name)
        row = {"checkpoint": tag}
        row.update(evaluate(load_checkpoint(path), test_data, suite, show_progress))
        rows.append(row)
    pd.DataFrame(rows).to_csv(os.path.join(seed_dir, "eval.csv"), index=False, float_format="%.6f")

    best, final = metrics.best("pgd10_acc"), metrics.final()
    return {
        "seed": seed,
        "status": "completed",
        "best_epoch": int(best["epoch"]),
        "best_clean_acc": best["clean_acc"],
        "best_pgd10_acc": best["pgd10_acc"],
        "final_clean_acc": final["clean_acc"],
        "final_fgsm_acc": final["fgsm_acc"],
        "final_pgd10_acc": final["pgd10_acc"],
        "co_occurred": bool(co.co_occurred),
        "co_epoch": co.epoch,
    }


def _flag(value: Any) -> bool:
    """Reads a boolean that may have gone through CSV."""
    if isinstance(value, str):
        return value.strip().lower() == "true"
    return bool(value) and value == value


def st_string(rows: Sequence[Dict[str, Any]]) -> str:
    """One mark per seed: stable, CO-occurred, or failed."""
    marks = []
    for row in rows:
        if row.get("status") != "completed":
            marks.append(FAILED_MARK)
        else:
            marks.append(CO_MARK if _flag(row["co_occurred"]) else STABLE_MARK)
    return "".join(marks)


def summary_text(name: str, rows: Sequence[Dict[str, Any]]) -> str:
    """Best/Final block averaged over the completed seeds."""
    done = [row for row in rows if row.get("status") == "completed"]
    header = f"{'Run':<24}{'':<8}{'Clean':>9}  {'FGSM':>9}  {'PGD10':>9}  ST"
    lines = [header, "-" * len(header)]
    if done:
        mean = lambda key: float(np.mean([row[key] for row in done]))
        lines.append(f"{name:<24}{'best':<8}{mean('best_clean_acc'):9.2f}  {'-':>9}  {mean('best_pgd10_acc'):9.2f}")
        lines.append(f"{'':<24}{'final':<8}{mean('final_clean_acc'):9.2f}  {mean('final_fgsm_acc'):9.2f}  "
                     f"{mean('final_pgd10_acc'):9.2f}  {st_string(rows)}")
    else:
        lines.append(f"{name:<24}no completed seeds  {st_string(rows)}")
    for row in rows:
        if row.get("status") != "completed":
            lines.append(f"seed {row['seed']}: {row['status']}")
    return "\n".join(lines) + "\n"


def _write_summary(run_dir: str, name: str, rows: List[Dict[str, Any]]) -> None:
    rows = sorted(rows, key=lambda row: row["seed"])
    pd.DataFrame(rows, columns=SUMMARY_COLUMNS).to_csv(os.path.join(run_dir, "summary.csv"), index=False,
                                                       float_format="%.6f")
    with open(os.path.join(run_dir, "summary.txt"), 'w', encoding='utf-8') as f:
        f.write(summary_text(name, rows))


def run_experiment(cm: ConfigManager, force: bool = False, workers: Optional[int] = None,
                   show_progress: bool = True, should_stop: Optional[Callable[[], bool]] = None) -> str:
    """
    Runs every configured seed and writes summary.csv / summary.txt.

    A failing seed is recorded and the remaining seeds still run. Re-running a
    completed configuration is a no-op unless force is set.

    Args:
        cm: Configuration
        force: Re-run seeds already completed
        workers: Worker processes (experiment.workers when None)
        show_progress: Show progress bars (sequential runs only)
        should_stop: Polled between epochs and seeds

    Returns:
        The run directory
    """
    run_dir = cm.get_output_dir()
    os.makedirs(run_dir, exist_ok=True)
    should_stop = should_stop or (lambda: False)
    config = cm.to_dict()
    fingerprint = config_fingerprint(config)
    state_file = os.path.join(run_dir, RUN_STATE_FILE)
    state = load_progress_state(state_file)
    if state.get("fingerprint") != fingerprint or force:
        if state:
            log.info("Configuration changed or --force given; previous results are discarded" if not force
                     else "Forcing a fresh run")
        state = {"fingerprint": fingerprint, "completed": {}, "failed": {}}

    seeds = cm.get_seeds()
    pending = [seed for seed in seeds if str(seed) not in state["completed"]]
    if not pending:
        log.info(f"All {len(seeds)} seeds of {run_dir} already completed; use --force to re-run")
        _write_summary(run_dir, cm.config["experiment"]["name"], list(state["completed"].values()))
        return run_dir

    handler = attach_run_log(run_dir)
    try:
        cm.save(os.path.join(run_dir, "config.json"))
        workers = int(workers if workers is not None else parse_fraction(cm.config["experiment"]["workers"]))
        print_section_header(f"Run {cm.config['experiment']['name']}: seeds {pending}")
        log.info(f"Run directory: {run_dir} ({len(pending)} pending of {len(seeds)} seeds, workers={workers})")

        completed_count = 0
        failed_count = 0

        def record(seed: int, row: Optional[Dict[str, Any]], error: Optional[Exception]) -> None:
            nonlocal completed_count, failed_count
            if error is None:
                completed_count += 1
                state["completed"][str(seed)] = row
                state["failed"].pop(str(seed), None)
                log.info(f"Seed {seed} completed: best PGD-10 {row['best_pgd10_acc']:.2f} | "
                         f"final PGD-10 {row['final_pgd10_acc']:.2f} | "
                         f"{'CO at epoch ' + str(row['co_epoch']) if row['co_occurred'] else 'stable'}")
            else:
                failed_count += 1
                state["failed"][str(seed)] = f"{type(error).__name__}: {error}"
                log.error(f"Seed {seed} failed: {error}")
            save_progress_state(state_file, state)

        if workers > 1 and len(pending) > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(run_seed, config, seed, run_dir, False): seed for seed in pending}
                for future in as_completed(futures):
                    seed = futures[future]
                    try:
                        record(seed, future.result(), None)
                    except Exception as e:
                        record(seed, None, e)
        else:
            for seed in pending:
                if should_stop():
                    log.warning(f"Stop requested, {completed_count + failed_count} of {len(pending)} seeds ran")
                    break
                try:
                    record(seed, run_seed(config, seed, run_dir, show_progress, should_stop), None)
                except (ValueError, RuntimeError, OSError) as e:
                    record(seed, None, e)

        log.info(f"Seeds completed: {completed_count}")
        log.info(f"Seeds failed: {failed_count}")
        rows = list(state["completed"].values())
        rows += [dict({column: None for column in SUMMARY_COLUMNS}, seed=int(seed), status=f"failed: {message}")
                 for seed, message in state["failed"].items()]
        _write_summary(run_dir, cm.config["experiment"]["name"], rows)
        log.info(f"ST {st_string(sorted(rows, key=lambda row: row['seed']))}")
    finally:
        detach_run_log(handler)
    return run_dir


def run_attack_eval(cm: ConfigManager, checkpoint: str, out_dir: Optional[str] = None,
                    show_progress: bool = True) -> pd.DataFrame:
    """
    Evaluates a checkpoint with the configured attack suite on the test split and writes
    eval-<checkpoint stem>.csv, leaving the per-seed eval.csv of a run untouched.

    Raises:
        FileNotFoundError: If the checkpoint does not exist
    """
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    _, test_data = load_dataset(cm.get_dataset_spec())
    suite = cm.get_attack_suite(cm.get_seeds()[0])
    print_section_header(f"Attack evaluation: {', '.join(suite.attacks)}")
    row = {"checkpoint": os.path.basename(checkpoint), "epoch": model.epoch}
    row.update(evaluate(model, test_data, suite, show_progress))
    frame = pd.DataFrame([row])
    out_dir = out_dir or os.path.dirname(os.path.abspath(checkpoint))
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(checkpoint))[0]
    frame.to_csv(os.path.join(out_dir, f"eval-{stem}.csv"), index=False, float_format="%.6f")
    for key, value in row.items():
        if key.endswith("_acc"):
            log.info(f"{key}: {value:.2f}")
    return frame


def run_finetune_experiment(cm: ConfigManager, checkpoint: Optional[str] = None,
                            show_progress: bool = True) -> Tuple[RecoveryReport, str]:
    """
    Applies the configured recipe to a CO checkpoint for every seed, probes recurrence,
    and writes report.txt, recovery.csv and one probe CSV per seed.

    Returns:
        Tuple of (report, output directory)

    Raises:
        InputError: If no checkpoint is configured
        FileNotFoundError: If the checkpoint does not exist
    """
    checkpoint = checkpoint or cm.config["finetune"]["checkpoint"]
    if not checkpoint:
        raise InputError("Fine-tuning needs a checkpoint (--checkpoint or finetune.checkpoint)")
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"Checkpoint not found: {checkpoint}")
    model_co = load_checkpoint(checkpoint)
    recipe = cm.get_recipe()
    recipe.validate(len(model_co.layer_names))
    seeds = cm.get_seeds()
    train_data, test_data = load_dataset(cm.get_dataset_spec())
    cfg = cm.get_train_config(seeds[0])

    out_dir = os.path.join(cm.get_output_dir(), f"finetune-{recipe.name}-k{recipe.k}")
    os.makedirs(out_dir, exist_ok=True)
    handler = attach_run_log(out_dir)
    try:
        report = stability_protocol(model_co, recipe, train_data, cfg, seeds,
                                    int(parse_fraction(cm.config["finetune"]["probe_epochs"])),
                                    eval_data=test_data, suite=cm.get_attack_suite(seeds[0]),
                                    show_progress=show_progress)
        with open(os.path.join(out_dir, "report.txt"), 'w', encoding='utf-8') as f:
            f.write(report.to_text() + "\n")
        recovery = [dict(stage="pre", **report.pre), dict(stage="post", **report.post)]
        pd.DataFrame(recovery).to_csv(os.path.join(out_dir, "recovery.csv"), index=False, float_format="%.6f")
        for seed, probe in zip(report.seeds, report.probe_metrics):
            probe.save_csv(os.path.join(out_dir, f"probe-seed-{seed}.csv"))
        log.info(f"\n{report.to_text()}")
    finally:
        detach_run_log(handler)
    return report, out_dir


def _budget_label(budget: float) -> str:
    return f"{budget * 255:g}-255"


def _reusable_poison(path: str, train_data: ImageDataset, fingerprint: str) -> Optional[PoisonedDataset]:
    """The saved poison when it was generated with the same settings and data, else None."""
    if not os.path.exists(path):
        return None
    try:
        poisoned = PoisonedDataset.load(path, train_data)
    except FormatError as e:
        log.warning(f"Saved poison {path} is unusable ({e}), regenerating")
        return None
    if poisoned.fingerprint != fingerprint:
        log.info(f"Saved poison {path} was generated with other settings, regenerating")
        return None
    log.info(f"Reusing poison from {path}")
    return poisoned


def run_unlearnable(cm: ConfigManager, show_progress: bool = True,
                    force: bool = False) -> Dict[str, pd.DataFrame]:
    """
    Generates the configured poison, saves it, and runs the transfer experiment, the
    paradigm comparison and (sample-wise poisons) the random-noise defense as configured.

    A saved poison.ckpt is reused when its fingerprint matches the current settings and
    data; force always regenerates it.

    Returns:
        Mapping of table name to DataFrame for every table written
    """
    section = cm.config["unlearnable"]
    spec = cm.get_poison_spec()
    train_data, test_data = load_dataset(cm.get_dataset_spec())
    cfg = cm.get_train_config(cm.get_seeds()[0])
    out_dir = os.path.join(cm.get_output_dir(), f"unlearnable-{spec.mode}-{_budget_label(spec.budget)}")
    os.makedirs(out_dir, exist_ok=True)
    handler = attach_run_log(out_dir)
    tables: Dict[str, pd.DataFrame] = {}
    try:
        poison_path = os.path.join(out_dir, "poison.ckpt")
        fingerprint = poison_fingerprint(train_data, spec, cfg)
        poisoned = None if force else _reusable_poison(poison_path, train_data, fingerprint)
        if poisoned is None:
            poisoned = generate_poison(train_data, spec, cfg, show_progress)
            poisoned.save(poison_path)

        if section["run_transfer"]:
            tables["transfer"] = transfer_experiment(train_data, test_data, spec, cfg, list(section["trainers"]),
                                                     poisoned, show_progress)
        if section["run_paradigms"]:
            tables["paradigms"] = paradigm_comparison(train_data, test_data, spec, cfg, poisoned, show_progress)
        if spec.mode == "sample_wise" and spec.noise_scale > 0:
            print_section_header("Random-noise defense")
            defended = random_noise_defense(poisoned, spec.noise_scale, spec.seed)
            scores = train_and_score("noise_defense", defended, test_data, cfg, show_progress)
            tables["noise_defense"] = pd.DataFrame([dict(noise_scale=spec.noise_scale, **scores)])

        for name, frame in tables.items():
            frame.to_csv(os.path.join(out_dir, f"{name}.csv"), index=False, float_format="%.6f")
            log.info(f"{name}:\n{frame.to_string(index=False)}")
    finally:
        detach_run_log(handler)
    return tables


def sweep(cm: ConfigManager, axis: str, values: Sequence[Any], force: bool = False,
          workers: Optional[int] = None, show_progress: bool = True,
          should_stop: Optional[Callable[[], bool]] = None, checkpoint: Optional[str] = None) -> pd.DataFrame:
    """
    Runs one cell per value of a single hyperparameter and aggregates the Best/Final
    PGD-10 accuracies and CO verdicts into sweep_<axis>.csv.

    Training axes (beta, alpha_aux, eta) run the full seed protocol per cell; the k axis
    runs the configured fine-tuning recipe on a CO checkpoint per cell.

    Raises:
        InputError: If the axis is unknown or no values are given
    """
    if axis not in SWEEP_AXES:
        raise InputError(f"Unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}")
    if not values:
        raise InputError("Sweep needs at least one value")
    section, key, regularizer = SWEEP_AXES[axis]
    run_dir = cm.get_output_dir()
    sweep_dir = os.path.join(run_dir, f"sweep-{axis}")
    should_stop = should_stop or (lambda: False)

    rows = []
    for value in values:
        if should_stop():
            log.warning(f"Stop requested, sweep ended before {axis}={value}")
            break
        cell = copy.deepcopy(cm.to_dict())
        cell[section][key] = value
        if regularizer and regularizer not in cell["train"]["regularizers"]:
            cell["train"]["regularizers"] = list(cell["train"]["regularizers"]) + [regularizer]
        if axis == "beta" and cell["train"]["method"] != "fgsm_mep" and "r_pred" not in cell["train"]["regularizers"]:
            cell["train"]["regularizers"] = list(cell["train"]["regularizers"]) + ["r_pred"]
        cell["experiment"]["output_dir"] = sweep_dir
        cell["experiment"]["name"] = f"{axis}={value}"
        cell_cm = ConfigManager.from_dict(cell)
        print_section_header(f"Sweep {axis}={value}")

        if axis == "k":
            report, _ = run_finetune_experiment(cell_cm, checkpoint, show_progress)
            final_pgd10 = [probe.final()["pgd10_acc"] for probe in report.probe_metrics if len(probe)]
            best_pgd10 = [probe.best()["pgd10_acc"] for probe in report.probe_metrics if len(probe)]
            rows.append({"value": parse_fraction(value),
                         "post_pgd10_acc": report.post.get("pgd10_acc"),
                         "best_pgd10_acc": float(np.mean(best_pgd10)) if best_pgd10 else None,
                         "final_pgd10_acc": float(np.mean(final_pgd10)) if final_pgd10 else None,
                         "co_runs": sum(not stable for stable in report.stability_runs),
                         "st": report.st_string})
            continue

        cell_dir = run_experiment(cell_cm, force=force, workers=workers, show_progress=show_progress,
                                  should_stop=should_stop)
        summary = pd.read_csv(os.path.join(cell_dir, "summary.csv"))
        done = summary[summary["status"] == "completed"]
        rows.append({"value": parse_fraction(value),
                     "post_pgd10_acc": None,
                     "best_pgd10_acc": float(done["best_pgd10_acc"].mean()) if len(done) else None,
                     "final_pgd10_acc": float(done["final_pgd10_acc"].mean()) if len(done) else None,
                     "co_runs": int(sum(_flag(flag) for flag in done["co_occurred"])),
                     "st": st_string(summary.to_dict(orient="records"))})

    frame = pd.DataFrame(rows, columns=["value", "post_pgd10_acc", "best_pgd10_acc", "final_pgd10_acc",
                                        "co_runs", "st"])
    os.makedirs(run_dir, exist_ok=True)
    frame.to_csv(os.path.join(run_dir, f"sweep_{axis}.csv"), index=False, float_format="%.6f")
    log.info(f"Sweep over {axis}:\n{frame.to_string(index=False)}")
    return frame
