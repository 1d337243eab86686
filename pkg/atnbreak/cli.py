#!/usr/bin/env python3
"""
Command-line interface for atnbreak

Usage:
    python -m atnbreak train --config run.json --seed 0 --out out/model.ckpt
    python -m atnbreak attack --model out/model.ckpt --image cat.pgm --eps 8/255 --out out/attack
    python -m atnbreak eval --model out/model.ckpt --task compare --out out/compare.json
    python -m atnbreak viz --model out/model.ckpt --image cat.pgm --perturbation out/attack/cat.z.tns --out clean.pgm adv.pgm

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .attack import LOSS_MODES, AttackConfig, attack_many
from .config import RunConfig, apply_overrides, load_run_config
from .datasets import SPLITS, generate_dataset
from .evaluation import (
    attack_success_rate_classification,
    dense_degradation,
    epsilon_sweep,
    frame_to_records,
    layer_ablation,
    mode_comparison_report,
    reports_table,
    retrieval_success_at_k,
    transfer_matrix,
    write_report,
)
from .persistence import (
    atomic_write_bytes,
    read_checkpoint,
    read_image,
    read_tensor,
    write_checkpoint,
    write_image,
    write_tensor,
)
from .training import train
from .utils import (
    AtnBreakError,
    ConfigError,
    ensure_directory,
    get_logger,
    resolve_jobs,
    set_verbosity,
    write_jsonl,
)
from .viz import render_heatmaps
from .vit import ViTConfig, ViTModel

logger = get_logger(__name__)

EVAL_TASKS = ("classification", "retrieval", "dense", "compare", "transfer", "sweep", "layers")


def _banner(lines: Sequence[str]) -> None:
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)


def _attack_overrides(args) -> Dict[str, Any]:
    return {
        "attack.epsilon": getattr(args, "eps", None),
        "attack.iterations": getattr(args, "iters", None),
        "attack.eta": getattr(args, "lr", None),
        "attack.loss_mode": getattr(args, "loss", None),
        "attack.target_layer": getattr(args, "layer", None),
        "attack.seed": getattr(args, "attack_seed", None),
        "attack.init": getattr(args, "init", None),
    }


def _with_model(cfg: RunConfig, model_cfg: ViTConfig) -> RunConfig:
    """Adopt a checkpoint's model config and align the dataset with it"""
    data = cfg.to_dict()
    data["model"] = model_cfg.to_dict()
    data["dataset"]["image_size"] = model_cfg.image_size
    data["dataset"]["channels"] = model_cfg.channels
    if model_cfg.num_classes is not None:
        data["dataset"]["num_classes"] = model_cfg.num_classes
    return RunConfig.from_dict(data)


def _load_attack_config(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Attack config not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Attack config {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"Attack config {path} must be a JSON object")
    try:
        AttackConfig.from_dict(data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid attack config {path}: {e}")
    return {f"attack.{key}": value for key, value in data.items()}


def _resolve(args, extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    cfg = load_run_config(args.config)
    overrides = dict(extra or {})
    overrides.update(_attack_overrides(args))
    return apply_overrides(cfg, overrides)


# ---------------------------------------------------------------------------
# Sub-commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = {
        "seed": args.seed,
        "train.seed": args.seed,
        "train.epochs": args.epochs,
        "outputs.checkpoint": args.out,
        "outputs.train_log": args.log,
    }
    cfg = apply_overrides(load_run_config(args.config), overrides)
    resolved = cfg.to_dict()

    dataset = generate_dataset(cfg.dataset)
    model = ViTModel.initialise(cfg.model, cfg.seed)
    result = train(model, dataset, cfg.train, log_path=cfg.outputs.train_log, log_header=resolved)
    write_checkpoint(cfg.outputs.checkpoint, result.model.params, cfg.model, seed=cfg.seed, extra=resolved)

    _banner([
        "Training complete",
        f"Checkpoint:     {cfg.outputs.checkpoint}",
        f"Training log:   {cfg.outputs.train_log}",
        f"Val accuracy:   {result.val_accuracy if result.val_accuracy is not None else float('nan'):.4f}",
        f"Dense accuracy: {result.dense_accuracy if result.dense_accuracy is not None else float('nan'):.4f}",
    ])
    return 0


def _attack_inputs(args, cfg: RunConfig, model: ViTModel) -> Tuple[List[str], np.ndarray]:
    if args.image is not None:
        names, images = [], []
        for path in args.image:
            names.append(Path(path).stem)
            images.append(read_image(path, expected_shape=model.config.image_shape))
        if len(set(names)) != len(names):
            raise ConfigError(f"Input images share a file name: {names}")
        return names, np.stack(images)

    dataset = generate_dataset(cfg.dataset)
    count = args.count if args.count is not None else cfg.eval.count
    images = dataset.images(args.dataset, count)
    return [f"{args.dataset}_{i:04d}" for i in range(len(images))], images


def cmd_attack(args) -> int:
    model, _ = read_checkpoint(args.model)
    cfg = _with_model(_resolve(args, {"outputs.attack_dir": args.out}), model.config)
    jobs = resolve_jobs(args.jobs)

    names, images = _attack_inputs(args, cfg, model)
    results = attack_many(images, model, cfg.attack, jobs)

    out_dir = ensure_directory(cfg.outputs.attack_dir)
    suffix = ".adv.pgm" if model.config.channels == 1 else ".adv.ppm"
    entries = []
    for name, result in zip(names, results):
        write_tensor(out_dir / f"{name}.z.tns", result.z_star)
        write_image(out_dir / f"{name}{suffix}", result.adversarial_image)
        write_jsonl(out_dir / f"{name}.trace.jsonl", result.trace_records())
        entries.append({"name": name, **result.summary()})

    manifest = {"config": cfg.to_dict(), "checkpoint": str(args.model), "inputs": entries}
    body = json.dumps(manifest, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(out_dir / "manifest.json", body.encode("utf-8"))

    _banner([
        f"Attacked {len(results)} image(s) ({cfg.attack.loss_mode}, eps={cfg.attack.epsilon:.5f})",
        f"Output directory: {out_dir}",
    ])
    return 0


def cmd_eval(args) -> int:
    models = []
    for path in args.model:
        model, _ = read_checkpoint(path)
        models.append(model)
    extra = {"outputs.report": args.out, "eval.count": args.count}
    extra.update(_load_attack_config(args.attack_config))
    cfg = _with_model(_resolve(args, extra), models[0].config)
    jobs = resolve_jobs(args.jobs)
    dataset = generate_dataset(cfg.dataset)
    model = models[0]
    attack_cfg = cfg.attack
    task = args.task

    payload: Dict[str, Any] = {"config": cfg.to_dict(), "task": task, "models": [str(p) for p in args.model]}
    if task == "classification":
        reports = [attack_success_rate_classification(model, dataset, attack_cfg, cfg.eval.count, jobs)]
        table = reports_table(reports)
        payload["reports"] = [r.to_dict() for r in reports]
    elif task == "retrieval":
        gallery = dataset.images("val", cfg.eval.gallery_size)
        reports = retrieval_success_at_k(model, gallery, attack_cfg, cfg.eval.ks, jobs=jobs, dataset=dataset)
        table = reports_table(reports)
        payload["reports"] = [r.to_dict() for r in reports]
    elif task == "dense":
        reports = list(dense_degradation(model, dataset, attack_cfg, cfg.eval.count, jobs))
        table = reports_table(reports)
        payload["reports"] = [r.to_dict() for r in reports]
    elif task == "compare":
        table, details = mode_comparison_report(model, dataset, attack_cfg, cfg.eval.gallery_size, jobs)
        payload["grid"] = frame_to_records(table)
        payload["details"] = details
    elif task == "transfer":
        if len(models) < 2:
            raise ConfigError("eval --task transfer needs at least two --model checkpoints")
        names = [Path(p).stem for p in args.model]
        table, control = transfer_matrix(models, models, dataset, attack_cfg, cfg.eval.count, jobs, names, names)
        payload["matrix"] = frame_to_records(table)
        payload["control"] = frame_to_records(control)
    elif task == "sweep":
        table = epsilon_sweep(model, dataset, attack_cfg, count=cfg.eval.count, jobs=jobs)
        payload["sweep"] = frame_to_records(table)
    else:
        table = layer_ablation(model, dataset, attack_cfg, cfg.eval.gallery_size, jobs)
        payload["layers"] = frame_to_records(table)

    json_path, text_path = write_report(cfg.outputs.report, payload, table)
    print(table.to_string())
    _banner([f"Report: {json_path}", f"Table:  {text_path}"])
    return 0


def cmd_viz(args) -> int:
    model, _ = read_checkpoint(args.model)
    image = read_image(args.image, expected_shape=model.config.image_shape)
    z = read_tensor(args.perturbation) if args.perturbation is not None else None
    clean, perturbed = render_heatmaps(model, image, z, args.layer)
    clean_path, adv_path = args.out
    write_image(clean_path, clean)
    write_image(adv_path, perturbed)
    _banner([f"Clean heatmap:     {clean_path}", f"Perturbed heatmap: {adv_path}"])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--eps", help='L-inf budget, fraction or decimal (default: 8/255)')
    parser.add_argument("--iters", type=int, help="Optimisation iterations (default: 250)")
    parser.add_argument("--lr", type=float, help="Adam learning rate eta (default: 0.01)")
    parser.add_argument("--loss", choices=LOSS_MODES, help="Loss mode (default: comb)")
    parser.add_argument("--layer", help='Target layer, 1-based or "last" (default: last)')
    parser.add_argument("--init", choices=("auto", "zero", "uniform"), help="Perturbation start (default: auto)")
    parser.add_argument("--attack-seed", type=int, help="Base seed of per-image attacks")
    parser.add_argument("--jobs", type=int, help="Worker processes (default: ATNBREAK_JOBS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atnbreak",
        description="Task-agnostic attention/embedding attacks on a desk-scale ViT",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Train backbone and heads on the synthetic shape dataset
  python -m atnbreak train --seed 0 --out out/model.ckpt

  # Attack 10 validation images with the combined loss
  python -m atnbreak attack --model out/model.ckpt --dataset val --count 10 --out out/attack

  # Headline 3x3 mode comparison
  python -m atnbreak eval --model out/model.ckpt --task compare --out out/compare.json
        """,
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Enable verbose logging")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train backbone and heads, write checkpoint and JSON-lines log")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--seed", type=int, help="Init and batch-order seed")
    p.add_argument("--epochs", type=int, help="Override train.epochs")
    p.add_argument("--out", help="Checkpoint path (default: out/model.ckpt)")
    p.add_argument("--log", help="Training log path (default: out/train.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="Craft perturbations for images or a dataset split")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--model", required=True, help="Checkpoint")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--image", nargs="+", help="PGM/PPM input image(s)")
    source.add_argument("--dataset", choices=sorted(SPLITS), help="Synthetic split to attack")
    p.add_argument("--count", type=int, help="Images taken from --dataset (default: eval.count)")
    p.add_argument("--out", help="Output directory (default: out/attack)")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="Attack-success reports")
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--model", required=True, action="append", help="Checkpoint (repeat for transfer)")
    p.add_argument("--task", required=True, choices=EVAL_TASKS)
    p.add_argument("--attack-config", help="JSON object of attack settings")
    p.add_argument("--count", type=int, help="Images per task (default: eval.count)")
    p.add_argument("--out", help="Report JSON path; a .txt table is written next to it")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="CLS attention heatmaps, clean and perturbed")
    p.add_argument("--model", required=True, help="Checkpoint")
    p.add_argument("--image", required=True, help="PGM/PPM input image")
    p.add_argument("--perturbation", help="z TensorFile (default: zeros)")
    p.add_argument("--layer", default="last", help='1-based layer or "last" (default: last)')
    p.add_argument("--out", nargs=2, required=True, metavar=("CLEAN", "ADV"), help="Output PGM paths")
    p.set_defaults(func=cmd_viz)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point; returns the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0

    if args.debug:
        set_verbosity(logging.DEBUG)
        logger.debug("Debug logging enabled")
    elif args.verbose:
        set_verbosity(logging.INFO)

    try:
        return args.func(args)

    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return 2

    except KeyboardInterrupt:
        logger.info("Operation cancelled by user")
        return 1

    except AtnBreakError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1

    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        if args.debug:
            import traceback

            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
