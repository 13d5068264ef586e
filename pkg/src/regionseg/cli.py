"""Command-line entry point: train, eval, ablate, report.

Exit codes: 0 on success, 2 for configuration errors, 3 for runtime or
numeric failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from .common import ConfigurationError, NumericsError
from .config import (RunConfig, Toggles, config_hash, load_config,
                     resolve_output_dir, save_config)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Table rows: which components are active in each ablation variant.
ABLATION_ROWS = (
    ("baseline", Toggles(lplf=False, drlc=False, eni=False)),
    ("lplf", Toggles(lplf=True, drlc=False, eni=False)),
    ("lplf_drlc", Toggles(lplf=True, drlc=True, eni=False)),
    ("eni", Toggles(lplf=False, drlc=False, eni=True)),
    ("full", Toggles(lplf=True, drlc=True, eni=True)),
)


def _cmd_train(args) -> int:
    from .trainer import run_training

    cfg = load_config(args.config)
    result = run_training(cfg, resume=args.resume, quiet=args.quiet)
    if args.debug_dumps:
        _write_debug_dumps(cfg)
    print(f"val mIoU: {result['val_miou']:.4f}")
    return EXIT_OK


def _write_debug_dumps(cfg: RunConfig) -> None:
    """Dump filter mask, selected pseudo-labels and the combined decision map
    for one unlabeled batch of the final model."""
    import torch

    from .filtering import (make_concat, select_pseudo_labels, to_prediction_label,
                            upsample_decision)
    from .region_weights import combine_decision_maps
    from .reporting import save_decision_png, save_label_png, save_mask_png
    from .trainer import build_datasets, build_state, collate, restore, split_by_partition

    out = resolve_output_dir(cfg)
    debug = out / "debug"
    debug.mkdir(parents=True, exist_ok=True)
    train_samples, _ = build_datasets(cfg)
    _, unlabeled_ids, _ = split_by_partition(train_samples, cfg)
    by_id = {s.id: s for s in train_samples}
    pool = unlabeled_ids or [s.id for s in train_samples]
    batch = collate([by_id[i] for i in pool[:4]])

    state = build_state(cfg)
    restore(out / "checkpoints" / "last.ckpt", state)
    with torch.no_grad():
        l1 = state.branch1(batch.images)
        l2 = state.branch2(batch.images)
        cm1 = make_concat(batch.images, torch.softmax(l1, dim=1))
        rc1 = state.disc1(cm1).rc
        rc2 = state.disc2(cm1).rc
    thr = cfg.train.loss_weights.threshold
    mask = upsample_decision(rc1, l1.shape[-2:], thr)
    pseudo = select_pseudo_labels(to_prediction_label(l1), mask)
    combined = combine_decision_maps(rc1, rc2, thr)
    for b in range(batch.images.shape[0]):
        save_mask_png(mask[b].numpy(), debug / f"filter_mask_{b}.png")
        save_label_png(pseudo[b].numpy(), cfg.dataset.num_classes,
                       debug / f"pseudo_label_{b}.png")
        save_decision_png(combined.categories[b].numpy(),
                          debug / f"combined_decision_{b}.png")


def _cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .trainer import build_datasets, build_state, restore

    cfg = load_config(args.config)
    state = build_state(cfg)
    restore(args.ckpt, state)
    _, val = build_datasets(cfg)
    if not val:
        raise ConfigurationError("config defines no validation samples")
    eni = cfg.train.toggles.eni and not args.no_eni
    result = evaluate(state.branch1, state.branch2, val, state.num_classes,
                      eni=eni, ensemble=cfg.ensemble)
    result["eni"] = eni
    result["config_hash"] = config_hash(cfg)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def _ablation_run_config(cfg: RunConfig, row_name: str, toggles: Toggles,
                         ratio: Fraction, seed: int) -> RunConfig:
    run = dataclasses.replace(
        cfg,
        output_dir=str(Path(cfg.output_dir) / "ablate"
                       / f"{row_name}_r{ratio.numerator}-{ratio.denominator}_s{seed}"),
        seed=seed,
        partition=dataclasses.replace(cfg.partition, ratio=ratio, seed=None),
        train=dataclasses.replace(
            cfg.train,
            toggles=toggles,
            loss_weights=dataclasses.replace(cfg.train.loss_weights,
                                             drlc_enabled=toggles.drlc),
            seed=seed),
    )
    run.validate()
    return run


def _ablate_worker(config_path: str) -> dict:
    from .trainer import run_training

    cfg = load_config(config_path)
    result = run_training(cfg, quiet=True)
    return {"val_miou": result["val_miou"], "output_dir": cfg.output_dir}


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if cfg.partition is None:
        raise ConfigurationError("ablate requires a partition section")
    ratios = tuple(Fraction(r) for r in cfg.ablation.ratios)
    seeds = tuple(cfg.ablation.seeds)
    out = resolve_output_dir(cfg)

    jobs = []
    for row_name, toggles in ABLATION_ROWS:
        for ratio in ratios:
            for seed in seeds:
                run_cfg = _ablation_run_config(cfg, row_name, toggles, ratio, seed)
                run_dir = resolve_output_dir(run_cfg)
                run_dir.mkdir(parents=True, exist_ok=True)
                cfg_path = run_dir / "config.yaml"
                save_config(run_cfg, cfg_path)
                jobs.append((row_name, ratio, seed, str(cfg_path)))

    print(f"running {len(jobs)} ablation runs "
          f"({len(ABLATION_ROWS)} rows x {len(ratios)} ratios x {len(seeds)} seeds)")
    results = {}
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = {(r, ra, s): pool.submit(_ablate_worker, p)
                       for r, ra, s, p in jobs}
            for key, fut in futures.items():
                results[key] = fut.result()["val_miou"]
    else:
        for row_name, ratio, seed, path in jobs:
            print(f"  {row_name} ratio={ratio} seed={seed}", flush=True)
            results[(row_name, ratio, seed)] = _ablate_worker(path)["val_miou"]

    lines = [f"{'variant':<12}" + "".join(f"{str(r):>18}" for r in ratios)]
    summary = {}
    for row_name, _ in ABLATION_ROWS:
        cells = []
        for ratio in ratios:
            vals = [results[(row_name, ratio, s)] for s in seeds]
            mean, std = float(np.mean(vals)), float(np.std(vals))
            cells.append(f"{mean:.4f} ({std:.4f})")
            summary[f"{row_name}@{ratio}"] = {"mean": mean, "std": std, "values": vals}
        lines.append(f"{row_name:<12}" + "".join(f"{c:>18}" for c in cells))
    table = "\n".join(lines)
    print(table)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_summary.txt").write_text(table + "\n")
    (out / "ablation_summary.json").write_text(json.dumps(
        {f"{k}": v for k, v in summary.items()}, indent=2))
    return EXIT_OK


def _cmd_report(args) -> int:
    from .reporting import write_report

    for run in args.run_dirs:
        run = Path(run)
        if not run.is_dir() or not (run / "metrics.jsonl").exists():
            raise ConfigurationError(f"{run} is not a completed run directory")
    produced = write_report(args.run_dirs, args.out)
    for p in produced:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regionseg",
        description="Dual-branch semi-supervised segmentation with "
                    "discriminator-based region filtering")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a config file")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.add_argument("--quiet", action="store_true")
    p_train.add_argument("--debug-dumps", action="store_true",
                         help="dump filter masks / decision maps after training")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the val set")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--no-eni", action="store_true",
                        help="force branch-1-only evaluation")
    p_eval.set_defaults(func=_cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run the 5-variant component study")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--jobs", type=int, default=1,
                          help="independent runs in parallel processes")
    p_ablate.set_defaults(func=_cmd_ablate)

    p_report = sub.add_parser("report", help="plots and prediction grids for runs")
    p_report.add_argument("run_dirs", nargs="+")
    p_report.add_argument("--out", default="report")
    p_report.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericsError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - map anything else to the runtime code
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
