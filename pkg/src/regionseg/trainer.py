"""Alternating segmentation/discriminator training with warm-up, polynomial
learning-rate decay, gradient accumulation, checkpointing and metrics logging.

Every random draw (batch composition, augmentation) is keyed off the run
seed and the iteration counter, so resuming from a checkpoint reproduces
the uninterrupted run exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .common import ConfigurationError, NumericsError, derive_seed
from .config import RunConfig, TrainConfig, config_hash, resolve_output_dir, save_config
from .data import (Partition, augment, build_synthetic_dataset, load_dataset,
                   make_partition, save_partition)
from .evaluation import evaluate_both
from .filtering import make_concat, onehot_labels, upsample_decision
from .losses import (LossReport, adversarial_scores, cps_loss, discriminator_loss,
                     dynamic_region_loss, feature_matching_loss, local_selection_loss,
                     supervised_loss, total_loss)
from .models import build_branch, build_discriminator
from .region_weights import combine_decision_maps, weight_mask


class Batch(NamedTuple):
    images: torch.Tensor        # (B, 3, H, W) float32 in [0, 1]
    labels: torch.Tensor | None  # (B, H, W) int64, None for unlabeled


@dataclass
class TrainState:
    iteration: int
    branch1: torch.nn.Module
    branch2: torch.nn.Module
    disc1: torch.nn.Module
    disc2: torch.nn.Module
    seg_opt: torch.optim.Optimizer
    disc_opt1: torch.optim.Optimizer
    disc_opt2: torch.optim.Optimizer
    config_hash: str
    num_classes: int


def lr_schedule(base_lr: float, iteration: int, max_iters: int, power: float) -> float:
    """Polynomial decay from base_lr at iteration 0 to 0 at max_iters."""
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** power


def build_state(cfg: RunConfig) -> TrainState:
    seed = cfg.seed
    C = cfg.dataset.num_classes
    branch1 = build_branch(derive_seed(seed, "branch", 1), C, cfg.model.base_channels)
    branch2 = build_branch(derive_seed(seed, "branch", 2), C, cfg.model.base_channels)
    disc1 = build_discriminator(derive_seed(seed, "disc", 1), C, cfg.model.disc_channels)
    disc2 = build_discriminator(derive_seed(seed, "disc", 2), C, cfg.model.disc_channels)
    seg_opt = torch.optim.SGD(
        list(branch1.parameters()) + list(branch2.parameters()),
        lr=cfg.train.seg_lr, momentum=cfg.train.seg_momentum,
        weight_decay=cfg.train.seg_weight_decay)
    disc_opt1 = torch.optim.Adam(disc1.parameters(), lr=cfg.train.disc_lr,
                                 betas=tuple(cfg.train.disc_betas))
    disc_opt2 = torch.optim.Adam(disc2.parameters(), lr=cfg.train.disc_lr,
                                 betas=tuple(cfg.train.disc_betas))
    return TrainState(0, branch1, branch2, disc1, disc2,
                      seg_opt, disc_opt1, disc_opt2, config_hash(cfg), C)


def _set_requires_grad(module: torch.nn.Module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _region_machinery_on(cfg: TrainConfig) -> bool:
    return cfg.toggles.lplf or cfg.toggles.drlc


def discriminator_phase(state: TrainState, labeled: list, unlabeled: list,
                        cfg: TrainConfig) -> dict:
    """One update of both discriminators over the micro-batches.

    Real examples are labeled images concatenated with their one-hot ground
    truth; fakes are unlabeled images concatenated with the paired branch's
    own (detached) probability map.
    """
    k = len(labeled)
    for opt in (state.disc_opt1, state.disc_opt2):
        opt.zero_grad()
    totals = {"disc1": 0.0, "disc2": 0.0}
    for lab, unl in zip(labeled, unlabeled):
        real_cm = make_concat(lab.images, onehot_labels(lab.labels, state.num_classes))
        with torch.no_grad():
            fakes = {
                1: make_concat(unl.images, torch.softmax(state.branch1(unl.images), dim=1)),
                2: make_concat(unl.images, torch.softmax(state.branch2(unl.images), dim=1)),
            }
        for i, disc, opt in ((1, state.disc1, state.disc_opt1),
                             (2, state.disc2, state.disc_opt2)):
            real_out = disc(real_cm)
            fake_out = disc(fakes[i])
            loss = discriminator_loss(
                adversarial_scores(real_out.rc, real_out.score),
                adversarial_scores(fake_out.rc, fake_out.score))
            (loss / k).backward()
            totals[f"disc{i}"] += loss.item() / k
    state.disc_opt1.step()
    state.disc_opt2.step()
    return totals


def _selected_fraction_lplf(rc1, rc2, hw, threshold) -> float:
    m1 = upsample_decision(rc1, hw, threshold)
    m2 = upsample_decision(rc2, hw, threshold)
    return float((m1.float().mean() + m2.float().mean()) / 2)


def _selected_fraction_drlc(w1, w2) -> float:
    return float(((w1 > 0).float().mean() + (w2 > 0).float().mean()) / 2)


def segmentation_losses(state: TrainState, labeled: Batch, unlabeled: Batch | None,
                        cfg: TrainConfig, iteration: int,
                        cached_logits: tuple | None = None):
    """All segmentation-side loss terms for one micro-batch.

    Returns (total tensor, LossReport). The local-selection / dynamic-region
    term is active only after warm-up; feature matching runs from iteration 0
    so the discriminators' feature statistics stabilize early.
    """
    w = cfg.loss_weights
    if cached_logits is not None:
        l1_lab, l2_lab, l1_un, l2_un = cached_logits
    else:
        l1_lab = state.branch1(labeled.images)
        l2_lab = state.branch2(labeled.images)
        l1_un = state.branch1(unlabeled.images) if unlabeled is not None else None
        l2_un = state.branch2(unlabeled.images) if unlabeled is not None else None

    sup = supervised_loss(l1_lab, l2_lab, labeled.labels)
    cps = cps_loss(l1_lab, l2_lab)
    if l1_un is not None:
        cps = cps + cps_loss(l1_un, l2_un)

    region = sup.new_zeros(())
    fm = sup.new_zeros(())
    selected_fraction = 0.0
    if _region_machinery_on(cfg) and l1_un is not None:
        probs_1 = torch.softmax(l1_un, dim=1)
        probs_2 = torch.softmax(l2_un, dim=1)
        cm1 = make_concat(unlabeled.images, probs_1)
        cm2 = make_concat(unlabeled.images, probs_2)
        out1 = state.disc1(cm1)
        out2 = state.disc2(cm2)
        with torch.no_grad():
            real_cm = make_concat(labeled.images,
                                  onehot_labels(labeled.labels, state.num_classes))
            f_real_1 = state.disc1(real_cm).features
            f_real_2 = state.disc2(real_cm).features
        fm = (feature_matching_loss(out1.features, f_real_1)
              + feature_matching_loss(out2.features, f_real_2))

        if iteration >= cfg.resolved_warmup() and w.lambda_region > 0:
            hw = l1_un.shape[-2:]
            if cfg.toggles.drlc:
                with torch.no_grad():
                    rc2_on_1 = state.disc2(cm1).rc   # d2's verdict on branch 1's map
                    rc1_on_2 = state.disc1(cm2).rc   # d1's verdict on branch 2's map
                region = (dynamic_region_loss(l1_un, out1.rc.detach(), rc2_on_1, w.threshold)
                          + dynamic_region_loss(l2_un, rc1_on_2, out2.rc.detach(), w.threshold))
                wm1 = weight_mask(combine_decision_maps(out1.rc.detach(), rc2_on_1,
                                                        w.threshold), hw)
                wm2 = weight_mask(combine_decision_maps(rc1_on_2, out2.rc.detach(),
                                                        w.threshold), hw)
                selected_fraction = _selected_fraction_drlc(wm1, wm2)
            else:
                region = (local_selection_loss(l1_un, out1.rc.detach(), w.threshold)
                          + local_selection_loss(l2_un, out2.rc.detach(), w.threshold))
                selected_fraction = _selected_fraction_lplf(
                    out1.rc.detach(), out2.rc.detach(), hw, w.threshold)

    total = total_loss(sup, cps, region, fm, w)
    report = LossReport(
        sup=sup.item(), cps=cps.item(), ls_or_dr=region.item(), fm=fm.item(),
        total=total.item(), selected_fraction=selected_fraction)
    return total, report


def segmentation_phase(state: TrainState, labeled: list, unlabeled: list,
                       cfg: TrainConfig, iteration: int, max_iters: int,
                       cached: list | None = None) -> LossReport:
    """One update of both branches (jointly) over the micro-batches."""
    lr = lr_schedule(cfg.seg_lr, iteration, max_iters, cfg.poly_power)
    for group in state.seg_opt.param_groups:
        group["lr"] = lr
    _set_requires_grad(state.disc1, False)
    _set_requires_grad(state.disc2, False)
    try:
        state.seg_opt.zero_grad()
        k = len(labeled)
        reports = []
        for m in range(k):
            total, report = segmentation_losses(
                state, labeled[m], unlabeled[m] if unlabeled else None, cfg, iteration,
                cached_logits=cached[m] if cached else None)
            (total / k).backward()
            reports.append(report)
        state.seg_opt.step()
    finally:
        _set_requires_grad(state.disc1, True)
        _set_requires_grad(state.disc2, True)

    mean = lambda key: float(np.mean([getattr(r, key) for r in reports]))
    return LossReport(sup=mean("sup"), cps=mean("cps"), ls_or_dr=mean("ls_or_dr"),
                      fm=mean("fm"), total=mean("total"),
                      selected_fraction=mean("selected_fraction"))


def train_step_accumulated(state: TrainState, labeled: list, unlabeled: list | None,
                           cfg: TrainConfig, max_iters: int) -> tuple:
    """One parameter update accumulated over k micro-batches.

    Order matches a single large-batch step: the discriminators update on
    all micro-batches first, then the branches update against the already
    updated (frozen) discriminators.
    """
    if not labeled:
        raise ConfigurationError("labeled micro-batch list is empty")
    w = cfg.loss_weights
    disc_on = _region_machinery_on(cfg)
    has_unlabeled = bool(unlabeled) and all(u is not None for u in unlabeled)
    if disc_on and (w.lambda_region + w.lambda_feature) > 0 and not has_unlabeled:
        raise ConfigurationError(
            "region/feature losses are enabled but no unlabeled data is available")

    iteration = state.iteration
    disc_losses = {"disc1": 0.0, "disc2": 0.0}

    # branch forwards are shared between the two phases (the discriminator
    # step does not touch branch parameters)
    cached = []
    for m in range(len(labeled)):
        lab = labeled[m]
        unl = unlabeled[m] if has_unlabeled else None
        l1_lab = state.branch1(lab.images)
        l2_lab = state.branch2(lab.images)
        l1_un = state.branch1(unl.images) if unl is not None else None
        l2_un = state.branch2(unl.images) if unl is not None else None
        cached.append((l1_lab, l2_lab, l1_un, l2_un))

    if disc_on and has_unlabeled:
        k = len(labeled)
        for opt in (state.disc_opt1, state.disc_opt2):
            opt.zero_grad()
        for m in range(k):
            lab, unl = labeled[m], unlabeled[m]
            real_cm = make_concat(lab.images, onehot_labels(lab.labels, state.num_classes))
            _, _, l1_un, l2_un = cached[m]
            fakes = {
                1: make_concat(unl.images, torch.softmax(l1_un.detach(), dim=1)),
                2: make_concat(unl.images, torch.softmax(l2_un.detach(), dim=1)),
            }
            for i, disc, opt in ((1, state.disc1, state.disc_opt1),
                                 (2, state.disc2, state.disc_opt2)):
                real_out = disc(real_cm)
                fake_out = disc(fakes[i])
                loss = discriminator_loss(
                    adversarial_scores(real_out.rc, real_out.score),
                    adversarial_scores(fake_out.rc, fake_out.score))
                (loss / k).backward()
                disc_losses[f"disc{i}"] += loss.item() / k
        state.disc_opt1.step()
        state.disc_opt2.step()

    report = segmentation_phase(state, labeled,
                                unlabeled if has_unlabeled else None,
                                cfg, iteration, max_iters, cached=cached)
    state.iteration += len(labeled)
    return report, disc_losses


def train_step(state: TrainState, labeled_batch: Batch, unlabeled_batch: Batch | None,
               cfg: TrainConfig, max_iters: int | None = None) -> tuple:
    """Single-batch update; see ``train_step_accumulated`` for the k-batch form."""
    return train_step_accumulated(
        state, [labeled_batch],
        [unlabeled_batch] if unlabeled_batch is not None else None,
        cfg, max_iters if max_iters is not None else cfg.max_iters)


def checkpoint(state: TrainState, path) -> None:
    """Atomic write of all parameters, optimizer states and counters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "iteration": state.iteration,
        "config_hash": state.config_hash,
        "num_classes": state.num_classes,
        "branch1": state.branch1.state_dict(),
        "branch2": state.branch2.state_dict(),
        "disc1": state.disc1.state_dict(),
        "disc2": state.disc2.state_dict(),
        "seg_opt": state.seg_opt.state_dict(),
        "disc_opt1": state.disc_opt1.state_dict(),
        "disc_opt2": state.disc_opt2.state_dict(),
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def restore(path, state: TrainState) -> TrainState:
    """Load a checkpoint into ``state`` after verifying the config hash."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as e:
        raise ConfigurationError(f"cannot parse checkpoint {path}: {e}") from e
    if payload.get("config_hash") != state.config_hash:
        raise ConfigurationError(
            f"checkpoint {path} was written under config hash "
            f"{payload.get('config_hash')}, current config hashes to {state.config_hash}")
    state.branch1.load_state_dict(payload["branch1"])
    state.branch2.load_state_dict(payload["branch2"])
    state.disc1.load_state_dict(payload["disc1"])
    state.disc2.load_state_dict(payload["disc2"])
    state.seg_opt.load_state_dict(payload["seg_opt"])
    state.disc_opt1.load_state_dict(payload["disc_opt1"])
    state.disc_opt2.load_state_dict(payload["disc_opt2"])
    state.iteration = int(payload["iteration"])
    torch.set_rng_state(payload["torch_rng"])
    return state


def collate(samples) -> Batch:
    images = torch.from_numpy(
        np.stack([s.image.transpose(2, 0, 1) for s in samples]).astype(np.float32))
    labels = torch.from_numpy(np.stack([s.label for s in samples]).astype(np.int64))
    return Batch(images=images, labels=labels)


def draw_batch(samples_by_id: dict, ids, batch_size: int, aug_cfg, seed: int,
               iteration: int, stream: str) -> Batch:
    """Deterministic batch: composition and augmentations are pure functions
    of (seed, stream, iteration)."""
    rng = np.random.default_rng(derive_seed(seed, "batch", stream, iteration))
    idx = rng.choice(len(ids), size=batch_size, replace=batch_size > len(ids))
    picked = [augment(samples_by_id[ids[int(i)]], aug_cfg, rng) for i in idx]
    return collate(picked)


def build_datasets(cfg: RunConfig) -> tuple:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train = build_synthetic_dataset(ds.num_train, ds.image_size, ds.num_classes,
                                        derive_seed(cfg.seed, "data"), prefix="train")
        val = build_synthetic_dataset(ds.num_val, ds.image_size, ds.num_classes,
                                      derive_seed(cfg.seed, "data"), prefix="val")
        return train, val
    train = load_dataset(ds.train_root, num_classes=ds.num_classes)
    val = load_dataset(ds.val_root, num_classes=ds.num_classes) if ds.val_root else []
    return train, val


def split_by_partition(train_samples, cfg: RunConfig) -> tuple:
    """(labeled ids, unlabeled ids, partition or None). No partition: all labeled."""
    ids = [s.id for s in train_samples]
    if cfg.partition is None:
        return ids, [], None
    partition = make_partition(ids, cfg.partition.ratio, cfg.partition_seed())
    return list(partition.labeled_ids), list(partition.unlabeled_ids), partition


def run_training(cfg: RunConfig, resume=None, quiet: bool = False) -> dict:
    """Full training run: data, loop, logs, checkpoints, final evaluation."""
    cfg.validate()
    out = resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    train_samples, val_samples = build_datasets(cfg)
    labeled_ids, unlabeled_ids, partition = split_by_partition(train_samples, cfg)
    if partition is not None:
        save_partition(partition, out / "partition.txt")
    by_id = {s.id: s for s in train_samples}

    tc = cfg.train
    disc_on = _region_machinery_on(tc)
    w = tc.loss_weights
    if disc_on and (w.lambda_region + w.lambda_feature) > 0 and not unlabeled_ids:
        raise ConfigurationError(
            "toggles enable region/feature losses but the partition leaves no "
            "unlabeled samples")

    state = build_state(cfg)
    mode = "w"
    if resume is not None:
        restore(resume, state)
        mode = "a"

    metrics_path = out / "metrics.jsonl"
    ckpt_dir = out / "checkpoints"
    eval_samples = val_samples if val_samples else train_samples

    def log(msg):
        if not quiet:
            print(msg, flush=True)

    log(f"training to {tc.max_iters} iterations "
        f"({len(labeled_ids)} labeled / {len(unlabeled_ids)} unlabeled)")

    with open(metrics_path, mode) as metrics:
        while state.iteration < tc.max_iters:
            k = min(tc.grad_accum_steps, tc.max_iters - state.iteration)
            start = state.iteration
            lab = [draw_batch(by_id, labeled_ids, tc.batch_size_labeled,
                              cfg.augmentation, cfg.seed, start + m, "labeled")
                   for m in range(k)]
            unl = None
            if unlabeled_ids and tc.batch_size_unlabeled > 0:
                unl = [draw_batch(by_id, unlabeled_ids, tc.batch_size_unlabeled,
                                  cfg.augmentation, cfg.seed, start + m, "unlabeled")
                       for m in range(k)]
            try:
                report, disc_losses = train_step_accumulated(
                    state, lab, unl, tc, tc.max_iters)
            except NumericsError:
                checkpoint(state, out / "crash.ckpt")
                raise
            record = report.to_record(
                state.iteration,
                event="train",
                seg_lr=lr_schedule(tc.seg_lr, start, tc.max_iters, tc.poly_power),
                **disc_losses)
            metrics.write(json.dumps(record) + "\n")

            if tc.checkpoint_every and state.iteration % tc.checkpoint_every == 0 \
                    and state.iteration < tc.max_iters:
                checkpoint(state, ckpt_dir / f"iter_{state.iteration:06d}.ckpt")
            if tc.eval_every and state.iteration % tc.eval_every == 0 \
                    and state.iteration < tc.max_iters:
                result = evaluate_both(state.branch1, state.branch2, eval_samples,
                                       state.num_classes, cfg.ensemble)
                metrics.write(json.dumps({
                    "event": "eval", "iteration": state.iteration,
                    "val_miou_eni_on": result["eni_on"]["miou"],
                    "val_miou_eni_off": result["eni_off"]["miou"]}) + "\n")
            if state.iteration % max(1, tc.max_iters // 10) == 0:
                log(f"  iter {state.iteration:6d} total {report.total:.4f} "
                    f"sup {report.sup:.4f} cps {report.cps:.4f} "
                    f"region {report.ls_or_dr:.4f} fm {report.fm:.4f} "
                    f"sel {report.selected_fraction:.3f}")

        checkpoint(state, ckpt_dir / "last.ckpt")
        result = evaluate_both(state.branch1, state.branch2, eval_samples,
                               state.num_classes, cfg.ensemble)
        metrics.write(json.dumps({
            "event": "eval", "iteration": state.iteration,
            "val_miou_eni_on": result["eni_on"]["miou"],
            "val_miou_eni_off": result["eni_off"]["miou"]}) + "\n")

    chosen = "eni_on" if tc.toggles.eni else "eni_off"
    final = {
        "iteration": state.iteration,
        "config_hash": state.config_hash,
        "val_miou": result[chosen]["miou"],
        "eni": tc.toggles.eni,
        "eni_on": result["eni_on"],
        "eni_off": result["eni_off"],
    }
    (out / "eval_report.json").write_text(json.dumps(final, indent=2))
    log(f"final val mIoU ({chosen}): {final['val_miou']:.4f}")
    return final
