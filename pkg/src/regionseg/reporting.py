"""Plot and image emission for completed runs: loss curves, mIoU summaries,
prediction grids, and debug dumps of filter masks and decision maps."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .common import IGNORE_LABEL, ConfigurationError
from .data import class_palette
from .region_weights import RegionCase

# rc_f rendering: white = approved by both, grays = approved by one,
# black = rejected by both
_CASE_GRAY = {
    int(RegionCase.BOTH): 255,
    int(RegionCase.ONLY_1): 170,
    int(RegionCase.ONLY_2): 85,
    int(RegionCase.NONE): 0,
}


def read_metrics(run_dir) -> list:
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise ConfigurationError(f"{run_dir} has no metrics.jsonl")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def label_to_rgb(label: np.ndarray, num_classes: int) -> np.ndarray:
    palette = (class_palette(num_classes) * 255).astype(np.uint8)
    out = np.zeros((*label.shape, 3), dtype=np.uint8)
    valid = label != IGNORE_LABEL
    out[valid] = palette[label[valid]]
    out[~valid] = (255, 255, 255)
    return out


def save_mask_png(mask: np.ndarray, path) -> None:
    """Boolean filter mask as a black/white PNG."""
    Image.fromarray((mask.astype(np.uint8) * 255), mode="L").save(path)


def save_label_png(label: np.ndarray, num_classes: int, path) -> None:
    Image.fromarray(label_to_rgb(label, num_classes)).save(path)


def save_decision_png(categories: np.ndarray, path) -> None:
    """Four-case combined decision map as a 4-gray PNG."""
    img = np.zeros(categories.shape, dtype=np.uint8)
    for case, gray in _CASE_GRAY.items():
        img[categories == case] = gray
    Image.fromarray(img, mode="L").save(path)


def plot_loss_curves(run_dirs, out_path) -> None:
    parts = ("total", "sup", "cps", "ls_or_dr", "fm")
    fig, axes = plt.subplots(1, len(parts), figsize=(4 * len(parts), 3.2), sharex=True)
    for run in run_dirs:
        records = [r for r in read_metrics(run) if r.get("event") == "train"]
        iters = [r["iteration"] for r in records]
        for ax, part in zip(axes, parts):
            ax.plot(iters, [r[part] for r in records], label=Path(run).name, lw=1.0)
    for ax, part in zip(axes, parts):
        ax.set_title(part)
        ax.set_xlabel("iteration")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_miou(run_dirs, out_path) -> None:
    """Final val mIoU against labeled ratio, one marker per run, plus any
    intermediate eval curves."""
    from .config import load_config  # local import to avoid cycles

    fig, (ax_ratio, ax_curve) = plt.subplots(1, 2, figsize=(9, 3.6))
    for run in run_dirs:
        run = Path(run)
        records = read_metrics(run)
        evals = [r for r in records if r.get("event") == "eval"]
        cfg = load_config(run / "config.yaml")
        ratio = float(cfg.partition.ratio) if cfg.partition else 1.0
        if evals:
            final = evals[-1]
            ax_ratio.scatter([ratio], [final["val_miou_eni_on"]], label=run.name)
            ax_curve.plot([e["iteration"] for e in evals],
                          [e["val_miou_eni_on"] for e in evals],
                          marker="o", ms=3, label=run.name)
    ax_ratio.set_xlabel("labeled ratio")
    ax_ratio.set_ylabel("val mIoU (ensembled)")
    ax_ratio.set_title("mIoU vs labeled ratio")
    ax_ratio.grid(alpha=0.3)
    ax_ratio.legend(fontsize=7)
    ax_curve.set_xlabel("iteration")
    ax_curve.set_title("val mIoU over training")
    ax_curve.grid(alpha=0.3)
    ax_curve.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def prediction_grid(run_dirs, out_path, num_samples: int = 4) -> None:
    """Side-by-side PNG: image | ground truth | one prediction column per run."""
    import torch

    from .config import load_config
    from .trainer import build_datasets, build_state, restore

    run_dirs = [Path(r) for r in run_dirs]
    cfg0 = load_config(run_dirs[0] / "config.yaml")
    _, val = build_datasets(cfg0)
    if not val:
        raise ConfigurationError("first run's dataset has no validation samples")
    samples = val[:num_samples]
    C = cfg0.dataset.num_classes

    columns = [np.stack([(s.image * 255).astype(np.uint8) for s in samples]),
               np.stack([label_to_rgb(s.label, C) for s in samples])]
    for run in run_dirs:
        cfg = load_config(run / "config.yaml")
        state = build_state(cfg)
        restore(run / "checkpoints" / "last.ckpt", state)
        images = torch.from_numpy(
            np.stack([s.image.transpose(2, 0, 1) for s in samples]))
        from .evaluation import ensemble_predict, predict_probs
        p1 = predict_probs(state.branch1, images)
        if cfg.train.toggles.eni:
            _, pred = ensemble_predict(p1, predict_probs(state.branch2, images),
                                       cfg.ensemble)
        else:
            pred = p1.argmax(dim=1)
        columns.append(np.stack([label_to_rgb(p, C) for p in pred.numpy()]))

    pad = 2
    h, w = samples[0].label.shape
    rows_px = len(samples) * (h + pad) - pad
    cols_px = len(columns) * (w + pad) - pad
    canvas = np.full((rows_px, cols_px, 3), 255, dtype=np.uint8)
    for ci, col in enumerate(columns):
        for ri in range(len(samples)):
            y, x = ri * (h + pad), ci * (w + pad)
            canvas[y:y + h, x:x + w] = col[ri]
    Image.fromarray(canvas).save(out_path)


def write_report(run_dirs, out_dir) -> list:
    """Emit the standard report files; returns the produced paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    loss_path = out_dir / "loss_curves.png"
    plot_loss_curves(run_dirs, loss_path)
    produced.append(loss_path)
    miou_path = out_dir / "miou.png"
    plot_miou(run_dirs, miou_path)
    produced.append(miou_path)
    grid_path = out_dir / "pred_grid.png"
    prediction_grid(run_dirs, grid_path)
    produced.append(grid_path)
    return produced
