"""Independent reference implementations used to check the package.

Everything here is deliberately written as plain loops over numpy arrays,
sharing no code with the implementations under test.
"""
import numpy as np
import torch

IGNORE = 255


def fd_gradient(fn, tensor: torch.Tensor, step: float = 1e-3) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. one tensor."""
    base = tensor.detach().clone()
    grad = torch.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        f_plus = float(fn(base))
        flat[i] = orig - step
        f_minus = float(fn(base))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * step)
    return grad


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """max over elements of |a-n| / max(|a|, |n|); exact zero pairs score 0."""
    a = analytic.detach().reshape(-1)
    n = numeric.detach().reshape(-1)
    err = 0.0
    for x, y in zip(a.tolist(), n.tolist()):
        denom = max(abs(x), abs(y))
        if denom < 1e-7:
            continue
        err = max(err, abs(x - y) / denom)
    return err


def masked_ce_oracle(logits: np.ndarray, target: np.ndarray,
                     weight: np.ndarray) -> float:
    """Loop-based weighted cross entropy averaged over selected pixels."""
    B, C, H, W = logits.shape
    total, count = 0.0, 0
    for b in range(B):
        for i in range(H):
            for j in range(W):
                t = int(target[b, i, j])
                w = float(weight[b, i, j])
                if t == IGNORE or w <= 0:
                    continue
                z = logits[b, :, i, j].astype(np.float64)
                z = z - z.max()
                log_probs = z - np.log(np.exp(z).sum())
                total += w * (-log_probs[t])
                count += 1
    return total / count if count else 0.0


def miou_set_oracle(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Per-class pixel-set intersection over union, ignoring IGNORE pixels."""
    pred, gt = pred.reshape(-1), gt.reshape(-1)
    keep = gt != IGNORE
    ious = []
    for c in range(num_classes):
        pred_c = {i for i in np.flatnonzero(keep & (pred == c))}
        gt_c = {i for i in np.flatnonzero(keep & (gt == c))}
        union = pred_c | gt_c
        if not union:
            continue
        ious.append(len(pred_c & gt_c) / len(union))
    if not ious:
        raise ValueError("no class has nonzero union")
    return float(np.mean(ious))
