"""Training losses: soft Dice plus top-k weighted cross-entropy.

Both losses are fused tape ops with analytic backward rules, taking the
per-voxel class probabilities (softmax output) as input. The combined
objective is alpha * dice + gamma * topk_ce with defaults (0.3, 0.7).
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, scale
from .errors import InvalidK, ShapeError

# Floor for probabilities inside log() so empty classes stay finite.
_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Coefficients and knobs of the combined segmentation loss."""

    alpha: float = 0.3
    gamma: float = 0.7
    class_weights: tuple = (0.05, 0.10, 0.99)
    topk_fraction: float = 0.10
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.topk_fraction <= 1.0:
            raise InvalidK(f"topk_fraction must lie in (0, 1], got {self.topk_fraction}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


def _check_probs_target(probs, target):
    if probs.data.ndim != 4:
        raise ShapeError(f"probs must be (C,D,H,W), got {probs.shape}")
    if probs.shape[1:] != target.shape:
        raise ShapeError(f"probs spatial {probs.shape[1:]} vs target {target.shape}")
    if target.size and (target.min() < 0 or target.max() >= probs.shape[0]):
        raise ShapeError(f"target labels outside 0..{probs.shape[0] - 1}")


def dice_loss(tape, probs, target, epsilon=1e-5):
    """1 minus the mean soft Dice over foreground classes.

    The mean runs over the foreground classes that actually occur in the
    target; when the target is pure background every foreground class
    contributes its smoothing term eps/eps = 1, so the loss is ~0 there.
    """
    target = np.asarray(target)
    _check_probs_target(probs, target)
    n_classes = probs.shape[0]
    present = [c for c in range(1, n_classes) if (target == c).any()]
    classes = present or list(range(1, n_classes))

    terms = {}
    sums = {}
    masks = {}
    for c in classes:
        y = target == c
        p = probs.data[c]
        inter = float(p[y].sum())
        denom = float(p.sum()) + float(y.sum()) + epsilon
        terms[c] = (2.0 * inter + epsilon) / denom
        sums[c] = denom
        masks[c] = y
    value = 1.0 - sum(terms.values()) / len(classes)

    track = tape is not None and probs.requires_grad
    out = Tensor(np.asarray(value), requires_grad=track)
    if track:
        def backward(g):
            gp = np.zeros_like(probs.data)
            coeff = float(g) / len(classes)
            for c in classes:
                # d term / d p_c[v] = (2*y[v]*denom - numer) / denom^2
                numer = terms[c] * sums[c]
                gp[c] = -coeff * (2.0 * masks[c] * sums[c] - numer) / sums[c] ** 2
            probs.accumulate_grad(gp)

        tape.record(out, backward)
    return out


def topk_weighted_ce(tape, probs, target, weights, k):
    """Mean of the largest ceil(k*N) per-voxel weighted CE losses.

    Per-voxel loss is weight * (-log p_target). Ties at the cut are
    broken by voxel index order; non-selected voxels get zero gradient.
    """
    if not 0.0 < k <= 1.0:
        raise InvalidK(f"k must lie in (0, 1], got {k}")
    target = np.asarray(target)
    _check_probs_target(probs, target)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != target.shape:
        raise ShapeError(f"weights shape {weights.shape} vs target {target.shape}")

    flat_t = target.reshape(-1)
    flat_w = weights.reshape(-1)
    n = flat_t.size
    p_true = probs.data.reshape(probs.shape[0], -1)[flat_t, np.arange(n)]
    p_safe = np.maximum(p_true, _LOG_FLOOR)
    losses = flat_w * -np.log(p_safe)

    m = int(np.ceil(k * n))
    order = np.argsort(-losses, kind="stable")  # descending, index-stable ties
    selected = order[:m]
    value = float(losses[selected].mean())

    track = tape is not None and probs.requires_grad
    out = Tensor(np.asarray(value), requires_grad=track)
    if track:
        def backward(g):
            # d(-log p)/dp = -1/p, so dL/dp = -w / (p * m) for selected voxels,
            # zero where the probability sat below the log floor (flat region).
            gflat = np.zeros(n, dtype=np.float64)
            gflat[selected] = float(g) * -flat_w[selected] / (p_safe[selected] * m)
            gflat[selected] *= p_true[selected] >= _LOG_FLOOR
            gp = np.zeros_like(probs.data).reshape(probs.shape[0], -1)
            gp[flat_t[selected], selected] = gflat[selected]
            probs.accumulate_grad(gp.reshape(probs.shape))

        tape.record(out, backward)
    return out


def voxel_weights(target, class_weights):
    """Per-voxel weight map: look up each voxel's class weight."""
    target = np.asarray(target)
    table = np.asarray(class_weights, dtype=np.float64)
    if target.size and target.max() >= table.size:
        raise ShapeError(f"target has classes beyond the {table.size} weights given")
    return table[target]


def combined_loss(tape, probs, target, weights, cfg: LossConfig):
    """alpha * dice_loss + gamma * topk_weighted_ce."""
    d = dice_loss(tape, probs, target, cfg.epsilon)
    ce = topk_weighted_ce(tape, probs, target, weights, cfg.topk_fraction)
    return add(tape, scale(tape, d, cfg.alpha), scale(tape, ce, cfg.gamma))
