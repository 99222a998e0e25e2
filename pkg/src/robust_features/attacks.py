"""l2 projected gradient descent attacks and robust-accuracy evaluation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .models import loss_grad_input, predict

log = logging.getLogger(__name__)

CSV_FIELDS = ("sample_index", "clean_label", "adv_label", "l2_dist", "success")


@dataclass(frozen=True)
class AttackConfig:
    """l2 PGD settings.  step_size defaults to epsilon/5 (7 steps by default).

    loss "ce" is cross-entropy; "margin" is the CW-style logit margin clamped
    at -kappa.  A step size of 0 gives the null attack.  With ``use_best`` the
    attack returns, per sample, the iterate with the best attack objective
    instead of the last one.
    """

    epsilon: float
    step_size: float | None = None
    steps: int = 7
    mode: str = "untargeted"
    loss: str = "ce"
    clip01: bool = False
    random_start: bool = False
    kappa: float = 0.0
    use_best: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 5.0)
        if self.step_size < 0:
            raise ValueError("step_size must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.mode not in ("untargeted", "targeted"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.loss not in ("ce", "margin"):
            raise ValueError(f"unknown loss {self.loss!r}")


def _descent_grad(model, x, labels, cfg):
    """Value and gradient of the objective PGD *minimizes*."""
    if cfg.loss == "ce":
        val, g = loss_grad_input(model, x, labels, "ce")
        return (val, g) if cfg.mode == "targeted" else (-val, -g)
    val, g = loss_grad_input(model, x, labels, "margin")
    if cfg.mode == "untargeted":
        # minimize max(Z_y - max_{j!=y} Z_j, -kappa)
        active = val > -cfg.kappa
        return np.maximum(val, -cfg.kappa), g * active[:, None]
    # minimize max(max_{j!=t} Z_j - Z_t, -kappa)
    active = -val > -cfg.kappa
    return np.maximum(-val, -cfg.kappa), -g * active[:, None]


def pgd_l2(model, x, labels, cfg, rng=None):
    """PGD inside the l2 ball of radius eps around x.

    ``labels`` are the true labels (untargeted) or targets (targeted).  Each
    step moves step_size along the normalized descent direction, projects on
    the ball, then clips to [0, 1] if cfg.clip01.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x0 = np.ascontiguousarray(np.atleast_2d(x))
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x0),))
    xa = x0.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        d = xa.shape[1]
        u = rng.unit_vectors(len(xa), d)
        r = cfg.epsilon * rng.uniform(size=len(xa)) ** (1.0 / d)
        xa += u * r[:, None]
        if cfg.clip01:
            np.clip(xa, 0.0, 1.0, out=xa)
    zero_rows = 0
    best_x, best = None, None
    for _ in range(cfg.steps):
        obj, g = _descent_grad(model, xa, labels, cfg)
        if cfg.use_best:
            best_x, best = _keep_best(xa, obj, best_x, best)
        zero = kernels.pgd_step(xa, x0, np.ascontiguousarray(g), cfg.step_size, cfg.epsilon, -1.0, cfg.clip01)
        zero_rows += int(np.count_nonzero(zero))
    if zero_rows:
        log.debug("pgd: %d zero-gradient row-steps kept in place", zero_rows)
    if cfg.use_best:
        obj, _ = _descent_grad(model, xa, labels, cfg)
        xa, _ = _keep_best(xa, obj, best_x, best)
    return xa[0] if single else xa


def _keep_best(x, obj, best_x, best):
    if best is None:
        return x.copy(), obj.copy()
    better = obj < best
    best_x[better] = x[better]
    best[better] = obj[better]
    return best_x, best


def _chunks(n, size=2048):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def attack_dataset(model, ds, cfg, targets=None, rng=None):
    """Adversarial versions of every input (targets required for targeted mode)."""
    if cfg.mode == "targeted" and targets is None:
        raise ValueError("targeted attack needs targets")
    lab = ds.labels if cfg.mode == "untargeted" else np.asarray(targets)
    out = np.empty_like(ds.inputs)
    for sl in _chunks(len(ds)):
        out[sl] = pgd_l2(model, ds.inputs[sl], lab[sl], cfg, rng)
    return out


def robust_accuracy(model, ds, cfg, rng=None):
    """Fraction of samples still classified correctly after the untargeted attack."""
    if cfg.mode != "untargeted":
        cfg = replace(cfg, mode="untargeted")
    x_adv = attack_dataset(model, ds, cfg, rng=rng)
    return float(np.mean(predict(model, x_adv) == ds.labels))


def accuracy_vs_steps(model, ds, cfg, step_grid, rng=None):
    """Robust accuracy for each step count in an ascending grid."""
    grid = list(step_grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("step_grid must be ascending")
    return [(k, robust_accuracy(model, ds, replace(cfg, steps=int(k)), rng)) for k in grid]


def attack_rows(model, ds, cfg, targets=None, rng=None):
    """Per-sample attack records (CSV schema: sample_index, clean_label, adv_label, l2_dist, success)."""
    x_adv = attack_dataset(model, ds, cfg, targets, rng)
    adv = predict(model, x_adv)
    dist = np.linalg.norm(x_adv - ds.inputs, axis=1)
    if cfg.mode == "targeted":
        success = adv == np.asarray(targets)
    else:
        success = adv != ds.labels
    return [
        {"sample_index": i, "clean_label": int(ds.labels[i]), "adv_label": int(adv[i]),
         "l2_dist": repr(float(dist[i])), "success": int(success[i])}
        for i in range(len(ds))
    ]


def write_attack_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
