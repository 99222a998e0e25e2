"""Derived datasets: robustified (representation inversion) and non-robust (relabelled adversarial)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .attacks import AttackConfig, pgd_l2
from .data import LabeledDataset
from .models import predict, representation, representation_distance
from .numerics import RngStream


@dataclass(frozen=True)
class DistillConfig:
    """Inversion settings.  Noise-seeded runs use ``noise_multiplier`` x steps."""

    steps: int = 1000
    step_size: float = 0.1
    seed_mode: str = "random-image"
    seed: int = 0
    noise_multiplier: int = 10

    def __post_init__(self):
        if self.steps < 1 or not self.step_size > 0:
            raise ValueError("steps must be >= 1 and step_size > 0")
        if self.seed_mode not in ("random-image", "noise"):
            raise ValueError(f"unknown seed_mode {self.seed_mode!r}")


RELABEL_MODES = ("random", "deterministic")


def relabel_targets(labels, n_classes, mode, rng):
    """Target classes: uniform over all classes, or the shift t = (y + 1) mod C."""
    labels = np.asarray(labels)
    if mode == "random":
        return rng.integers(0, n_classes, len(labels)).astype(np.int64)
    if mode == "deterministic":
        return (labels + 1) % n_classes
    raise ValueError(f"unknown relabel mode {mode!r}")


def invert_representation(model, x_target, x_init, cfg, clip01=False, steps=None):
    """Normalized gradient descent on ||g(x_r) - g(x_target)|| starting from x_init.

    Works on single vectors or row batches.  Returns the best iterate seen
    (the last one whenever the descent is monotone) and its objective.
    """
    x_target = np.asarray(x_target, dtype=np.float64)
    single = x_target.ndim == 1
    xt = np.atleast_2d(x_target)
    x = np.array(np.atleast_2d(x_init), dtype=np.float64)
    if x.shape != xt.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {xt.shape}")
    rep_t = np.atleast_2d(representation(model, xt))
    obj, g = representation_distance(model, x, rep_t)
    best_x, best = x.copy(), obj.copy()
    for _ in range(cfg.steps if steps is None else steps):
        gn = np.sqrt(np.sum(g * g, axis=1))
        move = gn > 0
        x[move] -= cfg.step_size * g[move] / gn[move, None]
        if clip01:
            np.clip(x, 0.0, 1.0, out=x)
        obj, g = representation_distance(model, x, rep_t)
        bad = ~np.isfinite(obj)
        if np.any(bad):
            raise FloatingPointError(f"non-finite objective for sample(s) {np.flatnonzero(bad).tolist()}")
        better = obj < best
        best[better] = obj[better]
        best_x[better] = x[better]
    if single:
        return best_x[0], float(best[0])
    return best_x, best


def _seed_inputs(ds, cfg):
    rng = RngStream(cfg.seed, 0)
    n, d = ds.inputs.shape
    if cfg.seed_mode == "random-image":
        # per-sample stream: the seed image never depends on the sample's label
        idx = np.array([rng.child(i).integers(0, n) for i in range(n)])
        return ds.inputs[idx].copy(), {"init_indices_sha": _sha(idx)}
    lo, hi = (0.0, 1.0) if ds.image_like else (ds.inputs.min(axis=0), ds.inputs.max(axis=0))
    x0 = np.stack([rng.child(i).uniform(size=d) for i in range(n)])
    return lo + (hi - lo) * x0, {"noise_range": "unit" if ds.image_like else "data-bounding-box"}


def _sha(a):
    import hashlib
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def build_robust_dataset(ds, model, cfg, batch=1024):
    """Rebuild every input from a label-independent seed by matching the model's representation."""
    x_init, extra = _seed_inputs(ds, cfg)
    steps = cfg.steps * (cfg.noise_multiplier if cfg.seed_mode == "noise" else 1)
    out = np.empty_like(ds.inputs)
    d0 = np.empty(len(ds))
    d1 = np.empty(len(ds))
    for s in range(0, len(ds), batch):
        sl = slice(s, min(len(ds), s + batch))
        rep_t = representation(model, ds.inputs[sl])
        d0[sl] = representation_distance(model, x_init[sl], rep_t)[0]
        try:
            out[sl], d1[sl] = invert_representation(model, ds.inputs[sl], x_init[sl], cfg, ds.image_like, steps)
        except FloatingPointError as exc:
            raise FloatingPointError(f"inversion failed in samples starting at index {s}: {exc}") from exc
    manifest = {
        "kind": "robustified",
        "source_dataset": ds.content_hash(),
        "source_model": model.content_hash(),
        "source_arch": model.arch,
        "config": asdict(cfg),
        "steps_run": steps,
        "mean_initial_distance": float(d0.mean()),
        "mean_final_distance": float(d1.mean()),
        **extra,
    }
    return LabeledDataset(out, ds.labels.copy(), ds.n_classes, manifest, ds.image_like)


def build_nonrobust_dataset(ds, model, atk, mode, rng):
    """Targeted adversarial inputs relabelled as their targets."""
    if not isinstance(atk, AttackConfig) or atk.mode != "targeted":
        raise ValueError("non-robust dataset construction needs a targeted attack")
    t = relabel_targets(ds.labels, ds.n_classes, mode, rng)
    x_adv = np.empty_like(ds.inputs)
    for s in range(0, len(ds), 2048):
        sl = slice(s, min(len(ds), s + 2048))
        x_adv[sl] = pgd_l2(model, ds.inputs[sl], t[sl], atk, rng)
    success = predict(model, x_adv) == t
    manifest = {
        "kind": f"non-robust-{mode}",
        "source_dataset": ds.content_hash(),
        "source_model": model.content_hash(),
        "source_arch": model.arch,
        "attack": asdict(atk),
        "success_fraction": float(success.mean()),
        "success_bitmap": np.packbits(success).tobytes().hex(),
    }
    return LabeledDataset(x_adv, t, ds.n_classes, manifest, ds.image_like)


def success_bitmap(ds):
    """Unpack the per-sample attack-success flags recorded in a manifest."""
    bits = np.unpackbits(np.frombuffer(bytes.fromhex(ds.manifest["success_bitmap"]), np.uint8))
    return bits[: len(ds)].astype(bool)
