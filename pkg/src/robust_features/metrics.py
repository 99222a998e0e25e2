"""Feature usefulness, accuracy under label maps, and transferability."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .attacks import AttackConfig, attack_dataset
from .models import predict
from .numerics import finite_diff_grad


def halfwidth(p, n, z=1.96):
    """Normal-approximation 95% half-width of a proportion."""
    if n <= 0:
        return float("nan")
    return float(z * np.sqrt(max(p * (1.0 - p), 0.0) / n))


class FeatureFn:
    """Scalar feature x -> f(x), standardized to mean 0 / variance 1 on a reference set.

    ``grad`` (optional) is the raw evaluator's input gradient; without it
    finite differences are used.
    """

    def __init__(self, evaluator, grad=None, mean=0.0, std=1.0):
        self.evaluator = evaluator
        self.grad = grad
        self.mean = float(mean)
        self.std = float(std)

    def fit(self, ds):
        v = self._raw(ds.inputs)
        std = v.std()
        if not std > 0:
            raise ValueError("feature is constant on the reference set")
        self.mean, self.std = float(v.mean()), float(std)
        return self

    def _raw(self, x):
        x = np.atleast_2d(x)
        return np.array([self.evaluator(r) for r in x], dtype=np.float64)

    def __call__(self, x):
        out = (self._raw(x) - self.mean) / self.std
        return out[0] if np.asarray(x).ndim == 1 else out

    def gradient(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.grad is not None:
            g = np.atleast_2d(np.array([self.grad(r) for r in x], dtype=np.float64))
        else:
            g = np.stack([finite_diff_grad(self.evaluator, r) for r in x])
        return g / self.std


class LinearFeature(FeatureFn):
    """Vectorized f(x) = w.x + b."""

    def __init__(self, w, b=0.0, **kw):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = float(b)
        super().__init__(None, None, **kw)

    def _raw(self, x):
        return np.atleast_2d(x) @ self.w + self.b

    def gradient(self, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.w / self.std, x.shape).copy()


def _signed(ds, cls=None):
    if cls is None:
        if ds.n_classes != 2:
            raise ValueError("binary labels required (pass cls for one-vs-rest)")
        return 2.0 * ds.labels - 1.0
    return np.where(ds.labels == cls, 1.0, -1.0)


def usefulness_rho(f, ds, cls=None):
    """E[y f(x)] for binary tasks; with ``cls``, one-vs-rest for that class."""
    return float(np.mean(_signed(ds, cls) * f(ds.inputs)))


def usefulness_per_class(f, ds):
    return [usefulness_rho(f, ds, c) for c in range(ds.n_classes)]


def robust_usefulness_gamma(f, ds, delta, cls=None):
    """E[min_{||d|| <= eps} y f(x + d)] with the inner minimum found by PGD.

    PGD only finds an upper bound of the true infimum, so the estimate can
    overstate robust usefulness, never understate it.
    """
    if delta.mode != "untargeted":
        raise ValueError("gamma needs an untargeted perturbation set")
    y = _signed(ds, cls)
    x0 = ds.inputs
    x = x0.copy()
    for _ in range(delta.steps):
        g = y[:, None] * f.gradient(x)
        gn = np.linalg.norm(g, axis=1)
        move = gn > 0
        x[move] -= delta.step_size * g[move] / gn[move, None]
        diff = x - x0
        dn = np.linalg.norm(diff, axis=1)
        out = dn > delta.epsilon
        x[out] = x0[out] + diff[out] * (delta.epsilon / dn[out])[:, None]
        if delta.clip01:
            np.clip(x, 0.0, 1.0, out=x)
    return float(np.mean(y * f(x)))


LABEL_MAPS = ("identity", "plus-one-mod-C")


def eval_accuracy(model, ds, label_map="identity"):
    if label_map == "identity":
        truth = ds.labels
    elif label_map == "plus-one-mod-C":
        truth = (ds.labels + 1) % ds.n_classes
    else:
        raise ValueError(f"unknown label map {label_map!r}")
    return float(np.mean(predict(model, ds.inputs) == truth))


@dataclass
class TransferReport:
    source: str
    targeted: bool
    n: int
    n_source_success: int
    entries: list = field(default_factory=list)

    def rates(self):
        return [e["transfer_rate"] for e in self.entries]

    def accuracies(self):
        return [e["test_accuracy"] for e in self.entries]

    def spearman(self):
        """Rank correlation between per-arch test accuracy and untargeted transfer rate."""
        a, r = np.asarray(self.accuracies()), np.asarray(self.rates())
        if np.ptp(a) == 0 or np.ptp(r) == 0:
            return float("nan")
        return float(spearmanr(a, r).statistic)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def transfer_rate(source, targets, ds, cfg, targeted=False, det_models=None, eval_ds=None, names=None, rng=None):
    """Transfer of source-crafted adversarial examples to each target model.

    Untargeted rate: among samples the source misclassifies after the attack,
    the fraction the target also misclassifies.  With ``targeted`` the
    targeted success rate (target predicts t = (y + 1) mod C) is added.
    ``test_accuracy`` of an entry is the accuracy on ``eval_ds`` (default
    ``ds``) of the matching model in ``det_models`` -- the same architecture
    trained on a deterministic non-robust dataset -- or of the target itself
    when ``det_models`` is None.
    """
    eval_ds = ds if eval_ds is None else eval_ds
    names = names or [t.arch for t in targets]
    if det_models is not None and len(det_models) != len(targets):
        raise ValueError("det_models must pair with targets")
    ucfg = AttackConfig(**{**asdict(cfg), "mode": "untargeted"})
    x_adv = attack_dataset(source, ds, ucfg, rng=rng)
    src_ok = predict(source, x_adv) != ds.labels
    denom = int(src_ok.sum())
    if targeted:
        t = (ds.labels + 1) % ds.n_classes
        tcfg = AttackConfig(**{**asdict(cfg), "mode": "targeted"})
        x_tgt = attack_dataset(source, ds, tcfg, t, rng)
    rep = TransferReport(source.arch, targeted, len(ds), denom)
    for i, (name, model) in enumerate(zip(names, targets)):
        pred = predict(model, x_adv)
        rate = float(np.mean(pred[src_ok] != ds.labels[src_ok])) if denom else float("nan")
        acc_model = model if det_models is None else det_models[i]
        acc = eval_accuracy(acc_model, eval_ds)
        entry = {
            "arch": name,
            "test_accuracy": acc,
            "test_accuracy_halfwidth": halfwidth(acc, len(eval_ds)),
            "transfer_rate": rate,
            "transfer_rate_halfwidth": halfwidth(rate, denom),
            "targeted_success_rate": None,
        }
        if targeted:
            ts = float(np.mean(predict(model, x_tgt) == t))
            entry["targeted_success_rate"] = ts
            entry["targeted_success_rate_halfwidth"] = halfwidth(ts, len(ds))
        rep.entries.append(entry)
    return rep


METRIC_FIELDS = ("metric", "value", "stderr", "config_hash")


def write_metrics_csv(rows, path):
    """Rows are dicts with metric, value, stderr and config_hash."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
