"""Small differentiable classifiers (linear / MLP) in numpy with manual backprop.

A model is an optional frozen input standardization z = (x - shift)/scale
followed by dense layers.  Hidden activations are ReLU (tanh for the
``-tanh`` variant); the last layer is linear and trained with softmax
cross-entropy.  All functions take one input vector or a batch of rows.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import RngStream

# arch id -> (hidden widths, activation)
ARCHS = {
    "linear": ((), None),
    "mlp-32": ((32,), "relu"),
    "mlp-64x64": ((64, 64), "relu"),
    "mlp-128": ((128,), "relu"),
    "mlp-64x64-tanh": ((64, 64), "tanh"),
}

RFM_MAGIC = b"RFM1"


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration, loss):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration


@dataclass
class Model:
    arch: str
    weights: list  # layer l maps (n, in_l) -> (n, out_l) via x @ W + b
    biases: list
    shift: np.ndarray
    scale: np.ndarray
    loss_curve: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; known: {sorted(ARCHS)}")
        hidden, _ = ARCHS[self.arch]
        if len(self.weights) != len(hidden) + 1 or len(self.biases) != len(self.weights):
            raise ValueError(f"{self.arch} needs {len(hidden) + 1} layers")
        prev = self.shift.shape[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i} dims do not chain")
            if i < len(hidden) and w.shape[1] != hidden[i]:
                raise ValueError(f"layer {i} width {w.shape[1]} != {hidden[i]}")
            prev = w.shape[1]
        if self.scale.shape != self.shift.shape or np.any(self.scale <= 0):
            raise ValueError("bad standardization")
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("non-finite weights")

    @property
    def activation(self):
        return ARCHS[self.arch][1]

    @property
    def in_dim(self):
        return self.shift.shape[0]

    @property
    def n_classes(self):
        return self.weights[-1].shape[1]

    def params(self):
        return self.weights + self.biases

    def copy(self):
        return Model(self.arch, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                     self.shift.copy(), self.scale.copy(), list(self.loss_curve))

    def to_bytes(self):
        name = self.arch.encode()
        dims = [self.in_dim] + [w.shape[1] for w in self.weights]
        parts = [RFM_MAGIC, struct.pack("<I", len(name)), name,
                 struct.pack(f"<I{len(dims)}I", len(dims), *dims),
                 self.shift.astype("<f8").tobytes(), self.scale.astype("<f8").tobytes()]
        for w, b in zip(self.weights, self.biases):
            parts += [w.astype("<f8").tobytes(), b.astype("<f8").tobytes()]
        return b"".join(parts)

    def content_hash(self):
        import hashlib
        return hashlib.sha256(self.to_bytes()).hexdigest()


def init_model(arch, in_dim, n_classes, rng, shift=None, scale=None):
    """Symmetric-uniform init scaled by fan-in; biases start at zero."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHS)}")
    hidden, act = ARCHS[arch]
    dims = [in_dim, *hidden, n_classes]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        gain = 6.0 if (i < len(hidden) and act == "relu") else 3.0
        bound = np.sqrt(gain / dims[i])
        weights.append(rng.uniform(-bound, bound, (dims[i], dims[i + 1])))
        biases.append(np.zeros(dims[i + 1]))
    shift = np.zeros(in_dim) if shift is None else np.asarray(shift, dtype=np.float64)
    scale = np.ones(in_dim) if scale is None else np.asarray(scale, dtype=np.float64)
    return Model(arch, weights, biases, shift, scale)


# ------------------------------------------------------------ forward pass


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z, h):
    if name == "relu":
        return (z > 0).astype(np.float64)
    return 1.0 - h * h


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.in_dim:
        raise ValueError(f"dimension mismatch: input has {x.shape[1]} features, model expects {model.in_dim}")
    return x, single


def _forward(model, x):
    """Return logits and the per-layer cache (inputs to each layer, pre-activations)."""
    h = (x - model.shift) / model.scale
    cache = []
    n_hidden = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        cache.append((h, z))
        h = _act(model.activation, z) if i < n_hidden else z
    return h, cache


def forward(model, x):
    x, single = _as_batch(model, x)
    logits, _ = _forward(model, x)
    return logits[0] if single else logits


def representation(model, x):
    """Input of the final linear layer; the raw input for the linear arch."""
    x, single = _as_batch(model, x)
    if len(model.weights) == 1:
        rep = x.copy()
    else:
        _, cache = _forward(model, x)
        rep = cache[-1][0]
    return rep[0] if single else rep


def predict(model, x):
    return np.argmax(forward(model, x), axis=-1)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Per-sample softmax cross-entropy."""
    logits = np.atleast_2d(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(z)), labels]


def margin(logits, labels):
    """Per-sample logit margin Z_t - max_{j != t} Z_j and the runner-up index."""
    logits = np.atleast_2d(logits)
    idx = np.arange(len(logits))
    other = logits.copy()
    other[idx, labels] = -np.inf
    j = np.argmax(other, axis=1)
    return logits[idx, labels] - other[idx, j], j


# ------------------------------------------------------------ backward pass


def _backward(model, cache, dlogits, want_params=True):
    """Backprop d(loss)/d(logits) -> (parameter grads, input grad)."""
    gw, gb = [None] * len(model.weights), [None] * len(model.biases)
    g = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        h_in, z = cache[i]
        if i < len(model.weights) - 1:
            g = g * _act_grad(model.activation, z, _act(model.activation, z))
        if want_params:
            gw[i] = h_in.T @ g
            gb[i] = g.sum(axis=0)
        g = g @ model.weights[i].T
    return gw, gb, g / model.scale


def _dlogits(logits, labels, loss):
    n = len(logits)
    idx = np.arange(n)
    if loss == "ce":
        p = softmax(logits)
        p[idx, labels] -= 1.0
        return cross_entropy(logits, labels), p
    if loss == "margin":
        val, j = margin(logits, labels)
        g = np.zeros_like(logits)
        g[idx, labels] = 1.0
        g[idx, j] = -1.0
        return val, g
    raise ValueError(f"unknown loss {loss!r}")


def loss_grad_input(model, x, labels, loss="ce"):
    """Per-sample loss values and their input gradients.

    loss "ce": cross-entropy of the given labels; "margin": Z_t - max_{j!=t} Z_j.
    """
    x, single = _as_batch(model, x)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x),))
    if np.any(labels < 0) or np.any(labels >= model.n_classes):
        raise ValueError("label out of range")
    logits, cache = _forward(model, x)
    val, dl = _dlogits(logits, labels, loss)
    _, _, gx = _backward(model, cache, dl, want_params=False)
    if single:
        return val[0], gx[0]
    return val, gx


def grad_input(model, x, target, loss="ce"):
    """Gradient wrt x of the loss evaluated at ``target``."""
    return loss_grad_input(model, x, target, loss)[1]


def loss_grad_params(model, x, labels, weight_decay=0.0):
    """Mean cross-entropy over the batch and its parameter gradients (weights, biases)."""
    x, _ = _as_batch(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(model, x)
    val, dl = _dlogits(logits, labels, "ce")
    n = len(x)
    gw, gb, _ = _backward(model, cache, dl / n)
    loss = float(val.mean())
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(w * w)) for w in model.weights)
        gw = [g + weight_decay * w for g, w in zip(gw, model.weights)]
    return loss, gw, gb


def representation_distance(model, x, rep_target):
    """||g(x) - g_target|| per row and its input gradient."""
    x, single = _as_batch(model, x)
    rep_target = np.atleast_2d(rep_target)
    if len(model.weights) == 1:
        diff = x - rep_target
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        g = diff / np.where(dist > 0, dist, 1.0)[:, None]
    else:
        _, cache = _forward(model, x)
        rep = cache[-1][0]
        diff = rep - rep_target
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        d_rep = diff / np.where(dist > 0, dist, 1.0)[:, None]
        # backprop through the hidden layers only (the last layer is excluded)
        g = d_rep
        for i in range(len(model.weights) - 2, -1, -1):
            h_in, z = cache[i]
            g = g * _act_grad(model.activation, z, _act(model.activation, z))
            g = g @ model.weights[i].T
        g = g / model.scale
    if single:
        return dist[0], g[0]
    return dist, g


def linear_direction(model):
    """Raw-input weight direction w1 - w0 of a binary linear model."""
    if model.arch != "linear" or model.n_classes != 2:
        raise ValueError("needs a binary linear model")
    w = model.weights[0]
    return (w[:, 1] - w[:, 0]) / model.scale


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.0
    momentum: float = 0.9
    attack: object = None  # AttackConfig => adversarial training
    standardize: bool = False
    warmup_epochs: int = 0  # adversarial budget ramps linearly over these epochs

    def validate(self, n):
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs and batch size must be positive")
        if self.batch_size > n:
            raise ValueError(f"batch size {self.batch_size} exceeds dataset size {n}")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("bad weight decay / momentum")
        return self


def fit_standardization(x, floor=1e-8):
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    return mean, np.where(std > floor, std, 1.0)


def train(ds, arch, cfg):
    """Minibatch SGD (momentum) on cross-entropy; adversarial when cfg.attack is set.

    Standard training evaluates the full training loss after each epoch; if it
    went up, the epoch is undone and the learning rate halved, so the recorded
    curve is nonincreasing.  Adversarial training records the mean
    adversarial batch loss.
    """
    from .attacks import pgd_l2  # attacks imports models

    cfg.validate(len(ds))
    x_all, y_all = ds.inputs, ds.labels
    shift = scale = None
    if cfg.standardize:
        shift, scale = fit_standardization(x_all)
    model = init_model(arch, ds.dim, ds.n_classes, RngStream(cfg.seed, 1), shift, scale)
    order_rng = RngStream(cfg.seed, 2)
    atk_rng = RngStream(cfg.seed, 3)
    vel = [np.zeros_like(p) for p in model.params()]
    lr = cfg.lr
    n = len(ds)
    it = 0
    prev = None
    curve = []
    if cfg.attack is None:
        prev = float(loss_grad_params(model, x_all, y_all, cfg.weight_decay)[0])
        curve.append(prev)
    for epoch in range(cfg.epochs):
        backup = model.copy() if cfg.attack is None else None
        atk = cfg.attack
        if atk is not None and epoch < cfg.warmup_epochs:
            frac = (epoch + 1) / (cfg.warmup_epochs + 1)
            atk = replace(atk, epsilon=atk.epsilon * frac, step_size=atk.step_size * frac)
        perm = order_rng.permutation(n)
        batch_losses = []
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.attack is not None:
                xb = pgd_l2(model, xb, yb, atk, atk_rng)
            loss, gw, gb = loss_grad_params(model, xb, yb, cfg.weight_decay)
            it += 1
            if not np.isfinite(loss):
                raise TrainingDivergence(it, loss)
            batch_losses.append(loss)
            for p, v, g in zip(model.params(), vel, gw + gb):
                v *= cfg.momentum
                v -= lr * g
                p += v
        if cfg.attack is None:
            cur = float(loss_grad_params(model, x_all, y_all, cfg.weight_decay)[0])
            if not np.isfinite(cur):
                raise TrainingDivergence(it, cur)
            if cur > prev:
                model = backup
                vel = [np.zeros_like(p) for p in model.params()]
                lr *= 0.5
                cur = prev
            prev = cur
            curve.append(cur)
        else:
            curve.append(float(np.mean(batch_losses)))
    model.loss_curve = curve
    return model


# -------------------------------------------------------------- checkpoints


def save_model(model, path):
    Path(path).write_bytes(model.to_bytes())


def load_model(path):
    buf = Path(path).read_bytes()
    if buf[:4] != RFM_MAGIC:
        raise ValueError("magic mismatch: not an RFM1 checkpoint")
    off = 4
    (nlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    arch = buf[off:off + nlen].decode()
    off += nlen
    (ndims,) = struct.unpack_from("<I", buf, off)
    off += 4
    dims = struct.unpack_from(f"<{ndims}I", buf, off)
    off += 4 * ndims

    def take(count, shape):
        nonlocal off
        if off + 8 * count > len(buf):
            raise ValueError("size mismatch: truncated checkpoint")
        a = np.frombuffer(buf, "<f8", count, off).astype(np.float64).reshape(shape)
        off += 8 * count
        return a

    shift = take(dims[0], (dims[0],))
    scale = take(dims[0], (dims[0],))
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(take(a * b, (a, b)))
        biases.append(take(b, (b,)))
    if off != len(buf):
        raise ValueError("size mismatch: trailing bytes in checkpoint")
    return Model(arch, weights, biases, shift, scale)
