"""Seeded random streams, finite differences and l2 projections.

Vectors are plain float64 numpy arrays; diagonal matrices are stored as
their diagonal (a 1-D array).
"""
from __future__ import annotations

import numpy as np

_U64 = (1 << 64) - 1


def as_vec(x, name="x"):
    """Return ``x`` as a contiguous float64 array, rejecting NaN/Inf."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def as_diag(s, name="sigma", positive=True):
    """Validate the diagonal of a diagonal matrix."""
    a = as_vec(s, name)
    if a.ndim != 1 or a.size < 1:
        raise ValueError(f"{name} must be a non-empty 1-D diagonal")
    if positive and np.any(a <= 0):
        raise ValueError(f"nonpositive variance in {name}")
    return a


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, so the draws of a stream do not depend on which other
    streams exist or in which order they are consumed.  ``child(i)`` gives an
    independent sub-stream, e.g. one per sample or per worker.
    """

    def __init__(self, seed=0, stream_id=0):
        self.seed = int(seed) & _U64
        self.stream_id = int(stream_id) & _U64
        key = self.seed | (self.stream_id << 64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, i):
        # hash (stream_id, i) into a fresh stream id; SeedSequence does the mixing
        ss = np.random.SeedSequence([self.stream_id, int(i)], spawn_key=(self.seed & 0xFFFFFFFF,))
        return RngStream(self.seed, int(ss.generate_state(2, np.uint64)[0]))

    def clone(self):
        """Copy including the current counter position."""
        other = RngStream(self.seed, self.stream_id)
        other.gen.bit_generator.state = self.gen.bit_generator.state
        return other

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def unit_vectors(self, n, d):
        """``n`` directions uniform on the unit sphere in R^d."""
        z = self.gen.standard_normal((n, d))
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def sample_gaussian(rng, mu, sigma, n=None):
    """Draw from N(mu, diag(sigma)); one vector, or an (n, d) array if ``n`` given."""
    mu = as_vec(mu, "mu")
    sigma = as_diag(sigma)
    if mu.shape != sigma.shape:
        raise ValueError(f"dimension mismatch: mu {mu.shape} vs sigma {sigma.shape}")
    shape = mu.shape if n is None else (n,) + mu.shape
    return mu + np.sqrt(sigma) * rng.normal(shape)


def finite_diff_grad(f, x, h=1e-5):
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.empty(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def l2_project(v, center, radius):
    """Project ``v`` onto the l2 ball around ``center``.

    Works row-wise on 2-D input (each row gets its own ball).
    """
    if np.any(np.asarray(radius) < 0):
        raise ValueError("radius must be nonnegative")
    v = np.asarray(v, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    diff = v - center
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    r = np.asarray(radius, dtype=np.float64)
    if r.ndim:
        r = r.reshape(norm.shape)
    outside = norm > r
    scale = np.where(outside, r / np.where(outside, norm, 1.0), 1.0)
    out = np.where(outside, center + diff * scale, v)
    # rounding in center + diff*scale can land a hair outside the ball;
    # shrink until the computed point is inside so projecting is idempotent
    shrink = 1.0
    while True:
        bad = np.linalg.norm(out - center, axis=-1, keepdims=True) > r
        if not np.any(bad):
            return out
        shrink *= 1.0 - 4.0 * np.finfo(float).eps
        out = np.where(bad, center + diff * (scale * shrink), out)
