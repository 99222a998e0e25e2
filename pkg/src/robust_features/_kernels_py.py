"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or ROBUST_FEATURES_PURE=1).
Both implementations must agree bit-for-bit on the bisection results and to
rounding on the PGD step.
"""
import numpy as np


def secular_bisect(s, sigma, budget, max_iter=400):
    """Solve sum_i s[k,i] / (lam*sigma_i - 1)**2 = budget[k] for each row k.

    Root is searched on lam > 1/min(sigma), where the left side decreases
    strictly from +inf (if s has mass on the smallest-variance coordinate)
    to 0.  Returns (lam, status) with status 0 = ok, 1 = hard case (the left
    side is already below budget at the pole; lam is the pole itself),
    2 = no upper bracket found.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    budget = np.broadcast_to(np.asarray(budget, dtype=np.float64), (s.shape[0],))
    n = s.shape[0]
    pole = 1.0 / sigma.min()
    lam = np.empty(n)
    status = np.zeros(n, dtype=np.int64)
    for k in range(n):
        lam[k], status[k] = _solve_one(s[k], sigma, budget[k], pole, max_iter)
    return lam, status


def _resid(lam, s, sigma, b):
    r = lam * sigma - 1.0
    # left-to-right accumulation, the same order as the compiled loop
    return np.cumsum(s / (r * r))[-1] - b


def _solve_one(s, sigma, b, pole, max_iter):
    lo = pole * (1.0 + 1e-12)
    if _resid(lo, s, sigma, b) <= 0.0:
        # check the limit at the pole: finite only if s vanishes there
        return pole, 1
    hi = 2.0 * lo
    for _ in range(2100):
        if _resid(hi, s, sigma, b) <= 0.0:
            break
        lo = hi
        hi *= 2.0
    else:
        return np.nan, 2
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _resid(mid, s, sigma, b) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), 0


def pgd_step(x, x0, g, step, eps, sign, clip01):
    """One normalized-gradient PGD step on every row, in place on ``x``.

    x <- x + sign*step*g/||g||, projected on the eps-ball around x0, then
    optionally clipped to [0, 1].  Rows with zero gradient are left alone.
    Returns a boolean mask of the zero-gradient rows.
    """
    gn = np.sqrt(np.sum(g * g, axis=1))
    zero = gn == 0.0
    scale = np.where(zero, 0.0, sign * step / np.where(zero, 1.0, gn))
    x += g * scale[:, None]
    diff = x - x0
    dn = np.sqrt(np.sum(diff * diff, axis=1))
    out = dn > eps
    if np.any(out):
        x[out] = x0[out] + diff[out] * (eps / dn[out])[:, None]
    if clip01:
        np.clip(x, 0.0, 1.0, out=x)
    return zero
