"""Maximum-likelihood classification between two Gaussians, standard and robust.

Data model: y uniform on {-1, +1}, x ~ N(y * mu_star, Sigma_star) with a
diagonal covariance.  Folding the samples by y reduces learning to fitting a
single Gaussian; the robust variant lets an l2 adversary move each sample
before the likelihood is evaluated.

Conventions
-----------
* Covariances are diagonals (1-D arrays).
* The adversary budget is the expected *squared* norm, E||M v||^2 = eps^2,
  so lambda solves sum_i s_i / (lambda*sigma_i - 1)^2 = eps^2.
* Natural parameters: T = Sigma^{-1}, m = Sigma^{-1} mu.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .numerics import RngStream, as_diag, as_vec, sample_gaussian

LOG_2PI = np.log(2 * np.pi)


class SolverError(RuntimeError):
    """Raised when lambda bisection or the robust fit fails to converge."""

    def __init__(self, msg, **info):
        super().__init__(msg)
        self.info = info


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = as_vec(self.mu, "mu")
        sigma = as_diag(self.sigma)
        if mu.shape != sigma.shape:
            raise ValueError(f"dimension mismatch: mu {mu.shape} vs sigma {sigma.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def d(self):
        return self.mu.size

    def natural(self):
        return NaturalParams(1.0 / self.sigma, self.mu / self.sigma)


@dataclass(frozen=True)
class NaturalParams:
    t: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        t = as_diag(self.t, "t")
        m = as_vec(self.m, "m")
        if t.shape != m.shape:
            raise ValueError("dimension mismatch between t and m")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "m", m)

    def gaussian(self):
        return GaussianParams(self.m / self.t, 1.0 / self.t)


@dataclass(frozen=True)
class LagrangianConfig:
    """Penalty weight C of the penalized adversary max ell(x+delta) - C/2 ||delta||^2."""

    c: float

    def check(self, sigma_star):
        sigma_star = as_diag(sigma_star, "sigma_star")
        if not self.c >= 1.0 / sigma_star.min():
            raise ValueError(
                f"penalty c={self.c} below 1/sigma_min={1.0 / sigma_star.min()}: adversary problem not concave"
            )
        return self


@dataclass
class RobustFitOptions:
    """Options for :func:`adversarial_mle_fit`.

    method "bfgs" (default) runs quasi-Newton descent with Armijo backtracking;
    "gd" runs plain gradient descent with the given step, halved whenever the
    objective would increase.  mode "sampled" replaces the population moments
    by those of ``n_samples`` draws.
    """

    step: float = 1e-2
    max_iter: int = 100_000
    tol: float = 1e-8
    method: str = "bfgs"
    mode: str = "population"
    n_samples: int = 10_000
    seed: int = 0


@dataclass
class RobustFitResult:
    params: GaussianParams
    lam: float
    m_star: np.ndarray
    trace_residual: float
    iterations: int
    grad_norm: float = 0.0
    history: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------- likelihood


def nll(params, x):
    """Gaussian negative log-likelihood; x may be one vector or rows of a batch."""
    v = np.asarray(x, dtype=np.float64) - params.mu
    if v.shape[-1] != params.d:
        raise ValueError(f"dimension mismatch: x has {v.shape[-1]} coords, params {params.d}")
    quad = 0.5 * np.sum(v * v / params.sigma, axis=-1)
    return quad + 0.5 * np.sum(np.log(params.sigma)) + 0.5 * params.d * LOG_2PI


def nll_grad_x(params, x):
    return (np.asarray(x, dtype=np.float64) - params.mu) / params.sigma


def classify(params, x):
    """Likelihood-ratio label sign(x^T Sigma^{-1} mu), with ties going to +1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d:
        raise ValueError("dimension mismatch")
    score = x @ (params.mu / params.sigma)
    return np.where(score >= 0, 1, -1)


def mle_fit(x, y):
    """Fit (mu, Sigma) from labelled samples by folding: z = y * x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be in {-1, +1}")
    z = y[:, None] * x
    mu = z.mean(axis=0)
    var = z.var(axis=0)
    if np.any(var <= 0):
        raise ValueError("zero empirical variance in some coordinate")
    return GaussianParams(mu, var)


def mahalanobis(params, a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if diff.shape[-1] != params.d:
        raise ValueError("dimension mismatch")
    return np.sqrt(np.sum(diff * diff / params.sigma, axis=-1))


# ---------------------------------------------------------- adversaries


def optimal_delta(params, x, epsilon):
    """Worst-case perturbation on the eps-sphere: delta = (lambda Sigma - I)^{-1} v.

    lambda is found per sample by bisection on lambda > 1/sigma_min so that
    ||delta|| = eps.  Accepts a single vector or a batch of rows.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    v = np.atleast_2d(x - params.mu)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError(f"v = x - mu is zero for sample(s) {np.flatnonzero(norms == 0).tolist()}: no ascent direction")
    sig = params.sigma
    lam, status = kernels.secular_bisect(v * v, sig, np.full(len(v), epsilon**2))
    if np.any(status == 2):
        raise SolverError("bisection bracket not found", rows=np.flatnonzero(status == 2).tolist())
    delta = np.empty_like(v)
    ok = status == 0
    delta[ok] = v[ok] / (lam[ok, None] * sig - 1.0)
    for k in np.flatnonzero(status == 1):
        delta[k] = _hard_case(v[k], sig, epsilon)
    # put the result exactly on the sphere (bisection leaves ~1e-15 relative slack)
    delta *= (epsilon / np.linalg.norm(delta, axis=1))[:, None]
    return delta[0] if single else delta


def _hard_case(v, sig, epsilon):
    # v has (numerically) no mass on the smallest-variance coordinates: the
    # multiplier sits at the pole and the leftover budget goes along them.
    low = sig == sig.min()
    delta = np.zeros_like(v)
    delta[~low] = v[~low] / (sig[~low] / sig.min() - 1.0)
    rest = max(epsilon**2 - np.sum(delta**2), 0.0)
    i = np.flatnonzero(low)[0]
    delta[i] = np.sqrt(rest) * (1.0 if v[i] >= 0 else -1.0)
    return delta


def lagrangian_delta(params, x, cfg):
    """Maximizer of ell(x + delta) - (C/2)||delta||^2: delta = (C Sigma - I)^{-1} v."""
    denom = cfg.c * params.sigma - 1.0
    if np.any(denom == 0):
        raise ValueError("C * sigma_i = 1: singular penalty")
    return (np.asarray(x, dtype=np.float64) - params.mu) / denom


def vulnerability_gap(sigma_star, c):
    """Closed-form excess adversarial loss of the standard MLE, sum (1 + 1/(c s - 1))^2 - d.

    Stated in deviance units (twice the NLL), the scale in which the
    quadratic form (v + delta)^T Sigma^{-1} (v + delta) appears.
    """
    s = as_diag(sigma_star, "sigma_star")
    denom = c * s - 1.0
    if np.any(denom == 0):
        raise ValueError("C * sigma_i = 1: singular penalty")
    return float(np.sum((1.0 + 1.0 / denom) ** 2) - s.size)


def vulnerability_gap_mc(mu_star, sigma_star, c, n, rng):
    """Monte-Carlo estimate of the same gap: 2 * mean[nll(x + delta) - nll(x)].

    Returns (estimate, standard error).
    """
    params = GaussianParams(mu_star, sigma_star)
    cfg = LagrangianConfig(c).check(params.sigma)
    x = sample_gaussian(rng, params.mu, params.sigma, n)
    diff = 2.0 * (nll(params, x + lagrangian_delta(params, x, cfg)) - nll(params, x))
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))


# ------------------------------------------------------ lambda and Sigma_r


def solve_lambda(sigma, sigma_star, epsilon):
    """Unique lambda > 1/sigma_min with tr(Sigma_star M^2) = eps^2, M = (lambda Sigma - I)^{-1}."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    sigma = as_diag(sigma)
    s = as_diag(sigma_star, "sigma_star", positive=False)
    if s.shape != sigma.shape:
        raise ValueError("dimension mismatch")
    lam, status = kernels.secular_bisect(s[None, :], sigma, np.array([epsilon**2]))
    if status[0] == 2:
        raise SolverError("lambda bracket not found", sigma=sigma.tolist(), epsilon=epsilon)
    return float(lam[0])


def adversary_matrix(sigma, lam):
    """Diagonal of M = (lambda Sigma - I)^{-1}."""
    return 1.0 / (lam * np.asarray(sigma) - 1.0)


def trace_residual(sigma, sigma_star, lam, epsilon):
    m = adversary_matrix(sigma, lam)
    return float(abs(np.sum(sigma_star * m * m) - epsilon**2))


def robust_cov_closed_form(sigma_star, lam):
    """Sigma = I/lambda + Sigma_star/2 + sqrt(Sigma_star/lambda + Sigma_star^2/4)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    s = as_diag(sigma_star, "sigma_star")
    return 1.0 / lam + 0.5 * s + np.sqrt(s / lam + 0.25 * s * s)


def fixed_point_residual(sigma, sigma_star, lam):
    """Elementwise relative residual of Sigma_star^{-1} = Sigma^{-1} (M + I)^2."""
    sigma = np.asarray(sigma, dtype=np.float64)
    m = adversary_matrix(sigma, lam)
    return np.abs(1.0 - sigma_star * (1.0 + m) ** 2 / sigma)


def lambda_bounds(sigma_star, sigma, epsilon):
    """Explicit sandwich for lambda in the eps^2 budget convention."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    s_star = as_diag(sigma_star, "sigma_star")
    sigma = as_diag(sigma)
    d = s_star.size
    b = epsilon**2
    lower = d / sigma.sum() * (1.0 + np.sqrt(d * s_star.min() / b))
    upper = (np.sqrt(np.linalg.norm(s_star) * d / b) + 1.0) / sigma.min()
    return float(lower), float(upper)


def robust_fixed_point(sigma_star, epsilon):
    """Robust covariance via a 1-D root in lambda along the closed-form family.

    Independent of the iterative fit: find lambda with
    tr(Sigma_star M(lambda)^2) = eps^2 where Sigma = closed_form(Sigma_star, lambda).
    Returns (lambda, Sigma_r).
    """
    s = as_diag(sigma_star, "sigma_star")
    b = epsilon**2

    def resid(lam):
        m = adversary_matrix(robust_cov_closed_form(s, lam), lam)
        return np.sum(s * m * m) - b

    hi = 1.0
    while resid(hi) > 0:
        hi *= 2.0
    lo = hi / 2.0
    while resid(lo) < 0:
        lo /= 2.0
        if lo < 1e-300:
            raise SolverError("no bracket for the closed-form lambda")
    lam = brentq(resid, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)
    return lam, robust_cov_closed_form(s, lam)


# ------------------------------------------------------- robust ML fit


def _moments(t, m, mu_star, sigma_star):
    mu = m / t
    return mu, sigma_star + (mu_star - mu) ** 2


def robust_objective(t, m, mu_star, sigma_star, epsilon):
    """Adversarial expected NLL in natural parameters and its exact gradient.

    The adversary picks a diagonal M with E||M v||^2 = eps^2 for v = x - mu,
    so the second moment s = Sigma_star + (mu_star - mu)^2 sets its budget.
    By the envelope theorem the gradient is that of the Lagrangian at the
    optimal M; at mu = mu_star it reduces to [A Sigma_star/2 - T^{-1}/2; 0]
    with A = (I + M)^2.

    Returns (value, grad_t, grad_m, lambda).  Constants are dropped.
    """
    mu, s = _moments(t, m, mu_star, sigma_star)
    lam = solve_lambda(1.0 / t, s, epsilon)
    M = 1.0 / (lam / t - 1.0)
    a = (1.0 + M) ** 2
    value = 0.5 * np.sum(a * t * s) - 0.5 * np.sum(np.log(t))
    # d value / d s = lam * M / 2 (Lagrangian derivative at the optimum)
    ds = 0.5 * lam * M
    dmu = ds * (-2.0) * (mu_star - mu)
    g_t = 0.5 * a * s - 0.5 / t - dmu * mu / t
    g_m = dmu / t
    return value, g_t, g_m, lam


def natural_gradient(t, m, mu_star, sigma_star, epsilon):
    _, g_t, g_m, _ = robust_objective(t, m, mu_star, sigma_star, epsilon)
    return np.concatenate([g_t, g_m])


def adversarial_mle_fit(mu_star, sigma_star, epsilon, opts=None):
    """Robust maximum-likelihood estimate under an l2 adversary of budget eps.

    Descends the adversarial objective in natural parameters (T, m) starting
    from the standard MLE; each evaluation solves for the adversary's lambda.
    """
    opts = opts or RobustFitOptions()
    mu_star = as_vec(mu_star, "mu_star")
    sigma_star = as_diag(sigma_star, "sigma_star")
    if mu_star.shape != sigma_star.shape:
        raise ValueError("dimension mismatch")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if opts.mode == "sampled":
        rng = RngStream(opts.seed, 0)
        z = sample_gaussian(rng, mu_star, sigma_star, opts.n_samples)
        mu_star, sigma_star = z.mean(axis=0), z.var(axis=0)
    elif opts.mode != "population":
        raise ValueError(f"unknown mode {opts.mode!r}")
    if epsilon == 0:
        d = mu_star.size
        return RobustFitResult(GaussianParams(mu_star, sigma_star), np.inf, np.zeros(d), 0.0, 0)

    t = 1.0 / sigma_star
    m = mu_star / sigma_star
    if opts.method == "bfgs":
        t, m, lam, its, gn, hist = _bfgs(t, m, mu_star, sigma_star, epsilon, opts)
    elif opts.method == "gd":
        t, m, lam, its, gn, hist = _gd(t, m, mu_star, sigma_star, epsilon, opts)
    else:
        raise ValueError(f"unknown method {opts.method!r}")
    params = NaturalParams(t, m).gaussian()
    lam = solve_lambda(params.sigma, sigma_star, epsilon)
    return RobustFitResult(
        params=params,
        lam=lam,
        m_star=adversary_matrix(params.sigma, lam),
        trace_residual=trace_residual(params.sigma, sigma_star, lam, epsilon),
        iterations=its,
        grad_norm=gn,
        history=hist,
    )


def _evaluate(t, m, mu_star, sigma_star, epsilon):
    try:
        return robust_objective(t, m, mu_star, sigma_star, epsilon)
    except SolverError as exc:
        raise SolverError("lambda solve failed inside robust fit", **exc.info) from exc


# below this gradient norm a stalled line search is accepted as converged
_STALL_OK = 1e-6


def _bfgs(t, m, mu_star, sigma_star, epsilon, opts):
    d = t.size
    f, g_t, g_m, lam = _evaluate(t, m, mu_star, sigma_star, epsilon)
    g = np.concatenate([g_t, g_m])

    def h0(t, lam):
        M = 1.0 / (lam / t - 1.0)
        return np.diag(np.concatenate([2.0 * t * t, t / (1.0 + M)]))

    H = h0(t, lam)
    hist = [f]
    for k in range(opts.max_iter):
        gn = float(np.linalg.norm(g))
        if gn < opts.tol:
            return t, m, lam, k, gn, hist
        p = -H @ g
        if p @ g >= 0:
            H = h0(t, lam)
            p = -H @ g
        step = 1.0
        while True:
            tn = t + step * p[:d]
            mn = m + step * p[d:]
            if np.all(tn > 0):
                fn, gt_n, gm_n, lam_n = _evaluate(tn, mn, mu_star, sigma_star, epsilon)
                if fn <= f + 1e-4 * step * (p @ g):
                    break
            step *= 0.5
            if step < 1e-20:
                if gn < _STALL_OK:
                    return t, m, lam, k, gn, hist
                raise SolverError("line search stalled", iteration=k, grad_norm=gn)
        gnew = np.concatenate([gt_n, gm_n])
        sv = np.concatenate([tn - t, mn - m])
        yv = gnew - g
        sy = sv @ yv
        if sy > 1e-300:
            rho = 1.0 / sy
            Hy = H @ yv
            H = H - rho * (np.outer(sv, Hy) + np.outer(Hy, sv)) + (rho * rho * (yv @ Hy) + rho) * np.outer(sv, sv)
        t, m, f, g, lam = tn, mn, fn, gnew, lam_n
        hist.append(f)
    raise SolverError("robust fit did not converge", iterations=opts.max_iter, grad_norm=float(np.linalg.norm(g)))


def _gd(t, m, mu_star, sigma_star, epsilon, opts):
    d = t.size
    f, g_t, g_m, lam = _evaluate(t, m, mu_star, sigma_star, epsilon)
    step = opts.step
    hist = [f]
    for k in range(opts.max_iter):
        gn = float(np.sqrt(np.sum(g_t**2) + np.sum(g_m**2)))
        if gn < opts.tol:
            return t, m, lam, k, gn, hist
        while True:
            tn = t - step * g_t
            mn = m - step * g_m
            if np.all(tn > 0):
                fn, gt_n, gm_n, lam_n = _evaluate(tn, mn, mu_star, sigma_star, epsilon)
                if fn <= f:
                    break
            step *= 0.5
            if step < 1e-30:
                if gn < _STALL_OK:
                    return t, m, lam, k, gn, hist
                raise SolverError("step underflow", iteration=k, grad_norm=gn)
        t, m, f, g_t, g_m, lam = tn, mn, fn, gt_n, gm_n, lam_n
        hist.append(f)
    raise SolverError("robust fit did not converge", iterations=opts.max_iter, grad_norm=gn)


# ------------------------------------------------------------ alignment


def alignment_stats(sigma):
    """Condition number and worst-case cosine 2 sqrt(k)/(1 + k) for Sigma."""
    s = as_diag(sigma)
    kappa = float(s.max() / s.min())
    return kappa, float(2.0 * np.sqrt(kappa) / (1.0 + kappa))


def perturbation_norm_spread(sigma_star, epsilon, n, rng):
    """Relative spread std/mean of ||M v|| for v ~ N(0, Sigma_star) at the robust optimum.

    The adversary is only constrained in expectation; in high dimension the
    per-sample norm concentrates, which this diagnostic measures.
    """
    s = as_diag(sigma_star, "sigma_star")
    lam, sig_r = robust_fixed_point(s, epsilon)
    M = adversary_matrix(sig_r, lam)
    v = sample_gaussian(rng, np.zeros_like(s), s, n)
    norms = np.linalg.norm(v * M, axis=1)
    return float(norms.std() / norms.mean()), float(np.sqrt(np.mean(norms**2)))


def theory_record(mu_star, sigma_star, epsilon, c=None, n_mc=100_000, seed=0, opts=None):
    """Run the robust fit and the gap/alignment checks for one (Sigma_star, eps)."""
    mu_star = as_vec(mu_star, "mu_star")
    sigma_star = as_diag(sigma_star, "sigma_star")
    if c is None:
        c = 2.0 / sigma_star.min()
    fit = adversarial_mle_fit(mu_star, sigma_star, epsilon, opts)
    k0, _ = alignment_stats(sigma_star)
    k1, _ = alignment_stats(fit.params.sigma)
    rec = {
        "sigma_star": sigma_star.tolist(),
        "epsilon": float(epsilon),
        "lambda": None if not np.isfinite(fit.lam) else fit.lam,
        "sigma_r": fit.params.sigma.tolist(),
        "mu_r": fit.params.mu.tolist(),
        "kappa_before": k0,
        "kappa_after": k1,
        "gap_closed_form": vulnerability_gap(sigma_star, c),
        "c_penalty": float(c),
        "iterations": fit.iterations,
    }
    mc, se = vulnerability_gap_mc(mu_star, sigma_star, c, n_mc, RngStream(seed, 1))
    rec["gap_monte_carlo"] = mc
    rec["gap_monte_carlo_stderr"] = se
    res = {"mu_abs": float(np.max(np.abs(fit.params.mu - mu_star)))}
    if epsilon > 0:
        lo, hi = lambda_bounds(sigma_star, fit.params.sigma, epsilon)
        res.update(
            fixed_point=float(fixed_point_residual(fit.params.sigma, sigma_star, fit.lam).max()),
            trace=fit.trace_residual,
            closed_form=float(np.max(np.abs(fit.params.sigma / robust_cov_closed_form(sigma_star, fit.lam) - 1))),
            grad_norm=fit.grad_norm,
        )
        rec["lambda_bounds"] = [lo, hi]
    rec["residuals"] = res
    return rec
