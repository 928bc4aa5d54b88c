"""One-dimensional Gaussian process regression with a Matern(5/2) kernel.

Observations carry individual noise variances ``noise_var / w_t``: a weight
below one makes a point noisier, which is how down-weighted auxiliary data
enter the fit. Hyperparameters come from a deterministic search (log grid
followed by coordinate refinement) over the log marginal likelihood; there is
no gradient-based optimisation, so fits are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from regret_audit.errors import InvalidHyper, SingularKernel

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2.0 * math.pi)
# relative to signal variance; the first rung (0) means "no jitter"
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)


@dataclass(frozen=True)
class KernelHyper:
    signal_var: float
    lengthscale: float
    noise_var: float

    def __post_init__(self):
        for name in ("signal_var", "lengthscale", "noise_var"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidHyper(f"{name} must be finite and > 0, got {v}")


def matern52(r, hyper: KernelHyper):
    """Matern(5/2) covariance at distance ``r`` (scalar or array)."""
    z = SQRT5 * np.abs(r) / hyper.lengthscale
    return hyper.signal_var * (1.0 + z + z * z / 3.0) * np.exp(-z)


def matern52_dr(r, hyper: KernelHyper):
    """Derivative of :func:`matern52` with respect to ``r >= 0``."""
    z = SQRT5 * np.abs(r) / hyper.lengthscale
    return -hyper.signal_var * (SQRT5 / hyper.lengthscale) * (z * (1.0 + z) / 3.0) * np.exp(-z)


class GpPosterior:
    """Posterior of a zero-mean (or constant-mean) GP given weighted data.

    Parameters
    ----------
    x, y : array_like
        Training inputs and targets.
    weights : array_like
        Positive observation weights; point ``t`` gets noise ``noise_var / w_t``.
    hyper : KernelHyper
    prior_mean : float
        Constant prior mean.
    """

    def __init__(self, x, y, weights, hyper: KernelHyper, prior_mean: float = 0.0):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.weights = np.asarray(weights, dtype=float)
        if not (self.x.shape == self.y.shape == self.weights.shape and self.x.ndim == 1):
            raise ValueError("x, y and weights must be 1-d arrays of equal length")
        if np.any(self.weights <= 0):
            raise InvalidHyper("observation weights must be > 0")
        self.hyper = hyper
        self.prior_mean = float(prior_mean)
        self.noise = hyper.noise_var / self.weights
        K = matern52(self.x[:, None] - self.x[None, :], hyper)
        K[np.diag_indices_from(K)] += self.noise
        self.chol, self.jitter = _cholesky_with_jitter(K, hyper.signal_var)
        self.alpha = cho_solve((self.chol, True), self.y - self.prior_mean)

    def log_marginal_likelihood(self) -> float:
        resid = self.y - self.prior_mean
        n = len(self.y)
        return float(-0.5 * resid @ self.alpha - np.log(np.diag(self.chol)).sum() - 0.5 * n * LOG_2PI)

    def mean(self, s):
        s = np.asarray(s, dtype=float)
        k = matern52(s[..., None] - self.x, self.hyper)
        return self.prior_mean + k @ self.alpha

    def mean_grad(self, s):
        s = np.asarray(s, dtype=float)
        d = s[..., None] - self.x
        return (matern52_dr(d, self.hyper) * np.sign(d)) @ self.alpha

    def var(self, s):
        """Latent-function posterior variance (no observation noise), kept > 0."""
        s = np.asarray(s, dtype=float)
        k = matern52(s[..., None] - self.x, self.hyper)
        flat = k.reshape(-1, len(self.x))
        v = solve_triangular(self.chol, flat.T, lower=True)
        out = self.hyper.signal_var - np.einsum("ij,ij->j", v, v)
        out = np.maximum(out, 1e-12 * self.hyper.signal_var)
        return out.reshape(s.shape)

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "weights": self.weights.tolist(),
            "signal_var": self.hyper.signal_var,
            "lengthscale": self.hyper.lengthscale,
            "noise_var": self.hyper.noise_var,
            "prior_mean": self.prior_mean,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GpPosterior":
        hyper = KernelHyper(d["signal_var"], d["lengthscale"], d["noise_var"])
        return cls(d["x"], d["y"], d["weights"], hyper, d["prior_mean"])


def _cholesky_with_jitter(K: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    for rel in JITTER_LADDER:
        jitter = rel * scale
        try:
            A = K if jitter == 0 else K + jitter * np.eye(len(K))
            return np.linalg.cholesky(A), jitter
        except np.linalg.LinAlgError:
            continue
    raise SingularKernel(f"kernel matrix not positive definite even with jitter {JITTER_LADDER[-1] * scale:.3g}")


@dataclass(frozen=True)
class HyperBounds:
    signal_var: tuple[float, float]
    lengthscale: tuple[float, float]
    noise_var: tuple[float, float]


def default_bounds(x, y, weights, prior_mean: float, noise_floor: float) -> HyperBounds:
    """Bounds scaled to the data: lengthscale within [0.1, 10] x input range."""
    x = np.asarray(x, dtype=float)
    span = float(x.max() - x.min())
    if span <= 0:
        raise ValueError("GP inputs need at least two distinct values")
    w = np.asarray(weights, dtype=float)
    v = float(np.sum(w * (np.asarray(y) - prior_mean) ** 2) / np.sum(w))
    v = max(v, noise_floor * 10.0, 1e-300)
    return HyperBounds(
        signal_var=(v * 1e-2, v * 1e2),
        lengthscale=(0.1 * span, 10.0 * span),
        noise_var=(noise_floor, max(v, noise_floor * 10.0)),
    )


def fit_gp(x, y, weights, bounds: HyperBounds, prior_mean: float = 0.0,
           grid_sizes: tuple[int, int, int] = (5, 7, 6), refine_rounds: int = 5) -> GpPosterior:
    """Maximise the log marginal likelihood over a log grid, then refine.

    Ties keep the earlier candidate, and the visiting order is fixed, so the
    result depends only on the data.
    """
    names = ("signal_var", "lengthscale", "noise_var")
    lo = np.log([getattr(bounds, n)[0] for n in names])
    hi = np.log([getattr(bounds, n)[1] for n in names])

    cache: dict[tuple, tuple[float, GpPosterior | None]] = {}

    def score(logp) -> float:
        key = tuple(np.round(logp, 12))
        if key not in cache:
            try:
                post = GpPosterior(x, y, weights, KernelHyper(*np.exp(logp)), prior_mean)
                lml = post.log_marginal_likelihood()
                cache[key] = (lml if math.isfinite(lml) else -math.inf, post)
            except SingularKernel:
                cache[key] = (-math.inf, None)
        return cache[key][0]

    axes = [np.linspace(lo[k], hi[k], n) if hi[k] > lo[k] else np.array([lo[k]])
            for k, n in enumerate(grid_sizes)]
    best, best_score = None, -math.inf
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                p = np.array([a, b, c])
                sc = score(p)
                if sc > best_score:
                    best, best_score = p, sc
    if best is None:
        raise SingularKernel("no hyperparameter candidate produced a factorizable kernel")

    step = math.log(2.0)
    for _ in range(refine_rounds):
        improved = True
        while improved:
            improved = False
            for k in range(3):
                for sign in (1.0, -1.0):
                    cand = best.copy()
                    cand[k] = min(max(cand[k] + sign * step, lo[k]), hi[k])
                    sc = score(cand)
                    if sc > best_score + 1e-12:
                        best, best_score, improved = cand, sc, True
        step /= 2.0
    return cache[tuple(np.round(best, 12))][1]
