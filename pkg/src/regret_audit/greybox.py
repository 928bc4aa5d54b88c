"""Per-(asset, epoch) grey-box spend-response models.

The mean response is an exponential saturation curve plus a GP residual;
outcome dispersion is a second GP on log squared residuals. Past the upper
edge of the core spend range the mean is replaced by a boundary-anchored
isotonic projection, and past the weighted support its epistemic variance is
inflated polynomially.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from regret_audit.errors import AuditError, DegenerateData
from regret_audit.gp import GpPosterior, default_bounds, fit_gp
from regret_audit.isotonic import isotonic_project
from regret_audit.log_ingest import AuditWindow, PortfolioLog, slice_epoch_window

SCHEMA_VERSION = "response-model/1"
EXTRAPOLATION_NODES = 64


@dataclass(frozen=True)
class SaturationParams:
    """``mu(s) = a * (1 - exp(-b * s))`` with ``a, b >= 0``."""

    a: float
    b: float

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b) and self.a >= 0 and self.b >= 0):
            raise ValueError(f"saturation parameters must be finite and >= 0, got a={self.a}, b={self.b}")

    def __call__(self, s):
        return self.a * -np.expm1(-self.b * np.asarray(s, dtype=float))

    def derivative(self, s):
        return self.a * self.b * np.exp(-self.b * np.asarray(s, dtype=float))


@dataclass(frozen=True)
class InflationParams:
    kappa_right: float = 1.0
    p: float = 2.0
    s_scale: float = 1.0
    sigma_res: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in asdict(self).values()):
            raise ValueError("inflation parameters must be finite")
        if self.kappa_right < 0 or self.p < 1 or self.s_scale <= 0 or self.sigma_res < 0:
            raise ValueError(f"invalid inflation parameters {self}")

    def term(self, s, s_hi_all: float):
        """Additive epistemic variance beyond the weighted support."""
        excess = np.maximum(0.0, np.asarray(s, dtype=float) - s_hi_all) / self.s_scale
        return (self.kappa_right * excess ** self.p * self.sigma_res) ** 2


@dataclass(frozen=True)
class FitConfig:
    alpha_aux: float = 0.5
    tau_w: float = 1.0
    window_radius: int = 1
    # lengthscale search range, as multiples of the window's spend range
    lengthscale_factors: tuple[float, float] = (0.1, 10.0)
    grid_sizes: tuple[int, int, int] = (5, 7, 6)
    refine_rounds: int = 5
    saturation_restarts: int = 8
    noise_var_floor: float = 1e-8
    sigma_min: float = 1e-6
    kappa_right: float = 1.0
    inflation_power: float = 2.0
    # None: use the range of the weighted support
    s_scale: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lengthscale_factors
        if not 0 < lo <= hi:
            raise ValueError("lengthscale_factors must satisfy 0 < min <= max")
        if self.noise_var_floor <= 0 or self.sigma_min <= 0:
            raise ValueError("noise_var_floor and sigma_min must be > 0")
        if self.saturation_restarts < 1:
            raise ValueError("saturation_restarts must be >= 1")
        if self.s_scale is not None and self.s_scale <= 0:
            raise ValueError("s_scale must be > 0")


# --- saturation ----------------------------------------------------------------

def _best_a_given_b(s, y, w, b, a_max):
    phi = -np.expm1(-b * s)
    den = np.sum(w * phi * phi)
    if den <= 0:
        return 0.0
    return float(np.clip(np.sum(w * phi * y) / den, 0.0, a_max))


def fit_saturation(spends, returns, weights, restarts: int = 8, seed: int = 0) -> SaturationParams:
    """Weighted least-squares fit of ``a (1 - exp(-b s))`` with ``a, b >= 0``.

    Multi-start bounded trust-region search. Starts: ``a0 = max return`` with
    ``b0`` from the slope of a weighted line through the low-spend half, then
    log-uniform draws of ``b`` (each paired with its optimal ``a``).

    Raises
    ------
    DegenerateData
        Fewer than two distinct spend values.
    """
    s = np.asarray(spends, dtype=float)
    y = np.asarray(returns, dtype=float)
    w = np.asarray(weights, dtype=float)
    if not (s.shape == y.shape == w.shape):
        raise ValueError("spends, returns and weights must have equal length")
    if len(np.unique(s)) < 2:
        raise DegenerateData("saturation fit needs at least two distinct spend values")
    if y.max() <= 0:
        # a = 0 is optimal; b is then unidentifiable
        return SaturationParams(0.0, 0.0)

    s_pos = s[s > 0]
    s_max = float(s.max())
    b_max = 100.0 / float(s_pos.min())
    b_min_start = 0.01 / s_max
    a_max = 1e4 * float(np.abs(y).max())

    a0 = float(max(y.max(), 0.0))
    low = s <= np.median(s)
    if len(np.unique(s[low])) < 2:
        low = np.ones_like(s, bool)
    slope = np.polyfit(s[low], y[low], 1, w=np.sqrt(w[low]))[0]
    b0 = float(np.clip(slope / a0, b_min_start, b_max)) if slope > 0 else 1.0 / s_max

    rng = np.random.default_rng(seed)
    starts = [(a0, b0)]
    for b in np.exp(rng.uniform(math.log(b_min_start), math.log(b_max), size=restarts - 1)):
        starts.append((_best_a_given_b(s, y, w, b, a_max), float(b)))

    sw = np.sqrt(w)

    def resid(p):
        return sw * (y - p[0] * -np.expm1(-p[1] * s))

    def jac(p):
        e = np.exp(-p[1] * s)
        return -sw[:, None] * np.column_stack([1.0 - e, p[0] * s * e])

    best, best_cost = None, math.inf
    for a_init, b_init in starts:
        x0 = np.clip([a_init, b_init], [0.0, 0.0], [a_max, b_max])
        sol = least_squares(resid, x0, jac=jac, bounds=([0.0, 0.0], [a_max, b_max]),
                            method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
        cost = float(np.sum(sol.fun ** 2))
        if best is None or cost < best_cost - 1e-15 * max(1.0, best_cost):
            best, best_cost = sol.x, cost
    a, b = float(best[0]), float(best[1])
    if a <= 1e-12 * float(np.abs(y).max()):
        a, b = 0.0, 0.0
    return SaturationParams(a, b)


# --- residual GPs ----------------------------------------------------------------

def _bounds(spends, targets, weights, prior_mean, config: FitConfig):
    b = default_bounds(spends, targets, weights, prior_mean, config.noise_var_floor)
    span = float(np.ptp(spends))
    lo, hi = config.lengthscale_factors
    return type(b)(b.signal_var, (lo * span, hi * span), b.noise_var)


def fit_mean_gp(spends, residuals, weights, config: FitConfig) -> GpPosterior:
    """Zero-mean GP on saturation residuals; point noise is ``noise_var / w``."""
    bounds = _bounds(spends, residuals, weights, 0.0, config)
    return fit_gp(spends, residuals, weights, bounds, 0.0, config.grid_sizes, config.refine_rounds)


def fit_variance_gp(spends, residuals, weights, config: FitConfig) -> tuple[GpPosterior, float]:
    """GP on ``log(max(r^2, sigma_min^2))`` with the mean target as prior mean.

    Returns the posterior and a log-scale correction chosen so the weighted
    mean of ``r^2 / sigma^2(s)`` over the training points equals one (the log
    of a squared residual is biased low as an estimate of log variance).
    """
    r2 = np.maximum(np.asarray(residuals, dtype=float) ** 2, config.sigma_min ** 2)
    targets = np.log(r2)
    prior_mean = float(np.mean(targets))
    bounds = _bounds(spends, targets, weights, prior_mean, config)
    post = fit_gp(spends, targets, weights, bounds, prior_mean, config.grid_sizes, config.refine_rounds)
    w = np.asarray(weights, dtype=float)
    fitted = np.exp(post.mean(np.asarray(spends, dtype=float)))
    log_scale = float(np.log(np.sum(w * r2 / fitted) / np.sum(w)))
    return post, log_scale


# --- fitted model ----------------------------------------------------------------

class ResponseModel:
    """Fitted grey-box response for one asset in one epoch.

    Instances are immutable after construction and safe to share between
    threads.
    """

    def __init__(
        self,
        asset_id: str,
        epoch: int,
        saturation: SaturationParams,
        mean_gp: Optional[GpPosterior],
        var_gp: Optional[GpPosterior],
        var_log_scale: float,
        core_range: tuple[float, float],
        weighted_max: float,
        support_span: float,
        inflation: InflationParams,
        sigma_min: float,
        constant: Optional[float] = None,
        constant_var: float = 0.0,
        diagnostics: Optional[dict] = None,
    ):
        self.asset_id = asset_id
        self.epoch = int(epoch)
        self.saturation = saturation
        self.mean_gp = mean_gp
        self.var_gp = var_gp
        self.var_log_scale = float(var_log_scale)
        self.core_range = (float(core_range[0]), float(core_range[1]))
        self.weighted_max = float(weighted_max)
        self.support_span = float(support_span)
        self.inflation = inflation
        self.sigma_min = float(sigma_min)
        self.constant = None if constant is None else float(constant)
        self.constant_var = float(constant_var)
        self.diagnostics = dict(diagnostics or {})

        s_hi = self.core_range[1]
        self._grid = s_hi + 2.0 * self.support_span * np.arange(1, EXTRAPOLATION_NODES + 1) / EXTRAPOLATION_NODES
        self.iso_anchor = float(self._raw_mean(s_hi))
        self._grid_values = isotonic_project(self._raw_mean(self._grid), self.iso_anchor)
        self._fd_step = 1e-4 * self.support_span

    @property
    def s_lo(self) -> float:
        return self.core_range[0]

    @property
    def s_hi(self) -> float:
        return self.core_range[1]

    @property
    def is_constant(self) -> bool:
        return self.constant is not None

    def _raw_mean(self, s):
        s = np.asarray(s, dtype=float)
        if self.constant is not None:
            return np.full(s.shape, self.constant)[()]
        return self.saturation(s) + self.mean_gp.mean(s)

    def predict_mean(self, s):
        s = np.asarray(s, dtype=float)
        raw = self._raw_mean(np.minimum(s, self.s_hi))
        xs = np.concatenate([[self.s_hi], self._grid])
        ys = np.concatenate([[self.iso_anchor], self._grid_values])
        ext = np.interp(s, xs, ys)
        return np.where(s > self.s_hi, ext, raw)[()]

    def predict_mean_grad(self, s):
        """d(mean)/ds: analytic inside the core range, central differences beyond."""
        s = np.asarray(s, dtype=float)
        if self.constant is not None:
            return np.zeros(s.shape)[()]
        inner = np.minimum(s, self.s_hi)
        analytic = self.saturation.derivative(inner) + self.mean_gp.mean_grad(inner)
        h = self._fd_step
        fd = (self.predict_mean(s + h) - self.predict_mean(np.maximum(s - h, 0.0))) / (s + h - np.maximum(s - h, 0.0))
        return np.where(s > self.s_hi, fd, analytic)[()]

    def gp_var(self, s):
        """Mean-GP posterior variance (sigma_g^2)."""
        if self.constant is not None:
            return np.full(np.shape(s), self.constant_var)[()]
        return self.mean_gp.var(s)

    def inflation_term(self, s):
        return self.inflation.term(s, self.weighted_max)[()]

    def predict_epistemic_var(self, s):
        return (self.gp_var(s) + self.inflation_term(s))[()]

    def predict_outcome_sd(self, s):
        s = np.asarray(s, dtype=float)
        floor = self.sigma_min ** 2
        if self.constant is not None:
            var = np.full(s.shape, max(self.constant_var, floor))
        else:
            var = np.maximum(np.exp(self.var_gp.mean(s) + self.var_log_scale), floor)
        return np.sqrt(var)[()]

    def support_flag(self, s: float) -> str:
        """Where ``s`` sits relative to the data: core, left, right or beyond_weighted."""
        if s > self.weighted_max:
            return "beyond_weighted"
        if s > self.s_hi:
            return "right"
        if s < self.s_lo:
            return "left"
        return "core"

    # -- serialization --

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "asset_id": self.asset_id,
            "epoch": self.epoch,
            "saturation": asdict(self.saturation),
            "mean_gp": None if self.mean_gp is None else self.mean_gp.to_dict(),
            "var_gp": None if self.var_gp is None else self.var_gp.to_dict(),
            "var_log_scale": self.var_log_scale,
            "core_range": list(self.core_range),
            "weighted_max": self.weighted_max,
            "support_span": self.support_span,
            "inflation": asdict(self.inflation),
            "sigma_min": self.sigma_min,
            "constant": self.constant,
            "constant_var": self.constant_var,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResponseModel":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported response model schema {d.get('schema')!r}")
        return cls(
            asset_id=d["asset_id"],
            epoch=d["epoch"],
            saturation=SaturationParams(**d["saturation"]),
            mean_gp=None if d["mean_gp"] is None else GpPosterior.from_dict(d["mean_gp"]),
            var_gp=None if d["var_gp"] is None else GpPosterior.from_dict(d["var_gp"]),
            var_log_scale=d["var_log_scale"],
            core_range=tuple(d["core_range"]),
            weighted_max=d["weighted_max"],
            support_span=d["support_span"],
            inflation=InflationParams(**d["inflation"]),
            sigma_min=d["sigma_min"],
            constant=d["constant"],
            constant_var=d["constant_var"],
            diagnostics=d["diagnostics"],
        )


def _weighted_var(y, w) -> float:
    m = np.sum(w * y) / np.sum(w)
    return float(np.sum(w * (y - m) ** 2) / np.sum(w))


def fit_response_model(window: AuditWindow, config: FitConfig, seed: Optional[int] = None) -> ResponseModel:
    """Fit saturation, mean GP, variance GP and the extrapolation grid for one window.

    Windows with fewer than two distinct spend values get a constant model
    (weighted mean return, dispersion from the return spread).
    """
    seed = config.seed if seed is None else seed
    s, y, w = window.spends, window.returns, window.weights
    span = float(np.ptp(s))
    diagnostics: dict = {
        "n_core": int(window.is_core.sum()),
        "n_aux": int((~window.is_core).sum()),
        "core_distinct_spends": int(len(np.unique(window.core_spends))),
    }
    scale = config.s_scale

    if len(np.unique(s)) < 2:
        mean = float(np.sum(w * y) / np.sum(w))
        var0 = max(_weighted_var(y, w), config.sigma_min ** 2)
        diagnostics["fallback"] = "constant"
        s_scale = scale or max(window.s_hi_all, 1.0)
        return ResponseModel(
            window.asset_id, window.core_epoch, SaturationParams(0.0, 0.0), None, None, 0.0,
            (window.s_lo, window.s_hi), window.s_hi_all, max(window.s_hi, 1.0),
            InflationParams(config.kappa_right, config.inflation_power, s_scale, math.sqrt(var0)),
            config.sigma_min, constant=mean, constant_var=var0, diagnostics=diagnostics,
        )

    context = f"asset {window.asset_id}, epoch {window.core_epoch}"
    try:
        sat = fit_saturation(s, y, w, config.saturation_restarts, seed)
        resid = y - sat(s)
        mean_gp = fit_mean_gp(s, resid, w, config)
        eps = resid - mean_gp.mean(s)
        var_gp, log_scale = fit_variance_gp(s, eps, w, config)
    except AuditError as exc:
        raise type(exc)(f"{context}: {exc}") from exc

    sigma_res = float(np.sqrt(np.mean(eps[window.is_core] ** 2)))
    inflation = InflationParams(config.kappa_right, config.inflation_power, scale or span, sigma_res)
    diagnostics.update(
        jitter_mean_gp=mean_gp.jitter,
        jitter_var_gp=var_gp.jitter,
        lml_mean_gp=mean_gp.log_marginal_likelihood(),
    )
    if diagnostics["core_distinct_spends"] < 2:
        diagnostics["weak_core"] = True
    return ResponseModel(
        window.asset_id, window.core_epoch, sat, mean_gp, var_gp, log_scale,
        (window.s_lo, window.s_hi), window.s_hi_all, span, inflation, config.sigma_min,
        diagnostics=diagnostics,
    )


def cell_seed(seed: int, epoch: int, asset_index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, asset_index]).generate_state(1)[0])


def fit_log_models(log: PortfolioLog, config: FitConfig) -> list[list[ResponseModel]]:
    """Fit every (epoch, asset) cell of a log; result is indexed ``[e - 1][i]``."""
    out = []
    for e in range(1, log.n_epochs + 1):
        row = []
        for i in range(log.n_assets):
            window = slice_epoch_window(log, i, e, config.window_radius, config.alpha_aux, config.tau_w)
            row.append(fit_response_model(window, config, cell_seed(config.seed, e, i)))
        out.append(row)
    return out
