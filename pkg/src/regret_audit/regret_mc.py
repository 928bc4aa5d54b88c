"""Monte Carlo regret distributions and their summaries.

Counterfactual returns follow the fitted location-scale model

    rho(s) = mean(s) + sqrt(epistemic_var(s)) * eta + outcome_sd(s) * eps

with standard normal ``eta`` and ``eps`` drawn once per (epoch, asset) cell
and draw index. Both trajectories of a comparison reuse the cell's ``eps``;
``eta`` is shared too under the default comonotone coupling, or drawn afresh
for the realized trajectory under ``coupling="independent"``.

Random numbers come from numpy's PCG64 seeded with the caller's seed. Draw
order is fixed: the ``eps`` block, then the ``eta`` block (then, for the
independent coupling, a second ``eta`` block), each of shape ``(E, K, J)`` in
C order, i.e. epoch-major, asset-minor, draw index last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from regret_audit.errors import (
    EmptyLevels,
    MissingCombination,
    ShapeMismatch,
    TooFewDraws,
    ZeroBaseline,
)

COUPLINGS = ("comonotone", "independent")


@dataclass
class RegretDraws:
    level: Optional[float]
    draws: np.ndarray
    seed: int

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim != 1 or len(self.draws) < 1:
            raise ValueError("draws must be a non-empty 1-d array")
        if not np.all(np.isfinite(self.draws)):
            raise ValueError("regret draws must be finite")

    @property
    def J(self) -> int:
        return len(self.draws)


@dataclass(frozen=True)
class RegretSummary:
    mean: float
    std: float
    ci_low: float
    ci_high: float
    median: float
    prob_improve: float
    alpha: float
    n_draws: int

    def to_dict(self) -> dict:
        return {
            "mean": self.mean, "std": self.std, "ci_low": self.ci_low, "ci_high": self.ci_high,
            "median": self.median, "prob_improve": self.prob_improve, "alpha": self.alpha,
            "n_draws": self.n_draws,
        }


def sample_counterfactual_return(model, s: float, eps_draw, eta_draw):
    """One counterfactual return at spend ``s`` for supplied standard-normal draws."""
    return (model.predict_mean(s)
            + np.sqrt(model.predict_epistemic_var(s)) * eta_draw
            + model.predict_outcome_sd(s) * eps_draw)


def _cell_terms(model, s: float) -> tuple[float, float, float]:
    return (float(model.predict_mean(s)), math.sqrt(float(model.predict_epistemic_var(s))),
            float(model.predict_outcome_sd(s)))


def mc_regret(models, oracle_spend, realized_spend, J: int, seed: int,
              coupling: str = "comonotone", level: Optional[float] = None) -> RegretDraws:
    """Draws of ``R(oracle) - R(realized)`` under the fitted response models.

    The oracle trajectory is taken as fixed; only outcomes are resampled.
    """
    if coupling not in COUPLINGS:
        raise ValueError(f"coupling must be one of {COUPLINGS}")
    if J < 1:
        raise ValueError("J must be >= 1")
    S_star = np.asarray(oracle_spend, dtype=float)
    S_real = np.asarray(realized_spend, dtype=float)
    E = len(models)
    K = len(models[0]) if E else 0
    if S_star.shape != (E, K) or S_real.shape != (E, K):
        raise ShapeMismatch(f"spend shapes {S_star.shape}, {S_real.shape} do not match models grid ({E}, {K})")

    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((E, K, J))
    eta = rng.standard_normal((E, K, J))
    eta_real = rng.standard_normal((E, K, J)) if coupling == "independent" else eta

    total = np.zeros(J)
    for e in range(E):
        for i in range(K):
            m = models[e][i]
            mu_o, epi_o, sd_o = _cell_terms(m, S_star[e, i])
            mu_r, epi_r, sd_r = _cell_terms(m, S_real[e, i])
            total += (mu_o - mu_r) + (sd_o - sd_r) * eps[e, i]
            total += epi_o * eta[e, i] - epi_r * eta_real[e, i]
    return RegretDraws(level, total, seed)


def summarize(draws: RegretDraws, alpha: float = 0.05) -> RegretSummary:
    """Mean, sample std (J-1), interpolated quantile interval, and P(Reg > 0)."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    x = draws.draws
    if len(x) < 2:
        raise TooFewDraws(f"need at least 2 draws for a standard deviation, got {len(x)}")
    lo, med, hi = np.quantile(x, [alpha / 2, 0.5, 1 - alpha / 2], method="linear")
    return RegretSummary(
        mean=float(np.mean(x)),
        std=float(np.std(x, ddof=1)),
        ci_low=float(lo),
        ci_high=float(hi),
        median=float(med),
        prob_improve=float(np.count_nonzero(x > 0) / len(x)),
        alpha=alpha,
        n_draws=len(x),
    )


@dataclass(frozen=True)
class DeltaSelection:
    delta_star: Optional[float]
    certified: bool
    epsilon: float
    summaries: Mapping = field(default_factory=dict)


def select_delta(summaries: Mapping[Optional[float], RegretSummary], epsilon: float) -> DeltaSelection:
    """Largest expected regret among levels with ``P(Reg > 0) >= epsilon``.

    The unconstrained level (key ``None``) is not a candidate. Ties go to the
    smaller delta.
    """
    levels = sorted(d for d in summaries if d is not None)
    if not levels:
        raise EmptyLevels("no constrained levels to select from")
    best = None
    for d in levels:
        s = summaries[d]
        if s.prob_improve >= epsilon and (best is None or s.mean > summaries[best].mean):
            best = d
    return DeltaSelection(best, best is not None, epsilon, dict(summaries))


def lift_percent(summary: RegretSummary, realized_total_return: float) -> float:
    """Expected regret as a percentage of total realized return."""
    if realized_total_return == 0:
        raise ZeroBaseline("realized total return is zero; lift is undefined")
    return 100.0 * summary.mean / realized_total_return


@dataclass(frozen=True)
class DetectabilityCell:
    delta: Optional[float]
    epsilon: float
    fraction: float
    mean_lift: Optional[float]
    std_lift: Optional[float]
    n_pairs: int
    n_detectable: int

    def render(self) -> str:
        if self.mean_lift is None:
            return f"{self.fraction:.2f}"
        return f"{self.fraction:.2f} ({self.mean_lift:.1f} ± {self.std_lift:.1f})"


def detectability_table(pair_summaries: Mapping[tuple, RegretSummary],
                        baselines: Mapping[tuple, float],
                        delta_grid: Sequence[Optional[float]],
                        epsilon_grid: Sequence[float]) -> list[DetectabilityCell]:
    """Fraction of pairs with ``P(Reg > 0) >= epsilon`` per (delta, epsilon).

    ``pair_summaries`` is keyed by ``(portfolio_id, horizon_id, delta)`` and
    ``baselines`` by ``(portfolio_id, horizon_id)`` (total realized return,
    the lift denominator). Lift statistics cover the detectable pairs only;
    the std uses the J-1 convention and is 0 for a single pair.
    """
    pairs = sorted({k[:2] for k in pair_summaries} | set(baselines))
    for p in pairs:
        for d in delta_grid:
            if (*p, d) not in pair_summaries:
                raise MissingCombination(f"no summary for pair {p} at level {d}")
        if p not in baselines:
            raise MissingCombination(f"no baseline return for pair {p}")
    cells = []
    for d in delta_grid:
        for eps in epsilon_grid:
            hits = [p for p in pairs if pair_summaries[(*p, d)].prob_improve >= eps]
            lifts = [lift_percent(pair_summaries[(*p, d)], baselines[p]) for p in hits]
            mean_lift = float(np.mean(lifts)) if lifts else None
            std_lift = (float(np.std(lifts, ddof=1)) if len(lifts) > 1 else 0.0) if lifts else None
            cells.append(DetectabilityCell(d, float(eps), len(hits) / len(pairs) if pairs else 0.0,
                                           mean_lift, std_lift, len(pairs), len(hits)))
    return cells
