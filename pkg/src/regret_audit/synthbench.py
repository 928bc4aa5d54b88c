"""Semi-synthetic worlds with known response curves and known regret.

A :class:`TrueWorld` fixes one response curve per (epoch, asset) and a noise
law ``sd(s) = c0 + c1 * s``. A :class:`LoggingPolicy` says where spend was
observed. Simulated logs go through the same pipeline as real ones, and
:func:`true_regret` supplies the ground truth to compare against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from regret_audit.errors import TooLarge
from regret_audit.log_ingest import LogRecord, PortfolioLog
from regret_audit.oracle import (
    BRUTE_FORCE_MAX_CELLS,
    BRUTE_FORCE_MAX_POINTS,
    FeasibleSet,
    LinearResponse,
    SaturationResponse,
    SolverConfig,
    brute_force_oracle,
    plug_in_objective,
    solve_oracle,
)

DRIFT_GRID_POINTS = 101
CURVES = ("saturation", "linear")


@dataclass
class TrueWorld:
    """Ground-truth curves. For ``curve="linear"`` the mean is ``a * s`` and ``b`` is unused."""

    a: np.ndarray
    b: np.ndarray
    noise_c0: float = 0.0
    noise_c1: float = 0.0
    drift_bound: Optional[float] = None
    spend_domain: float = 1.0
    seed: int = 0
    curve: str = "saturation"
    asset_ids: tuple[str, ...] = ()
    portfolio_id: str = "P1"
    horizon_id: str = "H1"

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.atleast_2d(np.asarray(self.b, dtype=float))
        if self.a.shape != self.b.shape:
            raise ValueError("a and b must share shape (E, K)")
        if self.curve not in CURVES:
            raise ValueError(f"curve must be one of {CURVES}")
        if self.noise_c0 < 0 or self.noise_c1 < 0:
            raise ValueError("noise coefficients must be >= 0")
        if not self.asset_ids:
            self.asset_ids = tuple(f"A{i + 1}" for i in range(self.a.shape[1]))
        if len(self.asset_ids) != self.a.shape[1]:
            raise ValueError("one asset id per column required")

    @property
    def E(self) -> int:
        return self.a.shape[0]

    @property
    def K(self) -> int:
        return self.a.shape[1]

    def models(self) -> list[list]:
        if self.curve == "linear":
            return [[LinearResponse(float(self.a[e, i])) for i in range(self.K)] for e in range(self.E)]
        return [[SaturationResponse(float(self.a[e, i]), float(self.b[e, i])) for i in range(self.K)]
                for e in range(self.E)]

    def mean(self, e: int, i: int, s):
        """True mean response; ``e`` is 0-based."""
        s = np.asarray(s, dtype=float)
        if self.curve == "linear":
            return self.a[e, i] * s
        return self.a[e, i] * -np.expm1(-self.b[e, i] * s)

    def noise_sd(self, s):
        return self.noise_c0 + self.noise_c1 * np.asarray(s, dtype=float)

    def max_adjacent_drift(self) -> float:
        """Largest sup-norm gap between adjacent epochs' curves on the drift grid."""
        grid = np.linspace(0.0, self.spend_domain, DRIFT_GRID_POINTS)
        worst = 0.0
        for e in range(1, self.E):
            for i in range(self.K):
                worst = max(worst, float(np.max(np.abs(self.mean(e, i, grid) - self.mean(e - 1, i, grid)))))
        return worst

    def to_dict(self) -> dict:
        return {
            "schema": "true-world/1",
            "a": self.a.tolist(), "b": self.b.tolist(),
            "noise_c0": self.noise_c0, "noise_c1": self.noise_c1,
            "drift_bound": self.drift_bound, "spend_domain": self.spend_domain,
            "seed": self.seed, "curve": self.curve, "asset_ids": list(self.asset_ids),
            "portfolio_id": self.portfolio_id, "horizon_id": self.horizon_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrueWorld":
        if d.get("schema") != "true-world/1":
            raise ValueError(f"unsupported world schema {d.get('schema')!r}")
        return cls(d["a"], d["b"], d["noise_c0"], d["noise_c1"], d["drift_bound"], d["spend_domain"],
                   d["seed"], d["curve"], tuple(d["asset_ids"]), d["portfolio_id"], d["horizon_id"])


def _sup_gap(a0, b0, a1, b1, grid) -> float:
    return float(np.max(np.abs(a1 * -np.expm1(-b1 * grid) - a0 * -np.expm1(-b0 * grid))))


def generate_world(K: int, E: int, drift_bound: Optional[float], noise: tuple[float, float] = (0.0, 0.0),
                   seed: int = 0, a_range: tuple[float, float] = (50.0, 150.0),
                   b_range: tuple[float, float] = (0.05, 0.2), spend_domain: float = 40.0) -> TrueWorld:
    """Draw saturation curves per cell, then shrink each epoch toward the previous one.

    The shrinkage is the smallest one (found by bisection on the parameter
    blend) that keeps the sup-norm gap to the previous epoch within
    ``drift_bound`` on a 101-point grid over ``[0, spend_domain]``.
    ``drift_bound=None`` leaves the draws untouched.
    """
    if K < 1 or E < 1:
        raise ValueError("K and E must be >= 1")
    rng = np.random.default_rng(seed)
    a = rng.uniform(*a_range, size=(E, K))
    b = rng.uniform(*b_range, size=(E, K))
    if drift_bound is not None:
        if drift_bound < 0:
            raise ValueError("drift bound must be >= 0")
        grid = np.linspace(0.0, spend_domain, DRIFT_GRID_POINTS)
        for e in range(1, E):
            for i in range(K):
                a0, b0 = a[e - 1, i], b[e - 1, i]
                a1, b1 = a[e, i], b[e, i]
                if _sup_gap(a0, b0, a1, b1, grid) <= drift_bound:
                    continue
                lo, hi = 0.0, 1.0
                for _ in range(60):
                    mid = 0.5 * (lo + hi)
                    if _sup_gap(a0, b0, a0 + mid * (a1 - a0), b0 + mid * (b1 - b0), grid) <= drift_bound:
                        lo = mid
                    else:
                        hi = mid
                a[e, i] = a0 + lo * (a1 - a0)
                b[e, i] = b0 + lo * (b1 - b0)
    return TrueWorld(a, b, float(noise[0]), float(noise[1]), drift_bound, spend_domain, seed)


@dataclass
class LoggingPolicy:
    """Where the historical policy put its spend.

    ``support`` holds ``[lo, hi]`` per asset (shape ``(K, 2)``) or per cell
    (shape ``(E, K, 2)``). Each cell is observed ``n_obs`` times: uniformly
    over its support, or for ``kind="concentrated"`` normally around the cell
    center with sd ``0.05 * (hi - lo)``, clipped to the support. When
    ``centers`` is given the samples are shifted so that their mean equals the
    center (then clipped at 0), which pins the realized trajectory.
    """

    support: np.ndarray
    n_obs: int = 20
    kind: str = "uniform"
    centers: Optional[np.ndarray] = None

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float)
        if self.support.ndim not in (2, 3) or self.support.shape[-1] != 2:
            raise ValueError("support must have shape (K, 2) or (E, K, 2)")
        if np.any(self.support[..., 0] < 0) or np.any(self.support[..., 0] > self.support[..., 1]):
            raise ValueError("support ranges must satisfy 0 <= lo <= hi")
        if self.n_obs < 1:
            raise ValueError("n_obs must be >= 1")
        if self.kind not in ("uniform", "concentrated"):
            raise ValueError("kind must be 'uniform' or 'concentrated'")
        if self.centers is not None:
            self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
            if np.any(self.centers < 0):
                raise ValueError("policy centers must be >= 0")

    def cell_support(self, e: int, i: int) -> tuple[float, float]:
        lo, hi = self.support[e, i] if self.support.ndim == 3 else self.support[i]
        return float(lo), float(hi)

    @classmethod
    def around(cls, centers, spread: float = 0.9, n_obs: int = 20, kind: str = "uniform") -> "LoggingPolicy":
        """Support ``centers * (1 +/- spread)`` per cell, recentered on ``centers``."""
        if not 0 <= spread <= 1:
            raise ValueError("spread must lie in [0, 1]")
        c = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls(np.stack([c * (1 - spread), c * (1 + spread)], axis=-1), n_obs, kind, c)


def simulate_log(world: TrueWorld, policy: LoggingPolicy, seed: int) -> PortfolioLog:
    """Sample a replicated log: ``return = mean(s) + sd(s) * z`` with standard normal ``z``."""
    E, K = world.a.shape
    if policy.support.shape[:-1] not in ((K,), (E, K)):
        raise ValueError(f"policy support shape {policy.support.shape} does not fit world ({E}, {K})")
    if policy.centers is not None and policy.centers.shape != (E, K):
        raise ValueError(f"policy centers shape {policy.centers.shape} != world shape {(E, K)}")
    rng = np.random.default_rng(seed)
    n = policy.n_obs
    records = []
    for e in range(E):
        for i in range(K):
            lo, hi = policy.cell_support(e, i)
            c = 0.5 * (lo + hi) if policy.centers is None else policy.centers[e, i]
            if policy.kind == "uniform":
                s = rng.uniform(lo, hi, n)
            else:
                s = np.clip(c + 0.05 * (hi - lo) * rng.standard_normal(n), lo, hi)
            if policy.centers is not None:
                s = np.maximum(s - (s.mean() - c), 0.0)
            z = rng.standard_normal(n)
            y = world.mean(e, i, s) + world.noise_sd(s) * z
            for k in range(n):
                records.append(LogRecord(world.portfolio_id, world.horizon_id, e + 1, world.asset_ids[i],
                                         float(c), float(s[k]), float(y[k]), {}, k))
    return PortfolioLog(world.portfolio_id, world.horizon_id, tuple(world.asset_ids), tuple(records))


def true_oracle(world: TrueWorld, feasible: FeasibleSet, grid_points: int = 41,
                solver: SolverConfig = SolverConfig(), reference: Optional[np.ndarray] = None):
    """Best feasible allocation under the true mean curves.

    Brute force runs when the grid is within the enumeration guard; the
    gradient solver always runs (the true curves are concave, so it reaches
    the global optimum). The better of the two is returned.
    """
    models = world.models()
    candidates = [solve_oracle(models, feasible, solver, reference=reference)]
    n = world.E * world.K
    if n <= BRUTE_FORCE_MAX_CELLS and grid_points ** n <= BRUTE_FORCE_MAX_POINTS:
        candidates.append(brute_force_oracle(models, feasible, grid_points))
    return max(candidates, key=lambda sol: sol.objective)


def true_regret(world: TrueWorld, realized_spend, feasible: FeasibleSet, grid_points: int = 41,
                solver: SolverConfig = SolverConfig(), require_brute_force: bool = False) -> float:
    """Ground-truth expected regret: true optimum minus true value of ``realized_spend``."""
    n = world.E * world.K
    if require_brute_force and (n > BRUTE_FORCE_MAX_CELLS or grid_points ** n > BRUTE_FORCE_MAX_POINTS):
        raise TooLarge(f"{grid_points}^{n} grid points exceeds the enumeration guard")
    realized = np.asarray(realized_spend, dtype=float)
    best = true_oracle(world, feasible, grid_points, solver, reference=realized)
    return best.objective - plug_in_objective(world.models(), realized)


def oracle_allocation(world: TrueWorld, b_tot: float, solver: SolverConfig = SolverConfig()) -> np.ndarray:
    """True unconstrained optimum for a total budget, boxes wide open."""
    fs = FeasibleSet(b_tot, np.zeros(world.K), np.full(world.K, b_tot), world.E)
    return solve_oracle(world.models(), fs, solver).spend


def perturbed_allocation(base: np.ndarray, scale: float, seed: int) -> np.ndarray:
    """Scale each asset's column by ``1 + scale * u`` (``u ~ U(-1, 1)``), keeping the total."""
    rng = np.random.default_rng(seed)
    factors = 1.0 + scale * rng.uniform(-1.0, 1.0, base.shape[1])
    out = base * factors[None, :]
    return out * (base.sum() / out.sum())
