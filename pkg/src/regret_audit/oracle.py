"""Hindsight oracle allocations over the budget polytope.

The feasible set is ``{sum(s) = B}`` intersected with per-cell boxes and, when
a stability level ``delta`` is set, the epoch-to-epoch wedges
``(1 - delta) s[e-1, i] <= s[e, i] <= (1 + delta) s[e-1, i]``.

Any object with vectorised ``predict_mean(s)`` and ``predict_mean_grad(s)``
can act as a cell model; fitted :class:`~regret_audit.greybox.ResponseModel`
instances and the closed-form curves below all qualify.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from regret_audit.errors import (
    AuditError,
    EmptyFeasibleGrid,
    InfeasibleSet,
    ProjectionDiverged,
    ShapeMismatch,
    TooLarge,
)

BRUTE_FORCE_MAX_CELLS = 6
BRUTE_FORCE_MAX_POINTS = 50_000_000


# --- closed-form cell models -------------------------------------------------------

@dataclass(frozen=True)
class LinearResponse:
    slope: float
    intercept: float = 0.0

    def predict_mean(self, s):
        return (self.intercept + self.slope * np.asarray(s, dtype=float))[()]

    def predict_mean_grad(self, s):
        return np.full(np.shape(s), float(self.slope))[()]


@dataclass(frozen=True)
class SaturationResponse:
    a: float
    b: float

    def predict_mean(self, s):
        return (self.a * -np.expm1(-self.b * np.asarray(s, dtype=float)))[()]

    def predict_mean_grad(self, s):
        return (self.a * self.b * np.exp(-self.b * np.asarray(s, dtype=float)))[()]


# --- feasible set ------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibleSet:
    """Budget polytope for an ``n_epochs x K`` spend matrix.

    ``lower``/``upper`` are per-asset bounds applied at every epoch. With
    ``first_epoch_anchor`` and ``delta`` both set, epoch 1 is additionally
    held within ``(1 +/- delta)`` of the anchor.
    """

    b_tot: float
    lower: np.ndarray
    upper: np.ndarray
    n_epochs: int
    delta: Optional[float] = None
    first_epoch_anchor: Optional[np.ndarray] = None

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ShapeMismatch("lower and upper must be 1-d arrays of equal length")
        if self.n_epochs < 1:
            raise InfeasibleSet("n_epochs must be >= 1")
        if np.any(lo < 0) or np.any(lo > hi):
            raise InfeasibleSet("bounds must satisfy 0 <= lower <= upper")
        if self.delta is not None and not 0 < self.delta < 1:
            raise InfeasibleSet(f"delta must lie in (0, 1), got {self.delta}")
        if self.first_epoch_anchor is not None:
            anchor = np.asarray(self.first_epoch_anchor, dtype=float)
            if anchor.shape != lo.shape:
                raise ShapeMismatch("first_epoch_anchor must have one entry per asset")
            object.__setattr__(self, "first_epoch_anchor", anchor)
        clo, chi = self.cell_bounds()
        if np.any(clo > chi + 1e-12):
            raise InfeasibleSet("anchored first-epoch bounds do not intersect the asset boxes")
        tol = 1e-12 * max(1.0, abs(self.b_tot))
        if not (clo.sum() - tol <= self.b_tot <= chi.sum() + tol):
            raise InfeasibleSet(
                f"budget {self.b_tot} outside [{clo.sum()}, {chi.sum()}] reachable within the bounds")

    @property
    def n_assets(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_epochs, self.n_assets)

    def with_delta(self, delta: Optional[float]) -> "FeasibleSet":
        return replace(self, delta=delta)

    def cell_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.tile(self.lower, (self.n_epochs, 1))
        hi = np.tile(self.upper, (self.n_epochs, 1))
        if self.first_epoch_anchor is not None and self.delta is not None:
            lo[0] = np.maximum(lo[0], (1 - self.delta) * self.first_epoch_anchor)
            hi[0] = np.minimum(hi[0], (1 + self.delta) * self.first_epoch_anchor)
        return lo, hi

    @classmethod
    def from_realized(cls, realized: np.ndarray, delta: Optional[float] = None,
                      lower=None, upper=None, b_tot: Optional[float] = None,
                      anchored: bool = False) -> "FeasibleSet":
        """Default set for a realized trajectory: budget = realized total,
        boxes ``[0, 2 * max realized spend of the asset]``."""
        realized = np.asarray(realized, dtype=float)
        E, K = realized.shape
        lo = np.zeros(K) if lower is None else np.broadcast_to(np.asarray(lower, float), (K,)).copy()
        hi = 2.0 * realized.max(axis=0) if upper is None else np.broadcast_to(np.asarray(upper, float), (K,)).copy()
        total = math.fsum(realized.ravel()) if b_tot is None else float(b_tot)
        return cls(total, lo, hi, E, delta, realized[0].copy() if anchored else None)


def constraint_violation(spend: np.ndarray, feasible: FeasibleSet) -> dict:
    """Residuals of every constraint family.

    ``stability`` is relative to the previous-epoch spend (floored at 1e-6 of
    the mean cell budget so zero spends stay well defined).
    """
    S = np.asarray(spend, dtype=float)
    lo, hi = feasible.cell_bounds()
    out = {
        "sum": abs(math.fsum(S.ravel()) - feasible.b_tot),
        "box": float(max(0.0, np.max(lo - S), np.max(S - hi))),
        "stability": 0.0,
    }
    if feasible.delta is not None and S.shape[0] > 1:
        d = feasible.delta
        x, y = S[:-1], S[1:]
        viol = np.maximum(np.maximum((1 - d) * x - y, y - (1 + d) * x), 0.0)
        floor = 1e-6 * feasible.b_tot / S.size
        out["stability"] = float(np.max(viol / np.maximum(x, floor)))
    return out


def _is_feasible(S, feasible: FeasibleSet, tol: float) -> bool:
    v = constraint_violation(S, feasible)
    return (v["sum"] <= 1e-9 * max(1.0, abs(feasible.b_tot)) and v["box"] <= 1e-12 * max(1.0, abs(feasible.b_tot))
            and v["stability"] <= tol)


# --- projection ----------------------------------------------------------------------

def _project_capped_simplex(p: np.ndarray, lo: np.ndarray, hi: np.ndarray, total: float) -> np.ndarray:
    """Exact Euclidean projection onto ``{sum = total, lo <= x <= hi}``."""
    p, lo, hi = p.ravel(), lo.ravel(), hi.ravel()
    bps = np.unique(np.concatenate([p - hi, p - lo]))
    sums = np.clip(p[None, :] - bps[:, None], lo, hi).sum(axis=1)  # non-increasing in bps
    if total >= sums[0]:
        lam = bps[0]
    elif total <= sums[-1]:
        lam = bps[-1]
    else:
        k = np.searchsorted(-sums, -total, side="right") - 1
        k = min(max(k, 0), len(bps) - 2)
        f0, f1 = sums[k], sums[k + 1]
        lam = bps[k] if f0 == f1 else bps[k] + (f0 - total) * (bps[k + 1] - bps[k]) / (f0 - f1)
    return np.clip(p - lam, lo, hi)


def _project_wedges(x: np.ndarray, y: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Project points ``(x, y)`` onto the cone ``(1-d) x <= y <= (1+d) x``."""
    inside = ((1 - delta) * x <= y) & (y <= (1 + delta) * x)
    best_x, best_y = x.copy(), y.copy()
    best_d = np.where(inside, 0.0, np.inf)
    for slope in (1 - delta, 1 + delta):
        n = math.hypot(1.0, slope)
        ux, uy = 1.0 / n, slope / n
        t = np.maximum(0.0, x * ux + y * uy)
        px, py = t * ux, t * uy
        dist = (px - x) ** 2 + (py - y) ** 2
        take = dist < best_d
        best_x = np.where(take, px, best_x)
        best_y = np.where(take, py, best_y)
        best_d = np.where(take, dist, best_d)
    return best_x, best_y


def project_feasible(point, feasible: FeasibleSet, tol: float = 1e-10, max_iter: int = 20000) -> np.ndarray:
    """Project onto the feasible polytope with Dykstra's alternating projections.

    The constraint families are (1) budget hyperplane with boxes, projected
    exactly as a capped simplex, (2) stability wedges between epochs (0,1),
    (2,3), ... and (3) wedges between epochs (1,2), (3,4), .... Families (2)
    and (3) act on disjoint coordinate pairs, so each projects in closed form.
    Feasible inputs are returned unchanged.

    Raises
    ------
    ProjectionDiverged
        ``max_iter`` cycles without reaching ``tol``.
    """
    S = np.array(point, dtype=float)
    if S.shape != feasible.shape:
        raise ShapeMismatch(f"point shape {S.shape} != feasible shape {feasible.shape}")
    if _is_feasible(S, feasible, tol):
        return S
    lo, hi = feasible.cell_bounds()

    def p_simplex(Z):
        return _project_capped_simplex(Z, lo, hi, feasible.b_tot).reshape(Z.shape)

    E = feasible.n_epochs
    if feasible.delta is None or E == 1:
        return p_simplex(S)

    d = feasible.delta

    def p_wedges(Z, start):
        out = Z.copy()
        rows = np.arange(start, E - 1, 2)
        if len(rows):
            out[rows], out[rows + 1] = _project_wedges(Z[rows], Z[rows + 1], d)
        return out

    projections = [lambda Z: p_wedges(Z, 0), lambda Z: p_wedges(Z, 1), p_simplex]
    increments = [np.zeros_like(S) for _ in projections]
    x = S
    for it in range(max_iter):
        for k, proj in enumerate(projections):
            z = x + increments[k]
            x = proj(z)
            increments[k] = z - x
        if _is_feasible(x, feasible, tol):
            return x
    v = constraint_violation(x, feasible)
    raise ProjectionDiverged(f"projection did not converge in {max_iter} cycles (violations {v})")


# --- objective ---------------------------------------------------------------------------

def _check_shape(models, spend) -> np.ndarray:
    S = np.asarray(spend, dtype=float)
    E = len(models)
    K = len(models[0]) if E else 0
    if S.shape != (E, K) or any(len(row) != K for row in models):
        raise ShapeMismatch(f"spend shape {S.shape} does not match models grid ({E}, {K})")
    return S


def plug_in_objective(models, spend) -> float:
    """Sum of fitted mean responses over every (epoch, asset) cell."""
    S = _check_shape(models, spend)
    if np.any(S < 0):
        raise ValueError("spend entries must be >= 0")
    return math.fsum(float(models[e][i].predict_mean(S[e, i])) for e in range(S.shape[0]) for i in range(S.shape[1]))


def _cell_values(models, S) -> np.ndarray:
    return np.array([[float(m.predict_mean(S[e, i])) for i, m in enumerate(row)] for e, row in enumerate(models)])


def _gradient(models, S) -> np.ndarray:
    return np.array([[float(m.predict_mean_grad(S[e, i])) for i, m in enumerate(row)] for e, row in enumerate(models)])


# --- solver ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    restarts: int = 16
    max_iter: int = 500
    step_fraction: float = 0.1
    stall_iters: int = 5
    rel_improve_tol: float = 1e-9
    projection_tol: float = 1e-10
    projection_max_iter: int = 20000
    # pairwise-exchange step sizes, as fractions of the mean cell budget
    polish_steps: tuple[float, ...] = (0.1, 0.03, 0.01, 0.003, 0.001, 1e-4)
    polish_max_moves: int = 2000
    seed: int = 0


@dataclass
class OracleSolution:
    spend: np.ndarray
    objective: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"spend": self.spend.tolist(), "objective": self.objective, "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleSolution":
        return cls(np.asarray(d["spend"], dtype=float), float(d["objective"]), dict(d["diagnostics"]))


def _ascend(models, x0, project, step0, config: SolverConfig):
    x = project(x0)
    f = plug_in_objective(models, x)
    t = step0
    t_min = step0 * 1e-9
    stall = 0
    iters = 0
    for iters in range(1, config.max_iter + 1):
        g = _gradient(models, x)
        gmax = float(np.max(np.abs(g)))
        if gmax == 0 or not math.isfinite(gmax):
            break
        direction = g / gmax
        t_try = min(2.0 * t, step0 * 1e3)
        accepted = False
        while t_try >= t_min:
            x_new = project(x + t_try * direction)
            f_new = plug_in_objective(models, x_new)
            if f_new > f:
                accepted = True
                break
            t_try /= 2.0
        if not accepted:
            break
        gain = f_new - f
        x, f, t = x_new, f_new, t_try
        if gain < config.rel_improve_tol * max(abs(f), 1e-300):
            stall += 1
            if stall >= config.stall_iters:
                break
        else:
            stall = 0
    return x, f, iters


def _local_stability_ok(S, e, i, feasible: FeasibleSet, slack: float) -> bool:
    d = feasible.delta
    if d is None:
        return True
    E = S.shape[0]
    for a, b in ((e - 1, e), (e, e + 1)):
        if a < 0 or b >= E:
            continue
        x, y = S[a, i], S[b, i]
        viol = max((1 - d) * x - y, y - (1 + d) * x, 0.0)
        if viol > slack * max(x, 1e-300) + 1e-300:
            return False
    return True


def _polish(models, S, feasible: FeasibleSet, config: SolverConfig, tol: float):
    """Greedy pairwise exchange: move mass ``h`` from one cell to another while it helps."""
    S = S.copy()
    E, K = S.shape
    n = E * K
    lo, hi = feasible.cell_bounds()
    lo, hi = lo.ravel(), hi.ravel()
    unit = feasible.b_tot / n
    vals = _cell_values(models, S).ravel()
    flat_models = [models[e][i] for e in range(E) for i in range(K)]
    moves = 0
    for frac in config.polish_steps:
        h = frac * unit
        if h <= 0:
            continue
        while moves < config.polish_max_moves:
            x = S.ravel()
            up = np.array([m.predict_mean(v + h) for m, v in zip(flat_models, x)]) - vals
            down = np.array([m.predict_mean(max(v - h, 0.0)) for m, v in zip(flat_models, x)]) - vals
            up[x + h > hi] = -np.inf
            down[x - h < lo] = -np.inf
            gain = up[:, None] + down[None, :]
            np.fill_diagonal(gain, -np.inf)
            order = np.argsort(-gain, axis=None, kind="stable")
            f_scale = max(1.0, float(np.abs(vals).sum()))
            moved = False
            for flat in order:
                g = gain.flat[flat]
                if not g > 1e-12 * f_scale:
                    break
                a, b = divmod(int(flat), n)
                T = S.copy()
                T.flat[a] += h
                T.flat[b] -= h
                ea, ia = divmod(a, K)
                eb, ib = divmod(b, K)
                if _local_stability_ok(T, ea, ia, feasible, tol) and _local_stability_ok(T, eb, ib, feasible, tol):
                    S = T
                    vals[a] += up[a]
                    vals[b] += down[b]
                    moves += 1
                    moved = True
                    break
            if not moved:
                break
    return S, moves


def _random_start(rng, feasible: FeasibleSet) -> np.ndarray:
    lo, hi = feasible.cell_bounds()
    w = rng.dirichlet(np.ones(lo.size)).reshape(lo.shape)
    return lo + w * max(feasible.b_tot - lo.sum(), 0.0)


def solve_oracle(models, feasible: FeasibleSet, config: SolverConfig = SolverConfig(),
                 reference: Optional[np.ndarray] = None,
                 extra_starts: Sequence[np.ndarray] = ()) -> OracleSolution:
    """Maximise the plug-in objective over ``feasible``.

    Multi-start projected gradient ascent (normalised gradient, backtracking
    step) followed by a pairwise-exchange polish of every start. Starts, in
    order: ``reference`` (the realized trajectory), the uniform split,
    ``extra_starts``, then seeded random points. Ties within 1e-12 go to the
    solution nearest ``reference``, then to the lowest start index.
    """
    E, K = feasible.shape
    if len(models) != E or any(len(row) != K for row in models):
        raise ShapeMismatch(f"models grid does not match feasible shape {feasible.shape}")
    rng = np.random.default_rng(config.seed)
    starts: list[np.ndarray] = []
    if reference is not None:
        starts.append(np.asarray(reference, dtype=float))
    starts.append(np.full((E, K), feasible.b_tot / (E * K)))
    starts.extend(np.asarray(s, dtype=float) for s in extra_starts)
    while len(starts) < config.restarts:
        starts.append(_random_start(rng, feasible))

    def project(Z):
        return project_feasible(np.maximum(Z, 0.0), feasible, config.projection_tol, config.projection_max_iter)

    step0 = config.step_fraction * feasible.b_tot / (E * K)
    ref = None if reference is None else np.asarray(reference, dtype=float)
    best = None
    total_iters = 0
    total_moves = 0
    for idx, x0 in enumerate(starts):
        x, f, iters = _ascend(models, x0, project, step0, config)
        x, moves = _polish(models, x, feasible, config, config.projection_tol)
        f = plug_in_objective(models, x)
        total_iters += iters
        total_moves += moves
        dist = 0.0 if ref is None else float(np.linalg.norm(x - ref))
        if best is None:
            best = (f, dist, idx, x)
            continue
        tie = abs(f - best[0]) <= 1e-12 * max(1.0, abs(best[0]))
        if (f > best[0] and not tie) or (tie and dist < best[1]):
            best = (f, dist, idx, x)

    f, _, idx, x = best
    viol = constraint_violation(x, feasible)
    return OracleSolution(
        spend=x,
        objective=f,
        diagnostics={
            "iterations": total_iters,
            "polish_moves": total_moves,
            "restarts": len(starts),
            "best_start": idx,
            "max_violation": max(viol.values()),
            "violations": viol,
            "delta": feasible.delta,
        },
    )


# --- brute force -------------------------------------------------------------------------

def brute_force_oracle(models, feasible: FeasibleSet, grid_points_per_cell: int) -> OracleSolution:
    """Exhaustive grid search, used to validate :func:`solve_oracle`.

    Grid points within half a grid cell times ``E*K`` of the budget that meet
    the stability constraints are rescaled multiplicatively onto the budget
    (which preserves the ratio constraints) and scored exactly.
    """
    E, K = feasible.shape
    n = E * K
    G = int(grid_points_per_cell)
    if len(models) != E or any(len(row) != K for row in models):
        raise ShapeMismatch(f"models grid does not match feasible shape {feasible.shape}")
    if n > BRUTE_FORCE_MAX_CELLS or G ** n > BRUTE_FORCE_MAX_POINTS:
        raise TooLarge(f"{G}^{n} grid points exceeds the enumeration guard")
    if G < 2:
        raise ValueError("grid_points_per_cell must be >= 2")
    lo, hi = feasible.cell_bounds()
    grids = [np.linspace(lo.flat[c], hi.flat[c], G) for c in range(n)]
    spacing = max(float(g[1] - g[0]) for g in grids)
    sum_tol = 0.5 * spacing * n + 1e-12 * max(1.0, feasible.b_tot)
    flat_models = [models[e][i] for e in range(E) for i in range(K)]
    d = feasible.delta

    # vectorise over the trailing cells, loop over the leading ones
    n_vec = n
    while n_vec > 1 and G ** n_vec > 2_000_000:
        n_vec -= 1
    n_loop = n - n_vec
    tail = np.stack(np.meshgrid(*grids[n_loop:], indexing="ij"), axis=-1).reshape(-1, n_vec)

    best_f, best_x, evaluated = -math.inf, None, 0
    for head in itertools.product(*[range(G)] * n_loop):
        head_vals = np.array([grids[c][j] for c, j in enumerate(head)])
        X = np.concatenate([np.broadcast_to(head_vals, (len(tail), n_loop)), tail], axis=1)
        tot = X.sum(axis=1)
        keep = np.abs(tot - feasible.b_tot) <= sum_tol
        if d is not None and E > 1:
            S = X.reshape(-1, E, K)
            prev, nxt = S[:, :-1, :], S[:, 1:, :]
            ok = ((1 - d) * prev <= nxt + 1e-12) & (nxt <= (1 + d) * prev + 1e-12)
            keep &= ok.reshape(len(X), -1).all(axis=1)
        X, tot = X[keep], tot[keep]
        if feasible.b_tot > 0:
            pos = tot > 0
            X, tot = X[pos], tot[pos]
            X = X * (feasible.b_tot / tot)[:, None]
        box_tol = 1e-9
        inside = np.all((X >= lo.ravel() - box_tol) & (X <= hi.ravel() + box_tol), axis=1)
        X = X[inside]
        if not len(X):
            continue
        X = np.clip(X, lo.ravel(), hi.ravel())
        f = np.zeros(len(X))
        for c, m in enumerate(flat_models):
            f += np.asarray(m.predict_mean(X[:, c]), dtype=float)
        evaluated += len(X)
        j = int(np.argmax(f))
        if f[j] > best_f:
            best_f, best_x = float(f[j]), X[j].copy()
    if best_x is None:
        raise EmptyFeasibleGrid("no grid point satisfies the budget and stability constraints")
    S = best_x.reshape(E, K)
    return OracleSolution(
        spend=S,
        objective=plug_in_objective(models, S),
        diagnostics={"grid_points_per_cell": G, "evaluated": evaluated,
                     "violations": constraint_violation(S, feasible), "delta": d},
    )


# --- sweep -------------------------------------------------------------------------------

def level_label(delta: Optional[float]) -> str:
    return "unconstrained" if delta is None else format(delta, "g")


def oracle_sweep(models, base: FeasibleSet, delta_grid: Sequence[Optional[float]],
                 config: SolverConfig = SolverConfig(),
                 reference: Optional[np.ndarray] = None) -> dict:
    """Solve every level of ``delta_grid`` (``None`` = unconstrained).

    Levels are solved in increasing order of flexibility and each solution is
    passed on as an extra start for the next, looser level (it is feasible
    there), so plug-in objectives are non-decreasing across the sweep. A
    failing level maps to its exception; the sweep continues.
    """
    if not delta_grid:
        raise ValueError("delta grid is empty")
    finite = [d for d in delta_grid if d is not None]
    if finite != sorted(finite) or len(set(finite)) != len(finite):
        raise ValueError("delta grid must be sorted ascending without duplicates")
    ordered = finite + ([None] if None in delta_grid else [])
    out: dict = {}
    carry: list[np.ndarray] = []
    for delta in ordered:
        try:
            sol = solve_oracle(models, base.with_delta(delta), config, reference, extra_starts=carry[-1:])
            out[delta] = sol
            carry.append(sol.spend)
        except AuditError as exc:
            out[delta] = exc
    return out
