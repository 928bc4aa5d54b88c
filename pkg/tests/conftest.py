import numpy as np
import pytest

from regret_audit.greybox import FitConfig, fit_log_models
from regret_audit.synthbench import LoggingPolicy, generate_world, oracle_allocation, simulate_log


class QuadModel:
    """Concave closed-form response ``c*s - 0.5*k*s^2`` with fixed noise levels."""

    def __init__(self, c, k, sd=0.0, epi=0.0):
        self.c, self.k, self.sd, self.epi = c, k, sd, epi

    def predict_mean(self, s):
        s = np.asarray(s, dtype=float)
        return (self.c * s - 0.5 * self.k * s * s)[()]

    def predict_mean_grad(self, s):
        return (self.c - self.k * np.asarray(s, dtype=float))[()]

    def predict_epistemic_var(self, s):
        return np.full(np.shape(s), self.epi ** 2)[()]

    def predict_outcome_sd(self, s):
        return np.full(np.shape(s), self.sd)[()]


def fitted_world_models(K, E, seed, n_obs=10, noise=1.0, budget_per_cell=10.0, drift=5.0):
    """Fitted models plus realized spend for a small synthetic world."""
    world = generate_world(K, E, drift_bound=drift, noise=(noise, 0.0), seed=seed)
    real = oracle_allocation(world, budget_per_cell * K * E)
    rng = np.random.default_rng(seed)
    real = real * rng.uniform(0.6, 1.4, size=real.shape)
    log = simulate_log(world, LoggingPolicy.around(real, 1.0, n_obs), seed)
    return world, log, fit_log_models(log, FitConfig(seed=seed))


@pytest.fixture(scope="session")
def small_fitted():
    return fitted_world_models(2, 2, seed=7)
