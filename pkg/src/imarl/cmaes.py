"""Covariance matrix adaptation evolution strategy for black-box tuning.

Minimal (mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance
updates and cumulative step-size adaptation, following the standard
parameter settings. Written for small search spaces (the swarm tuning
problem is 3-dimensional); maximization is the native orientation here
since the consumer maximizes time-averaged rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def default_population(dim: int) -> int:
    return 4 + int(3 * math.log(dim))


@dataclass
class CmaesState:
    mean: np.ndarray
    step_size: float
    covariance: np.ndarray
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    population: int = 0

    @classmethod
    def initial(cls, x0, sigma0: float, population: int | None = None) -> "CmaesState":
        x0 = np.asarray(x0, dtype=float)
        n = x0.size
        lam = population or default_population(n)
        return cls(
            mean=x0.copy(),
            step_size=float(sigma0),
            covariance=np.eye(n),
            p_sigma=np.zeros(n),
            p_c=np.zeros(n),
            generation=0,
            population=lam,
        )


class _Weights:
    """Recombination weights and learning rates for dimension n, population lam."""

    def __init__(self, n: int, lam: int):
        mu = lam // 2
        w = np.log(lam / 2.0 + 0.5) - np.log(np.arange(1, mu + 1))
        w /= w.sum()
        mu_eff = 1.0 / np.sum(w**2)
        self.mu = mu
        self.weights = w
        self.mu_eff = mu_eff
        self.c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0)
        self.d_sigma = 1.0 + 2.0 * max(0.0, math.sqrt((mu_eff - 1.0) / (n + 1.0)) - 1.0) + self.c_sigma
        self.c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n)
        self.c_1 = 2.0 / ((n + 1.3) ** 2 + mu_eff)
        self.c_mu = min(1.0 - self.c_1, 2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0) ** 2 + mu_eff))
        self.chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n**2))


def _sample_population(state: CmaesState, rng: np.random.Generator):
    n = state.mean.size
    vals, vecs = np.linalg.eigh(state.covariance)
    vals = np.maximum(vals, 1e-20)
    sqrt_c = vecs @ np.diag(np.sqrt(vals)) @ vecs.T
    inv_sqrt_c = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    z = rng.normal(size=(state.population, n))
    y = z @ sqrt_c.T
    x = state.mean + state.step_size * y
    return x, y, inv_sqrt_c


def _update(state: CmaesState, w: _Weights, y: np.ndarray, order: np.ndarray, inv_sqrt_c: np.ndarray):
    n = state.mean.size
    y_sel = y[order[: w.mu]]
    y_w = w.weights @ y_sel
    state.mean = state.mean + state.step_size * y_w

    state.p_sigma = (1.0 - w.c_sigma) * state.p_sigma + math.sqrt(
        w.c_sigma * (2.0 - w.c_sigma) * w.mu_eff
    ) * (inv_sqrt_c @ y_w)
    ps_norm = np.linalg.norm(state.p_sigma)
    state.step_size *= math.exp((w.c_sigma / w.d_sigma) * (ps_norm / w.chi_n - 1.0))

    h_sigma = 1.0 if ps_norm / math.sqrt(
        1.0 - (1.0 - w.c_sigma) ** (2 * (state.generation + 1))
    ) < (1.4 + 2.0 / (n + 1.0)) * w.chi_n else 0.0
    state.p_c = (1.0 - w.c_c) * state.p_c + h_sigma * math.sqrt(w.c_c * (2.0 - w.c_c) * w.mu_eff) * y_w

    rank_mu = (y_sel * w.weights[:, None]).T @ y_sel
    delta_h = (1.0 - h_sigma) * w.c_c * (2.0 - w.c_c)
    state.covariance = (
        (1.0 - w.c_1 - w.c_mu) * state.covariance
        + w.c_1 * (np.outer(state.p_c, state.p_c) + delta_h * state.covariance)
        + w.c_mu * rank_mu
    )
    state.covariance = 0.5 * (state.covariance + state.covariance.T)
    state.generation += 1


def cmaes_optimize(
    objective,
    x0,
    sigma0: float,
    budget: int,
    rng: np.random.Generator,
    population: int | None = None,
    callback=None,
    objective_batch=None,
):
    """Maximize `objective` over R^n within `budget` evaluations.

    Returns (best_x, best_value, history) where history holds one record
    per generation: (generation, best_value_so_far, mean_value, step_size).
    The best-so-far point is tracked over every evaluated candidate, so a
    budget that runs out mid-search still returns the best seen.
    `objective_batch`, when given, evaluates a whole population at once
    (e.g. on a worker pool) and takes precedence over `objective`.
    """
    state = CmaesState.initial(x0, sigma0, population)
    w = _Weights(state.mean.size, state.population)
    best_x = state.mean.copy()
    best_val = -np.inf
    evals = 0
    history = []
    while evals < budget:
        x, y, inv_sqrt_c = _sample_population(state, rng)
        if objective_batch is not None:
            values = np.asarray(objective_batch(list(x)), dtype=float)
        else:
            values = np.array([objective(xi) for xi in x])
        evals += state.population
        gen_best = int(np.argmax(values))
        if values[gen_best] > best_val:
            best_val = float(values[gen_best])
            best_x = x[gen_best].copy()
        order = np.argsort(-values)  # maximization: best first
        _update(state, w, y, order, inv_sqrt_c)
        record = (state.generation, best_val, float(values.mean()), state.step_size)
        history.append(record)
        if callback is not None:
            callback(state, record)
    return best_x, best_val, history
