"""Covariance matrix adaptation evolution strategy over the unit box.

A (mu/mu_w, lambda) CMA-ES specialised to the needs of per-pixel spectral
fitting: box constraints handled by coordinate clamping of candidates,
termination on a target cost, strict evaluation budget, and full
determinism given a seed (so reconstructions can be replayed bit-exactly
regardless of how pixels are distributed over workers).

The cost callable receives a (P, n) batch of candidates and returns (P,)
costs; every generation is a single batched call, which keeps the numpy
overhead per evaluation small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError


def default_population(n: int) -> int:
    return 4 + int(3 * math.log(n))


@dataclass
class CmaesConfig:
    population: int | None = None  # None -> 4 + floor(3 ln n)
    sigma0: float = 0.15
    max_evals: int = 4000
    seed: int = 0
    # give up early when the best cost stops improving; the smoothness term
    # often pins a pixel well above its tolerance and polishing is wasted
    stagnation_gens: int = 20
    stagnation_rel: float = 1e-3

    def __post_init__(self):
        if self.population is not None and self.population < 4:
            raise ContractViolationError("population must be >= 4")
        if self.sigma0 <= 0:
            raise ContractViolationError("sigma0 must be positive")
        if self.max_evals < 1:
            raise ContractViolationError("max_evals must be >= 1")
        if self.stagnation_gens < 1:
            raise ContractViolationError("stagnation_gens must be >= 1")

    def to_dict(self) -> dict:
        return {
            "population": self.population,
            "sigma0": self.sigma0,
            "max_evals": self.max_evals,
            "seed": self.seed,
            "stagnation_gens": self.stagnation_gens,
            "stagnation_rel": self.stagnation_rel,
        }


@dataclass
class CmaesResult:
    x: np.ndarray
    cost: float
    evaluations: int
    converged: bool  # True when cost <= tolerance was reached


def cma_es_minimize(
    cost,
    x0: np.ndarray,
    config: CmaesConfig,
    tolerance: float,
    rng: np.random.Generator | None = None,
) -> CmaesResult:
    """Minimize a batched cost function over [0, 1]^n down to `tolerance`.

    `cost` maps a (P, n) float array of candidates (already clamped to the
    box) to a (P,) array of costs. Returns the best candidate found; the
    caller decides what to do when the budget runs out unconverged.
    """
    if tolerance <= 0:
        raise ContractViolationError("tolerance must be positive")
    if rng is None:
        rng = np.random.default_rng(config.seed)

    x0 = np.clip(np.asarray(x0, dtype=float), 0.0, 1.0)
    n = x0.size
    lam = config.population or default_population(n)
    mu = lam // 2

    raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    weights = raw / raw.sum()
    mueff = 1.0 / float(weights @ weights)

    cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n)
    cs = (mueff + 2) / (n + mueff + 5)
    c1 = 2 / ((n + 1.3) ** 2 + mueff)
    cmu = min(1 - c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
    damps = 1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + cs
    chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))

    mean = x0.copy()
    sigma = config.sigma0
    cov = np.eye(n)
    b_mat = np.eye(n)
    d_vec = np.ones(n)
    inv_sqrt = np.eye(n)
    pc = np.zeros(n)
    ps = np.zeros(n)

    best_x = x0.copy()
    best_f = float(cost(x0[None, :])[0])
    if not np.isfinite(best_f):
        best_f = np.inf
    evals = 1
    if best_f <= tolerance:
        return CmaesResult(best_x, best_f, evals, True)

    # re-decompose the covariance only every few generations
    eig_interval = max(1, int(lam / ((c1 + cmu) * n * 10)))
    gen = 0
    stall_ref = best_f
    stall_gen = 0
    while evals + lam <= config.max_evals:
        gen += 1
        z = rng.standard_normal((lam, n))
        y = z * d_vec[None, :] @ b_mat.T
        x = np.clip(mean[None, :] + sigma * y, 0.0, 1.0)
        f = np.asarray(cost(x), dtype=float)
        f = np.where(np.isfinite(f), f, np.inf)
        evals += lam

        order = np.argsort(f, kind="stable")
        if f[order[0]] < best_f:
            best_f = float(f[order[0]])
            best_x = x[order[0]].copy()
            if best_f <= tolerance:
                return CmaesResult(best_x, best_f, evals, True)

        if gen - stall_gen >= config.stagnation_gens:
            if stall_ref - best_f <= config.stagnation_rel * max(abs(best_f), 1e-12):
                break
            stall_ref = best_f
            stall_gen = gen

        # recombination on the repaired (clamped) candidates
        y_sel = (x[order[:mu]] - mean[None, :]) / sigma
        y_w = weights @ y_sel
        mean = mean + sigma * y_w

        ps = (1 - cs) * ps + math.sqrt(cs * (2 - cs) * mueff) * (inv_sqrt @ y_w)
        ps_norm = float(np.linalg.norm(ps))
        sigma *= math.exp((cs / damps) * (ps_norm / chi_n - 1))

        hsig = ps_norm / math.sqrt(1 - (1 - cs) ** (2 * gen)) / chi_n < 1.4 + 2 / (n + 1)
        pc = (1 - cc) * pc + (math.sqrt(cc * (2 - cc) * mueff) * y_w if hsig else 0.0)

        rank_mu = y_sel.T @ (weights[:, None] * y_sel)
        cov = (
            (1 - c1 - cmu) * cov
            + c1 * (np.outer(pc, pc) + (0.0 if hsig else cc * (2 - cc)) * cov)
            + cmu * rank_mu
        )

        if gen % eig_interval == 0:
            cov = (cov + cov.T) / 2
            try:
                eigvals, b_mat = np.linalg.eigh(cov)
            except np.linalg.LinAlgError:
                break
            eigvals = np.maximum(eigvals, 1e-20)
            d_vec = np.sqrt(eigvals)
            inv_sqrt = (b_mat / d_vec[None, :]) @ b_mat.T
            if d_vec.max() / d_vec.min() > 1e7:
                break  # degenerate search distribution; keep best found

        if not np.isfinite(sigma) or sigma < 1e-12 or sigma > 1e6:
            break

    return CmaesResult(best_x, best_f, evals, best_f <= tolerance)
