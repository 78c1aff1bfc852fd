import numpy as np
import pytest

from brightspec.cmaes import CmaesConfig, cma_es_minimize, default_population
from brightspec.errors import ContractViolationError


def sphere_around(center):
    c = np.asarray(center)
    return lambda x: np.sum((x - c[None, :]) ** 2, axis=1)


class TestCmaes:
    def test_sphere_converges_from_center(self):
        n = 48
        cost = sphere_around(np.full(n, 0.35))
        res = cma_es_minimize(
            cost, np.full(n, 0.5), CmaesConfig(seed=1, max_evals=20_000), tolerance=1e-8
        )
        assert res.converged
        assert res.cost <= 1e-8
        assert np.allclose(res.x, 0.35, atol=1e-3)

    def test_candidates_stay_in_box(self):
        seen = []

        def cost(x):
            seen.append(x.copy())
            return np.sum((x - 1.5) ** 2, axis=1)  # optimum outside the box

        res = cma_es_minimize(
            cost, np.full(8, 0.5), CmaesConfig(seed=3, max_evals=2000), tolerance=1e-12
        )
        allx = np.concatenate([np.atleast_2d(s) for s in seen])
        assert np.all(allx >= 0.0) and np.all(allx <= 1.0)
        # best achievable point is the box corner
        assert not res.converged
        assert np.allclose(res.x, 1.0, atol=5e-2)

    def test_same_seed_bitwise_identical(self):
        n = 24
        cost = sphere_around(np.linspace(0.2, 0.8, n))
        cfg = CmaesConfig(seed=42, max_evals=5000)
        r1 = cma_es_minimize(cost, np.full(n, 0.5), cfg, tolerance=1e-9)
        r2 = cma_es_minimize(cost, np.full(n, 0.5), cfg, tolerance=1e-9)
        assert r1.cost == r2.cost
        assert r1.evaluations == r2.evaluations
        assert np.array_equal(r1.x, r2.x)

    def test_tolerance_at_start_short_circuits(self):
        cost = sphere_around(np.full(6, 0.5))
        res = cma_es_minimize(cost, np.full(6, 0.5), CmaesConfig(seed=0), tolerance=1e-6)
        assert res.converged and res.evaluations == 1

    def test_budget_exhaustion_flagged(self):
        n = 16
        cost = sphere_around(np.full(n, 0.9))
        res = cma_es_minimize(
            cost, np.full(n, 0.1), CmaesConfig(seed=5, max_evals=40), tolerance=1e-12
        )
        assert not res.converged
        assert res.evaluations <= 40

    def test_default_population_matches_dimension_rule(self):
        assert default_population(48) == 4 + int(3 * np.log(48))

    def test_bad_config_rejected(self):
        with pytest.raises(ContractViolationError):
            CmaesConfig(population=2)
        with pytest.raises(ContractViolationError):
            CmaesConfig(sigma0=0.0)
        with pytest.raises(ContractViolationError):
            cma_es_minimize(
                sphere_around(np.zeros(4)), np.zeros(4), CmaesConfig(), tolerance=0.0
            )

    def test_rastrigin_multimodal_reasonable(self):
        # global structure check on a rugged function (optimum at 0.5^n)
        n = 10

        def cost(x):
            z = 6.0 * (x - 0.5)
            return 10 * n + np.sum(z**2 - 10 * np.cos(2 * np.pi * z), axis=1)

        res = cma_es_minimize(
            cost,
            np.full(n, 0.4),
            CmaesConfig(seed=9, population=40, max_evals=30_000),
            tolerance=1e-6,
        )
        assert res.cost < 5.0  # near a good basin, not stuck far away
