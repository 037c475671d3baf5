import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize

from flowattn import flowsolve as fs
from flowattn import matcore
from flowattn.matcore import DomainError, ShapeError


def random_problem(rng, n, lambda_star=1.0, alpha=0.1, sharp=1.0):
    R = matcore.row_softmax(rng.standard_normal((n, n)), sharp)
    F = matcore.row_softmax(rng.standard_normal((n, n)), sharp)
    return fs.FlowProblem(R, F, fs.effective_lambda(lambda_star, n), alpha)


# -- closed forms --------------------------------------------------------------------

def test_dense_closed_form_examples():
    Z = fs.dense_closed_form(np.full((3, 3), 1 / 3))
    assert np.allclose(Z, 1 / 3, atol=1e-15)
    assert np.allclose(fs.dense_closed_form([[0.25, 0.75]]), [[0.75, 0.25]], atol=1e-15)
    with pytest.raises(DomainError):
        fs.dense_closed_form([[0.0, 1.0]])


def test_dense_closed_form_recovers_softmax():
    rng = matcore.seeded_rng(0)
    for _ in range(50):
        n, dk = rng.integers(1, 20), rng.integers(1, 8)
        Q, K = rng.standard_normal((n, dk)), rng.standard_normal((n, dk))
        S = Q @ K.T
        R = matcore.row_softmax(S, -1 / math.sqrt(dk))
        assert np.max(np.abs(fs.dense_closed_form(R) - matcore.row_softmax(S, 1 / math.sqrt(dk)))) <= 1e-12


def test_energy_dense():
    assert fs.energy_dense(np.ones((3, 3)), np.zeros((3, 3))) == 0.0
    assert fs.energy_dense([[1.0]], [[1.0]]) == 0.5
    rng = matcore.seeded_rng(1)
    R, Z = rng.random((6, 6)), rng.standard_normal((6, 6))
    oracle = sum(0.5 * R[i, j] * Z[i, j] ** 2 for i in range(6) for j in range(6))
    assert abs(fs.energy_dense(R, Z) - oracle) <= 1e-12
    with pytest.raises(ShapeError):
        fs.energy_dense(R, Z[:, :5])


def test_penalized_objective():
    rng = matcore.seeded_rng(2)
    p = random_problem(rng, 5, lambda_star=0.0)
    Z = fs.dense_closed_form(p.R)
    assert abs(fs.penalized_objective(p, Z) - fs.energy_dense(p.R, Z)) <= 1e-15
    p2 = fs.FlowProblem(np.full((2, 2), 0.5), np.ones((2, 2)), 0.3, 0.7)
    assert fs.penalized_objective(p2, np.zeros((2, 2))) == pytest.approx(0.7, abs=1e-15)
    p3 = random_problem(rng, 6, lambda_star=2.0, alpha=0.4)
    Z = rng.standard_normal((6, 6))
    e = 0.5 * np.sum(p3.R * Z * Z)
    pen = 0.5 * p3.alpha * np.sum((Z.sum(axis=1) - 1) ** 2)
    l1 = p3.lam * np.sum(np.abs(p3.F * Z))
    assert abs(fs.penalized_objective(p3, Z) - (e + pen + l1)) <= 1e-12


def test_grad_smooth():
    rng = matcore.seeded_rng(3)
    p = random_problem(rng, 4)
    Z = fs.dense_closed_form(p.R)
    assert np.allclose(fs.grad_smooth(p, Z), p.R * Z, atol=1e-15)
    assert np.array_equal(fs.grad_smooth(p, np.zeros((4, 4))), -p.alpha * np.ones((4, 4)))
    Z = rng.standard_normal((4, 4))
    h, H = 1e-6, lambda M: fs.energy_dense(p.R, M) + 0.5 * p.alpha * np.sum((M.sum(axis=1) - 1) ** 2)
    num = np.zeros_like(Z)
    for i in range(4):
        for j in range(4):
            E = np.zeros_like(Z)
            E[i, j] = h
            num[i, j] = (H(Z + E) - H(Z - E)) / (2 * h)
    assert np.max(np.abs(num - fs.grad_smooth(p, Z))) <= 1e-6


def test_closed_form_of_penalized_quadratic_by_brute_force():
    # z_ij = (alpha / (1 + alpha T_i)) / R_ij minimises H at lambda = 0
    rng = matcore.seeded_rng(4)
    for alpha in (0.1, 1.0, 10.0):
        for _ in range(5):
            R = matcore.row_softmax(rng.standard_normal((3, 3)))
            H = lambda z: (0.5 * np.sum(R * z.reshape(3, 3) ** 2)
                           + 0.5 * alpha * np.sum((z.reshape(3, 3).sum(axis=1) - 1) ** 2))
            res = minimize(H, np.zeros(9), method="BFGS", options={"gtol": 1e-12})
            assert np.max(np.abs(res.x.reshape(3, 3) - fs.penalized_closed_form(R, alpha))) <= 1e-6


# -- steps ----------------------------------------------------------------------------

def test_safe_step():
    assert fs.safe_step(0.1, 4) == pytest.approx(1 / 1.2, abs=1e-15)
    assert fs.safe_step(1e-12, 9) == pytest.approx(1.0, abs=1e-10)
    with pytest.raises(DomainError):
        fs.safe_step(0.0, 3)


def test_guaranteed_step_bounds_the_lipschitz_constant():
    rng = matcore.seeded_rng(5)
    for alpha in (0.1, 10.0, 1000.0):
        p = random_problem(rng, 7, alpha=alpha)
        L = max(np.linalg.eigvalsh(np.diag(p.R[i]) + alpha * np.ones((7, 7))).max() for i in range(7))
        assert fs.lipschitz_bound(p.R, alpha) >= L - 1e-9
        assert fs.guaranteed_step(p.R, alpha) <= 1 / L + 1e-15


def test_bb_step():
    A = np.array([[1.0, -2.0]])
    assert fs.bb_step(A, A, 2.0) == pytest.approx(1.0, abs=1e-15)
    assert fs.bb_step(A, np.zeros_like(A), 0.3) == 0.3
    assert fs.bb_step(A, -A, 0.3) == 0.3
    r, dz = 2.5, np.array([[0.7]])
    assert fs.bb_step(dz, r * dz, 10.0) == pytest.approx(1 / r, rel=1e-15)
    assert fs.bb_step(dz, r * dz, 0.1) == 0.1
    assert fs.bb_step(dz, r * dz, 0.1, clamp=False) == pytest.approx(1 / r, rel=1e-15)
    with pytest.raises(ShapeError):
        fs.bb_step(A, np.ones((2, 2)), 1.0)


def test_prox_iterate_examples():
    rng = matcore.seeded_rng(6)
    p = random_problem(rng, 4, lambda_star=0.0)
    Z = rng.random((4, 4))
    assert np.allclose(fs.prox_iterate(p, Z, 0.3), Z - 0.3 * fs.grad_smooth(p, Z), atol=1e-15)
    assert np.array_equal(fs.prox_iterate(p, Z, 0.0), Z)
    p1 = fs.FlowProblem([[1.0]], [[1.0]], 1.0, 1.0)
    assert fs.prox_iterate(p1, [[0.0]], 0.5)[0, 0] == 0.0


def test_penalty_prox_optimality():
    rng = matcore.seeded_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 10))
        p = random_problem(rng, n, lambda_star=float(rng.choice([0, 1, 5])), alpha=float(rng.choice([0.1, 10, 1000])))
        V, t = rng.standard_normal((n, n)) * 0.3, float(rng.uniform(0.01, 2))
        Z = fs.penalty_prox(p, V, t)
        u = t * p.alpha * (Z.sum(axis=1, keepdims=True) - 1)
        # recovering u multiplies the rounding error of the row sum by t * alpha
        tol = 1e-13 + 1e-15 * t * p.alpha
        assert np.max(np.abs(Z - matcore.soft_threshold(V - u, t * p.lam * p.F))) <= tol


# -- oracles ----------------------------------------------------------------------------

def test_dual_bisection_examples():
    r = np.array([0.2, 0.3, 0.5])
    z, mu = fs.dual_bisection_row(r, np.zeros(3), 0.0)
    assert np.allclose(z, (1 / r) / np.sum(1 / r), atol=1e-12)
    assert mu == pytest.approx(1 / np.sum(1 / r), abs=1e-12)
    z, mu = fs.dual_bisection_row([1.0, 3.0], [0.0, 0.0], 0.0)
    assert np.allclose(z, [0.75, 0.25], atol=1e-12) and mu == pytest.approx(0.75, abs=1e-12)
    z, mu = fs.dual_bisection_row([1.0, 1.0], [0.1, 1.0], 2.0)
    assert np.allclose(z, [1.0, 0.0], atol=1e-12) and mu == pytest.approx(1.2, abs=1e-12)
    for lam in (0.0, 0.5, 3.0):
        z, _ = fs.dual_bisection_row([1.0, 1.0], [1.0, 1.0], lam)
        assert np.allclose(z, [0.5, 0.5], atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.floats(0, 10))
def test_dual_bisection_feasible_nonnegative(seed, n, lam):
    rng = matcore.seeded_rng(seed)
    r = rng.uniform(0.01, 1.0, n)
    f = rng.uniform(0.0, 1.0, n)
    z, mu = fs.dual_bisection_row(r, f, lam)
    assert np.all(z >= 0)
    assert abs(z.sum() - 1) <= 1e-10


def test_kkt_check_examples():
    rng = matcore.seeded_rng(8)
    p = random_problem(rng, 5, lambda_star=0.0)
    Z = fs.dense_closed_form(p.R)
    mu = 1 / np.sum(1 / p.R, axis=1)
    assert fs.kkt_check(p, Z, mu=mu).kkt_residual <= 1e-9
    sol = fs.solve(p)
    assert sol.converged and fs.kkt_check(p, sol.Z).kkt_residual <= fs.SolverConfig().tol
    q = fs.FlowProblem([[0.6, 0.4]], [[0.0, 0.0]], 0.0, 0.1)
    Z, mu = fs.dual_oracle(q)
    Zp = Z.copy()
    Zp[0, 0] += 0.1
    assert fs.kkt_check(q, Zp, mu=mu).kkt_residual >= 0.05


# -- solver -------------------------------------------------------------------------------

def test_solve_lambda_zero_matches_closed_forms():
    rng = matcore.seeded_rng(9)
    for n in (1, 3, 8, 16):
        p = random_problem(rng, n, lambda_star=0.0, alpha=0.1)
        sol = fs.solve(p, fs.SolverConfig(tol=1e-10))
        assert sol.converged
        assert np.max(np.abs(sol.Z - fs.penalized_closed_form(p.R, p.alpha))) <= 1e-6
        Zn = sol.Z / sol.Z.sum(axis=1, keepdims=True)
        assert np.max(np.abs(Zn - fs.dense_closed_form(p.R))) <= 1e-6


def test_solve_hand_kkt_instance():
    p = fs.FlowProblem([[1.0, 1.0]], [[0.1, 1.0]], 2.0, 100.0)
    sol = fs.solve(p)
    assert sol.converged and sol.kkt_residual <= 1e-8
    assert np.max(np.abs(sol.Z - [[1.0, 0.0]])) <= 5e-2


@pytest.mark.parametrize("splitting", fs.SPLITTINGS)
def test_solution_invariants(splitting):
    rng = matcore.seeded_rng(10)
    for _ in range(10):
        p = random_problem(rng, int(rng.integers(2, 12)), lambda_star=1.0, alpha=0.1)
        cfg = fs.SolverConfig(splitting=splitting)
        sol = fs.solve(p, cfg, rng=matcore.seeded_rng(1))
        assert abs(sol.objective - fs.penalized_objective(p, sol.Z)) <= 1e-10
        assert sol.converged and sol.kkt_residual <= cfg.tol
        assert sol.feas_residual <= 10 / p.alpha


def test_splittings_and_exact_agree():
    rng = matcore.seeded_rng(11)
    for _ in range(10):
        p = random_problem(rng, 9, lambda_star=2.0, alpha=0.1)
        a = fs.solve(p, fs.SolverConfig(splitting="prox", tol=1e-10)).Z
        b = fs.solve(p, fs.SolverConfig(splitting="smooth", tol=1e-10)).Z
        c = fs.penalized_exact(p)
        assert np.max(np.abs(a - b)) <= 1e-6
        assert np.max(np.abs(a - c)) <= 1e-6
        assert fs.kkt_check(p, c).kkt_residual <= 1e-12


def test_exact_method_reports_convergence():
    p = random_problem(matcore.seeded_rng(12), 6)
    sol = fs.solve(p, fs.SolverConfig(method="exact"))
    assert sol.iterations == 0 and sol.converged


def test_first_step_is_the_safe_step():
    p = random_problem(matcore.seeded_rng(13), 6, alpha=0.1)
    sol = fs.solve(p, fs.SolverConfig(splitting="smooth"))
    assert sol.steps[0] == fs.guaranteed_step(p.R, p.alpha)


def test_max_iter_reports_nonconvergence():
    p = random_problem(matcore.seeded_rng(14), 8)
    sol = fs.solve(p, fs.SolverConfig(max_iter=1))
    assert not sol.converged and sol.iterations == 1


def test_invalid_problem_and_config():
    with pytest.raises(DomainError):
        fs.FlowProblem([[0.0, 1.0]], [[0.0, 0.0]], 0.0, 1.0).validate()
    with pytest.raises(DomainError):
        fs.FlowProblem([[0.5, 0.5]], [[-1.0, 0.0]], 0.0, 1.0).validate()
    with pytest.raises(DomainError):
        fs.FlowProblem([[0.2, 0.2]], [[0.0, 0.0]], 0.0, 1.0).validate()
    with pytest.raises(ShapeError):
        fs.FlowProblem([[0.5, 0.5]], [[0.0]], 0.0, 1.0).validate()
    for bad in ({"max_iter": 0}, {"tol": 0.0}, {"step_policy": "x"}, {"splitting": "x"}, {"method": "x"}):
        with pytest.raises(ValueError):
            fs.SolverConfig(**bad)


def test_descent_with_fixed_safe_step():
    rng = matcore.seeded_rng(15)
    for _ in range(100):
        n = int(rng.integers(1, 17))
        p = random_problem(rng, n, lambda_star=float(rng.choice([0, 0.5, 1, 2, 5])), alpha=0.1)
        cfg = fs.SolverConfig(step_policy="fixed", step=fs.safe_step(p.alpha, n), splitting="smooth",
                              max_iter=300)
        objs = fs.solve(p, cfg, rng=rng).objectives
        assert np.all(np.diff(objs) <= 1e-12)


def test_gradient_mapping_decreases_along_safe_steps():
    rng = matcore.seeded_rng(16)
    for _ in range(10):
        n = int(rng.integers(2, 12))
        p = random_problem(rng, n, lambda_star=1.0, alpha=0.1)
        t = fs.safe_step(p.alpha, n)
        Z = fs.initial_flows(rng, n, n)
        norms = []
        for _ in range(50):
            norms.append(fs.gradient_mapping_norm(p, Z, t))
            Z = fs.prox_iterate(p, Z, t)
        assert np.all(np.diff(norms) <= 1e-12) and norms[-1] < norms[0]


def test_gradient_mapping_zero_at_optimum():
    rng = matcore.seeded_rng(17)
    p = random_problem(rng, 6, lambda_star=0.0, alpha=0.1)
    assert fs.gradient_mapping_norm(p, fs.penalized_closed_form(p.R, p.alpha), 0.5) <= 1e-8
    q = random_problem(rng, 6, lambda_star=2.0, alpha=0.1)
    assert fs.gradient_mapping_norm(q, fs.penalized_exact(q), 0.5) <= 1e-9


def test_oracle_agreement_improves_with_alpha():
    rng = matcore.seeded_rng(18)
    for _ in range(5):
        n = int(rng.integers(2, 17))
        R = matcore.row_softmax(rng.standard_normal((n, n)))
        F = matcore.row_softmax(rng.standard_normal((n, n)))
        lam = fs.effective_lambda(1.0, n)
        Zo, _ = fs.dual_oracle(fs.FlowProblem(R, F, lam, 1.0))
        errs = []
        for alpha in (10.0, 100.0, 1000.0):
            sol = fs.solve(fs.FlowProblem(R, F, lam, alpha), fs.SolverConfig(tol=1e-10))
            err = np.abs(sol.Z - Zo).max()
            assert err <= 5 / alpha and sol.feas_residual <= 10 / alpha
            errs.append(err)
        assert errs[0] > errs[1] > errs[2]


def test_sparsity_mechanism_on_constructed_rows():
    n = 8
    R = np.full((n, n), 1 / n)
    F = np.ones((n, n))
    F[np.arange(n), (np.arange(n) + 3) % n] = 100.0
    F /= F.sum(axis=1, keepdims=True)
    Z0, mu0 = fs.dual_oracle(fs.FlowProblem(R, F, 0.0, 1.0))
    assert fs.sparsity_fraction(Z0) == 0.0
    lam = 2 * mu0.max() / F.min()
    Z, _ = fs.dual_oracle(fs.FlowProblem(R, F, lam, 1.0))
    assert np.all((np.abs(Z) < fs.ZERO_THRESHOLD).sum(axis=1) >= 1)
    Zp = fs.solve(fs.FlowProblem(R, F, lam, 0.1)).Z
    assert np.all((np.abs(Zp) < fs.ZERO_THRESHOLD).sum(axis=1) >= 1)


def test_solve_is_deterministic():
    p = random_problem(matcore.seeded_rng(19), 7)
    a = fs.solve(p, rng=matcore.seeded_rng(3))
    b = fs.solve(p, rng=matcore.seeded_rng(3))
    assert np.array_equal(a.Z, b.Z) and a.iterations == b.iterations


@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.sampled_from([0.0, 0.5, 1.0, 2.0, 5.0]),
       st.sampled_from([0.1, 1.0, 100.0]))
def test_penalized_exact_satisfies_kkt(seed, n, lambda_star, alpha):
    p = random_problem(matcore.seeded_rng(seed), n, lambda_star, alpha)
    Z = fs.penalized_exact(p)
    assert np.all(Z >= 0)
    assert fs.kkt_check(p, Z).kkt_residual <= 1e-10
