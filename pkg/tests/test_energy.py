import numpy as np
import pytest

from membranelab import (
    Grid,
    GridFunction,
    MembranePair,
    ProblemSpec,
    SolverConfig,
    build_operator,
    el_residuals,
    energy_gradient,
    inner_product,
    solve_active_set,
    solve_projected_gradient,
    total_energy,
)
from membranelab.two_membranes import Method

from conftest import const_field, fractional, local, pair_problem


def naive_inner_product(u, v, kernel, grid):
    """Reference double sum over node pairs, mirroring the quadrature weights.

    Pure python loops over ordered pairs with at least one interior member:
    midpoint-cell weights h*K plus the singular-cell second-difference spread
    onto the immediate neighbors, each unordered pair counted once.
    """
    h = grid.h
    s = kernel.order
    c = kernel.kind.c
    ax = grid.axis
    inter = grid.interior_mask
    mu0 = c * (h / 2) ** (2 - 2 * s) / (2 - 2 * s)
    n = ax.size
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if not (inter[i] or inter[j]):
                continue
            w = h * c * abs(ax[j] - ax[i]) ** (-1 - 2 * s)
            if j == i + 1:
                w += mu0 / h**2
            total += w * (u.values[i] - u.values[j]) * (v.values[i] - v.values[j])
    # interior nodes against the analytic tail region (zero tails here)
    op = build_operator(grid, kernel)
    ui = u.values[inter]
    vi = v.values[inter]
    total += float(np.sum(ui * vi * op.tail_mass))
    return h * total


class TestInnerProduct:
    def test_matches_naive_double_sum(self):
        grid = Grid.unit_interval(11)   # 9 interior nodes
        kernel = fractional(0.45)
        rng = np.random.default_rng(3)
        u = GridFunction(grid, rng.standard_normal(grid.shape))
        v = GridFunction(grid, rng.standard_normal(grid.shape))
        got = inner_product(u, v, kernel, grid)
        want = naive_inner_product(u, v, kernel, grid)
        assert abs(got - want) < 1e-12 * max(1.0, abs(want))

    def test_constant_against_compact_support(self):
        grid = Grid.unit_interval(17)
        kernel = fractional(0.5)
        cst = GridFunction.constant(grid, 4.2)
        v = GridFunction.from_callable(grid, lambda x: np.exp(-8 * x**2) * (np.abs(x) < 1))
        assert inner_product(cst, v, kernel, grid) == 0.0

    def test_positive_semidefinite(self):
        grid = Grid.unit_interval(17)
        kernel = fractional(0.5)
        rng = np.random.default_rng(5)
        for _ in range(10):
            u = GridFunction(grid, rng.standard_normal(grid.shape))
            assert inner_product(u, u, kernel, grid) >= 0.0
        assert inner_product(GridFunction.constant(grid, 2.0),
                             GridFunction.constant(grid, 2.0), kernel, grid) == 0.0

    def test_symmetry_exact(self):
        grid = Grid.unit_interval(17)
        kernel = fractional(0.35)
        rng = np.random.default_rng(11)
        u = GridFunction(grid, rng.standard_normal(grid.shape))
        v = GridFunction(grid, rng.standard_normal(grid.shape))
        assert inner_product(u, v, kernel, grid) == inner_product(v, u, kernel, grid)

    def test_local_kind_is_dirichlet_form(self):
        grid = Grid.unit_interval(33)
        kernel = local(2.0)
        u = GridFunction.from_callable(grid, lambda x: np.where(np.abs(x) < 1, 1 - x**2, 0.0))
        got = inner_product(u, u, kernel, grid)
        # edges touching the interior: derivative of 1-x^2 is -2x at midpoints
        h = grid.h
        mids = 0.5 * (grid.axis[:-1] + grid.axis[1:])
        du = np.diff(u.values) / h
        edge_int = (np.abs(grid.axis[:-1]) < 1 - 1e-12) | (np.abs(grid.axis[1:]) < 1 - 1e-12)
        want = 2.0 * float(np.sum(du[edge_int] ** 2)) * h
        assert np.isclose(got, want, rtol=1e-12)

    def test_divergent_tail_pair_rejected(self):
        grid = Grid.unit_interval(17)
        kernel = fractional(0.4)
        u = GridFunction.constant(grid, 1.0)
        u.tail_exp = 0.5
        v = GridFunction.constant(grid, 1.0)
        v.tail_exp = 0.5
        with pytest.raises(ValueError, match="divergent"):
            inner_product(u, v, kernel, grid)


class TestTotalEnergy:
    def test_zero_everything(self):
        prob = pair_problem(17, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0)
        pair = MembranePair(GridFunction.zeros(prob.grid), GridFunction.zeros(prob.grid))
        assert total_energy(pair, prob) == 0.0

    def test_strict_convexity_of_midpoints(self):
        prob = pair_problem(17, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3)
        rng = np.random.default_rng(2)
        n = prob.grid.n_interior
        for _ in range(5):
            a1, a2 = np.sort(rng.standard_normal((2, n)), axis=0)[::-1]
            b1, b2 = np.sort(rng.standard_normal((2, n)), axis=0)[::-1]
            pa = prob.make_pair(a1, a2)
            pb = prob.make_pair(b1, b2)
            mid = prob.make_pair(0.5 * (a1 + b1), 0.5 * (a2 + b2))
            lhs = total_energy(mid, prob)
            rhs = 0.5 * (total_energy(pa, prob) + total_energy(pb, prob))
            assert lhs < rhs

    def test_inadmissible_pair_names_node(self):
        prob = pair_problem(17, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0)
        n = prob.grid.n_interior
        u1 = np.zeros(n)
        u2 = np.zeros(n)
        u2[4] = 0.5
        with pytest.raises(ValueError, match="node 4"):
            prob.make_pair(u1, u2)

    def test_local_minimality_against_random_perturbations(self):
        prob = pair_problem(33, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3)
        cfg = SolverConfig(method=Method.ActiveSetQP, tol=1e-10)
        pair, _ = solve_active_set(prob, cfg)
        e0 = total_energy(pair, prob)
        rng = np.random.default_rng(17)
        n = prob.grid.n_interior
        u1 = pair.u1.interior_values
        u2 = pair.u2.interior_values
        for _ in range(100):
            d1 = 1e-3 * rng.standard_normal(n)
            d2 = 1e-3 * rng.standard_normal(n)
            v1 = u1 + d1
            v2 = np.minimum(u2 + d2, v1)     # keep the perturbation admissible
            perturbed = prob.make_pair(v1, v2)
            assert total_energy(perturbed, prob) >= e0 - 1e-14


class TestGradient:
    def test_zero_data_zero_pair(self):
        prob = pair_problem(17, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0)
        pair = MembranePair(GridFunction.zeros(prob.grid), GridFunction.zeros(prob.grid))
        g1, g2 = energy_gradient(pair, prob)
        assert np.abs(g1.values[prob.grid.interior_mask]).max() == 0.0
        assert np.abs(g2.values[prob.grid.interior_mask]).max() == 0.0

    def test_gradient_zero_at_unconstrained_decoupled_minimizer(self):
        prob = pair_problem(17, 0.3, 0.7, -1.0, 1.0, 1.0, -1.0)   # separated
        A1, c1, A2, c2 = prob.systems()
        pair = prob.make_pair(np.linalg.solve(A1, c1), np.linalg.solve(A2, c2))
        g1, g2 = energy_gradient(pair, prob)
        tol = 1e-10
        assert np.abs(g1.values[prob.grid.interior_mask]).max() <= tol
        assert np.abs(g2.values[prob.grid.interior_mask]).max() <= tol

    def test_central_difference_oracle(self):
        prob = pair_problem(17, 0.4, 0.8, 1.0, -1.0, 0.0, -0.3)
        rng = np.random.default_rng(23)
        n = prob.grid.n_interior
        # strictly separated base pair: unit-norm directions stay admissible
        base1 = 1.0 + 0.2 * rng.standard_normal(n)
        base2 = -1.0 + 0.2 * rng.standard_normal(n)
        pair = prob.make_pair(base1, base2)
        g1, g2 = energy_gradient(pair, prob)
        gvec = np.concatenate([g1.values[prob.grid.interior_mask],
                               g2.values[prob.grid.interior_mask]])
        scale = float(np.abs(gvec).max())
        for eps in (1e-3, 1e-4, 1e-5):
            worst = 0.0
            for _ in range(20):
                d = rng.standard_normal(2 * n)
                d /= np.linalg.norm(d)
                d1, d2 = d[:n], d[n:]
                plus = prob.make_pair(base1 + eps * d1, base2 + eps * d2)
                minus = prob.make_pair(base1 - eps * d1, base2 - eps * d2)
                fd = (total_energy(plus, prob) - total_energy(minus, prob)) / (2 * eps)
                an = float(gvec @ np.concatenate([d1, d2]))
                worst = max(worst, abs(fd - an))
            assert worst <= 10 * eps**2 * max(scale, 1.0) + 1e-12

    def test_quadratic_expansion_independent_of_base(self):
        prob = pair_problem(17, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3)
        rng = np.random.default_rng(31)
        n = prob.grid.n_interior
        d1 = rng.standard_normal(n)
        d2 = d1 - np.abs(rng.standard_normal(n))

        def q_of(base1, base2):
            p0 = prob.make_pair(base1, base2)
            p1 = prob.make_pair(base1 + d1, base2 + d2)
            g1, g2 = energy_gradient(p0, prob)
            lin = float(g1.values[prob.grid.interior_mask] @ d1
                        + g2.values[prob.grid.interior_mask] @ d2)
            return total_energy(p1, prob) - total_energy(p0, prob) - lin

        qs = []
        for _ in range(4):
            b1 = np.abs(rng.standard_normal(n))
            b2 = -np.abs(rng.standard_normal(n))
            qs.append(q_of(b1, b2))
        assert np.ptp(qs) <= 1e-10 * max(1.0, abs(qs[0]))


class TestResiduals:
    def test_active_set_minimizer_clears_residuals(self):
        prob = pair_problem(33, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3)
        pair, _ = solve_active_set(prob, SolverConfig(method=Method.ActiveSetQP))
        rep = el_residuals(pair, prob)
        assert rep.worst() <= 1e-8

    def test_decoupled_case_equations_hold_separately(self):
        prob = pair_problem(33, 0.3, 0.7, -1.0, 1.0, 1.0, -1.0)
        pair, report = solve_active_set(prob, SolverConfig(method=Method.ActiveSetQP))
        assert report.contact_mask.sum() == 0
        r1 = prob.op1.apply(pair.u1) - prob.f1.interior_values
        r2 = prob.op2.apply(pair.u2) - prob.f2.interior_values
        assert np.abs(r1).max() <= 1e-9
        assert np.abs(r2).max() <= 1e-9
        rep = el_residuals(pair, prob)
        assert rep.max_complementarity_defect <= 1e-8

    def test_json_field_names(self):
        prob = pair_problem(17, 0.3, 0.7, 0.0, 0.0, 0.0, 0.0)
        pair = MembranePair(GridFunction.zeros(prob.grid), GridFunction.zeros(prob.grid))
        payload = el_residuals(pair, prob).to_dict()
        assert set(payload) == {"max_sub_violation_1", "max_super_violation_2",
                                "max_sum_defect", "max_complementarity_defect"}


# first iterate energies of the seeded 17-node (s1, s2) = (0.3, 0.7) run,
# frozen from the first verified solve of this suite
GOLDEN_TRACE = [
    -4.107106369581e+00, -4.128758865004e+00, -4.138961445256e+00,
    -4.144524824329e+00, -4.147881674596e+00, -4.150076397962e+00,
    -4.151596792152e+00, -4.152692581788e+00,
]


class TestEnergyAlongIterates:
    def test_energy_decreases_monotonically(self):
        prob = pair_problem(17, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3)
        trace = []
        solve_projected_gradient(prob, SolverConfig(method=Method.ProjectedGradient,
                                                    tol=1e-9, seed=4), energy_trace=trace)
        trace = np.array(trace)
        assert trace.size >= len(GOLDEN_TRACE)
        assert np.all(np.diff(trace) <= 1e-14 * np.maximum(1.0, np.abs(trace[:-1])))
        np.testing.assert_allclose(trace[:len(GOLDEN_TRACE)], GOLDEN_TRACE, rtol=1e-6)
