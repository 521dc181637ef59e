"""Single-membrane obstacle problem and the alternating two-membranes scheme.

The obstacle solve targets the nodewise complementarity system

    min(u - phi, f - L u) = 0      (so L u <= f everywhere, equality off contact)

by projected SOR on the interior M-matrix system; u >= phi holds exactly at
every iterate.  An active-set variant of the same one-field QP is available
through ``SolverConfig(method=Method.ActiveSetQP)`` and doubles as the exact
oracle in the tests.

The two-membranes problem is reduced to alternating obstacle solves: the
upper membrane sees the lower one as an obstacle from below, then the lower
membrane sees the upper one as an obstacle from above.  The "from above"
variant is implemented by negation (solve for -u2 with obstacle -u1), so a
single complementarity kernel is used throughout.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._sweeps import psor_sweep
from .energy import MembranePair, ProblemSpec, ResidualReport, el_residuals, total_energy
from .grid_kernel import (
    DiscreteNonlocalOperator,
    Grid,
    GridFunction,
    KernelSpec,
    build_operator,
)
from .two_membranes import (
    ACTIVE_SET_CAP,
    Method,
    SolveReport,
    SolverConfig,
    contact_threshold,
    _finalize,
    _project_interior,
)

__all__ = [
    "ObstacleProblemSpec", "solve_obstacle", "alternating_two_membranes",
    "contact_set", "contact_intervals",
]


@dataclass
class ObstacleProblemSpec:
    """Obstacle problem data: kernel, forcing, obstacle (interior), exterior values."""
    grid: Grid
    kernel: KernelSpec
    f: GridFunction
    obstacle: GridFunction
    exterior: GridFunction
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for g in (self.f, self.obstacle, self.exterior):
            if g.grid != self.grid:
                raise ValueError("all fields must live on the problem grid")
        # data must dominate the obstacle across the boundary: compare the
        # first interior ring with the adjacent exterior ring
        mask = self.grid.interior_mask
        if self.grid.dim == 1:
            idx = np.nonzero(mask)[0]
            pairs = [(idx[0], idx[0] - 1), (idx[-1], idx[-1] + 1)]
            for i_in, i_out in pairs:
                if self.obstacle.values[i_in] > self.exterior.values[i_out] + 1e-12:
                    raise ValueError(
                        "inconsistent data: obstacle exceeds exterior values at the boundary")
        else:
            ring_in = mask & ~_erode(mask)
            grown = _dilate(mask) & ~mask
            if self.obstacle.values[ring_in].max() > self.exterior.values[grown].max() + 1e-12:
                raise ValueError(
                    "inconsistent data: obstacle exceeds exterior values at the boundary")

    @property
    def op(self) -> DiscreteNonlocalOperator:
        if "op" not in self._cache:
            self._cache["op"] = build_operator(self.grid, self.kernel)
        return self._cache["op"]

    def system(self):
        if "system" not in self._cache:
            A = self.op.interior_matrix()
            c = self.op.boundary_source(self.exterior) - self.f.interior_values
            self._cache["system"] = (A, c)
        return self._cache["system"]


def _erode(mask):
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    return out


def _dilate(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _obstacle_residuals(A, c, u, phi) -> ResidualReport:
    """Residual fields for the one-field system (see el_residuals for pairs).

    sub_violation: (L u - f)+;  super_violation: (phi - u)+;
    sum_defect: nodewise LCP residual |min(u - phi, f - L u)|;
    complementarity: (u - phi) * |f - L u|.
    """
    r = c - A @ u                    # r = f - L u on interior nodes
    gap = u - phi
    comp = gap * np.abs(r)
    return ResidualReport(
        max_sub_violation_1=float(np.maximum(-r, 0.0).max()),
        max_super_violation_2=float(np.maximum(-gap, 0.0).max()),
        max_sum_defect=float(np.abs(np.minimum(gap, r)).max()),
        max_complementarity_defect=float(comp.max()),
        complementarity_defect=comp,
    )


def _pdas_obstacle(A, c, phi, max_iters=200):
    """Exact one-field complementarity solve by the primal-dual active set."""
    n = A.shape[0]
    if n > ACTIVE_SET_CAP:
        raise ValueError("active-set obstacle solve capped at 4096 unknowns")
    inv = np.linalg.inv(A)
    uunc = inv @ c
    sigma = float(np.mean(np.diag(A)))
    active = uunc < phi
    u = uunc
    mu = np.zeros(n)
    for it in range(1, max_iters + 1):
        if active.any():
            mu_a = np.linalg.solve(inv[np.ix_(active, active)], (phi - uunc)[active])
            u = uunc + inv[:, active] @ mu_a
            mu = np.zeros(n)
            mu[active] = mu_a
        else:
            u, mu = uunc.copy(), np.zeros(n)
        new_active = (mu + sigma * (phi - u)) > 0
        if np.array_equal(new_active, active):
            return np.maximum(u, phi), it
        active = new_active
    return np.maximum(u, phi), max_iters


def solve_obstacle(spec: ObstacleProblemSpec, config: SolverConfig):
    """Projected SOR on min(u - phi, f - L u) = 0; u >= phi exactly.

    Relaxation starts at omega = 1.5 and is halved whenever the quadratic
    objective increases over a sweep (safe over-relaxation for the strictly
    diagonally dominant system).  ``Method.ActiveSetQP`` switches to the
    exact dense active-set solve of the same complementarity system.
    """
    t0 = time.perf_counter()
    A, c = spec.system()
    phi = spec.obstacle.interior_values
    if config.method == Method.ActiveSetQP:
        u, it = _pdas_obstacle(A, c, phi, max_iters=min(config.max_iters, 200))
        return _obstacle_report(spec, A, c, u, it, t0, "ActiveSetQP", config)

    n = A.shape[0]
    if n <= ACTIVE_SET_CAP:
        u = np.maximum(phi, np.linalg.solve(A, c))
    else:
        u = np.maximum(phi, np.zeros(n))
    omega = 1.5
    e_prev = float(0.5 * u @ (A @ u) - c @ u)
    it = 0
    converged = False
    check_every = 8
    while it < config.max_iters:
        it += 1
        psor_sweep(A, c, phi, u, omega, False)
        psor_sweep(A, c, phi, u, omega, True)
        e_now = float(0.5 * u @ (A @ u) - c @ u)
        if e_now > e_prev + 1e-15 * max(1.0, abs(e_prev)) and omega > 0.25:
            omega = max(0.25, omega / 2.0)
        e_prev = e_now
        if it % check_every == 0 or it == config.max_iters:
            if _obstacle_residuals(A, c, u, phi).worst() <= config.tol:
                converged = True
                break
            check_every = min(2 * check_every, 64)
    return _obstacle_report(spec, A, c, u, it, t0, "ProjectedSOR", config,
                            converged=converged)


def _obstacle_report(spec, A, c, u, it, t0, method, config, converged=None):
    res = _obstacle_residuals(A, c, u, spec.obstacle.interior_values)
    if converged is None:
        converged = res.worst() <= config.tol
    sol = spec.exterior.with_interior(u)
    eps = spec.grid.h ** (1.0 + min(spec.kernel.order, 1.0))
    mask = (u - spec.obstacle.interior_values) <= eps
    hn = spec.grid.h ** spec.grid.dim
    rep = SolveReport(
        iterations=it,
        final_energy=hn * float(0.5 * u @ (A @ u) - c @ u),
        residuals=res,
        contact_mask=mask,
        converged=bool(converged),
        wall_time=time.perf_counter() - t0,
        method=method,
    )
    return sol, rep


def contact_set(u: GridFunction, phi: GridFunction, eps: float) -> np.ndarray:
    """Interior-node mask {u - phi <= eps}; its boundary is the free boundary."""
    if u.grid != phi.grid:
        raise ValueError("grid mismatch")
    return (u.interior_values - phi.interior_values) <= eps


def contact_intervals(mask: np.ndarray, grid: Grid) -> list:
    """1D summary of a contact mask as a list of [a, b] intervals."""
    if grid.dim != 1:
        raise ValueError("contact intervals are a 1D summary")
    xs = grid.axis[grid.interior_mask]
    out = []
    start = None
    for x, m in zip(xs, mask):
        if m and start is None:
            start = x
        elif not m and start is not None:
            out.append([float(start), float(prev)])
            start = None
        prev = x
    if start is not None:
        out.append([float(start), float(xs[-1])])
    return out


def alternating_two_membranes(problem: ProblemSpec, config: SolverConfig):
    """Reduce the pair problem to alternating single-obstacle solves.

    Each outer iteration runs (a) the obstacle problem for the upper
    membrane with the lower one as obstacle from below, (b) the reflected
    obstacle problem for the lower membrane with the upper one as obstacle
    from above (by negation), and (c) a gap-preserving level solve of the
    summed equation (L1 + L2)(u + t) = f1 + f2.  Step (c) is what pins the
    contact height: the two obstacle half-steps alone are blockwise optimal
    at any contact level and can stall there, while in (gap, level)
    coordinates the constraint set is a product and exact two-block descent
    converges to the joint minimizer.  A two-cycle with gap above tol flags
    non-convergence.  The bootstrap regime expects order1 < order2; other
    orderings run with a warning.
    """
    t0 = time.perf_counter()
    messages = []
    if problem.kernel1.order >= problem.kernel2.order:
        warnings.warn("alternating scheme outside the order1 < order2 regime",
                      stacklevel=2)
        messages.append("orders not increasing: s1 >= s2")
    A1, c1, A2, c2 = problem.systems()
    n = A1.shape[0]
    use_dense = n <= ACTIVE_SET_CAP
    inner = SolverConfig(method=Method.ActiveSetQP if use_dense else Method.ViscositySweep,
                         tol=min(config.tol, 1e-10) if use_dense else 0.1 * config.tol,
                         max_iters=config.max_iters)
    if use_dense:
        from scipy.linalg import cho_factor, cho_solve
        level = cho_factor(A1 + A2)
        solve_sum = lambda rhs: cho_solve(level, rhs)
        u2 = np.linalg.solve(A2, c2)
        u1 = np.maximum(np.linalg.solve(A1, c1), u2)
    else:
        from scipy.sparse.linalg import cg, LinearOperator
        Ssum = A1 + A2
        lin = LinearOperator((n, n), matvec=lambda v: Ssum @ v)
        solve_sum = lambda rhs: cg(lin, rhs, rtol=1e-12, atol=0.0)[0]
        u1 = np.zeros(n)
        u2 = np.zeros(n)
    prev = np.concatenate([u1, u2])
    older = None
    it = 0
    converged = False
    outer_max = min(config.max_iters, 200)
    while it < outer_max:
        it += 1
        # (a) u1 >= u2: L1 u1 <= f1, equality off contact
        u1, _ = _half_step(A1, c1, u2, inner)
        # (b) u2 <= u1 by negation: w = -u2 >= -u1, L2 w <= -f2
        w, _ = _half_step(A2, -c2, -u1, inner)
        u2 = -w
        # (c) slide both membranes by the level solving the summed equation
        t = solve_sum(c1 + c2 - A1 @ u1 - A2 @ u2)
        u1 = u1 + t
        u2 = u2 + t
        state = np.concatenate([u1, u2])
        pair = problem.make_pair(*_project_interior(u1, u2))
        if el_residuals(pair, problem).worst() <= config.tol:
            converged = True
            break
        step = float(np.abs(state - prev).max())
        if step < config.tol:
            break
        if older is not None:
            cycle = float(np.abs(state - older).max())
            if cycle < 0.1 * config.tol and step > config.tol:
                messages.append(f"period-2 oscillation with gap {step:.3e}")
                break
        older, prev = prev, state
    u1, u2 = _project_interior(u1, u2)
    return _finalize(problem, u1, u2, it, converged, t0, "AlternatingObstacle",
                     messages=messages)


def _half_step(A, c, phi_int, inner: SolverConfig):
    if inner.method == Method.ActiveSetQP:
        return _pdas_obstacle(A, c, phi_int)
    u = np.maximum(phi_int, 0.0)
    it = 0
    for it in range(inner.max_iters):
        d1 = psor_sweep(A, c, phi_int, u, 1.5, False)
        d2 = psor_sweep(A, c, phi_int, u, 1.5, True)
        if max(d1, d2) < inner.tol / float(np.abs(np.diag(A)).max()):
            break
    return u, it
