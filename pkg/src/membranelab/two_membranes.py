"""Solvers for the discrete two-membranes problem, built to cross-validate.

Three independent routes to the same unique minimizer:

* projected gradient (optionally accelerated) on the energy over the
  admissible cone u2 <= u1, with the midpoint projection;
* a primal-dual active-set method solving the KKT system exactly in the
  dense-algebra regime;
* nodewise Gauss-Seidel complementarity sweeps that enforce, at every node,
  either both decoupled row equations or the contact value solving the
  summed equation.

All report the same residual quantities, so "converged" always means the
complementarity system holds to the requested tolerance.
"""

from __future__ import annotations

import enum
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._sweeps import pair_gs_sweep
from .energy import MembranePair, ProblemSpec, ResidualReport, el_residuals, total_energy
from .grid_kernel import GridFunction

__all__ = [
    "Method", "SolverConfig", "SolveReport", "SolverDivergence",
    "project_admissible", "solve_projected_gradient", "solve_active_set",
    "solve_viscosity_sweep", "solve_two_membranes", "contact_threshold",
]

ACTIVE_SET_CAP = 4096


class Method(enum.Enum):
    ProjectedGradient = "ProjectedGradient"
    AcceleratedPG = "AcceleratedPG"
    ActiveSetQP = "ActiveSetQP"
    ViscositySweep = "ViscositySweep"
    AlternatingObstacle = "AlternatingObstacle"


class SolverDivergence(RuntimeError):
    pass


@dataclass
class SolverConfig:
    method: Method = Method.ActiveSetQP
    max_iters: int = 200000
    tol: float = 1e-8
    step_rule: str = "fixed"        # "fixed": 1/L from power iteration; "backtracking"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.method, str):
            self.method = Method(self.method)
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.step_rule not in ("fixed", "backtracking"):
            raise ValueError("step_rule must be 'fixed' or 'backtracking'")


@dataclass
class SolveReport:
    iterations: int
    final_energy: float
    residuals: ResidualReport
    contact_mask: np.ndarray
    converged: bool
    wall_time: float
    method: str
    messages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "iterations": self.iterations,
            "final_energy": self.final_energy,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "residuals": self.residuals.to_dict(),
            "contact_nodes": int(self.contact_mask.sum()),
            "messages": list(self.messages),
        }


def contact_threshold(problem: ProblemSpec) -> float:
    """eps_contact = h^(1 + min(s1, s2)): below the solution regularity scale."""
    s = min(problem.kernel1.order, problem.kernel2.order)
    return problem.grid.h ** (1.0 + s)


def project_admissible(pair: MembranePair) -> MembranePair:
    """Euclidean projection onto {u2 <= u1}: crossing nodes go to their midpoint."""
    mask = pair.grid.interior_mask
    u1 = pair.u1.values.copy()
    u2 = pair.u2.values.copy()
    cross = mask & (u2 > u1)
    mid = 0.5 * (u1 + u2)
    u1[cross] = mid[cross]
    u2[cross] = mid[cross]
    return MembranePair(
        GridFunction(pair.u1.grid, u1, pair.u1.tail_coeff, pair.u1.tail_exp),
        GridFunction(pair.u2.grid, u2, pair.u2.tail_coeff, pair.u2.tail_exp),
    )


def _project_interior(u1, u2):
    cross = u2 > u1
    if cross.any():
        mid = 0.5 * (u1[cross] + u2[cross])
        u1 = u1.copy()
        u2 = u2.copy()
        u1[cross] = mid
        u2[cross] = mid
    return u1, u2


def _power_lmax(A: np.ndarray, seed: int, iters: int = 50) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(A.shape[0])
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = A @ v
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 1.0
        v = w / lam
    return lam


def _finalize(problem: ProblemSpec, u1, u2, iters, converged, t0, method, messages=None):
    pair = problem.make_pair(u1, u2)
    res = el_residuals(pair, problem)
    contact = (u1 - u2) <= contact_threshold(problem)
    rep = SolveReport(
        iterations=iters,
        final_energy=total_energy(pair, problem),
        residuals=res,
        contact_mask=contact,
        converged=bool(converged),
        wall_time=time.perf_counter() - t0,
        method=method,
        messages=messages or [],
    )
    return pair, rep


def solve_projected_gradient(problem: ProblemSpec, config: SolverConfig,
                             energy_trace: list | None = None):
    """Projected gradient descent on the energy over the admissible cone.

    Fixed step 1/L with L from 50 power-iteration steps (guaranteed descent
    for the convex quadratic), or Armijo backtracking.  Deterministic given
    the config.  Raises SolverDivergence if the energy increases on ten
    consecutive accepted steps.  ``energy_trace``, when given, collects the
    objective value of every accepted iterate (up to the constant exterior
    interaction term, i.e. an affine shift of total_energy).
    """
    t0 = time.perf_counter()
    A1, c1, A2, c2 = problem.systems()
    accelerated = config.method == Method.AcceleratedPG
    L = max(_power_lmax(A1, config.seed), _power_lmax(A2, config.seed + 1)) * 1.02
    u1 = np.linalg.solve(A1, c1) if A1.shape[0] <= ACTIVE_SET_CAP else np.zeros_like(c1)
    u2 = np.linalg.solve(A2, c2) if A2.shape[0] <= ACTIVE_SET_CAP else np.zeros_like(c2)
    u1, u2 = _project_interior(u1, u2)

    def grad(v1, v2):
        return A1 @ v1 - c1, A2 @ v2 - c2

    def quad_energy(v1, v2):
        return float(0.5 * v1 @ (A1 @ v1) - c1 @ v1 + 0.5 * v2 @ (A2 @ v2) - c2 @ v2)

    e_prev = quad_energy(u1, u2)
    if energy_trace is not None:
        energy_trace.append(e_prev)
    bad = 0
    y1, y2, tmom = u1, u2, 1.0
    it = 0
    converged = False
    check_every = 16
    for it in range(1, config.max_iters + 1):
        g1, g2 = grad(y1, y2)
        step = 1.0 / L
        if config.step_rule == "backtracking":
            # Armijo on the gradient mapping: the projected step must pay for
            # itself through the actual move, not the raw gradient norm
            e_y = quad_energy(y1, y2)
            step = 4.0 / L
            while True:
                n1, n2 = _project_interior(y1 - step * g1, y2 - step * g2)
                move2 = float(np.sum((n1 - y1) ** 2) + np.sum((n2 - y2) ** 2))
                if quad_energy(n1, n2) <= e_y - 0.25 * move2 / step or step < 1e-4 / L:
                    break
                step *= 0.5
        n1, n2 = _project_interior(y1 - step * g1, y2 - step * g2)
        if accelerated:
            tnew = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tmom * tmom))
            beta = (tmom - 1.0) / tnew
            y1 = n1 + beta * (n1 - u1)
            y2 = n2 + beta * (n2 - u2)
            y1, y2 = _project_interior(y1, y2)
            tmom = tnew
        e_now = quad_energy(n1, n2)
        if e_now > e_prev + 1e-15 * max(1.0, abs(e_prev)):
            bad += 1
            if accelerated:
                # momentum restart keeps the accelerated scheme monotone
                y1, y2, tmom = n1, n2, 1.0
                bad = 0
            if bad >= 10:
                raise SolverDivergence("energy increased on 10 consecutive steps")
        else:
            bad = 0
        moved = max(float(np.abs(n1 - u1).max(initial=0.0)),
                    float(np.abs(n2 - u2).max(initial=0.0)))
        u1, u2 = n1, n2
        if energy_trace is not None:
            energy_trace.append(e_now)
        if not accelerated:
            y1, y2 = u1, u2
        e_prev = e_now
        if moved < config.tol / L or it % check_every == 0:
            pair = problem.make_pair(u1, u2)
            if el_residuals(pair, problem).worst() <= config.tol:
                converged = True
                break
            check_every = min(2 * check_every, 256)
    method = "AcceleratedPG" if accelerated else "ProjectedGradient"
    return _finalize(problem, u1, u2, it, converged, t0, method)


def solve_active_set(problem: ProblemSpec, config: SolverConfig):
    """Primal-dual active-set solve of the discrete KKT system.

    Off the active set both row equations hold; on it u1 = u2 together with
    the summed equation.  The complementarity pairing (multiplier vs. gap)
    drives the active-set update, which stabilizes in a handful of sweeps;
    the result is the exact discrete minimizer up to linear-solver accuracy.
    Restricted to at most 4096 interior unknowns (dense algebra).
    """
    t0 = time.perf_counter()
    A1, c1, A2, c2 = problem.systems()
    n = A1.shape[0]
    if 2 * n > ACTIVE_SET_CAP:
        raise ValueError(f"active-set solver capped at {ACTIVE_SET_CAP} unknowns, got {2 * n}")
    try:
        inv1 = np.linalg.inv(A1)
        inv2 = np.linalg.inv(A2)
    except np.linalg.LinAlgError as exc:   # pragma: no cover - strict convexity
        raise RuntimeError("internal error: singular KKT system") from exc
    S = inv1 + inv2
    u1u = inv1 @ c1
    u2u = inv2 @ c2
    sigma = 0.5 * float(np.mean(np.diag(A1)) + np.mean(np.diag(A2)))
    active = u2u > u1u
    u1, u2, mu = u1u, u2u, np.zeros(n)
    it = 0
    converged = False
    seen = set()
    for it in range(1, min(config.max_iters, 200) + 1):
        if active.any():
            try:
                mu_a = np.linalg.solve(S[np.ix_(active, active)], (u2u - u1u)[active])
            except np.linalg.LinAlgError as exc:   # pragma: no cover
                raise RuntimeError("internal error: singular KKT system") from exc
            u1 = u1u + inv1[:, active] @ mu_a
            u2 = u2u - inv2[:, active] @ mu_a
            mu = np.zeros(n)
            mu[active] = mu_a
        else:
            u1, u2, mu = u1u.copy(), u2u.copy(), np.zeros(n)
        new_active = (mu + sigma * (u2 - u1)) > 0
        if np.array_equal(new_active, active):
            converged = True
            break
        key = new_active.tobytes()
        if key in seen:
            # break two-cycles by union (monotone enlargement)
            new_active = new_active | active
        seen.add(key)
        active = new_active
    u1, u2 = _project_interior(u1, u2)
    pair, rep = _finalize(problem, u1, u2, it, converged, t0, "ActiveSetQP")
    if converged and rep.residuals.worst() > config.tol:
        rep.converged = False
        rep.messages.append("active set stabilized but residuals exceed tol")
    return pair, rep


def solve_viscosity_sweep(problem: ProblemSpec, config: SolverConfig,
                          initial: tuple | None = None):
    """Symmetric Gauss-Seidel sweeps on the nodewise complementarity system.

    Per node: tentative decoupled updates for u2 and u1; if they cross (ties
    count as contact) both take the value solving the summed equation.  The
    fixed point satisfies the same discrete system as the QP solvers, so any
    admissible ``initial`` iterate converges to the same pair.
    """
    t0 = time.perf_counter()
    A1, c1, A2, c2 = problem.systems()
    n = A1.shape[0]
    if initial is None:
        u1 = np.zeros(n)
        u2 = np.zeros(n)
    else:
        u1 = np.array(initial[0], dtype=float)
        u2 = np.array(initial[1], dtype=float)
    u1, u2 = _project_interior(u1, u2)
    diag_scale = max(float(np.abs(np.diag(A1)).max()), float(np.abs(np.diag(A2)).max()))
    update_tol = config.tol / diag_scale
    it = 0
    converged = False
    while it < config.max_iters:
        it += 1
        d_fwd = pair_gs_sweep(A1, c1, A2, c2, u1, u2, False)
        d_bwd = pair_gs_sweep(A1, c1, A2, c2, u1, u2, True)
        if max(d_fwd, d_bwd) < update_tol:
            pair = problem.make_pair(u1, u2)
            if el_residuals(pair, problem).worst() <= config.tol:
                converged = True
                break
            update_tol *= 0.1
    return _finalize(problem, u1, u2, it, converged, t0, "ViscositySweep")


def solve_two_membranes(problem: ProblemSpec, config: SolverConfig):
    """Dispatch on config.method (the alternating scheme lives in .obstacle)."""
    if config.method in (Method.ProjectedGradient, Method.AcceleratedPG):
        return solve_projected_gradient(problem, config)
    if config.method == Method.ActiveSetQP:
        return solve_active_set(problem, config)
    if config.method == Method.ViscositySweep:
        return solve_viscosity_sweep(problem, config)
    from .obstacle import alternating_two_membranes
    return alternating_two_membranes(problem, config)
