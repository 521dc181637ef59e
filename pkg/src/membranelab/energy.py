"""Two-membranes energy, nonlocal inner products, and stationarity residuals.

The kernel inner product

    E_k(u, v) = 1/2 iint_{(R^n x R^n) \\ (CB_1 x CB_1)}
                (u(x) - u(y)) (v(x) - v(y)) k(x - y) dx dy

is evaluated through the assembled operator weights (never by a second
independent quadrature), so the discrete identity grad E_k(u, u) = -2 h^n L u
holds to machine precision and gradients, energies and operator residuals are
mutually consistent by construction.

``total_energy`` carries the variational normalization

    J(u1, u2) = 1/2 E_{k1}(u1, u1) + 1/2 E_{k2}(u2, u2)
                + int_{B1} (u1 f1 + u2 f2) dx,

whose first-order conditions over the constraint u2 <= u1 are exactly the
complementarity system the solvers and the residual report target:

    L1 u1 <= f1,  L2 u2 >= f2,  L1 u1 + L2 u2 = f1 + f2,
    L_i u_i = f_i off the coincidence set.

(The prefactor 1/2 on the quadratic forms is what makes the unconstrained
stationary point solve L u = f rather than 2 L u = f; without it the
classical closed-form instances and the residual identities cannot both
hold.)
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass, field

import numpy as np

from .grid_kernel import (
    DiscreteNonlocalOperator,
    Grid,
    GridFunction,
    KernelSpec,
    LocalMatrix,
    build_operator,
)

__all__ = [
    "ProblemSpec", "MembranePair", "ResidualReport",
    "inner_product", "total_energy", "energy_gradient", "el_residuals",
]


# ---------------------------------------------------------------------------
# problem data


@dataclass
class ProblemSpec:
    """Data of one two-membranes instance: kernels, forcing, exterior values.

    ``exterior1``/``exterior2`` provide the prescribed values outside the unit
    ball (grid values there plus the tail model); their interior entries are
    ignored.  Admissibility of the data (upper exterior above lower near the
    boundary) is checked on the first exterior ring.
    """
    grid: Grid
    kernel1: KernelSpec
    kernel2: KernelSpec
    f1: GridFunction
    f2: GridFunction
    exterior1: GridFunction
    exterior2: GridFunction
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for g in (self.f1, self.f2, self.exterior1, self.exterior2):
            if g.grid != self.grid:
                raise ValueError("all fields must live on the problem grid")
        if not np.all(np.isfinite(self.f1.interior_values)) or \
           not np.all(np.isfinite(self.f2.interior_values)):
            raise ValueError("forcing must be finite on the interior")
        ring = _first_exterior_ring(self.grid)
        if np.any(self.exterior2.values[ring] > self.exterior1.values[ring] + 1e-12):
            raise ValueError("exterior data violates u2 <= u1 next to the boundary")

    @property
    def op1(self) -> DiscreteNonlocalOperator:
        if "op1" not in self._cache:
            self._cache["op1"] = build_operator(self.grid, self.kernel1)
        return self._cache["op1"]

    @property
    def op2(self) -> DiscreteNonlocalOperator:
        if "op2" not in self._cache:
            self._cache["op2"] = build_operator(self.grid, self.kernel2)
        return self._cache["op2"]

    def systems(self):
        """Interior systems (A1, c1, A2, c2): L_i u_i = f_i iff A_i u_i = c_i."""
        if "systems" not in self._cache:
            A1 = self.op1.interior_matrix()
            A2 = self.op2.interior_matrix()
            c1 = self.op1.boundary_source(self.exterior1) - self.f1.interior_values
            c2 = self.op2.boundary_source(self.exterior2) - self.f2.interior_values
            self._cache["systems"] = (A1, c1, A2, c2)
        return self._cache["systems"]

    def make_pair(self, u1_int: np.ndarray, u2_int: np.ndarray) -> "MembranePair":
        """Assemble a MembranePair from interior values plus the exterior data."""
        return MembranePair(self.exterior1.with_interior(u1_int),
                            self.exterior2.with_interior(u2_int))


def _first_exterior_ring(grid: Grid) -> np.ndarray:
    mask = grid.interior_mask
    ring = np.zeros_like(mask)
    if grid.dim == 1:
        idx = np.nonzero(mask)[0]
        ring[idx.min() - 1] = True
        ring[idx.max() + 1] = True
    else:
        grown = np.zeros_like(mask)
        grown[1:, :] |= mask[:-1, :]
        grown[:-1, :] |= mask[1:, :]
        grown[:, 1:] |= mask[:, :-1]
        grown[:, :-1] |= mask[:, 1:]
        ring = grown & ~mask
    return ring


@dataclass
class MembranePair:
    """The coupled unknowns (u1, u2), u2 <= u1 + h^2 on the interior.

    ``validate=False`` skips the admissibility check so that raw candidate
    pairs can be fed to the projection.
    """
    u1: GridFunction
    u2: GridFunction
    validate: InitVar[bool] = True

    def __post_init__(self, validate: bool = True):
        if self.u1.grid != self.u2.grid:
            raise ValueError("pair members must share a grid")
        if not validate:
            return
        h = self.u1.grid.h
        gap = self.u2.interior_values - self.u1.interior_values
        if np.any(gap > h * h):
            k = int(np.argmax(gap))
            raise ValueError(
                f"inadmissible pair: u2 - u1 = {gap[k]:.3e} > h^2 at interior node {k}")

    @property
    def grid(self) -> Grid:
        return self.u1.grid

    def max_violation(self) -> float:
        return float(np.maximum(self.u2.interior_values - self.u1.interior_values, 0.0).max())


def check_exterior_match(pair: MembranePair, problem: ProblemSpec) -> None:
    mask = problem.grid.interior_mask
    for mine, theirs in ((pair.u1, problem.exterior1), (pair.u2, problem.exterior2)):
        if not np.array_equal(mine.values[~mask], theirs.values[~mask]) or \
           mine.tail_coeff != theirs.tail_coeff or mine.tail_exp != theirs.tail_exp:
            raise ValueError("pair exterior values differ from the problem data")


# ---------------------------------------------------------------------------
# forms


def inner_product(u: GridFunction, v: GridFunction, kernel: KernelSpec,
                  grid: Grid, op: DiscreteNonlocalOperator | None = None) -> float:
    """Kernel inner product E_k(u, v) over pairs not both exterior to B1.

    Symmetric and positive semidefinite; for order 1 it reduces to the
    Dirichlet form of the local stencil.  Evaluated through the operator
    weights so that it is the exact quadratic form of the assembled matrix.
    """
    if u.grid != grid or v.grid != grid:
        raise ValueError("grid mismatch")
    if op is None:
        op = build_operator(grid, kernel)
    local = isinstance(kernel.kind, LocalMatrix)
    if not local:
        pu = u.tail_exp if u.tail_coeff != 0.0 else 0.0
        pv = v.tail_exp if v.tail_coeff != 0.0 else 0.0
        if (u.tail_coeff != 0.0 or v.tail_coeff != 0.0) and pu + pv >= 2 * kernel.order:
            raise ValueError("divergent tails: tail_exp_u + tail_exp_v >= 2s")
    mask = grid.interior_mask
    hn = grid.h ** grid.dim
    ui, vi = u.values[mask], v.values[mask]

    def pair_sum(restrict_interior: bool) -> float:
        # sum over interior rows i of sum_j W_ij (u_i - u_j)(v_i - v_j);
        # increments are formed first so constants contribute exactly zero
        if grid.dim == 1:
            W = op.weights[:, mask] if restrict_interior else op.weights
            uc = u.values[mask] if restrict_interior else u.values
            vc = v.values[mask] if restrict_interior else v.values
            total = 0.0
            block = max(1, int(4e6) // max(uc.size, 1))
            for lo in range(0, ui.size, block):
                hi = min(lo + block, ui.size)
                du = ui[lo:hi, None] - uc[None, :]
                dv = vi[lo:hi, None] - vc[None, :]
                # symmetric product first, so E(u, v) == E(v, u) bitwise
                total += float(np.einsum("ij,ij->", W[lo:hi], du * dv))
            return total
        from scipy.signal import fftconvolve
        uc = u.values.copy()
        vc = v.values.copy()
        if restrict_interior:
            uc[~mask] = 0.0
            vc[~mask] = 0.0
            ind = mask.astype(float)
        else:
            ind = np.ones_like(uc)
        st = op.stencil
        conv = lambda g: fftconvolve(g, st, mode="same")[mask]
        rs = conv(ind)
        return float(np.sum(ui * vi * rs) - np.sum(ui * conv(vc))
                     - np.sum(vi * conv(uc)) + np.sum(conv(uc * vc)))

    full = pair_sum(False)
    inner = pair_sum(True)
    total = full - 0.5 * inner
    if not local:
        m0 = op.tail_mass
        flat_u = u.tail_coeff == 0.0 or u.tail_exp == 0.0
        flat_v = v.tail_coeff == 0.0 or v.tail_exp == 0.0
        if flat_u and flat_v:
            # constant far fields factor into exact increments
            total += float(np.sum((ui - u.tail_coeff) * (vi - v.tail_coeff) * m0))
        else:
            # grouped so that swapping u and v permutes only commutative
            # elementwise factors, keeping E(u, v) == E(v, u) bitwise
            total += float(np.sum(ui * vi * m0))
            cross = np.zeros_like(ui)
            if v.tail_coeff != 0.0:
                cross = cross + ui * (v.tail_coeff * op.tail_moment(v.tail_exp))
            if u.tail_coeff != 0.0:
                cross = cross + vi * (u.tail_coeff * op.tail_moment(u.tail_exp))
            total -= float(np.sum(cross))
            if u.tail_coeff != 0.0 and v.tail_coeff != 0.0:
                total += float(np.sum(u.tail_coeff * v.tail_coeff
                                      * op.tail_moment(u.tail_exp + v.tail_exp)))
    return hn * total


def total_energy(pair: MembranePair, problem: ProblemSpec) -> float:
    """Discrete two-membranes objective (see module docstring for scaling).

    Raises if the pair violates admissibility beyond the h^2 slack, naming
    the worst node.
    """
    gap = pair.u2.interior_values - pair.u1.interior_values
    h = problem.grid.h
    if np.any(gap > h * h):
        k = int(np.argmax(gap))
        raise ValueError(f"inadmissible pair at interior node {k}: gap {gap[k]:.3e}")
    e1 = inner_product(pair.u1, pair.u1, problem.kernel1, problem.grid, problem.op1)
    e2 = inner_product(pair.u2, pair.u2, problem.kernel2, problem.grid, problem.op2)
    hn = problem.grid.h ** problem.grid.dim
    forcing = hn * float(
        np.sum(pair.u1.interior_values * problem.f1.interior_values)
        + np.sum(pair.u2.interior_values * problem.f2.interior_values))
    return 0.5 * (e1 + e2) + forcing


def energy_gradient(pair: MembranePair, problem: ProblemSpec):
    """Exact gradient of total_energy in the interior values.

    Realizes h^n (f_i - L_i u_i) nodewise; exterior nodes carry zero since
    the data there is fixed.
    """
    hn = problem.grid.h ** problem.grid.dim
    g1 = hn * (problem.f1.interior_values - problem.op1.apply(pair.u1))
    g2 = hn * (problem.f2.interior_values - problem.op2.apply(pair.u2))
    z1 = GridFunction.zeros(problem.grid).with_interior(g1)
    z2 = GridFunction.zeros(problem.grid).with_interior(g2)
    return z1, z2


# ---------------------------------------------------------------------------
# Euler-Lagrange residuals


@dataclass
class ResidualReport:
    """Stationarity defects of a pair for the complementarity system.

    All scalar fields are nonnegative; ``complementarity_defect`` keeps the
    per-node values (u1 - u2) * (f1 - L1 u1).
    """
    max_sub_violation_1: float
    max_super_violation_2: float
    max_sum_defect: float
    max_complementarity_defect: float
    complementarity_defect: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "max_sub_violation_1": self.max_sub_violation_1,
            "max_super_violation_2": self.max_super_violation_2,
            "max_sum_defect": self.max_sum_defect,
            "max_complementarity_defect": self.max_complementarity_defect,
        }

    def worst(self) -> float:
        return max(self.max_sub_violation_1, self.max_super_violation_2,
                   self.max_sum_defect, self.max_complementarity_defect)


def el_residuals(pair: MembranePair, problem: ProblemSpec) -> ResidualReport:
    """Evaluate both operators on the pair and report the system defects."""
    r1 = problem.op1.apply(pair.u1) - problem.f1.interior_values
    r2 = problem.op2.apply(pair.u2) - problem.f2.interior_values
    gap = pair.u1.interior_values - pair.u2.interior_values
    comp = gap * (-r1)
    return ResidualReport(
        max_sub_violation_1=float(np.maximum(r1, 0.0).max()),
        max_super_violation_2=float(np.maximum(-r2, 0.0).max()),
        max_sum_defect=float(np.abs(r1 + r2).max()),
        max_complementarity_defect=float(np.abs(comp).max()),
        complementarity_defect=comp,
    )
