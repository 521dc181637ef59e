"""Grids, kernels and the quadrature discretization of nonlocal operators.

The operator realized here is

    L w(x) = PV int (w(y) - w(x)) K(y - x) dy,

for a symmetric translation-invariant kernel K comparable to |y|^(-n-2s),
discretized on a uniform grid over [-R, R]^n by a midpoint rule per grid
cell.  The cell containing the singularity is replaced by the exact radial
integral of K against the local second-order Taylor increment (realized as a
symmetric second difference), and everything beyond the truncation radius is
integrated analytically against the declared far-field tail model
``tail_coeff * |x|**tail_exp``.  Off-diagonal row weights are nonnegative, so
the scheme is monotone and the interior-restricted matrix is a strictly
diagonally dominant M-matrix.

For order s = 1 the same interfaces route to the classical divergence-form
second-order stencil.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Union

import numpy as np
from scipy.integrate import quad

__all__ = [
    "Grid", "GridFunction", "KernelSpec", "FractionalPower", "PerturbedPower",
    "LocalMatrix", "DiscreteNonlocalOperator", "build_operator",
    "apply_operator", "weighted_l2_norm", "rescale_kernel",
    "classical_normalization", "operator_cache_key", "save_operator",
    "load_operator",
]

_ILL_CONDITIONED_ORDER = 0.95


def classical_normalization(n: int, s: float) -> float:
    """Constant c(n, s) making K = c|y|^(-n-2s) the kernel of the fractional Laplacian."""
    return (4.0**s * math.gamma(n / 2.0 + s) * s
            / (math.pi ** (n / 2.0) * math.gamma(1.0 - s)))


# ---------------------------------------------------------------------------
# kernel kinds


@dataclass(frozen=True)
class FractionalPower:
    """K(y) = c * |y|^(-(n+2s)); exactly homogeneous, fixed point of rescaling."""
    c: float = 1.0


@dataclass(frozen=True)
class PerturbedPower:
    """K(y) = c * m(y) * |y|^(-(n+2s)) with an even, Lipschitz modulation m.

    ``modulation_id`` names the modulation for hashing/serialization; two
    specs compare equal iff their ids match.
    """
    c: float
    modulation: Callable[[np.ndarray], np.ndarray]
    modulation_id: str

    def __eq__(self, other):
        return (isinstance(other, PerturbedPower) and self.c == other.c
                and self.modulation_id == other.modulation_id)

    def __hash__(self):
        return hash((self.c, self.modulation_id))


@dataclass(frozen=True)
class LocalMatrix:
    """Constant-coefficient local operator div(A grad u); only for order s = 1."""
    A: Union[float, tuple]

    def as_array(self) -> np.ndarray:
        A = np.asarray(self.A, dtype=float)
        if A.ndim == 1 and A.size == 4:
            A = A.reshape(2, 2)
        return A

    def matrix(self, dim: int) -> np.ndarray:
        A = self.as_array()
        if A.ndim == 0:
            A = np.eye(dim) * float(A)
        if A.shape != (dim, dim):
            raise ValueError(f"LocalMatrix A must be scalar or {dim}x{dim}")
        return A


KernelKind = Union[FractionalPower, PerturbedPower, LocalMatrix]


@dataclass(frozen=True)
class KernelSpec:
    """Order, ellipticity bounds and kind of a translation-invariant kernel.

    Invariants (see :meth:`validate`): lam <= K(y)|y|^(n+2s) <= Lam at sampled
    y != 0, K even, and the gradient-growth bound for kinds that must satisfy
    it.  Order 1 is reserved for (and required by) the LocalMatrix kind.
    """
    order: float
    kind: KernelKind
    lam: float = 0.0
    Lam: float = 0.0

    def __post_init__(self):
        s = self.order
        if not (0.0 < s <= 1.0):
            raise ValueError(f"kernel order must lie in (0, 1], got {s}")
        if (s == 1.0) != isinstance(self.kind, LocalMatrix):
            raise ValueError("order 1 if and only if the kind is LocalMatrix")
        if self.lam <= 0.0 or self.Lam <= 0.0:
            lam, Lam = _default_bounds(self.kind)
            object.__setattr__(self, "lam", self.lam if self.lam > 0 else lam)
            object.__setattr__(self, "Lam", self.Lam if self.Lam > 0 else Lam)
        if self.lam > self.Lam:
            raise ValueError("need lam <= Lam")

    # -- pointwise evaluation ------------------------------------------------

    def evaluate(self, y: np.ndarray, dim: int) -> np.ndarray:
        """Kernel values K(y); y has shape (..., dim) or (...,) when dim == 1."""
        y = np.asarray(y, dtype=float)
        r = np.abs(y) if (dim == 1 and y.ndim <= 1) else np.linalg.norm(y, axis=-1)
        if isinstance(self.kind, FractionalPower):
            return self.kind.c * r ** (-(dim + 2 * self.order))
        if isinstance(self.kind, PerturbedPower):
            return (self.kind.c * self.kind.modulation(y)
                    * r ** (-(dim + 2 * self.order)))
        raise TypeError("LocalMatrix kernels have no pointwise values")

    def validate(self, dim: int = 1, n_samples: int = 64, seed: int = 0) -> None:
        """Sampled ellipticity/symmetry checks; raises on violation.

        The gradient-growth class is checked against the constant
        4 (n+2s) Lam: the pure power kernel already has
        |grad K| |y|^(n+1+2s) = (n+2s) c, so the admissible constant must
        scale with the order, and the factor 4 leaves room for Lipschitz
        modulations whose log-derivative decays like 1/|y|.  Kernels whose
        modulation keeps oscillating at unit rate far out fail the check.
        """
        if isinstance(self.kind, LocalMatrix):
            A = self.kind.matrix(dim)
            ev = np.linalg.eigvalsh(A)
            if not (self.lam - 1e-12 <= ev.min() and ev.max() <= self.Lam + 1e-12):
                raise ValueError("LocalMatrix eigenvalues violate [lam, Lam]")
            return
        rng = np.random.default_rng(seed)
        radii = np.exp(rng.uniform(np.log(1e-3), np.log(64.0), n_samples))
        if dim == 1:
            ys = radii * rng.choice([-1.0, 1.0], n_samples)
        else:
            ang = rng.uniform(0, 2 * np.pi, n_samples)
            ys = radii[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        r = radii
        vals = self.evaluate(ys, dim)
        ratio = vals * r ** (dim + 2 * self.order)
        if ratio.min() < self.lam * (1 - 1e-9) or ratio.max() > self.Lam * (1 + 1e-9):
            raise ValueError("sampled kernel violates the ellipticity bounds")
        sym = self.evaluate(-ys if dim == 1 else -ys, dim)
        if not np.allclose(vals, sym, rtol=1e-10, atol=0):
            raise ValueError("kernel is not even under y -> -y")
        # finite-difference gradient growth check
        eps = 1e-6 * r
        if dim == 1:
            gp = (self.evaluate(ys + eps, 1) - self.evaluate(ys - eps, 1)) / (2 * eps)
            gnorm = np.abs(gp)
        else:
            gnorm = np.zeros(n_samples)
            for ax in range(dim):
                dy = np.zeros((n_samples, dim))
                dy[:, ax] = eps
                gax = (self.evaluate(ys + dy, dim) - self.evaluate(ys - dy, dim)) / (2 * eps)
                gnorm = np.hypot(gnorm, gax)
        bound = 4.0 * (dim + 2 * self.order) * self.Lam
        if np.any(gnorm * r ** (dim + 1 + 2 * self.order) > bound):
            raise ValueError("sampled kernel violates the gradient growth bound")


def _default_bounds(kind: KernelKind) -> tuple[float, float]:
    if isinstance(kind, FractionalPower):
        return kind.c, kind.c
    if isinstance(kind, PerturbedPower):
        # sample the even modulation on a log-radial grid
        y = np.concatenate([-np.geomspace(1e-3, 16, 200), np.geomspace(1e-3, 16, 200)])
        m = kind.c * np.asarray(kind.modulation(y), dtype=float)
        return float(m.min()), float(m.max())
    A = kind.as_array()
    ev = np.linalg.eigvalsh(A) if A.ndim == 2 else np.atleast_1d(A)
    return float(np.min(ev)), float(np.max(ev))


def rescale_kernel(kernel: KernelSpec, r: float) -> KernelSpec:
    """Zoom-in rescaling K_r(y) = r^(n+2s) K(r y); preserves [lam, Lam]."""
    if r <= 0:
        raise ValueError("rescaling factor must be positive")
    if isinstance(kernel.kind, (FractionalPower, LocalMatrix)) or r == 1.0:
        return kernel
    base = kernel.kind
    mod = base.modulation

    def rescaled(y, _m=mod, _r=r):
        return _m(np.asarray(y) * _r)

    kind = PerturbedPower(base.c, rescaled, f"{base.modulation_id}@r={r:.12g}")
    return KernelSpec(kernel.order, kind, kernel.lam, kernel.Lam)


# ---------------------------------------------------------------------------
# grid and grid functions


@dataclass(frozen=True)
class Grid:
    """Uniform grid tiling [-R, R]^dim; the interior is the open unit ball."""
    dim: int
    h: float
    exterior_radius: float = 4.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("dim must be 1 or 2")
        if self.h <= 0:
            raise ValueError("spacing must be positive")
        m = self.exterior_radius / self.h
        if abs(m - round(m)) > 1e-9:
            raise ValueError("h must divide the exterior radius")

    @classmethod
    def unit_interval(cls, n_nodes: int, exterior_radius: float = 4.0) -> "Grid":
        """1D grid whose spacing puts n_nodes on the closed interval [-1, 1]."""
        if n_nodes < 3 or n_nodes % 2 == 0:
            raise ValueError("n_nodes must be odd and >= 3")
        h = 2.0 / (n_nodes - 1)
        R = exterior_radius
        if abs(R / h - round(R / h)) > 1e-9:
            R = round(R / h) * h
        return cls(1, h, R)

    @property
    def half_count(self) -> int:
        return int(round(self.exterior_radius / self.h))

    @property
    def axis(self) -> np.ndarray:
        m = self.half_count
        return np.arange(-m, m + 1) * self.h

    @property
    def shape(self) -> tuple:
        n = 2 * self.half_count + 1
        return (n,) if self.dim == 1 else (n, n)

    @property
    def interior_mask(self) -> np.ndarray:
        ax = self.axis
        if self.dim == 1:
            return np.abs(ax) < 1.0 - 1e-12
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        return X**2 + Y**2 < 1.0 - 1e-12

    @property
    def n_interior(self) -> int:
        return int(self.interior_mask.sum())

    def interior_coords(self) -> np.ndarray:
        if self.dim == 1:
            return self.axis[self.interior_mask]
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.stack([X[self.interior_mask], Y[self.interior_mask]], axis=-1)

    @property
    def truncation_radius(self) -> float:
        """Outer edge of the outermost grid cells; the tail model rules beyond."""
        return self.exterior_radius + self.h / 2.0


@dataclass
class GridFunction:
    """Values on the grid plus a far-field power tail for |x| > R.

    The tail ``tail_coeff * |x|**tail_exp`` keeps the function integrable
    against d_omega = dx / (1 + |x|^(n+2s)) whenever tail_exp < 2s.
    """
    grid: Grid
    values: np.ndarray
    tail_coeff: float = 0.0
    tail_exp: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError("values shape does not match the grid")

    @classmethod
    def zeros(cls, grid: Grid) -> "GridFunction":
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.shape, float(c)), tail_coeff=float(c), tail_exp=0.0)

    @classmethod
    def from_callable(cls, grid: Grid, fn, tail_coeff: float = 0.0,
                      tail_exp: float = 0.0) -> "GridFunction":
        ax = grid.axis
        if grid.dim == 1:
            vals = np.asarray(fn(ax), dtype=float)
        else:
            X, Y = np.meshgrid(ax, ax, indexing="ij")
            vals = np.asarray(fn(X, Y), dtype=float)
        return cls(grid, vals, tail_coeff, tail_exp)

    def copy(self) -> "GridFunction":
        return GridFunction(self.grid, self.values.copy(), self.tail_coeff, self.tail_exp)

    @property
    def interior_values(self) -> np.ndarray:
        return self.values[self.grid.interior_mask]

    def with_interior(self, vals: np.ndarray) -> "GridFunction":
        out = self.copy()
        out.values[self.grid.interior_mask] = vals
        return out


# ---------------------------------------------------------------------------
# the discrete operator


@dataclass
class DiscreteNonlocalOperator:
    """Quadrature realization of the nonlocal operator on one grid.

    ``weights`` holds, per interior node, the nonnegative coupling to every
    grid node (midpoint-cell kernel weights with the singular-cell second
    difference folded onto the immediate neighbors).  ``singular_coeff`` is
    the radial second-moment of K over the singular cell, ``tail_mass`` the
    kernel mass beyond the truncation radius per interior node.  Applied to a
    constant with a constant tail model the operator returns exactly zero.
    """
    grid: Grid
    kernel: KernelSpec
    weights: np.ndarray | None          # (n_int, n_all) for dim == 1
    stencil: np.ndarray | None          # dense offset stencil for dim == 2
    singular_coeff: float
    tail_mass: np.ndarray               # (n_int,)
    ill_conditioned: bool = False
    _row_sums: np.ndarray | None = None
    _tail_moments: dict = field(default_factory=dict, repr=False)
    _interior_matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def row_sums(self) -> np.ndarray:
        if self._row_sums is None:
            if self.weights is not None:
                self._row_sums = self.weights.sum(axis=1)
            else:
                self._row_sums = np.full(self.grid.n_interior, self.stencil.sum())
        return self._row_sums

    # -- tail machinery ------------------------------------------------------

    def tail_moment(self, p: float) -> np.ndarray:
        """Per-interior-node integral of |z|^p K(z - x_i) over |z| > R_t."""
        key = round(float(p), 12)
        if key == 0.0:
            return self.tail_mass
        if key not in self._tail_moments:
            self._tail_moments[key] = _tail_moment(self.grid, self.kernel, p)
        return self._tail_moments[key]

    def apply(self, f: GridFunction) -> np.ndarray:
        """Operator values on interior nodes (flat array).

        Increments (f_j - f_i) are formed before summation, so constants are
        annihilated exactly, not up to cancellation error.
        """
        if f.grid != self.grid:
            raise ValueError("grid mismatch between operator and function")
        mask = self.grid.interior_mask
        vals = f.values
        if self.grid.dim == 1:
            vi = vals[mask]
            n_int = vi.size
            out = np.empty(n_int)
            block = max(1, int(4e6) // max(vals.size, 1))
            for lo in range(0, n_int, block):
                hi = min(lo + block, n_int)
                diffs = vals[None, :] - vi[lo:hi, None]
                out[lo:hi] = np.einsum("ij,ij->i", self.weights[lo:hi], diffs)
        else:
            out = _apply_stencil_2d(self.grid, self.stencil, vals)
        if isinstance(self.kernel.kind, LocalMatrix):
            return out
        out = out - vals[mask] * self.tail_mass
        if f.tail_coeff != 0.0:
            out = out + f.tail_coeff * self.tail_moment(f.tail_exp)
        return out

    def interior_matrix(self) -> np.ndarray:
        """A = -(L restricted to interior unknowns); SPD M-matrix."""
        if self._interior_matrix is None:
            if self.grid.dim == 1:
                mask = self.grid.interior_mask
                Wi = self.weights[:, mask]
                A = -Wi.copy()
                d = self.row_sums + self.tail_mass
                idx = np.arange(A.shape[0])
                A[idx, idx] += d
            else:
                n_int = self.grid.n_interior
                if n_int > 4096:
                    raise ValueError("dense interior matrix capped at 4096 unknowns")
                A = _interior_matrix_2d(self)
            self._interior_matrix = A
        return self._interior_matrix

    def boundary_source(self, g: GridFunction) -> np.ndarray:
        """Source vector b with (L u)_int = -A u_int + b for exterior data g."""
        if g.grid != self.grid:
            raise ValueError("grid mismatch")
        mask = self.grid.interior_mask
        if self.grid.dim == 1:
            b = self.weights[:, ~mask] @ g.values[~mask]
        else:
            gm = g.values.copy()
            gm[mask] = 0.0
            from scipy.signal import fftconvolve
            b = fftconvolve(gm, self.stencil, mode="same")[mask]
        if g.tail_coeff != 0.0 and not isinstance(self.kernel.kind, LocalMatrix):
            b = b + g.tail_coeff * self.tail_moment(g.tail_exp)
        return b


def build_operator(grid: Grid, kernel: KernelSpec) -> DiscreteNonlocalOperator:
    """Assemble the quadrature weights of the nonlocal operator on the grid."""
    if not (0.0 < kernel.order <= 1.0):
        raise ValueError("kernel order outside (0, 1]")
    if grid.exterior_radius < 2.0:
        raise ValueError("exterior radius must be at least 2")
    ill = False
    if kernel.order > _ILL_CONDITIONED_ORDER and not isinstance(kernel.kind, LocalMatrix):
        ill = True
        warnings.warn(
            f"nonlocal kernel of order {kernel.order} > {_ILL_CONDITIONED_ORDER} "
            "is ill-conditioned on this quadrature; consider the local kind",
            stacklevel=2)
    if isinstance(kernel.kind, LocalMatrix):
        return _build_local(grid, kernel)
    if grid.dim == 1:
        return _build_fractional_1d(grid, kernel, ill)
    return _build_fractional_2d(grid, kernel, ill)


def _build_local(grid: Grid, kernel: KernelSpec) -> DiscreteNonlocalOperator:
    A = kernel.kind.matrix(grid.dim)
    h = grid.h
    mask = grid.interior_mask
    if grid.dim == 1:
        a = A[0, 0]
        n_all = grid.shape[0]
        idx_int = np.nonzero(mask)[0]
        W = np.zeros((idx_int.size, n_all))
        rows = np.arange(idx_int.size)
        W[rows, idx_int - 1] = a / h**2
        W[rows, idx_int + 1] = a / h**2
        return DiscreteNonlocalOperator(grid, kernel, W, None, 0.0,
                                        np.zeros(idx_int.size))
    a11, a22, a12 = A[0, 0], A[1, 1], A[0, 1]
    st = np.zeros((3, 3))
    # monotone 7-point stencil: route the mixed term through the diagonal
    # corners matching its sign, compensating on the axis neighbors
    if a12 >= 0:
        st[2, 2] = st[0, 0] = a12 / h**2
    else:
        st[2, 0] = st[0, 2] = -a12 / h**2
    st[2, 1] = st[0, 1] = (a11 - abs(a12)) / h**2
    st[1, 2] = st[1, 0] = (a22 - abs(a12)) / h**2
    if st.min() < 0:
        raise ValueError("LocalMatrix stencil not monotone; |a12| exceeds the diagonal")
    return DiscreteNonlocalOperator(grid, kernel, None, st, 0.0,
                                    np.zeros(grid.n_interior))


def _kernel_radial_table(kernel: KernelSpec, dists: np.ndarray) -> np.ndarray:
    if isinstance(kernel.kind, FractionalPower):
        return kernel.kind.c * dists ** (-(1 + 2 * kernel.order))
    return kernel.evaluate(dists, 1)


def _build_fractional_1d(grid: Grid, kernel: KernelSpec,
                         ill: bool) -> DiscreteNonlocalOperator:
    h, s = grid.h, kernel.order
    n_all = grid.shape[0]
    mask = grid.interior_mask
    idx_int = np.nonzero(mask)[0]
    offs = np.arange(1, n_all)
    table = np.zeros(n_all)
    if isinstance(kernel.kind, FractionalPower):
        table[1:] = h * _kernel_radial_table(kernel, offs * h)
        mu0 = kernel.kind.c * (h / 2) ** (2 - 2 * s) / (2 - 2 * s)
    else:
        # even part of the kernel over positive offsets
        kp = kernel.evaluate(offs * h, 1)
        km = kernel.evaluate(-offs * h, 1)
        table[1:] = h * 0.5 * (kp + km)
        mu0 = quad(lambda y: y**2 * 0.5 * (kernel.evaluate(np.array(y), 1)
                                           + kernel.evaluate(np.array(-y), 1)),
                   0.0, h / 2, limit=200)[0]
    offmat = np.abs(idx_int[:, None] - np.arange(n_all)[None, :])
    W = table[offmat]
    rows = np.arange(idx_int.size)
    W[rows, idx_int - 1] += mu0 / h**2
    W[rows, idx_int + 1] += mu0 / h**2
    tail_mass = _tail_moment(grid, kernel, 0.0)
    return DiscreteNonlocalOperator(grid, kernel, W, None, mu0, tail_mass,
                                    ill_conditioned=ill)


def _build_fractional_2d(grid: Grid, kernel: KernelSpec,
                         ill: bool) -> DiscreteNonlocalOperator:
    if not isinstance(kernel.kind, FractionalPower):
        raise NotImplementedError("dim 2 supports FractionalPower and LocalMatrix kinds")
    h, s, c = grid.h, kernel.order, kernel.kind.c
    m = grid.half_count
    ax = np.arange(-2 * m, 2 * m + 1) * h
    OX, OY = np.meshgrid(ax, ax, indexing="ij")
    r = np.hypot(OX, OY)
    st = np.zeros_like(r)
    nz = r > 0
    st[nz] = h**2 * c * r[nz] ** (-(2 + 2 * s))
    # singular cell: radial integral over the equal-area disc
    req = h / math.sqrt(math.pi)
    mu0 = (math.pi * c / 2.0) * req ** (2 - 2 * s) / (2 - 2 * s)
    ctr = 2 * m
    st[ctr, ctr] = 0.0
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        st[ctr + di, ctr + dj] += mu0 / h**2
    tail_mass = _tail_moment(grid, kernel, 0.0)
    return DiscreteNonlocalOperator(grid, kernel, None, st, mu0, tail_mass,
                                    ill_conditioned=ill)


def _apply_stencil_2d(grid: Grid, stencil: np.ndarray, vals: np.ndarray) -> np.ndarray:
    """Row-wise stencil application via views; exact on constants."""
    mask = grid.interior_mask
    n = grid.shape[0]
    sd = stencil.shape[0]
    ctr = sd // 2
    ii, jj = np.nonzero(mask)
    out = np.empty(ii.size)
    if sd >= 2 * n - 1:
        # wide stencil: slide a grid-sized window over the stencil
        for k in range(ii.size):
            view = stencil[ctr - ii[k]: ctr - ii[k] + n, ctr - jj[k]: ctr - jj[k] + n]
            out[k] = float(np.sum(view * (vals - vals[ii[k], jj[k]])))
    else:
        # compact stencil: slide a stencil-sized window over the grid
        for k in range(ii.size):
            i, j = ii[k], jj[k]
            win = vals[i - ctr: i + ctr + 1, j - ctr: j + ctr + 1]
            out[k] = float(np.sum(stencil * (win - vals[i, j])))
    return out


def _interior_matrix_2d(op: DiscreteNonlocalOperator) -> np.ndarray:
    grid = op.grid
    mask = grid.interior_mask
    idx = np.nonzero(mask.ravel())[0]
    n = grid.shape[0]
    n_int = idx.size
    A = np.zeros((n_int, n_int))
    ii, jj = np.divmod(idx, n)
    ctr = op.stencil.shape[0] // 2
    for col in range(n_int):
        di = ii - ii[col] + ctr
        dj = jj - jj[col] + ctr
        A[:, col] = -op.stencil[di, dj]
    d = op.stencil.sum() + op.tail_mass
    A[np.arange(n_int), np.arange(n_int)] += d
    return A


def _tail_moment(grid: Grid, kernel: KernelSpec, p: float) -> np.ndarray:
    """int_{|z| > R_t} |z|^p K(z - x_i) dz per interior node."""
    if isinstance(kernel.kind, LocalMatrix):
        return np.zeros(grid.n_interior)
    s = kernel.order
    if p >= 2 * s:
        raise ValueError(f"tail exponent {p} is not d_omega-integrable for order {s}")
    Rt = grid.truncation_radius
    if grid.dim == 1:
        xs = grid.axis[grid.interior_mask]
        if isinstance(kernel.kind, FractionalPower) and p == 0.0:
            c = kernel.kind.c
            return (c / (2 * s)) * ((Rt - xs) ** (-2 * s) + (Rt + xs) ** (-2 * s))

        def onept(xi):
            f = lambda z: z**p * (kernel.evaluate(np.array(z - xi), 1)
                                  + kernel.evaluate(np.array(z + xi), 1))
            # substitute z = Rt / t to map the unbounded range onto (0, 1]
            g = lambda t: f(Rt / t) * Rt / t**2
            return quad(g, 0.0, 1.0, limit=200)[0]

        return np.array([float(onept(xi)) for xi in xs])
    # dim == 2, FractionalPower: polar integration around each node
    c = kernel.kind.c
    pts = grid.interior_coords()
    theta = (np.arange(256) + 0.5) * 2 * np.pi / 256
    w = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    out = np.empty(pts.shape[0])
    for k, x in enumerate(pts):
        b = x @ w.T
        dist = -b + np.sqrt(np.maximum(Rt**2 - (x @ x) + b**2, 0.0))
        if p == 0.0:
            rad = dist ** (-2 * s) / (2 * s)
        else:
            rad = dist ** (p - 2 * s) / (2 * s - p)
        out[k] = c * rad.mean() * 2 * np.pi
    return out


def apply_operator(op: DiscreteNonlocalOperator, f: GridFunction) -> GridFunction:
    """Evaluate the operator; exterior nodes carry NaN ("not evaluated")."""
    vals = np.full(op.grid.shape, np.nan)
    vals[op.grid.interior_mask] = op.apply(f)
    return GridFunction(op.grid, vals, tail_coeff=0.0, tail_exp=0.0)


def weighted_l2_norm(f: GridFunction, s: float) -> float:
    """L2 norm against d_omega = dx / (1 + |x|^(n+2s)), tail included.

    The squared tail integrand decays like |x|^(2*tail_exp - n - 2s), so
    square integrability requires tail_exp < s (strictly stronger than the
    d_omega-integrability condition tail_exp < 2s; both are enforced).
    """
    grid = f.grid
    n = grid.dim
    if f.tail_coeff != 0.0:
        if f.tail_exp >= 2 * s:
            raise ValueError("tail diverges in L1(d_omega): tail_exp >= 2s")
        if 2 * f.tail_exp >= 2 * s:
            raise ValueError("squared tail diverges against d_omega: tail_exp >= s")
    if not np.all(np.isfinite(f.values)):
        raise ValueError("grid values must be finite")
    ax = grid.axis
    if n == 1:
        w = 1.0 / (1.0 + np.abs(ax) ** (1 + 2 * s))
        bulk = float(np.sum(f.values**2 * w) * grid.h)
    else:
        X, Y = np.meshgrid(ax, ax, indexing="ij")
        w = 1.0 / (1.0 + np.hypot(X, Y) ** (2 + 2 * s))
        bulk = float(np.sum(f.values**2 * w) * grid.h**2)
    tail = 0.0
    if f.tail_coeff != 0.0:
        Rt = grid.truncation_radius
        p = f.tail_exp
        if n == 1:
            integrand = lambda t: 2 * (Rt / t) ** (2 * p) / (1 + (Rt / t) ** (1 + 2 * s)) * Rt / t**2
        else:
            integrand = lambda t: 2 * np.pi * (Rt / t) ** (2 * p + 1) / (1 + (Rt / t) ** (2 + 2 * s)) * Rt / t**2
        tail = f.tail_coeff**2 * quad(integrand, 0.0, 1.0, limit=200)[0]
    return math.sqrt(bulk + tail)


# ---------------------------------------------------------------------------
# operator cache


def operator_cache_key(grid: Grid, kernel: KernelSpec) -> str:
    kind = kernel.kind
    if isinstance(kind, FractionalPower):
        kd = f"frac:{kind.c!r}"
    elif isinstance(kind, PerturbedPower):
        kd = f"pert:{kind.c!r}:{kind.modulation_id}"
    else:
        kd = f"local:{np.asarray(kind.A).tolist()!r}"
    payload = (f"grid:{grid.dim}:{grid.h!r}:{grid.exterior_radius!r}|"
               f"kernel:{kernel.order!r}:{kernel.lam!r}:{kernel.Lam!r}:{kd}")
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


def save_operator(op: DiscreteNonlocalOperator, cache_dir) -> Path:
    path = Path(cache_dir) / f"op-{operator_cache_key(op.grid, op.kernel)}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(
        path,
        weights=op.weights if op.weights is not None else np.array([]),
        stencil=op.stencil if op.stencil is not None else np.array([]),
        singular_coeff=op.singular_coeff,
        tail_mass=op.tail_mass,
        ill=op.ill_conditioned,
    )
    return path


def load_operator(grid: Grid, kernel: KernelSpec, cache_dir) -> DiscreteNonlocalOperator | None:
    path = Path(cache_dir) / f"op-{operator_cache_key(grid, kernel)}.npz"
    if not path.exists():
        return None
    data = np.load(path)
    W = data["weights"]
    St = data["stencil"]
    return DiscreteNonlocalOperator(
        grid, kernel,
        W if W.size else None,
        St if St.size else None,
        float(data["singular_coeff"]),
        data["tail_mass"],
        bool(data["ill"]),
    )
