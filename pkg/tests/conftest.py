"""Shared instances and independent oracles for the test suite."""

import numpy as np
import pytest

from membranelab import (
    FractionalPower,
    Grid,
    GridFunction,
    KernelSpec,
    LocalMatrix,
    ProblemSpec,
)


def fractional(s, c=1.0):
    return KernelSpec(s, FractionalPower(c))


def local(a=1.0):
    return KernelSpec(1.0, LocalMatrix(a))


def const_field(grid, value, with_tail=True):
    if with_tail:
        return GridFunction.constant(grid, value)
    return GridFunction(grid, np.full(grid.shape, float(value)))


def pair_problem(n_nodes, s1, s2, f1, f2, g1, g2, R=4.0):
    """Standard 1D two-membranes instance with constant data."""
    grid = Grid.unit_interval(n_nodes, R)
    return ProblemSpec(
        grid, fractional(s1), fractional(s2),
        f1=const_field(grid, f1, with_tail=False),
        f2=const_field(grid, f2, with_tail=False),
        exterior1=const_field(grid, g1),
        exterior2=const_field(grid, g2),
    )


# the fixed cross-validation suite: order pairs s1 < s2, sizes 17..129 nodes
CROSS_VALIDATION_SUITE = [
    # (n_nodes, s1, s2, f1, f2, g1, g2)
    (17, 0.3, 0.5, 1.0, -1.0, 0.0, -0.3),
    (17, 0.5, 0.7, 1.0, -1.0, 0.0, -0.2),
    (33, 0.3, 0.7, 1.0, -1.0, 0.0, -0.3),
    (33, 0.5, 0.9, 2.0, -1.0, 0.0, -0.25),
    (33, 0.3, 0.5, 0.5, -2.0, 0.1, -0.3),
    (65, 0.3, 0.9, 1.0, -1.0, 0.0, -0.3),
    (65, 0.5, 0.7, 1.5, -0.5, 0.0, -0.2),
    (65, 0.3, 0.7, 1.0, -2.0, 0.2, -0.4),
    (65, 0.5, 0.5, 1.0, -1.0, 0.0, -0.3),      # equal orders still well posed
    (129, 0.3, 0.7, 1.0, -1.0, 0.0, -0.35),
    (129, 0.5, 0.9, 1.0, -1.0, 0.0, -0.3),
    (129, 0.3, 0.5, 2.0, -2.0, 0.0, -0.5),
]


@pytest.fixture(scope="session")
def suite_problems():
    return [pair_problem(*row) for row in CROSS_VALIDATION_SUITE]


def pv_oracle(w, x, s, cutoff, c=1.0):
    """Adaptive-quadrature reference for the principal-value integral.

    ``w`` is a python callable taken to vanish beyond |z| > cutoff; the
    symmetrized increment kills the PV singularity, and the far field where
    both branches vanish integrates in closed form.
    """
    from scipy.integrate import quad

    wx = w(x)

    def integrand(y):
        wp = w(x + y) if abs(x + y) <= cutoff else 0.0
        wm = w(x - y) if abs(x - y) <= cutoff else 0.0
        return (wp + wm - 2.0 * wx) * c * y ** (-1.0 - 2.0 * s)

    far = cutoff + abs(x) + 1.0
    breaks = sorted({abs(cutoff - x), cutoff + x, 1.0, far})
    total = 0.0
    lo = 0.0
    for b in breaks:
        if b > lo + 1e-13:
            total += quad(integrand, lo, b, limit=400)[0]
            lo = b
    total += -2.0 * wx * c * far ** (-2.0 * s) / (2.0 * s)
    return total
