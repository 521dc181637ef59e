"""Compiled Gauss-Seidel kernels shared by the sweep-type solvers.

These loops are inherently sequential per sweep (each node update sees the
latest neighbor values), so they are JIT-compiled with numba.  All kernels
operate on the dense interior system A u = c, where A is the negated
interior-restricted nonlocal operator (an M-matrix by construction of the
quadrature) and c carries forcing, exterior data and tail sources.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def psor_sweep(A, c, phi, u, omega, reverse):
    """One projected SOR sweep for min(A u - c, u - phi) = 0; returns max update."""
    n = c.shape[0]
    delta = 0.0
    for t in range(n):
        k = n - 1 - t if reverse else t
        r = c[k]
        for j in range(n):
            r -= A[k, j] * u[j]
        r += A[k, k] * u[k]
        cand = (1.0 - omega) * u[k] + omega * r / A[k, k]
        unew = cand if cand > phi[k] else phi[k]
        d = abs(unew - u[k])
        if d > delta:
            delta = d
        u[k] = unew
    return delta


@numba.njit(cache=True)
def pair_gs_sweep(A1, c1, A2, c2, u1, u2, reverse):
    """One nodewise complementarity sweep for the coupled membrane system.

    At each node the two decoupled row equations are solved tentatively; if
    the tentative updates cross (or tie), the node is treated as contact and
    both values are set to the root of the summed row equation.
    Returns the max absolute update over the sweep.
    """
    n = c1.shape[0]
    delta = 0.0
    for t in range(n):
        k = n - 1 - t if reverse else t
        r1 = c1[k]
        r2 = c2[k]
        for j in range(n):
            r1 -= A1[k, j] * u1[j]
            r2 -= A2[k, j] * u2[j]
        r1 += A1[k, k] * u1[k]
        r2 += A2[k, k] * u2[k]
        t1 = r1 / A1[k, k]
        t2 = r2 / A2[k, k]
        if t2 >= t1:
            v = (r1 + r2) / (A1[k, k] + A2[k, k])
            t1 = v
            t2 = v
        d1 = abs(t1 - u1[k])
        d2 = abs(t2 - u2[k])
        if d1 > delta:
            delta = d1
        if d2 > delta:
            delta = d2
        u1[k] = t1
        u2[k] = t2
    return delta
