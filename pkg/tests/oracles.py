"""Reference computations coded without the package's numerical kernels."""
from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np
from scipy.optimize import brentq


def brute_force_projection(A, b, Y, feas_tol=1e-9):
    """Projection onto ``{A y >= b}`` by enumerating every affine face.

    For each subset ``S`` of constraints the nearest point of
    ``{A_S y = b_S}`` is a candidate; the closest feasible candidate wins.
    """
    A = np.asarray(A, float)
    b = np.asarray(b, float)
    Y = np.atleast_2d(np.asarray(Y, float))
    m = A.shape[0]
    best = np.full(Y.shape, np.nan)
    best_d = np.full(Y.shape[0], np.inf)
    for size in range(0, m + 1):
        for S in combinations(range(m), size):
            if size == 0:
                C = Y.copy()
            else:
                AS = A[list(S)]
                r = Y @ AS.T - b[list(S)]
                C = Y - r @ np.linalg.pinv(AS).T
                # pinv gives the least-norm correction; discard inconsistent systems
                if np.abs(C @ AS.T - b[list(S)]).max() > 1e-9 * (1 + np.abs(Y).max()):
                    continue
            feas = ((C @ A.T - b) >= -feas_tol * (1 + np.abs(C).max(axis=1, keepdims=True))).all(axis=1)
            dist = np.linalg.norm(Y - C, axis=1)
            take = feas & (dist < best_d)
            best[take] = C[take]
            best_d[take] = dist[take]
    return best, best_d


def naive_lattice_solve(T, N, n, f, g, M=np.inf, x_of_w=lambda t, w: w):
    """Penalised scheme on ``D = (0, inf)`` with ``H = 1``, node by node.

    ``f(t, x, y, z)`` and ``g(x)`` are scalar functions.  Each implicit step
    is solved with a bracketing root finder.
    """
    dt = T / N
    sq = np.sqrt(dt)

    def grad(y):
        if y >= 0:
            return 0.0
        d = -y
        return -n * min(d, M)

    values = [g(x_of_w(T, (2 * j - N) * sq)) for j in range(N + 1)]
    for i in range(N - 1, -1, -1):
        t = i * dt
        new = []
        for j in range(i + 1):
            up, down = values[j + 1], values[j]
            e = 0.5 * (up + down)
            z = 0.5 * (up - down) / sq
            x = x_of_w(t, (2 * j - i) * sq)

            def F(y):
                return y - e - dt * f(t, x, y, z) + dt * grad(y)

            lo, hi = e - 10.0, e + 10.0
            new.append(brentq(F, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500))
        values = new
    return values[0]


def binomial_mean(values, N):
    p = np.array([comb(N, j) for j in range(N + 1)], float) / 2.0**N
    return p @ np.asarray(values)
