"""Conditional-expectation engines used by the backward recursion.

Both engines expose the same small surface:

``state(i)``            forward state at slice ``i``, shape ``(n_i, q)``
``weights(i)``          probability weights of the slice nodes (sum to 1)
``expect(i, v)``        ``E[v_{i+1} | F_i]`` for ``v`` indexed by slice ``i+1``
``expect_dw(i, v)``     ``E[v_{i+1} dW_i^T | F_i]``, trailing axis ``k``
``transitions(i)``      ``(parent, child, dW, weight)`` tuples for residuals
"""
from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .errors import NumericalError, ValidationError
from .forward import Lattice, PathBundle


class LatticeEngine:
    kind = "lattice"

    def __init__(self, lattice: Lattice, model):
        if model.exact_in_w is None:
            raise ValidationError(
                f"forward model '{model.name}' has no closed form in W; use the regression engine",
                assumption="lattice engine needs X_t as a function of W_t")
        if model.k != lattice.k:
            raise ValidationError("lattice and model disagree on the Brownian dimension")
        self.lattice = lattice
        self.model = model
        self.grid = lattice.grid
        self.k = lattice.k
        self._states = {}

    @property
    def N(self):
        return self.grid.N

    def node_count(self, i):
        return self.lattice.node_count(i)

    def state(self, i):
        if i not in self._states:
            t = i * self.grid.dt
            self._states[i] = np.atleast_2d(self.model.exact_in_w(t, self.lattice.w(i)))
        return self._states[i]

    def weights(self, i):
        return self.lattice.probabilities(i)

    def expect(self, i, v):
        return self.lattice.average_children(i, v)

    def expect_dw(self, i, v):
        return self.lattice.average_children_times_dw(i, v)

    def transitions(self, i):
        w = self.weights(i) / len(self.lattice.shifts)
        parent = np.arange(self.node_count(i))
        for s in self.lattice.shifts:
            dW = np.broadcast_to(self.lattice.child_increment(s), (len(parent), self.k))
            yield parent, self.lattice.child_index(i, s), dW, w


def polynomial_features(X, degree):
    """All monomials of total degree ``<= degree`` (constant first)."""
    P, q = X.shape
    cols = [np.ones(P)]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(q), deg):
            cols.append(np.prod(X[:, combo], axis=1))
    return np.column_stack(cols)


def basis_size(q, degree):
    return polynomial_features(np.zeros((1, q)), degree).shape[1]


class RegressionEngine:
    """Least-squares projection onto polynomials of the current state."""

    kind = "regression"

    def __init__(self, bundle: PathBundle, degree: int = 2):
        P, _, q = bundle.paths.shape
        size = basis_size(q, degree)
        if P < 10 * size:
            raise ValidationError(
                f"regression needs at least {10 * size} paths for degree {degree} (got {P})",
                assumption="regression path count")
        self.bundle = bundle
        self.grid = bundle.grid
        self.degree = int(degree)
        self.k = bundle.increments.shape[2]
        self._qr = {}

    @property
    def N(self):
        return self.grid.N

    def node_count(self, i):
        return self.bundle.path_count

    def state(self, i):
        return self.bundle.paths[:, i]

    def weights(self, i):
        P = self.bundle.path_count
        return np.full(P, 1.0 / P)

    def _factor(self, i):
        if i not in self._qr:
            X = self.state(i)
            spread = X.std(axis=0)
            live = spread > 1e-12 * (1.0 + np.abs(X).max())
            if not live.any():
                B = np.ones((X.shape[0], 1))
            else:
                Xs = (X[:, live] - X[:, live].mean(axis=0)) / spread[live]
                B = polynomial_features(Xs, self.degree)
            Q, R = np.linalg.qr(B)
            diag = np.abs(np.diag(R))
            if diag.min() <= 1e-10 * diag.max():
                raise NumericalError(f"regression design matrix is rank deficient at step {i}",
                                     time=i * self.grid.dt)
            self._qr[i] = (Q, R)
        return self._qr[i]

    def coefficients(self, i, v):
        """Regression coefficients of ``v`` on the (standardised) basis at slice ``i``."""
        Q, R = self._factor(i)
        flat = np.asarray(v).reshape(len(v), -1)
        return np.linalg.solve(R, Q.T @ flat)

    def _project(self, i, v):
        Q, _ = self._factor(i)
        v = np.asarray(v)
        flat = v.reshape(v.shape[0], -1)
        return (Q @ (Q.T @ flat)).reshape(v.shape)

    def expect(self, i, v):
        return self._project(i, v)

    def expect_dw(self, i, v):
        v = np.asarray(v)
        dW = self.bundle.increments[:, i]
        prod = v[..., None] * dW.reshape((dW.shape[0],) + (1,) * (v.ndim - 1) + (self.k,))
        return self._project(i, prod)

    def transitions(self, i):
        P = self.bundle.path_count
        idx = np.arange(P)
        yield idx, idx, self.bundle.increments[:, i], np.full(P, 1.0 / P)
