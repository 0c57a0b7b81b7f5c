"""Truncated quadratic penalty of a convex domain and its gradient.

The penalty is ``n * inf_{x in D} theta_M(y - x)`` where ``theta_M`` is the
Huber function: quadratic up to radius ``M`` and linear beyond.  Because
``theta_M`` is radial and increasing the infimum is attained at the
projection, which gives the closed forms implemented here in terms of the
distance ``d(y, D)`` only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PenaltyParams:
    n: float
    M: float = np.inf

    def __post_init__(self):
        if not self.n >= 0:
            raise ValueError("penalisation strength n must be >= 0")
        if not self.M > 0:
            raise ValueError("truncation radius M must be > 0")


def theta(M, h):
    """Huber function of the Euclidean norm of ``h`` (last axis)."""
    r = np.linalg.norm(np.atleast_1d(np.asarray(h, dtype=float)), axis=-1)
    rm = np.minimum(r, M)
    out = rm * (r - 0.5 * rm)
    return out if np.ndim(h) > 1 else float(out)


def _penalty_from_distance(n, M, dist):
    # min(d, M) * (d - min(d, M) / 2) covers both branches and tolerates M = inf
    dm = np.minimum(dist, M)
    return n * dm * (dist - 0.5 * dm)


def phi(params: PenaltyParams, domain, y):
    """Penalty value; zero on the closed domain."""
    y = np.asarray(y, dtype=float)
    _, dist = domain.project_batch(y)
    val = _penalty_from_distance(params.n, params.M, dist)
    return float(val[0]) if y.ndim == 1 else val


def grad_phi(params: PenaltyParams, domain, y, projection=None):
    """Gradient of :func:`phi`.

    ``n * min(d, M) * (y - P(y)) / d`` off the closed domain, zero on it.
    A precomputed ``(P(y), d)`` pair may be passed as ``projection``.
    """
    y = np.asarray(y, dtype=float)
    Y = y[None, :] if y.ndim == 1 else y
    P, dist = domain.project_batch(Y) if projection is None else projection
    diff = Y - P
    # n*min(d,M)/d equals n on the quadratic branch; the unit vector is never formed there
    scale = params.n * np.where(dist <= params.M, 1.0,
                                params.M / np.where(dist > 0, dist, 1.0))
    g = scale[:, None] * diff
    g[dist == 0.0] = 0.0
    return g[0] if y.ndim == 1 else g


def penalty_jacobian_bound(params: PenaltyParams) -> float:
    """Lipschitz constant of ``grad_phi`` (the quadratic-branch slope ``n``)."""
    return float(params.n)
