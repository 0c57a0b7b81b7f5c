"""Forward diffusion: Euler-Maruyama paths and a recombining Bernoulli lattice."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ValidationError

DEFAULT_NODE_CAP = 2_000_000


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0 or int(self.N) != self.N or self.N < 1:
            raise ValidationError("time grid needs T > 0 and an integer N >= 1", assumption="time grid")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass
class ForwardModel:
    """``dX = b(t, X) dt + sigma(t, X) dW`` with vectorised coefficients.

    ``b`` maps ``(t, x (P, q)) -> (P, q)`` and ``sigma`` maps to
    ``(P, q, k)``.  ``exact_in_w`` optionally gives ``X_t`` as a function of
    ``(t, W_t)``; only such models can be placed on the lattice.
    """

    b: Callable
    sigma: Callable
    x0: np.ndarray
    k: int
    growth_L: float
    exact_in_w: Optional[Callable] = None
    name: str = "user-defined"
    params: dict = field(default_factory=dict)

    @property
    def q(self) -> int:
        return int(np.asarray(self.x0).shape[0])


def brownian_model(q=1, x0=None, sigma=1.0) -> ForwardModel:
    x0 = np.zeros(q) if x0 is None else np.asarray(x0, dtype=float)
    sig = float(sigma)

    def b(t, x):
        return np.zeros_like(x)

    def s(t, x):
        return np.broadcast_to(sig * np.eye(q), (x.shape[0], q, q)).copy()

    return ForwardModel(b, s, x0, q, max(abs(sig), 1e-300), lambda t, w: x0 + sig * w,
                        name="brownian", params={"sigma": sig})


def gbm_model(mu, sigma, x0) -> ForwardModel:
    """Componentwise geometric Brownian motion driven by independent factors."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q = x0.shape[0]
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (q,)).copy()
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (q,)).copy()

    def b(t, x):
        return mu * x

    def s(t, x):
        out = np.zeros((x.shape[0], q, q))
        idx = np.arange(q)
        out[:, idx, idx] = sig * x
        return out

    def exact(t, w):
        return x0 * np.exp((mu - 0.5 * sig**2) * t + sig * w)

    L = float(np.abs(mu).max() + np.abs(sig).max())
    return ForwardModel(b, s, x0, q, L, exact, name="gbm", params={"mu": mu, "sigma": sig})


def ou_model(theta, mean, sigma, x0) -> ForwardModel:
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    q = x0.shape[0]
    theta_, mean_, sig = float(theta), np.asarray(mean, dtype=float), float(sigma)

    def b(t, x):
        return theta_ * (mean_ - x)

    def s(t, x):
        return np.broadcast_to(sig * np.eye(q), (x.shape[0], q, q)).copy()

    L = abs(theta_) * (1.0 + float(np.abs(mean_).max())) + abs(sig)
    return ForwardModel(b, s, x0, q, L, None, name="ou",
                        params={"theta": theta_, "mean": mean_, "sigma": sig})


def check_forward_model(model: ForwardModel, samples=256, seed=0, T=1.0):
    """Sampled linear-growth and Lipschitz checks against ``growth_L``."""
    rng = np.random.default_rng(seed)
    q = model.q
    X = rng.standard_normal((samples, q)) * (1.0 + np.abs(model.x0).max()) * 3
    Xp = X + 0.1 * rng.standard_normal((samples, q))
    t = rng.uniform(0, T)
    bx, sx = model.b(t, X), model.sigma(t, X)
    bp, sp = model.b(t, Xp), model.sigma(t, Xp)
    growth = (np.linalg.norm(bx, axis=1) + np.linalg.norm(sx.reshape(samples, -1), axis=1)) / (
        1.0 + np.linalg.norm(X, axis=1))
    lip = (np.linalg.norm(bx - bp, axis=1) + np.linalg.norm((sx - sp).reshape(samples, -1), axis=1)) / (
        np.linalg.norm(X - Xp, axis=1))
    worst = float(max(growth.max(), lip.max()))
    if worst > model.growth_L * (1 + 1e-9) * np.sqrt(q):
        raise ValidationError(
            f"forward coefficients exceed growth/Lipschitz bound L={model.growth_L} (sampled {worst:.4g})",
            assumption="forward linear growth and Lipschitz bound L")
    return worst


# ---------------------------------------------------------------------------
# Euler-Maruyama
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathBundle:
    paths: np.ndarray  # (P, N+1, q)
    increments: np.ndarray  # (P, N, k)
    seed: int
    grid: TimeGrid

    @property
    def path_count(self) -> int:
        return self.paths.shape[0]


def brownian_increments(path_count, N, k, dt, seed):
    """Gaussian increments, one Philox stream per path keyed by ``(seed, path)``.

    The stream of path ``p`` does not depend on ``path_count``, so bundles
    are reproducible regardless of how paths are batched.
    """
    out = np.empty((path_count, N, k))
    sd = np.sqrt(dt)
    seed = int(seed) % 2**64
    for p in range(path_count):
        gen = np.random.Generator(np.random.Philox(key=[seed, p]))
        out[p] = sd * gen.standard_normal((N, k))
    return out


def simulate(model: ForwardModel, grid: TimeGrid, path_count: int, seed: int = 0) -> PathBundle:
    """Euler-Maruyama on ``grid`` with ``path_count`` independent paths."""
    if path_count < 1:
        raise ValueError("path_count must be >= 1")
    dW = brownian_increments(path_count, grid.N, model.k, grid.dt, seed)
    X = np.empty((path_count, grid.N + 1, model.q))
    X[:, 0] = model.x0
    dt = grid.dt
    for i in range(grid.N):
        t = i * dt
        drift = model.b(t, X[:, i])
        diff = model.sigma(t, X[:, i])
        bad = ~(np.isfinite(drift).all(axis=1) & np.isfinite(diff).reshape(path_count, -1).all(axis=1))
        if bad.any():
            p = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"non-finite forward coefficient at t={t:.6g}, path {p}",
                                 time=t, node=p)
        X[:, i + 1] = X[:, i] + drift * dt + np.einsum("pqk,pk->pq", diff, dW[:, i])
    return PathBundle(X, dW, int(seed), grid)


# ---------------------------------------------------------------------------
# Recombining lattice
# ---------------------------------------------------------------------------


class Lattice:
    """Product of ``k`` symmetric binomial trees with steps ``+-sqrt(dt)``.

    Slice ``i`` has ``(i+1)^k`` nodes indexed in C order by
    ``(j_1, ..., j_k)`` with ``W^m = (2 j_m - i) sqrt(dt)``.  Every node has
    ``2^k`` equally likely children.
    """

    def __init__(self, grid: TimeGrid, k: int, node_cap: int = DEFAULT_NODE_CAP):
        total = sum((i + 1) ** k for i in range(grid.N + 1))
        if total > node_cap:
            raise ValidationError(f"lattice would have {total} nodes (cap {node_cap})",
                                  assumption="lattice node cap")
        self.grid = grid
        self.k = int(k)
        self.sqdt = np.sqrt(grid.dt)
        # children shifts (2^k, k) in {0,1}
        self.shifts = np.array(np.meshgrid(*[[0, 1]] * self.k, indexing="ij")).reshape(self.k, -1).T

    @property
    def N(self):
        return self.grid.N

    def node_count(self, i) -> int:
        return (i + 1) ** self.k

    def w(self, i) -> np.ndarray:
        """Brownian values at slice ``i``, shape ``((i+1)^k, k)``."""
        j = np.array(np.meshgrid(*[np.arange(i + 1)] * self.k, indexing="ij")).reshape(self.k, -1).T
        return (2 * j - i) * self.sqdt

    def probabilities(self, i) -> np.ndarray:
        p1 = np.array([comb(i, j) for j in range(i + 1)], dtype=float) / 2.0**i
        out = p1
        for _ in range(self.k - 1):
            out = np.multiply.outer(out, p1)
        return out.reshape(-1)

    def child_index(self, i, shift) -> np.ndarray:
        """Flat index in slice ``i+1`` of the child reached by ``shift``."""
        j = np.array(np.meshgrid(*[np.arange(i + 1)] * self.k, indexing="ij")).reshape(self.k, -1).T
        jc = j + np.asarray(shift)
        return np.ravel_multi_index(tuple(jc.T), (i + 2,) * self.k)

    def child_increment(self, shift) -> np.ndarray:
        return (2 * np.asarray(shift) - 1) * self.sqdt

    def average_children(self, i, values) -> np.ndarray:
        """Exact ``E[values_{i+1} | node]`` for every node of slice ``i``."""
        v = np.asarray(values)
        rest = v.shape[1:]
        cube = v.reshape((i + 2,) * self.k + rest)
        acc = np.zeros((i + 1,) * self.k + rest)
        for s in self.shifts:
            sl = tuple(slice(int(a), int(a) + i + 1) for a in s)
            acc += cube[sl]
        return acc.reshape((-1,) + rest) / len(self.shifts)

    def average_children_times_dw(self, i, values) -> np.ndarray:
        """``E[values_{i+1} dW^T | node]``, shape ``(nodes, *rest, k)``."""
        v = np.asarray(values)
        rest = v.shape[1:]
        cube = v.reshape((i + 2,) * self.k + rest)
        acc = np.zeros((i + 1,) * self.k + rest + (self.k,))
        for s in self.shifts:
            sl = tuple(slice(int(a), int(a) + i + 1) for a in s)
            acc += cube[sl][..., None] * self.child_increment(s)
        return acc.reshape((-1,) + rest + (self.k,)) / len(self.shifts)


def build_lattice(grid: TimeGrid, k: int, node_cap: int = DEFAULT_NODE_CAP) -> Lattice:
    return Lattice(grid, k, node_cap)
