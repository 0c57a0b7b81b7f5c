"""Open convex domains: membership, Euclidean projection, normal cones.

Three families are supported:

* :class:`HalfspaceDomain` -- finite intersections ``{y : a_i . y > b_i}``
  (possibly zero constraints, i.e. the whole space).
* :class:`SwitchingDomain` -- the polyhedron ``{y^l > y^j - c^{lj}}`` of an
  optimal switching problem with cost matrix ``c``.
* :class:`LevelSetDomain` -- ``{phi < 0}`` for a user supplied convex ``phi``
  with gradient; :class:`BallDomain` is the closed-form special case.

All batch methods accept arrays of shape ``(P, d)`` (a single point of
shape ``(d,)`` is promoted) and never mutate their inputs.
"""
from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog, nnls

from .errors import DomainError, ProjectionError, ValidationError

#: Above this many candidate active sets the projection switches to Dykstra.
MAX_ACTIVE_SUBSETS = 4096


class Containment(enum.Enum):
    INTERIOR = "interior"
    BOUNDARY = "boundary"
    EXTERIOR = "exterior"


def default_tol(y) -> float:
    """Scale-aware boundary tolerance ``1e-8 * (1 + |y|)``."""
    return 1e-8 * (1.0 + float(np.linalg.norm(y)))


def _as_batch(y, dim):
    arr = np.asarray(y, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise DomainError(f"expected points of dimension {dim}, got shape {np.shape(y)}")
    return arr, single


@dataclass(frozen=True)
class NormalConeSample:
    """Outward normal cone at ``base_point`` given by unit generators.

    An empty generator array stands for the trivial cone ``{0}``.
    """

    base_point: np.ndarray
    generators: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def is_trivial(self) -> bool:
        return self.generators.shape[0] == 0


class ConvexDomain:
    """Common interface. Subclasses implement the batch primitives."""

    dim: int

    # -- batch primitives -------------------------------------------------
    def project_batch(self, Y):
        """Return ``(P, dist)`` with the projections of the rows of ``Y``."""
        raise NotImplementedError

    def interior_margin_batch(self, Y):
        """Distance to the boundary for interior rows; ``<= 0`` otherwise."""
        raise NotImplementedError

    def active_normals(self, y, tol):
        """Unit outward normals of the constraints active at ``y``."""
        raise NotImplementedError

    def interior_point(self) -> np.ndarray:
        raise NotImplementedError

    # -- convenience ------------------------------------------------------
    def project(self, y):
        p, dist = self.project_batch(y)
        if np.ndim(y) == 1:
            return p[0], float(dist[0])
        return p, dist

    def distance(self, Y):
        return self.project_batch(Y)[1]

    def classify_batch(self, Y, tol=None):
        """Vectorised :func:`contains`; returns an array of Containment codes.

        Codes: 0 interior, 1 boundary, 2 exterior.
        """
        Y, _ = _as_batch(Y, self.dim)
        if tol is None:
            tol = 1e-8 * (1.0 + np.linalg.norm(Y, axis=1))
        tol = np.broadcast_to(np.asarray(tol, dtype=float), (Y.shape[0],))
        margin = self.interior_margin_batch(Y)
        dist = self.distance(Y)
        codes = np.ones(Y.shape[0], dtype=np.int8)
        codes[margin > tol] = 0
        codes[dist > tol] = 2
        return codes

    def sample_boundary(self, count, rng, scale=1.0):
        """Boundary points obtained by projecting random exterior points."""
        if self.is_whole_space:
            return np.zeros((0, self.dim))
        center = self.interior_point()
        pts = []
        remaining = count
        for _ in range(50):
            Y = center + scale * 3.0 * rng.standard_normal((4 * remaining + 8, self.dim))
            P, dist = self.project_batch(Y)
            pts.append(P[dist > 1e-9])
            remaining = count - sum(len(p) for p in pts)
            if remaining <= 0:
                break
        return np.concatenate(pts)[:count]

    @property
    def is_whole_space(self) -> bool:
        return False


# ---------------------------------------------------------------------------
# Half-space intersections
# ---------------------------------------------------------------------------


class HalfspaceDomain(ConvexDomain):
    """Open polyhedron ``{y : A y > b}``; ``A`` may have zero rows."""

    def __init__(self, normals, offsets, dim=None):
        A = np.asarray(normals, dtype=float)
        b = np.asarray(offsets, dtype=float).reshape(-1)
        if A.size == 0:
            if dim is None:
                raise DomainError("dimension required for an unconstrained domain")
            A = np.zeros((0, int(dim)))
            b = np.zeros(0)
        if A.ndim == 1:
            A = A.reshape(len(b), -1)
        if A.shape[0] != b.shape[0]:
            raise DomainError("normals and offsets have different lengths")
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0.0):
            raise DomainError("zero normal vector in half-space description")
        self.A = A
        self.b = b
        self.dim = A.shape[1]
        self._norms = norms
        self._subsets = None
        self._center = self._find_interior_point()

    # construction helpers
    def _find_interior_point(self):
        m, d = self.A.shape
        if m == 0:
            return np.zeros(d)
        # maximise the uniform slack t subject to a_i.y - |a_i| t >= b_i, t <= 1
        c = np.zeros(d + 1)
        c[-1] = -1.0
        A_ub = np.hstack([-self.A, self._norms[:, None]])
        bounds = [(None, None)] * d + [(None, 1.0)]
        res = linprog(c, A_ub=A_ub, b_ub=-self.b, bounds=bounds, method="highs")
        if res.status != 0 or -res.fun <= 1e-12:
            raise DomainError("half-space intersection has empty interior")
        return res.x[:d]

    def interior_point(self):
        return self._center.copy()

    @property
    def is_whole_space(self):
        return self.A.shape[0] == 0

    def slacks(self, Y):
        """Signed distances to each hyperplane (positive inside), shape (P, m)."""
        Y, _ = _as_batch(Y, self.dim)
        return (Y @ self.A.T - self.b) / self._norms

    def interior_margin_batch(self, Y):
        s = self.slacks(Y)
        if s.shape[1] == 0:
            return np.full(s.shape[0], np.inf)
        return s.min(axis=1)

    def active_normals(self, y, tol):
        s = self.slacks(y)[0]
        idx = np.flatnonzero(s <= tol)
        return -self.A[idx] / self._norms[idx, None]

    # projection
    def _active_subsets(self):
        if self._subsets is None:
            m, d = self.A.shape
            subsets = []
            for size in range(1, min(m, d) + 1):
                for S in itertools.combinations(range(m), size):
                    AS = self.A[list(S)]
                    gram = AS @ AS.T
                    if np.linalg.matrix_rank(gram) < size:
                        continue
                    subsets.append((np.array(S), AS, np.linalg.inv(gram)))
            self._subsets = subsets
        return self._subsets

    def _n_subsets(self):
        m, d = self.A.shape
        return sum(comb(m, k) for k in range(1, min(m, d) + 1))

    def project_batch(self, Y):
        Y, _ = _as_batch(Y, self.dim)
        P = Y.copy()
        if self.A.shape[0] == 0:
            return P, np.zeros(Y.shape[0])
        scale = 1.0 + np.abs(Y).max(axis=1)
        viol = (Y @ self.A.T - self.b) < 0.0
        todo = np.flatnonzero(viol.any(axis=1))
        if todo.size:
            if self._n_subsets() <= MAX_ACTIVE_SUBSETS:
                P[todo] = self._project_active_set(Y[todo], scale[todo])
            else:
                P[todo] = self._project_dykstra(Y[todo])
        return P, np.linalg.norm(Y - P, axis=1)

    def _project_active_set(self, Y, scale):
        out = np.empty_like(Y)
        pending = np.arange(Y.shape[0])
        feas_tol = 1e-12 * scale
        for S, AS, gram_inv in self._active_subsets():
            if pending.size == 0:
                break
            Yp = Y[pending]
            lam = (self.b[S] - Yp @ AS.T) @ gram_inv.T
            Pp = Yp + lam @ AS
            ok = (lam >= -1e-14 * scale[pending, None]).all(axis=1)
            ok &= ((Pp @ self.A.T - self.b) >= -feas_tol[pending, None] * self._norms).all(axis=1)
            out[pending[ok]] = Pp[ok]
            pending = pending[~ok]
        if pending.size:
            out[pending] = self._project_dykstra(Y[pending])
        return out

    def _project_dykstra(self, Y, max_iter=20000, tol=1e-14):
        m = self.A.shape[0]
        X = Y.copy()
        incr = np.zeros((m,) + Y.shape)
        an2 = self._norms**2
        for _ in range(max_iter):
            X_old = X.copy()
            for i in range(m):
                Z = X + incr[i]
                gap = Z @ self.A[i] - self.b[i]
                step = np.minimum(gap, 0.0) / an2[i]
                Xn = Z - step[:, None] * self.A[i]
                incr[i] = Z - Xn
                X = Xn
            if np.max(np.abs(X - X_old)) <= tol * (1.0 + np.max(np.abs(X))):
                return X
        raise ProjectionError("Dykstra projection exceeded its iteration cap")


class SwitchingDomain(HalfspaceDomain):
    """``{y in R^d : y^l > y^j - c^{lj} for all l != j}``.

    The constructor enforces ``c^{ii} = 0`` and the strict triangle-type
    condition ``c^{ij} + c^{jl} - c^{il} > 0`` for ``i != j, j != l``.
    """

    def __init__(self, costs):
        c = np.asarray(costs, dtype=float)
        check_switching_costs(c)
        d = c.shape[0]
        pairs = [(l, j) for l in range(d) for j in range(d) if l != j]
        A = np.zeros((len(pairs), d))
        b = np.zeros(len(pairs))
        for r, (l, j) in enumerate(pairs):
            A[r, l] = 1.0
            A[r, j] = -1.0
            b[r] = -c[l, j]
        self.costs = c
        self.pairs = pairs
        super().__init__(A, b, dim=d)

    def interior_point(self):
        # translation invariant along (1,...,1): pin the last coordinate to 0
        p = self._center - self._center[-1]
        return p


def check_switching_costs(c):
    c = np.asarray(c, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or c.shape[0] < 2:
        raise ValidationError("switching costs must be a square matrix of size >= 2",
                              assumption="switching cost structure condition")
    d = c.shape[0]
    if np.any(np.diag(c) != 0.0):
        raise ValidationError("switching costs must satisfy c[i,i] = 0",
                              assumption="switching cost structure condition")
    for i in range(d):
        for j in range(d):
            if j == i:
                continue
            for l in range(d):
                if l == j:
                    continue
                if not c[i, j] + c[j, l] - c[i, l] > 0.0:
                    raise ValidationError(
                        "switching cost structure condition violated: "
                        f"c[{i},{j}] + c[{j},{l}] - c[{i},{l}] = "
                        f"{c[i, j] + c[j, l] - c[i, l]:.6g} must be > 0",
                        assumption="switching cost structure condition",
                    )


def whole_space(dim) -> HalfspaceDomain:
    return HalfspaceDomain(np.zeros((0, dim)), np.zeros(0), dim=dim)


# ---------------------------------------------------------------------------
# Smooth level-set domains
# ---------------------------------------------------------------------------


class LevelSetDomain(ConvexDomain):
    """``D = {phi < 0}`` for convex ``phi`` with bounded gradient.

    ``phi`` maps ``(P, d) -> (P,)`` and ``grad`` maps ``(P, d) -> (P, d)``.
    Near the boundary ``phi`` should behave like a signed distance; the
    projection only relies on this for its bisection fallback.
    """

    def __init__(self, phi: Callable, grad: Callable, dim: int,
                 interior_point=None, hessian: Optional[Callable] = None):
        self.phi = phi
        self.grad = grad
        self.hessian = hessian
        self.dim = int(dim)
        x0 = np.zeros(self.dim) if interior_point is None else np.asarray(interior_point, float)
        if not phi(x0[None, :])[0] < 0.0:
            raise DomainError("supplied interior point does not satisfy phi < 0")
        self._center = x0

    def interior_point(self):
        return self._center.copy()

    def interior_margin_batch(self, Y):
        Y, _ = _as_batch(Y, self.dim)
        g = np.linalg.norm(self.grad(Y), axis=1)
        return -self.phi(Y) / np.maximum(g, 1e-300)

    def active_normals(self, y, tol):
        y = np.asarray(y, float)[None, :]
        if self.interior_margin_batch(y)[0] > tol:
            return np.zeros((0, self.dim))
        g = self.grad(y)[0]
        return (g / np.linalg.norm(g))[None, :]

    def _hess(self, P):
        if self.hessian is not None:
            return self.hessian(P)
        h = 1e-6 * (1.0 + np.abs(P).max(axis=1))
        H = np.empty((P.shape[0], self.dim, self.dim))
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = 1.0
            H[:, :, j] = (self.grad(P + h[:, None] * e) - self.grad(P - h[:, None] * e)) / (2 * h[:, None])
        return 0.5 * (H + np.swapaxes(H, 1, 2))

    def project_batch(self, Y):
        Y, _ = _as_batch(Y, self.dim)
        P = Y.copy()
        out = np.flatnonzero(self.phi(Y) > 0.0)
        if out.size:
            P[out] = self._project_exterior(Y[out])
        return P, np.linalg.norm(Y - P, axis=1)

    def _project_exterior(self, Y, max_iter=100):
        d = self.dim
        g = self.grad(Y)
        gn2 = np.sum(g * g, axis=1)
        p = Y - (self.phi(Y) / gn2)[:, None] * g
        mu = np.linalg.norm(Y - p, axis=1) / np.sqrt(np.maximum(np.sum(self.grad(p) ** 2, axis=1), 1e-300))
        done = np.zeros(len(Y), dtype=bool)

        def kkt(p, mu, y):
            gp = self.grad(p)
            return np.concatenate([p - y + mu[:, None] * gp, self.phi(p)[:, None]], axis=1), gp

        for _ in range(max_iter):
            F, gp = kkt(p, mu, Y)
            res = np.linalg.norm(F, axis=1)
            done = res <= 1e-13 * (1.0 + np.abs(Y).max(axis=1))
            if done.all():
                return p
            J = np.zeros((len(Y), d + 1, d + 1))
            J[:, :d, :d] = np.eye(d) + mu[:, None, None] * self._hess(p)
            J[:, :d, d] = gp
            J[:, d, :d] = gp
            try:
                step = np.linalg.solve(J, -F[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                break
            alpha = np.ones(len(Y))
            for _ in range(30):
                pn = p + alpha[:, None] * step[:, :d]
                mun = mu + alpha * step[:, d]
                Fn, _ = kkt(pn, mun, Y)
                worse = (np.linalg.norm(Fn, axis=1) > (1 - 1e-4 * alpha) * res) & ~done
                if not worse.any():
                    break
                alpha = np.where(worse, alpha * 0.5, alpha)
            upd = ~done
            p[upd] = pn[upd]
            mu[upd] = mun[upd]
        # bisection along the inward gradient direction for the stragglers
        F, _ = kkt(p, mu, Y)
        bad = np.linalg.norm(F, axis=1) > 1e-9 * (1.0 + np.abs(Y).max(axis=1))
        if bad.any():
            p[bad] = self._bisect(Y[bad])
        return p

    def _bisect(self, Y):
        g = self.grad(Y)
        u = g / np.linalg.norm(g, axis=1, keepdims=True)
        lo = np.zeros(len(Y))
        hi = np.maximum(self.phi(Y), 1e-12)
        for _ in range(200):
            if (self.phi(Y - hi[:, None] * u) < 0).all():
                break
            hi *= 2.0
        else:
            raise ProjectionError("level-set projection: bisection bracket not found")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            inside = self.phi(Y - mid[:, None] * u) <= 0.0
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        return Y - hi[:, None] * u


class BallDomain(LevelSetDomain):
    """Open Euclidean ball; ``phi(y) = |y - center| - radius``."""

    def __init__(self, center, radius):
        center = np.asarray(center, dtype=float)
        if radius <= 0:
            raise DomainError("ball radius must be positive")
        self.center = center
        self.radius = float(radius)

        def phi(Y):
            return np.linalg.norm(Y - center, axis=1) - radius

        def grad(Y):
            v = Y - center
            n = np.linalg.norm(v, axis=1, keepdims=True)
            return np.divide(v, n, out=np.zeros_like(v), where=n > 0)

        super().__init__(phi, grad, center.shape[0], interior_point=center)

    def project_batch(self, Y):
        Y, _ = _as_batch(Y, self.dim)
        v = Y - self.center
        r = np.linalg.norm(v, axis=1)
        factor = np.where(r > self.radius, self.radius / np.maximum(r, 1e-300), 1.0)
        P = self.center + v * factor[:, None]
        return P, np.maximum(r - self.radius, 0.0)


# ---------------------------------------------------------------------------
# Module-level operations
# ---------------------------------------------------------------------------


def contains(domain: ConvexDomain, y, tol=None) -> Containment:
    """Classify a single point as interior, boundary (within ``tol``) or exterior."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.shape[0] != domain.dim:
        raise DomainError(f"point has dimension {y.shape}, domain has {domain.dim}")
    if tol is None:
        tol = default_tol(y)
    code = int(domain.classify_batch(y[None, :], tol)[0])
    return (Containment.INTERIOR, Containment.BOUNDARY, Containment.EXTERIOR)[code]


def project(domain: ConvexDomain, y):
    """Euclidean projection onto the closure; returns ``(p, dist)``."""
    return domain.project(y)


def normal_cone(domain: ConvexDomain, y, tol=None) -> NormalConeSample:
    """Outward normal cone at ``y`` (trivial in the interior)."""
    y = np.asarray(y, dtype=float)
    if tol is None:
        tol = default_tol(y)
    status = contains(domain, y, tol)
    if status is Containment.EXTERIOR:
        raise DomainError("normal cone requested at an exterior point")
    if status is Containment.INTERIOR:
        return NormalConeSample(y.copy(), np.zeros((0, domain.dim)))
    return NormalConeSample(y.copy(), domain.active_normals(y, tol))


def cone_membership(cone: NormalConeSample, u, tol=1e-8) -> bool:
    """True iff ``u`` lies within relative ``tol`` of the closed positive span."""
    return positive_span_contains(cone.generators, u, tol)


def positive_span_contains(generators, u, tol=1e-8) -> bool:
    u = np.asarray(u, dtype=float)
    norm_u = float(np.linalg.norm(u))
    if norm_u <= tol:
        return True
    G = np.asarray(generators, dtype=float)
    if G.size == 0:
        return False
    _, resid = nnls(G.T, u)
    return resid <= tol * norm_u
