"""Oblique reflection fields ``H(t, x, y, z)``.

A :class:`ReflectionField` wraps a vectorised callable returning one
``d x d`` matrix per node together with its declared bound ``L`` and
obliqueness constant ``eta``.  Builders are provided for the identity
(normal reflection), a constant user matrix, the switching-problem field
obtained by barycentric interpolation of vertex projectors, and a
discontinuous corner example with two distinct solutions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .geometry import (
    Containment,
    ConvexDomain,
    HalfspaceDomain,
    SwitchingDomain,
    check_switching_costs,
    contains,
    default_tol,
    normal_cone,
    positive_span_contains,
)

SMOOTH, CONTINUOUS, DISCONTINUOUS = "smooth", "continuous", "discontinuous"


@dataclass
class ReflectionField:
    """Matrix field plus the constants it is declared to satisfy.

    ``evaluate(t, x, y, z)`` receives ``x (P, q)``, ``y (P, d)`` and
    ``z (P, d, k)`` and must return ``(P, d, d)``.  ``discontinuity`` is an
    optional predicate on boundary points ``(P, d) -> bool array`` marking
    where obliqueness checks are skipped.
    """

    evaluate: Callable
    dim: int
    bound_L: float
    obliqueness_eta: float
    continuity: str = CONTINUOUS
    discontinuity: Optional[Callable] = None
    name: str = "user"
    extra: dict = field(default_factory=dict)

    def __call__(self, t, x, y, z=None):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        P = y.shape[0]
        if x is None:
            x = np.zeros((P, 1))
        if z is None:
            z = np.zeros((P, self.dim, 1))
        return self.evaluate(t, np.atleast_2d(x), y, z)

    def at(self, y, t=0.0):
        """Single matrix at one point with zero ``x`` and ``z``."""
        return self(t, None, np.asarray(y, float)[None, :])[0]


def identity_field(dim) -> ReflectionField:
    eye = np.eye(dim)

    def evaluate(t, x, y, z):
        return np.broadcast_to(eye, (y.shape[0], dim, dim)).copy()

    return ReflectionField(evaluate, dim, 1.0, 1.0, SMOOTH, name="identity")


def matrix_field(matrix, eta=None) -> ReflectionField:
    """Constant matrix everywhere.

    Without an explicit ``eta`` the smallest eigenvalue of the symmetric
    part is used, a lower bound over all unit vectors.
    """
    H = np.asarray(matrix, dtype=float)
    d = H.shape[0]
    if eta is None:
        eta = float(np.linalg.eigvalsh(0.5 * (H + H.T)).min())

    def evaluate(t, x, y, z):
        return np.broadcast_to(H, (y.shape[0], d, d)).copy()

    return ReflectionField(evaluate, d, float(np.linalg.norm(H, 2)), float(eta), SMOOTH,
                           name="user-matrix", extra={"matrix": H})


# ---------------------------------------------------------------------------
# Switching-problem field
# ---------------------------------------------------------------------------


def _affine_dim(points):
    if len(points) <= 1:
        return 0
    diffs = points[1:] - points[0]
    return int(np.linalg.matrix_rank(diffs, tol=1e-9 * (1.0 + np.abs(points).max())))


class SwitchingH:
    """Continuous reflection field for the switching polyhedron.

    The slice ``{y in closure(D) : y^d = 0}``, seen in ``R^{d-1}``, is a
    polytope.  Each of its vertices gets the orthogonal projector onto the
    span of ``e^l`` over the constraints ``y^l = y^j - c^{lj}`` tight there;
    facet values are barycentric interpolations over a pulling
    triangulation anchored at lexicographically smallest vertices.  A point
    ``y`` is mapped to the slice through ``P(y) - P(y)^d (1, ..., 1)``.
    """

    def __init__(self, costs):
        c = np.asarray(costs, dtype=float)
        check_switching_costs(c)
        self.costs = c
        self.d = d = c.shape[0]
        self.domain = SwitchingDomain(c)
        m = d - 1
        # slice polytope rows in R^{d-1}: a . s >= b
        pairs = self.domain.pairs
        A0 = np.zeros((len(pairs), m))
        b0 = np.zeros(len(pairs))
        for r, (l, j) in enumerate(pairs):
            if l < m:
                A0[r, l] += 1.0
            if j < m:
                A0[r, j] -= 1.0
            b0[r] = -c[l, j]
        self.pairs = pairs
        self.slice_A = A0
        self.slice_b = b0
        self.slice = HalfspaceDomain(A0, b0, dim=m)
        self._enumerate_vertices()
        self._build_facets()
        self._prepare_interpolation()

    # -- construction ------------------------------------------------------
    def _enumerate_vertices(self):
        m = self.d - 1
        A, b = self.slice_A, self.slice_b
        scale = 1.0 + np.abs(self.costs).max()
        found = []
        for S in combinations(range(len(b)), m):
            AS = A[list(S)]
            if np.linalg.matrix_rank(AS) < m:
                continue
            v = np.linalg.solve(AS, b[list(S)])
            if np.all(A @ v - b >= -1e-10 * scale):
                if not any(np.allclose(v, w, atol=1e-10 * scale, rtol=0) for w in found):
                    found.append(v)
        if len(found) < m + 1:
            raise ValueError("degenerate switching polytope: fewer than d vertices")
        V = np.array(sorted(found, key=lambda v: tuple(np.round(v, 12))))
        tight = [frozenset(np.flatnonzero(np.abs(A @ v - b) <= 1e-10 * scale).tolist()) for v in V]
        mats = []
        index_sets = []
        for T in tight:
            sources = sorted({self.pairs[r][0] for r in T})
            index_sets.append(tuple(sources))
            D = np.zeros((self.d, self.d))
            D[sources, sources] = 1.0
            mats.append(D)
        self.vertices = V
        self.vertex_tight = tight
        self.vertex_sources = index_sets
        self.vertex_matrices = np.array(mats)
        if _affine_dim(V) != m:
            raise ValueError("degenerate switching polytope: empty interior")

    def _facets_of(self, face, dim):
        out = []
        seen = set()
        for r in range(len(self.slice_b)):
            G = frozenset(v for v in face if r in self.vertex_tight[v])
            if not G or G == face or G in seen:
                continue
            if _affine_dim(self.vertices[sorted(G)]) == dim - 1:
                seen.add(G)
                out.append(G)
        return out

    def _triangulate(self, face):
        if face in self._tri_memo:
            return self._tri_memo[face]
        dim = _affine_dim(self.vertices[sorted(face)])
        if dim == 0:
            return self._tri_memo.setdefault(face, [(min(face),)])
        apex = min(face)
        simplices = []
        for G in self._facets_of(face, dim):
            if apex in G:
                continue
            for S in self._triangulate(G):
                simplices.append((apex,) + S)
        self._tri_memo[face] = simplices
        return simplices

    def _build_facets(self):
        m = self.d - 1
        self._tri_memo = {}
        everything = frozenset(range(len(self.vertices)))
        self.facets = []
        for G in self._facets_of(everything, m):
            tight = frozenset.intersection(*[self.vertex_tight[v] for v in G])
            self.facets.append({
                "vertices": tuple(sorted(G)),
                "constraints": tuple(sorted(tight)),
                "pairs": tuple(self.pairs[r] for r in sorted(tight)),
                "simplices": self._triangulate(G),
            })

    def _prepare_interpolation(self):
        simplices = sorted({S for f in self.facets for S in f["simplices"]})
        self.simplices = np.array(simplices, dtype=int)
        pinvs = []
        for S in simplices:
            M = np.vstack([self.vertices[list(S)].T, np.ones(len(S))])
            pinvs.append(np.linalg.pinv(M))
        self._pinvs = np.array(pinvs)  # (nS, d-1, d)
        self.center = self.vertices.mean(axis=0)

    # -- evaluation ----------------------------------------------------------
    @property
    def vertex_table(self):
        return list(zip(self.vertices, self.vertex_sources, self.vertex_matrices))

    def interpolate_boundary(self, S):
        """Barycentric interpolation at points ``S (P, d-1)`` on the slice boundary."""
        S = np.atleast_2d(S)
        rhs = np.hstack([S, np.ones((S.shape[0], 1))])
        lam = np.einsum("kvi,pi->pkv", self._pinvs, rhs)  # (P, nS, d-1)
        V = self.vertices[self.simplices]  # (nS, d-1, m)
        recon = np.einsum("pkv,kvm->pkm", lam, V)
        aff_err = np.linalg.norm(recon - S[:, None, :], axis=2) + np.abs(lam.sum(axis=2) - 1.0)
        scale = 1.0 + np.abs(self.costs).max()
        score = np.where(aff_err <= 1e-9 * scale, lam.min(axis=2), -np.inf)
        best = np.argmax(score, axis=1)
        rows = np.arange(S.shape[0])
        if np.any(score[rows, best] < -1e-7):
            raise ValueError("point is not on the boundary of the switching slice")
        w = np.clip(lam[rows, best], 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        mats = self.vertex_matrices[self.simplices[best]]  # (P, d-1, d, d)
        return np.einsum("pv,pvij->pij", w, mats)

    def _radial(self, S):
        c = self.center
        D = S - c
        denom = D @ self.slice_A.T
        gap = self.slice_b - c @ self.slice_A.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(denom < 0, gap / denom, np.inf)
        tstar = t.min(axis=1)
        out = np.empty((S.shape[0], self.d, self.d))
        at_center = ~np.isfinite(tstar)
        out[at_center] = self.vertex_matrices.mean(axis=0)
        ok = ~at_center
        if ok.any():
            Q = c + tstar[ok, None] * D[ok]
            Q = self.slice.project_batch(Q)[0]
            out[ok] = self.interpolate_boundary(Q)
        return out

    def evaluate_points(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        P = self.domain.project_batch(Y)[0]
        S = P[:, :-1] - P[:, -1:]
        margin = self.slice.interior_margin_batch(S)
        scale = 1.0 + np.abs(S).max(axis=1)
        on_bd = margin <= 1e-9 * scale
        out = np.empty((Y.shape[0], self.d, self.d))
        if on_bd.any():
            Sb = self.slice.project_batch(S[on_bd])[0]
            out[on_bd] = self.interpolate_boundary(Sb)
        if (~on_bd).any():
            out[~on_bd] = self._radial(S[~on_bd])
        return out

    def field(self) -> ReflectionField:
        def evaluate(t, x, y, z):
            return self.evaluate_points(y)

        return ReflectionField(evaluate, self.d, 1.0, 1.0 / self.d, CONTINUOUS,
                               name="switching", extra={"switching": self})

    def sample_facet_points(self, pair, count, rng):
        """Random points of ``closure(D)`` on the face where ``pair`` is tight."""
        r = self.pairs.index(tuple(pair))
        verts = [v for v in range(len(self.vertices)) if r in self.vertex_tight[v]]
        if not verts:
            return np.zeros((0, self.d))
        w = rng.dirichlet(np.ones(len(verts)), size=count)
        S = w @ self.vertices[verts]
        shift = rng.uniform(-2.0, 2.0, size=count)
        return np.hstack([S, np.zeros((count, 1))]) + shift[:, None]


def build_switching_h(costs) -> SwitchingH:
    return SwitchingH(costs)


# ---------------------------------------------------------------------------
# Discontinuous corner example
# ---------------------------------------------------------------------------

#: Oblique matrix used on the face ``y1 + y2 = 0`` away from the corner.
CORNER_FACE_MATRIX = np.diag([1.0, 0.0, 1.0])


def counterexample_domain() -> HalfspaceDomain:
    """``{y in R^3 : y1 > 0, y1 + y2 > 0}``."""
    return HalfspaceDomain([[1.0, 0.0, 0.0], [1.0, 1.0, 0.0]], [0.0, 0.0], dim=3)


def counterexample_field(domain=None) -> ReflectionField:
    """Identity on ``{y1 = 0}`` (corner included), oblique on the other face.

    On ``{y1 + y2 = 0, y1 > 0}`` the outward normal ``-(1, 1, 0)`` is sent
    to the ``y1`` axis.  Off the closed domain the field is evaluated at the
    projection.
    """
    dom = counterexample_domain() if domain is None else domain

    def evaluate(t, x, y, z):
        P = dom.project_batch(y)[0]
        tol = 1e-9 * (1.0 + np.abs(P).max(axis=1))
        on_f1 = P[:, 0] <= tol
        on_f2 = (P[:, 0] + P[:, 1] <= tol) & ~on_f1
        out = np.broadcast_to(np.eye(3), (len(P), 3, 3)).copy()
        out[on_f2] = CORNER_FACE_MATRIX
        return out

    def corner(P):
        P = np.atleast_2d(P)
        tol = 1e-9 * (1.0 + np.abs(P).max(axis=1))
        return (np.abs(P[:, 0]) <= tol) & (np.abs(P[:, 0] + P[:, 1]) <= tol)

    return ReflectionField(evaluate, 3, 1.0, 0.5, DISCONTINUOUS, discontinuity=corner,
                           name="counterexample")


# ---------------------------------------------------------------------------
# Validators
# ---------------------------------------------------------------------------


def _unit_normals(gens, rng, extra=4):
    if len(gens) <= 1:
        return gens
    w = rng.dirichlet(np.ones(len(gens)), size=extra)
    mix = w @ gens
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    return np.vstack([gens, mix])


def validate_obliqueness(field: ReflectionField, domain: ConvexDomain, sample_count=200,
                         seed=0, t=0.0, x=None, z=None, points=None):
    """Minimum sampled ``H u . u`` over boundary points and unit outward normals.

    Returns ``(eta_hat, violations)`` where each violation is a dict with the
    point, the normal and the value falling below the declared constant.
    """
    rng = np.random.default_rng(seed)
    if points is None:
        points = domain.sample_boundary(sample_count, rng)
    points = np.atleast_2d(points)
    if field.discontinuity is not None and len(points):
        points = points[~field.discontinuity(points)]
    eta_hat = np.inf
    violations = []
    for p in points:
        tol = 1e-7 * (1.0 + np.linalg.norm(p))
        gens = domain.active_normals(p, tol)
        if len(gens) == 0:
            continue
        x_ = None if x is None else np.atleast_2d(x)
        z_ = None if z is None else np.asarray(z, float)[None]
        H = field(t, x_, p[None, :], z_)[0]
        for u in _unit_normals(gens, rng):
            val = float(u @ H @ u)
            eta_hat = min(eta_hat, val)
            if val < field.obliqueness_eta - 1e-12:
                violations.append({"point": p, "normal": u, "value": val})
    return float(eta_hat), violations


def validate_bound(field: ReflectionField, points, t=0.0):
    """Largest sampled operator norm of ``H``."""
    H = field(t, None, np.atleast_2d(points))
    return float(np.linalg.norm(H, ord=2, axis=(1, 2)).max())


def limiting_cone_membership(field: ReflectionField, domain: ConvexDomain, t, x, y, z, psi,
                             eps=1e-3, tol=1e-8, samples=64, seed=0) -> bool:
    """Approximate membership of ``psi`` in the limiting reflection cone.

    The cone is the closed positive span of ``H(t, x, y~, z~) u`` for
    ``(y~, z~)`` within ``eps`` of ``(y, z)`` and ``u`` in the normal cone
    at ``y``.  Interior ``y`` admits only ``psi = 0``.
    """
    y = np.asarray(y, dtype=float)
    psi = np.asarray(psi, dtype=float)
    ctol = max(default_tol(y), 1e-9)
    if contains(domain, y, ctol) is Containment.INTERIOR:
        return bool(np.linalg.norm(psi) <= tol)
    base = domain.project(y)[0]
    cone = normal_cone(domain, base, ctol)
    rng = np.random.default_rng(seed)
    d = y.shape[0]
    offsets = [np.zeros(d)]
    for j in range(d):
        e = np.zeros(d)
        e[j] = eps
        offsets += [e, -e]
    dirs = rng.standard_normal((samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = eps * rng.uniform(0, 1, samples) ** (1.0 / d)
    Yt = np.vstack([y + np.array(offsets), y + radii[:, None] * dirs])
    if z is None:
        Zt = None
    else:
        z = np.asarray(z, dtype=float)
        zn = rng.standard_normal((len(Yt),) + z.shape)
        zn *= eps * rng.uniform(0, 1, (len(Yt),) + (1,) * z.ndim) / np.maximum(
            np.linalg.norm(zn.reshape(len(Yt), -1), axis=1).reshape((-1,) + (1,) * z.ndim), 1e-300)
        zn[0] = 0.0
        Zt = z + zn
    X = None if x is None else np.repeat(np.atleast_2d(x), len(Yt), axis=0)
    H = field(t, X, Yt, Zt)
    gens = np.einsum("pij,gj->pgi", H, cone.generators).reshape(-1, d)
    return positive_span_contains(gens, psi, tol)
