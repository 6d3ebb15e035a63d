"""Quadrature rules and collocation matrices on the reference segment [-1, 1].

Point distributions are computed by Newton iteration on Legendre/Jacobi
root equations using three-term recurrences (tolerance 1e-15, at most 100
iterations).  Rules are cached by key after first construction; the cache
is append-only and guarded by a lock so concurrent lookups are safe.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np


class PointsType(Enum):
    GAUSS_LEGENDRE = "gauss_legendre"
    GAUSS_LOBATTO_LEGENDRE = "gauss_lobatto_legendre"
    # Endpoint fixed at xi = -1; the +1 end stays quadrature-free so a
    # collapsed vertex can be omitted from tensor grids.
    GAUSS_RADAU_M_LEGENDRE = "gauss_radau_m_legendre"


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class PointsKey:
    """Descriptor of a 1D quadrature rule: point count Q and distribution."""

    num_points: int
    points_type: PointsType

    def __post_init__(self):
        if not isinstance(self.num_points, int) or self.num_points < 1:
            raise QuadratureError(
                f"num_points must be a positive integer, got {self.num_points!r}")
        if (self.points_type is PointsType.GAUSS_LOBATTO_LEGENDRE
                and self.num_points < 2):
            raise QuadratureError(
                "Gauss-Lobatto-Legendre needs at least 2 points "
                f"(got {self.num_points})")


@dataclass(frozen=True)
class QuadratureRule:
    """Realised rule: strictly increasing points in [-1,1], positive weights."""

    key: PointsKey
    points: np.ndarray
    weights: np.ndarray


def legendre(n, x):
    """Legendre polynomial P_n and derivative P_n' at x, by recurrence."""
    x = np.asarray(x, dtype=float)
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev, np.zeros_like(x)
    p = x.copy()
    for k in range(1, n):
        p_next = ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        p_prev, p = p, p_next
    # derivative from the standard relation (1-x^2) P_n' = n (P_{n-1} - x P_n)
    with np.errstate(divide="ignore", invalid="ignore"):
        dp = n * (p_prev - x * p) / (1.0 - x * x)
    at_end = np.isclose(np.abs(x), 1.0)
    if np.any(at_end):
        # P_n'(+-1) = (+-1)^{n-1} n(n+1)/2
        sign = np.where(x > 0, 1.0, (-1.0) ** (n - 1))
        dp = np.where(at_end, sign * n * (n + 1) / 2.0, dp)
    return p, dp


def jacobi(n, alpha, beta, x):
    """Jacobi polynomial P_n^{alpha,beta}(x) by three-term recurrence."""
    x = np.asarray(x, dtype=float)
    if n < 0:
        raise QuadratureError("polynomial degree must be >= 0")
    p_prev = np.ones_like(x)
    if n == 0:
        return p_prev
    p = 0.5 * ((alpha + beta + 2) * x + (alpha - beta)) * np.ones_like(x)
    for k in range(2, n + 1):
        c = 2 * k + alpha + beta
        a1 = 2 * k * (k + alpha + beta) * (c - 2)
        a2 = (c - 1) * (alpha * alpha - beta * beta)
        a3 = (c - 2) * (c - 1) * c
        a4 = 2 * (k + alpha - 1) * (k + beta - 1) * c
        p_next = ((a2 + a3 * x) * p - a4 * p_prev) / a1
        p_prev, p = p, p_next
    return p


def jacobi_deriv(n, alpha, beta, x):
    """d/dx P_n^{alpha,beta}(x) via the derivative identity."""
    if n == 0:
        return np.zeros_like(np.asarray(x, dtype=float))
    return 0.5 * (n + alpha + beta + 1) * jacobi(n - 1, alpha + 1, beta + 1, x)


_NEWTON_TOL = 1e-15
_NEWTON_MAX_ITER = 100


def _bracketed_roots(f, df, n_roots, lo=-1.0, hi=1.0, samples_per_root=24):
    """All simple roots of f in (lo, hi): sign-change bracketing, then Newton
    polished with bisection fallback.  Deterministic for the polynomials used
    here (all roots real, simple, interior)."""
    grid = np.linspace(lo, hi, max(8, samples_per_root * n_roots))
    vals = f(grid)
    sign = np.sign(vals)
    idx = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
    if len(idx) != n_roots:
        raise QuadratureError(
            f"root bracketing found {len(idx)} sign changes, expected {n_roots}")
    roots = np.empty(n_roots)
    for r, i in enumerate(idx):
        a, b = grid[i], grid[i + 1]
        fa = f(np.array([a]))[0]
        x = 0.5 * (a + b)
        for _ in range(_NEWTON_MAX_ITER):
            fx = f(np.array([x]))[0]
            dfx = df(np.array([x]))[0]
            step = fx / dfx if dfx != 0 else b - a
            x_new = x - step
            if not (a < x_new < b):
                # bisect using the bracket
                if fa * fx < 0:
                    b = x
                else:
                    a, fa = x, fx
                x_new = 0.5 * (a + b)
            if abs(x_new - x) <= _NEWTON_TOL * max(1.0, abs(x_new)):
                x = x_new
                break
            x = x_new
        roots[r] = x
    return roots


def _gauss_legendre(q):
    pts = _bracketed_roots(lambda x: legendre(q, x)[0],
                           lambda x: legendre(q, x)[1], q)
    _, dp = legendre(q, pts)
    wts = 2.0 / ((1.0 - pts * pts) * dp * dp)
    return pts, wts


def _gauss_lobatto_legendre(q):
    if q == 2:
        return np.array([-1.0, 1.0]), np.array([1.0, 1.0])
    n = q - 1
    interior = _bracketed_roots(
        lambda x: legendre(n, x)[1],
        # P_n'' from the Legendre ODE
        lambda x: (2 * x * legendre(n, x)[1] - n * (n + 1) * legendre(n, x)[0])
        / (1.0 - x * x),
        q - 2, lo=-1.0 + 1e-12, hi=1.0 - 1e-12)
    pts = np.concatenate(([-1.0], interior, [1.0]))
    p, _ = legendre(n, pts)
    wts = 2.0 / (q * n * p * p)
    return pts, wts


def _gauss_radau_minus(q):
    # Endpoint at -1; interior points are the roots of P_{q-1}^{(0,1)}.
    if q == 1:
        return np.array([-1.0]), np.array([2.0])
    n = q - 1
    interior = _bracketed_roots(lambda x: jacobi(n, 0.0, 1.0, x),
                                lambda x: jacobi_deriv(n, 0.0, 1.0, x), n)
    pts = np.concatenate(([-1.0], interior))
    p, _ = legendre(n, interior)
    wts = np.empty(q)
    wts[0] = 2.0 / (q * q)
    wts[1:] = (1.0 - interior) / (q * q * p * p)
    return pts, wts


_rule_cache: dict[PointsKey, QuadratureRule] = {}
_cache_lock = threading.Lock()


def make_rule(key: PointsKey) -> QuadratureRule:
    """Build (or fetch from cache) the quadrature rule described by key.

    Exactness: Gauss-Legendre integrates degree 2Q-1 exactly,
    Gauss-Lobatto-Legendre 2Q-3, Gauss-Radau 2Q-2.
    """
    with _cache_lock:
        rule = _rule_cache.get(key)
    if rule is not None:
        return rule
    q = key.num_points
    if key.points_type is PointsType.GAUSS_LEGENDRE:
        pts, wts = ([0.0], [2.0]) if q == 1 else _gauss_legendre(q)
    elif key.points_type is PointsType.GAUSS_LOBATTO_LEGENDRE:
        pts, wts = _gauss_lobatto_legendre(q)
    elif key.points_type is PointsType.GAUSS_RADAU_M_LEGENDRE:
        pts, wts = _gauss_radau_minus(q)
    else:  # pragma: no cover - enum is closed
        raise QuadratureError(f"unknown points type {key.points_type}")
    pts = np.asarray(pts, dtype=float)
    wts = np.asarray(wts, dtype=float)
    pts.setflags(write=False)
    wts.setflags(write=False)
    rule = QuadratureRule(key, pts, wts)
    with _cache_lock:
        rule = _rule_cache.setdefault(key, rule)
    return rule


def _barycentric_weights(points):
    pts = np.asarray(points, dtype=float)
    diff = pts[:, None] - pts[None, :]
    np.fill_diagonal(diff, 1.0)
    return 1.0 / diff.prod(axis=1)


def interp_matrix(from_rule, to_points) -> np.ndarray:
    """Lagrange interpolation matrix from a rule's points to arbitrary points.

    Row i, column j holds the j-th Lagrange polynomial (through the source
    points) evaluated at to_points[i]; rows sum to one.
    """
    src = from_rule.points if isinstance(from_rule, QuadratureRule) else np.asarray(from_rule, float)
    dst = np.atleast_1d(np.asarray(to_points, dtype=float))
    w = _barycentric_weights(src)
    mat = np.empty((len(dst), len(src)))
    for i, t in enumerate(dst):
        d = t - src
        hit = np.nonzero(d == 0.0)[0]
        if len(hit):
            mat[i] = 0.0
            mat[i, hit[0]] = 1.0
        else:
            terms = w / d
            mat[i] = terms / terms.sum()
    return mat


def diff_matrix(rule) -> np.ndarray:
    """Collocation derivative matrix on the rule's points (barycentric form).

    Exact for polynomials of degree < Q; rows annihilate constants.
    """
    pts = rule.points if isinstance(rule, QuadratureRule) else np.asarray(rule, float)
    w = _barycentric_weights(pts)
    q = len(pts)
    d = np.zeros((q, q))
    for i in range(q):
        for j in range(q):
            if i != j:
                d[i, j] = (w[j] / w[i]) / (pts[i] - pts[j])
        d[i, i] = -d[i].sum()
    return d
