"""Set algebra for tube MPC: boxes, zonotopes, H-polytopes and ellipsoids.

Zonotopes carry the disturbance and tube sets (closed under linear maps and
Minkowski sums), H-polytopes carry the state/input constraints (closed under
intersection and support-function tightening).  Everything is immutable.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog


class SetError(ValueError):
    """Dimension mismatch or otherwise invalid set operation."""


class EmptySetError(SetError):
    """An operation produced a provably empty set."""


def _lp(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None, bounds=None):
    res = linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=b_eq,
                  bounds=bounds if bounds is not None else (None, None),
                  method="highs")
    return res


@dataclass(frozen=True)
class Box:
    """Axis-aligned box {x : lower <= x <= upper}."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise SetError("box bounds must be vectors of equal length")
        if np.any(lo > hi + 1e-15):
            raise SetError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @staticmethod
    def symmetric(half_widths):
        hw = np.atleast_1d(np.asarray(half_widths, dtype=float))
        return Box(-hw, hw)

    @property
    def dim(self):
        return self.lower.size

    @property
    def center(self):
        return 0.5 * (self.lower + self.upper)

    @property
    def half_widths(self):
        return 0.5 * (self.upper - self.lower)

    def support(self, direction):
        d = np.asarray(direction, dtype=float)
        if d.shape != (self.dim,):
            raise SetError("direction dimension mismatch")
        return float(self.center @ d + self.half_widths @ np.abs(d))

    def contains(self, point, tol=1e-9):
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lower - tol) and np.all(p <= self.upper + tol))

    def to_zonotope(self):
        return Zonotope(self.center, np.diag(self.half_widths))

    def to_hpolytope(self):
        n = self.dim
        eye = np.eye(n)
        return HPolytope(np.vstack([eye, -eye]),
                         np.concatenate([self.upper, -self.lower]))


@dataclass(frozen=True)
class Zonotope:
    """Zonotope {c + G xi : |xi|_inf <= 1} with generators as columns of G."""

    center: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        g = np.asarray(self.generators, dtype=float)
        if g.size == 0:
            g = np.zeros((c.size, 0))
        if g.ndim != 2 or g.shape[0] != c.size:
            raise SetError("generator matrix must be n x g")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(g))):
            raise SetError("zonotope data must be finite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "generators", g)

    @staticmethod
    def point(c):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        return Zonotope(c, np.zeros((c.size, 0)))

    @property
    def dim(self):
        return self.center.size

    @property
    def n_generators(self):
        return self.generators.shape[1]

    def support(self, direction):
        d = np.asarray(direction, dtype=float)
        if d.shape != (self.dim,):
            raise SetError("direction dimension mismatch")
        return float(self.center @ d + np.abs(d @ self.generators).sum())

    def interval_hull(self):
        hw = np.abs(self.generators).sum(axis=1)
        return Box(self.center - hw, self.center + hw)

    def contains(self, point, tol=1e-7):
        """Membership by the smallest-infinity-norm certificate (an LP)."""
        p = np.asarray(point, dtype=float)
        if p.shape != (self.dim,):
            raise SetError("point dimension mismatch")
        g = self.generators
        rhs = p - self.center
        if g.shape[1] == 0:
            return bool(np.all(np.abs(rhs) <= tol * (1.0 + np.abs(self.center))))
        # quick reject using the interval hull
        if np.any(np.abs(rhs) > np.abs(g).sum(axis=1) + tol):
            return False
        ng = g.shape[1]
        # variables [xi, t]; minimize t with |xi_i| <= t
        c = np.zeros(ng + 1)
        c[-1] = 1.0
        a_ub = np.zeros((2 * ng, ng + 1))
        a_ub[:ng, :ng] = np.eye(ng)
        a_ub[ng:, :ng] = -np.eye(ng)
        a_ub[:, -1] = -1.0
        a_eq = np.hstack([g, np.zeros((self.dim, 1))])
        res = _lp(c, a_ub=a_ub, b_ub=np.zeros(2 * ng), a_eq=a_eq, b_eq=rhs)
        if res.status != 0:
            return False
        return bool(res.x[-1] <= 1.0 + tol)

    def sample(self, rng, n=1):
        xi = rng.uniform(-1.0, 1.0, size=(n, self.n_generators))
        pts = self.center + xi @ self.generators.T
        return pts[0] if n == 1 else pts


@dataclass(frozen=True)
class HPolytope:
    """Polytope {x : normals @ x <= offsets}."""

    normals: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.normals, dtype=float)
        b = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        if h.ndim != 2 or h.shape[0] != b.size:
            raise SetError("normals must be m x n with m offsets")
        if np.any(np.linalg.norm(h, axis=1) < 1e-14):
            raise SetError("zero rows are not allowed in an H-polytope")
        object.__setattr__(self, "normals", h)
        object.__setattr__(self, "offsets", b)

    @property
    def dim(self):
        return self.normals.shape[1]

    @property
    def n_rows(self):
        return self.normals.shape[0]

    def contains(self, point, tol=1e-9):
        p = np.asarray(point, dtype=float)
        return bool(np.all(self.normals @ p <= self.offsets + tol))

    def contains_many(self, points, tol=1e-9):
        pts = np.asarray(points, dtype=float)
        return np.all(pts @ self.normals.T <= self.offsets + tol, axis=1)

    def support(self, direction):
        d = np.asarray(direction, dtype=float)
        if d.shape != (self.dim,):
            raise SetError("direction dimension mismatch")
        res = _lp(-d, a_ub=self.normals, b_ub=self.offsets)
        if res.status == 2:
            raise EmptySetError("support of an empty polytope")
        if res.status == 3:
            raise SetError("polytope unbounded in the requested direction")
        if res.status != 0:
            raise SetError(f"support LP failed with status {res.status}")
        return float(-res.fun)

    def is_empty(self, tol=1e-9):
        """Exact emptiness probe.

        Paired opposite rows are checked directly; a feasibility LP covers
        the general case.
        """
        h, b = self.normals, self.offsets
        norms = np.linalg.norm(h, axis=1)
        hn = h / norms[:, None]
        bn = b / norms
        # opposite-row pairs: h_i = -h_j implies emptiness iff b_i + b_j < 0
        gram = hn @ hn.T
        ii, jj = np.where(gram < -1.0 + 1e-10)
        mask = ii < jj
        if np.any(bn[ii[mask]] + bn[jj[mask]] < -tol):
            return True
        res = _lp(np.zeros(self.dim), a_ub=h, b_ub=b)
        return res.status == 2

    def chebyshev_center(self):
        """Center and radius of the largest inscribed ball."""
        norms = np.linalg.norm(self.normals, axis=1)
        c = np.zeros(self.dim + 1)
        c[-1] = -1.0
        a_ub = np.hstack([self.normals, norms[:, None]])
        res = _lp(c, a_ub=a_ub, b_ub=self.offsets)
        if res.status == 2:
            raise EmptySetError("polytope is empty")
        if res.status != 0:
            raise SetError("chebyshev LP failed")
        return res.x[:-1], float(res.x[-1])

    def intersect(self, other):
        if other.dim != self.dim:
            raise SetError("dimension mismatch in intersection")
        return HPolytope(np.vstack([self.normals, other.normals]),
                         np.concatenate([self.offsets, other.offsets]))


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid {x : (x-c)^T shape^{-1} (x-c) <= radius2} (shape PSD)."""

    center: np.ndarray
    shape: np.ndarray
    radius2: float

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        s = np.asarray(self.shape, dtype=float)
        if s.shape != (c.size, c.size):
            raise SetError("shape matrix must be n x n")
        if not np.allclose(s, s.T, atol=1e-10):
            raise SetError("shape matrix must be symmetric")
        if np.any(np.linalg.eigvalsh(s) < -1e-10):
            raise SetError("shape matrix must be positive semidefinite")
        if self.radius2 < 0.0:
            raise SetError("radius2 must be nonnegative")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", s)

    @property
    def dim(self):
        return self.center.size

    def outer_box(self):
        """Tight axis-aligned enclosure; exact on each axis."""
        hw = math.sqrt(self.radius2) * np.sqrt(np.clip(np.diag(self.shape), 0.0, None))
        return Box(self.center - hw, self.center + hw)

    def contains(self, point, tol=1e-9):
        p = np.asarray(point, dtype=float) - self.center
        s = self.shape + 1e-18 * np.eye(self.dim)
        return bool(p @ np.linalg.solve(s, p) <= self.radius2 + tol)


def _as_zonotope(s):
    if isinstance(s, Zonotope):
        return s
    if isinstance(s, Box):
        return s.to_zonotope()
    raise SetError(f"expected Box or Zonotope, got {type(s).__name__}")


def minkowski_sum(a, b) -> Zonotope:
    """Exact Minkowski sum of two zonotopes (or boxes)."""
    za, zb = _as_zonotope(a), _as_zonotope(b)
    if za.dim != zb.dim:
        raise SetError("dimension mismatch in Minkowski sum")
    return Zonotope(za.center + zb.center,
                    np.hstack([za.generators, zb.generators]))


def linear_map(m, z) -> Zonotope:
    """Image of a zonotope (or box) under a linear map; exact."""
    zz = _as_zonotope(z)
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.shape[1] != zz.dim:
        raise SetError("matrix column count must match set dimension")
    return Zonotope(m @ zz.center, m @ zz.generators)


def support_batch(z: Zonotope, directions):
    """Support of a zonotope along every row of ``directions`` at once."""
    d = np.atleast_2d(np.asarray(directions, dtype=float))
    return d @ z.center + np.abs(d @ z.generators).sum(axis=1)


def paired_rows(normals, tol=1e-12):
    """Index of the opposite row for each row, or None if not fully paired.

    Constraint sets built as symmetric boxes have every normal paired with
    its negation, which admits a closed-form emptiness test.
    """
    h = np.asarray(normals, dtype=float)
    m = h.shape[0]
    partner = np.full(m, -1, dtype=int)
    for i in range(m):
        if partner[i] >= 0:
            continue
        diffs = np.abs(h + h[i]).max(axis=1)
        js = np.where(diffs <= tol * max(1.0, np.abs(h[i]).max()))[0]
        js = [j for j in js if j != i and partner[j] < 0]
        if not js:
            return None
        partner[i] = js[0]
        partner[js[0]] = i
    return partner


def pontryagin_diff(p: HPolytope, s, check_empty=True) -> HPolytope:
    """Erosion p minus s computed row-wise through support functions.

    Exact for an H-polytope minuend and a zonotope subtrahend.  Raises
    :class:`EmptySetError` when the erosion is empty, which signals a tube
    larger than the constraint set.
    """
    zs = _as_zonotope(s)
    if zs.dim != p.dim:
        raise SetError("dimension mismatch in Pontryagin difference")
    tightened = p.offsets - support_batch(zs, p.normals)
    out = HPolytope(p.normals, tightened)
    if check_empty and out.is_empty():
        raise EmptySetError("tightened constraint set is empty")
    return out


def spectral_radius(a):
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(a, dtype=float)))))


def mrpi_outer(a_k, w, eps, max_terms=150, term_cap=None) -> Zonotope:
    """Outer approximation of the infinite accumulation sum(A^j W).

    Truncates the sum at the first k where A^k maps the interval hull of W
    into a small fraction alpha of itself, then scales the partial sum by
    1/(1-alpha).  The offset of W is accumulated exactly through
    (I - A)^{-1}.  The result contains the infinite sum and satisfies
    A Z + W inside Z, which is the invariance the tube argument needs.

    ``eps`` is the support-function closeness target; ``term_cap`` bounds
    the number of stored terms (4 generators each), trading tightness for
    a bounded generator count.
    """
    a = np.asarray(a_k, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise SetError("dynamics matrix must be square")
    if eps <= 0.0:
        raise SetError("eps must be positive")
    rho = spectral_radius(a)
    if rho >= 1.0 - 1e-12:
        raise SetError(f"dynamics not Schur stable (spectral radius {rho:.6f})")
    z = _as_zonotope(w)
    if z.dim != n:
        raise SetError("disturbance set dimension mismatch")
    beta = np.abs(z.generators).sum(axis=1)
    scale = max(float(beta.max()), 1.0)
    beta = np.maximum(beta, 1e-12 * scale)  # guard flat directions

    center_inf = np.linalg.solve(np.eye(n) - a, z.center)
    if term_cap is None:
        term_cap = max_terms
    a_pow = np.eye(n)
    gen_blocks = []
    m_support = np.zeros(n)
    alpha = None
    for s_terms in range(1, max_terms + 1):
        gen_blocks.append(a_pow * beta)  # A^l @ diag(beta)
        m_support += np.abs(a_pow) @ beta
        a_pow = a @ a_pow
        alpha = float(np.max((np.abs(a_pow) @ beta) / beta))
        m_big = float(m_support.max())
        if alpha < 1.0 and (alpha <= eps / (eps + m_big) or s_terms >= term_cap):
            break
    else:
        raise SetError(f"accumulation sum did not converge in {max_terms} terms")
    if alpha >= 1.0:
        raise SetError("term cap reached before the contraction test passed")
    gens = np.hstack(gen_blocks) / (1.0 - alpha)
    return Zonotope(center_inf, gens)


def max_positive_invariant(a_k, x_constraint: HPolytope, max_iter=50,
                           tol=1e-9) -> HPolytope:
    """Maximal positive invariant set of x+ = a_k x inside a polytope.

    Iterates the pre-image intersection until the newly generated
    halfspaces are all redundant, then prunes redundant rows.
    """
    a = np.asarray(a_k, dtype=float)
    if spectral_radius(a) >= 1.0 - 1e-12:
        raise SetError("dynamics not Schur stable")
    if np.any(x_constraint.offsets < -tol):
        raise SetError("constraint polytope must contain the origin")
    if x_constraint.is_empty():
        raise EmptySetError("constraint polytope is empty")
    h0, b0 = x_constraint.normals, x_constraint.offsets
    h, b = h0.copy(), b0.copy()
    a_pow = a.copy()
    for _ in range(max_iter):
        cand = h0 @ a_pow
        current = HPolytope(h, b)
        keep = []
        for i, row in enumerate(cand):
            if np.linalg.norm(row) < 1e-14:
                continue
            if current.support(row) > b0[i] + tol:
                keep.append(i)
        if not keep:
            return _prune_redundant(current, tol)
        h = np.vstack([h, cand[keep]])
        b = np.concatenate([b, b0[keep]])
        a_pow = a_pow @ a
    raise SetError(f"invariant set construction did not converge in {max_iter} iterations")


def _prune_redundant(p: HPolytope, tol=1e-9) -> HPolytope:
    h, b = p.normals, p.offsets
    keep = np.ones(h.shape[0], dtype=bool)
    for i in range(h.shape[0]):
        keep[i] = False
        rest = HPolytope(h[keep], b[keep])
        try:
            val = rest.support(h[i])
        except SetError:
            keep[i] = True
            continue
        if val > b[i] + tol:
            keep[i] = True  # row is binding, keep it
    return HPolytope(h[keep], b[keep])


def prune_generators(z: Zonotope, cap=64) -> Zonotope:
    """Outer approximation with at most ``cap`` generators.

    Keeps the largest generators and absorbs the remainder into an
    axis-aligned interval hull.
    """
    g = z.generators
    n, ng = g.shape
    if ng <= cap:
        return z
    order = np.argsort(-np.linalg.norm(g, axis=0))
    n_keep = max(cap - n, 0)
    kept = g[:, order[:n_keep]]
    tail = g[:, order[n_keep:]]
    box = np.diag(np.abs(tail).sum(axis=1))
    return Zonotope(z.center, np.hstack([kept, box]))


def support(s, direction):
    """Support function dispatch over the set classes."""
    return s.support(direction)


def contains(s, point, tol=1e-7):
    """Membership dispatch over the set classes."""
    return s.contains(point, tol=tol)
