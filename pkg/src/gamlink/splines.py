"""Univariate B-splines on clamped knot vectors.

Basis values come from the local triangular (Cox-de Boor) recursion; derivatives
are obtained by differencing lower-order values on the same knot vector.  Gram
matrices of derivatives are integrated exactly by Gauss-Legendre rules on each
knot span.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla


@dataclass(frozen=True, eq=False)
class BasisSpec:
    """Clamped B-spline basis of a given order (degree ``order - 1``)."""

    knots: np.ndarray
    order: int

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=float)
        p = int(self.order)
        if p < 1:
            raise ValueError("order must be >= 1")
        if t.ndim != 1 or t.size < 2 * p:
            raise ValueError("knot vector too short for the order")
        if np.any(np.diff(t) < 0):
            raise ValueError("knots must be non-decreasing")
        if not (np.all(t[:p] == t[0]) and np.all(t[-p:] == t[-1])):
            raise ValueError("knot vector must be clamped (end multiplicity = order)")
        if not t[0] < t[-1]:
            raise ValueError("empty domain")
        _, counts = np.unique(t[p:-p], return_counts=True)
        if counts.size and counts.max() > p:
            raise ValueError("knot multiplicity exceeds order")
        if np.any(t[p:-p] <= t[0]) or np.any(t[p:-p] >= t[-1]):
            raise ValueError("interior knots must lie strictly inside the domain")
        t = t.copy()
        t.flags.writeable = False
        object.__setattr__(self, "knots", t)
        object.__setattr__(self, "order", p)

    @classmethod
    def clamped(cls, domain_lo: float, domain_hi: float, interior: Sequence[float], order: int):
        p = int(order)
        interior = np.asarray(interior, dtype=float)
        t = np.concatenate([np.full(p, float(domain_lo)), interior, np.full(p, float(domain_hi))])
        return cls(t, p)

    @property
    def domain_lo(self) -> float:
        return float(self.knots[0])

    @property
    def domain_hi(self) -> float:
        return float(self.knots[-1])

    @property
    def domain(self) -> tuple[float, float]:
        return self.domain_lo, self.domain_hi

    @property
    def interior_knots(self) -> np.ndarray:
        return self.knots[self.order:-self.order]

    @property
    def basis_count(self) -> int:
        return self.knots.size - self.order

    def greville(self) -> np.ndarray:
        """Knot averages; coefficients equal to these reproduce ``f(x) = x``."""
        p = self.order
        if p == 1:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        idx = np.arange(self.basis_count)[:, None] + np.arange(1, p)[None, :]
        return self.knots[idx].mean(axis=1)

    def breakpoints(self) -> np.ndarray:
        return np.unique(self.knots)

    def key(self) -> tuple:
        return (self.knots.tobytes(), self.order)

    def __eq__(self, other):
        return (
            isinstance(other, BasisSpec)
            and self.order == other.order
            and self.knots.shape == other.knots.shape
            and bool(np.all(self.knots == other.knots))
        )

    def __hash__(self):
        return hash(self.key())


def make_uniform_basis(domain_lo: float, domain_hi: float, interior_knots: int, order: int) -> BasisSpec:
    if order < 1:
        raise ValueError("order must be >= 1")
    if interior_knots < 0:
        raise ValueError("interior knot count must be >= 0")
    if not domain_lo < domain_hi:
        raise ValueError("domain_lo must be < domain_hi")
    interior = np.linspace(domain_lo, domain_hi, interior_knots + 2)[1:-1]
    return BasisSpec.clamped(domain_lo, domain_hi, interior, order)


def _spans(basis: BasisSpec, x: np.ndarray) -> np.ndarray:
    p, K = basis.order, basis.basis_count
    span = np.searchsorted(basis.knots, x, side="right") - 1
    return np.clip(span, p - 1, K - 1)


def _check_domain(basis: BasisSpec, x: np.ndarray) -> None:
    lo, hi = basis.domain
    if x.size and (np.min(x) < lo or np.max(x) > hi or np.any(np.isnan(x))):
        raise ValueError(f"evaluation point outside spline domain [{lo}, {hi}]")


def _local_values(t: np.ndarray, q: int, x: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Nonzero order-``q`` basis values at ``x``; column r is index ``span - q + 1 + r``."""
    m = x.size
    N = np.zeros((m, q))
    N[:, 0] = 1.0
    left = np.empty((m, q))
    right = np.empty((m, q))
    for j in range(1, q):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(m)
        for r in range(j):
            # denominators contain the (nonempty) span itself, so never vanish
            temp = N[:, r] / (right[:, r + 1] + left[:, j - r])
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    return N


def _local_derivatives(basis: BasisSpec, x: np.ndarray, span: np.ndarray, deriv: int) -> np.ndarray:
    """Local ``deriv``-th derivatives of the ``order`` nonzero basis functions."""
    p, t = basis.order, basis.knots
    q = p - deriv
    V = _local_values(t, q, x, span)
    m = x.size
    for qq in range(q, p):
        # V holds order-qq derivative data for indices span-qq+1 .. span
        W = np.zeros((m, qq + 1))
        for r in range(qq + 1):
            a = span - qq + r
            if r >= 1:
                d1 = t[a + qq] - t[a]
                W[:, r] += np.divide(V[:, r - 1], d1, out=np.zeros(m), where=d1 != 0)
            if r < qq:
                d2 = t[a + qq + 1] - t[a + 1]
                W[:, r] -= np.divide(V[:, r], d2, out=np.zeros(m), where=d2 != 0)
        V = qq * W
    return V


def design_matrix(basis: BasisSpec, x, deriv: int = 0) -> np.ndarray:
    """Dense matrix ``D[i, a] = B_a^{(deriv)}(x_i)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if deriv < 0 or deriv > basis.order - 1:
        raise ValueError(f"derivative order {deriv} not available for order {basis.order}")
    _check_domain(basis, x)
    span = _spans(basis, x)
    loc = _local_derivatives(basis, x, span, deriv)
    D = np.zeros((x.size, basis.basis_count))
    rows = np.arange(x.size)[:, None]
    cols = span[:, None] - basis.order + 1 + np.arange(basis.order)[None, :]
    D[rows, cols] = loc
    return D


def eval_basis(basis: BasisSpec, x: float, l: int = 0) -> np.ndarray:
    """All basis functions' ``l``-th derivatives at a single point."""
    return design_matrix(basis, [x], l)[0]


@dataclass(frozen=True, eq=False)
class SplineFunction:
    basis: BasisSpec
    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size != self.basis.basis_count:
            raise ValueError(
                f"expected {self.basis.basis_count} coefficients, got {c.size}"
            )
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)

    @property
    def domain(self) -> tuple[float, float]:
        return self.basis.domain

    def __call__(self, x, deriv: int = 0):
        x_arr = np.asarray(x, dtype=float)
        out = eval_spline(self, x_arr.ravel(), deriv)
        return out.reshape(x_arr.shape) if x_arr.ndim else float(out[0])

    def clamped(self, x, deriv: int = 0):
        """Evaluate after clipping ``x`` into the domain (flat extension).

        Returns ``(values, clamp_distance)`` where the distance is the
        per-point amount each argument was moved.
        """
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        xc = np.clip(x, lo, hi)
        return self(xc, deriv), np.abs(x - xc)

    def with_coefficients(self, coefficients) -> "SplineFunction":
        return SplineFunction(self.basis, coefficients)

    def to_dict(self) -> dict:
        return {
            "domain": [self.basis.domain_lo, self.basis.domain_hi],
            "order": self.basis.order,
            "interior_knots": [float(v) for v in self.basis.interior_knots],
            "coefficients": [float(v) for v in self.coefficients],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineFunction":
        lo, hi = d["domain"]
        basis = BasisSpec.clamped(lo, hi, d["interior_knots"], d["order"])
        return cls(basis, d["coefficients"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "SplineFunction":
        return cls.from_dict(json.loads(s))


def eval_spline(f: SplineFunction, x, l: int = 0) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _check_domain(f.basis, x)
    return eval_continued(f, x, l)


def eval_continued(f: SplineFunction, x, l: int = 0) -> np.ndarray:
    """Like :func:`eval_spline`, but points beyond the domain use the
    polynomial piece of the nearest end span instead of raising."""
    basis = f.basis
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if l < 0 or l > basis.order - 1:
        raise ValueError(f"derivative order {l} not available for order {basis.order}")
    span = _spans(basis, x)
    loc = _local_derivatives(basis, x, span, l)
    idx = span[:, None] - basis.order + 1 + np.arange(basis.order)[None, :]
    return np.einsum("ij,ij->i", loc, f.coefficients[idx])


def linear_spline(basis: BasisSpec, slope: float = 1.0, intercept: float = 0.0) -> SplineFunction:
    """Exact representation of ``x -> intercept + slope * x`` (order >= 2)."""
    if basis.order < 2:
        raise ValueError("linear functions need order >= 2")
    return SplineFunction(basis, intercept + slope * basis.greville())


# -- quadrature ---------------------------------------------------------------

@lru_cache(maxsize=64)
def _leggauss(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(nodes)


def span_quadrature(breaks: np.ndarray, nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights over consecutive breakpoints."""
    g, w = _leggauss(nodes)
    a, b = breaks[:-1], breaks[1:]
    keep = b > a
    a, b = a[keep], b[keep]
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    x = (mid[:, None] + half[:, None] * g[None, :]).ravel()
    wt = (half[:, None] * w[None, :]).ravel()
    return x, wt


@lru_cache(maxsize=4096)
def _gram_cached(knots_bytes: bytes, order: int, l: int) -> np.ndarray:
    basis = BasisSpec(np.frombuffer(knots_bytes), order)
    x, w = span_quadrature(basis.breakpoints(), max(order, 1))
    D = design_matrix(basis, x, l)
    G = (D * w[:, None]).T @ D
    G = 0.5 * (G + G.T)
    G.flags.writeable = False
    return G


def gram_matrix(basis: BasisSpec, l: int) -> np.ndarray:
    """``Omega_l[a, b] = integral of B_a^(l) B_b^(l)`` over the basis domain."""
    if l < 0 or l > basis.order - 1:
        raise ValueError(f"derivative order {l} not available for order {basis.order}")
    # Gram matrices of affinely mapped knot vectors differ by width**(1 - 2l)
    t = basis.knots
    width = t[-1] - t[0]
    ref = (t - t[0]) / width
    G = _gram_cached(ref.tobytes(), basis.order, int(l))
    return G if width == 1.0 else G * width ** (1 - 2 * l)


# -- reparameterisation and projection ---------------------------------------

def affine_reparam(f: SplineFunction, alpha: float, shift: float) -> SplineFunction:
    """Spline ``g`` with ``g(x) = f(alpha * (x + shift))``; coefficients unchanged."""
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if alpha == 1.0 and shift == 0.0:
        return f
    t = f.basis.knots / alpha - shift
    return SplineFunction(BasisSpec(t, f.basis.order), f.coefficients)


def reflect(f: SplineFunction) -> SplineFunction:
    """Spline ``g`` with ``g(x) = f(-x)``."""
    t = -f.basis.knots[::-1]
    return SplineFunction(BasisSpec(t, f.basis.order), f.coefficients[::-1])


def project_onto_basis(
    values_at: Callable[[np.ndarray], np.ndarray] | SplineFunction,
    target: BasisSpec,
    extra_breaks: Sequence[float] = (),
    nodes: int | None = None,
) -> SplineFunction:
    """L2 projection of a function onto ``target``.

    A :class:`SplineFunction` source is evaluated with flat extension outside
    its domain, and its breakpoints are merged into the quadrature so the
    projection is exact whenever the source lies in the target space.
    """
    breaks = [target.breakpoints()]
    if isinstance(values_at, SplineFunction):
        src = values_at
        breaks.append(src.basis.breakpoints())
        fn = lambda x: src.clamped(x)[0]  # noqa: E731
        nodes = nodes or max(target.order, src.basis.order)
    else:
        fn = values_at
        nodes = nodes or target.order + 8
    if len(extra_breaks):
        breaks.append(np.asarray(extra_breaks, dtype=float))
    b = np.unique(np.concatenate(breaks))
    b = b[(b >= target.domain_lo) & (b <= target.domain_hi)]
    b = np.unique(np.concatenate([[target.domain_lo], b, [target.domain_hi]]))
    x, w = span_quadrature(b, nodes)
    D = design_matrix(target, x)
    G = (D * w[:, None]).T @ D
    rhs = D.T @ (w * np.asarray(fn(x), dtype=float))
    try:
        cf = sla.cho_factor(G)
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular normal system in projection") from exc
    return SplineFunction(target, sla.cho_solve(cf, rhs))


# -- natural splines ------------------------------------------------------------

def _natural_setup(x, k: int, domain):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be one-dimensional")
    if np.any(np.diff(x) <= 0):
        raise ValueError("x values must be strictly increasing (sort and deduplicate first)")
    if x.size < k:
        raise ValueError(f"need at least k={k} distinct points")
    lo, hi = (x[0], x[-1]) if domain is None else (float(domain[0]), float(domain[1]))
    if x[0] < lo or x[-1] > hi or not lo < hi:
        raise ValueError("points must lie within the domain")
    interior = x[(x > lo) & (x < hi)]
    return x, BasisSpec.clamped(lo, hi, interior, 2 * k)


def natural_spline_operator(x, k: int, domain=None) -> tuple[BasisSpec, np.ndarray]:
    """Basis and matrix ``M`` mapping knot values ``v`` to coefficients ``M @ v``.

    ``M @ v`` minimises ``c' Omega_k c`` subject to interpolating ``v`` at ``x``.
    """
    x, basis = _natural_setup(x, k, domain)
    B = design_matrix(basis, x)
    Om = gram_matrix(basis, k)
    K, u = basis.basis_count, x.size
    kkt = np.zeros((K + u, K + u))
    kkt[:K, :K] = 2.0 * Om
    kkt[:K, K:] = B.T
    kkt[K:, :K] = B
    rhs = np.zeros((K + u, u))
    rhs[K:, :] = np.eye(u)
    # close knots make Omega_k entries huge; equilibrate before solving
    sc = 1.0 / np.sqrt(np.max(np.abs(kkt), axis=1))
    sol = sc[:, None] * sla.solve(sc[:, None] * kkt * sc[None, :], sc[:, None] * rhs, assume_a="sym")
    return basis, sol[:K, :]


def natural_spline_interpolant(points, k: int, domain=None) -> SplineFunction:
    """Order-2k spline minimising the integral of the squared k-th derivative
    among interpolants of ``points`` (pairs ``(x, y)``)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be an (m, 2) array of (x, y) pairs")
    order = np.argsort(pts[:, 0], kind="stable")
    xs, ys = pts[order, 0], pts[order, 1]
    ux, inv = np.unique(xs, return_inverse=True)
    if ux.size < xs.size:
        for j in range(ux.size):
            vals = ys[inv == j]
            if np.ptp(vals) > 0:
                raise ValueError("duplicate x with conflicting y")
        ys = np.array([ys[inv == j][0] for j in range(ux.size)])
    basis, M = natural_spline_operator(ux, k, domain)
    return SplineFunction(basis, M @ ys)
