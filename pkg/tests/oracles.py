"""Reference implementations that share no code with the package.

Everything here is written from textbook definitions (Cox-de Boor recursion,
adaptive quadrature, closed-form polynomial integrals, brute force) and is
slow on purpose.
"""

from __future__ import annotations

from math import comb

import numpy as np
from scipy import integrate, optimize


# -- B-splines ----------------------------------------------------------------

def cox_de_boor(t, p, i, x):
    """Value of the i-th B-spline of order p (degree p-1) at x; right-closed
    at the last knot so that the basis sums to one on the closed domain."""
    t = np.asarray(t, dtype=float)
    if p == 1:
        if t[i] <= x < t[i + 1]:
            return 1.0
        if x == t[-1] and t[i] < t[i + 1] == t[-1]:
            return 1.0
        return 0.0
    out = 0.0
    if t[i + p - 1] > t[i]:
        out += (x - t[i]) / (t[i + p - 1] - t[i]) * cox_de_boor(t, p - 1, i, x)
    if t[i + p] > t[i + 1]:
        out += (t[i + p] - x) / (t[i + p] - t[i + 1]) * cox_de_boor(t, p - 1, i + 1, x)
    return out


def cox_de_boor_deriv(t, p, i, x, l):
    if l == 0:
        return cox_de_boor(t, p, i, x)
    out = 0.0
    if t[i + p - 1] > t[i]:
        out += (p - 1) / (t[i + p - 1] - t[i]) * cox_de_boor_deriv(t, p - 1, i, x, l - 1)
    if t[i + p] > t[i + 1]:
        out -= (p - 1) / (t[i + p] - t[i + 1]) * cox_de_boor_deriv(t, p - 1, i + 1, x, l - 1)
    return out


def spline_value(t, p, coef, x, l=0):
    return sum(c * cox_de_boor_deriv(t, p, i, x, l) for i, c in enumerate(coef))


def bernstein(n, i, x):
    return comb(n, i) * x**i * (1 - x) ** (n - i)


def monomial_pieces(t, p, coef):
    """Each knot span's polynomial in monomial form, found by interpolating
    the Cox-de Boor values at p points inside the span."""
    t = np.asarray(t, dtype=float)
    pieces = []
    for a, b in zip(t[:-1], t[1:]):
        if b <= a:
            continue
        xs = a + (b - a) * (np.arange(p) + 0.5) / p
        ys = [spline_value(t, p, coef, x) for x in xs]
        pieces.append((a, b, np.polyfit(xs, ys, p - 1)))
    return pieces


def eval_pieces(pieces, x):
    for a, b, poly in pieces:
        if a <= x <= b:
            return float(np.polyval(poly, x))
    raise ValueError("x outside the pieces")


def gram_entry(t, p, a, b, l):
    """Adaptive quadrature of B_a^(l) B_b^(l), span by span."""
    t = np.asarray(t, dtype=float)
    total = 0.0
    for lo, hi in zip(t[:-1], t[1:]):
        if hi <= lo:
            continue
        f = lambda x: cox_de_boor_deriv(t, p, a, x, l) * cox_de_boor_deriv(t, p, b, x, l)  # noqa: E731
        total += integrate.quad(f, lo, hi, epsabs=1e-14, epsrel=1e-13, limit=100)[0]
    return total


def seminorm_sq(t, p, coef, l):
    t = np.asarray(t, dtype=float)
    total = 0.0
    for lo, hi in zip(t[:-1], t[1:]):
        if hi <= lo:
            continue
        total += integrate.quad(lambda x: spline_value(t, p, coef, x, l) ** 2, lo, hi,
                                epsabs=1e-14, epsrel=1e-13, limit=100)[0]
    return total


# -- natural splines ----------------------------------------------------------

def discrete_natural_penalty(xs, ys, lo, hi, grid=2001):
    """Minimise the second-difference energy of a grid function through the
    points (which must sit on grid nodes) and return the energy."""
    g = np.linspace(lo, hi, grid)
    h = g[1] - g[0]
    idx = [int(round((x - lo) / h)) for x in xs]
    D2 = (np.eye(grid, k=0)[:-2] - 2 * np.eye(grid, k=1)[:-2] + np.eye(grid, k=2)[:-2]) / h**2
    H = D2.T @ D2 * h
    C = np.zeros((len(idx), grid))
    C[np.arange(len(idx)), idx] = 1.0
    K = np.block([[2 * H, C.T], [C, np.zeros((len(idx), len(idx)))]])
    rhs = np.concatenate([np.zeros(grid), ys])
    sol = np.linalg.solve(K, rhs)
    u = sol[:grid]
    return float(u @ H @ u)


# -- polynomial models for tiny optimisation problems -------------------------
# With order 3 and no interior knots every function is a quadratic, so all
# penalties are closed-form integrals of polynomials.

def quad_t1sq(c1, c2, lo, hi):
    """int_lo^hi (c1 + 2 c2 z)^2 dz."""
    return (c1**2 * (hi - lo) + 2 * c1 * c2 * (hi**2 - lo**2)
            + 4 * c2**2 * (hi**3 - lo**3) / 3)


def quad_t2sq(c2, lo, hi):
    return 4 * c2**2 * (hi - lo)


def anchored_norm(a, b, rho=1.0):
    """T_1^2 + rho^2 T_2^2 of m(x) = a x + b x^2 on [0, 1]."""
    return quad_t1sq(a, b, 0.0, 1.0) + rho**2 * quad_t2sq(b, 0.0, 1.0)


def gam_objective_poly(params, x, y, lam, loss, pad=0.05, nu=(1.0, 1.0), rho0=1.0):
    """Objective of the quadratic-polynomial GAM.

    params: (a_1, b_1, ..., a_d, b_d, u0, u1, u2) where components are
    ``a x + b x^2`` rescaled to unit total norm, and the link is
    ``u0 + u1 s + u2 s^2`` in the rescaled coordinate ``s`` in [0, 1] of the
    padded index range.
    """
    d = x.shape[1]
    ab = np.asarray(params[: 2 * d]).reshape(d, 2)
    s_norm = sum(anchored_norm(a, b) for a, b in ab)
    if not s_norm > 1e-12:
        return np.inf
    ab = ab / np.sqrt(s_norm)
    z = sum(ab[j, 0] * x[:, j] + ab[j, 1] * x[:, j] ** 2 for j in range(d))
    zl, zh = float(z.min()), float(z.max())
    w = zh - zl
    if w < 1e-10:
        return np.inf
    lo, hi = zl - pad * w, zh + pad * w
    u0, u1, u2 = params[2 * d:]
    s = (z - lo) / (hi - lo)
    fit = u0 + u1 * s + u2 * s**2
    # in z: F = u0 + u1 (z-lo)/L + u2 (z-lo)^2/L^2
    L = hi - lo
    c1, c2 = u1 / L, u2 / L**2
    t1 = quad_t1sq(c1, c2, 0.0, L)
    t2 = quad_t2sq(c2, 0.0, L)
    pen = (rho0 * np.sqrt(t2)) ** nu[0] + np.sqrt(t1) ** nu[1]
    return float(np.mean(loss(y - fit)) + lam**2 * pen)


def check_loss_ref(z, alpha):
    z = np.asarray(z, dtype=float)
    return np.where(z > 0, alpha * z, -(1 - alpha) * z)


# -- compiled versions for many-restart searches -------------------------------

from numba import njit  # noqa: E402


@njit(cache=True)
def _loss(e, alpha, kind):
    if kind == 0:
        return e * e
    return alpha * e if e > 0 else (alpha - 1.0) * e


@njit(cache=True)
def _link_fit(z, y, u0, u1, u2, pad, alpha, kind, c):
    """Mean loss of the quadratic link on the padded range of z, plus
    ``(T_1^2, T_2^2)`` of that link."""
    n = z.size
    zl = z.min()
    zh = z.max()
    w = zh - zl
    L = w * (1.0 + 2.0 * pad)
    lo = zl - pad * w
    tot = 0.0
    for i in range(n):
        t = (z[i] - lo) / L
        tot += _loss(y[i] - (u0 + t * (u1 + u2 * t)), alpha, kind)
    c1 = u1 / L
    c2 = u2 / (L * L)
    t1 = c1 * c1 * L + 2.0 * c1 * c2 * L * L + 4.0 * c2 * c2 * L**3 / 3.0
    t2 = 4.0 * c2 * c2 * L
    return tot / n, max(t1, 0.0), t2


@njit(cache=True)
def gam_poly_fast(p, x, y, lam, alpha, kind, pad):
    """Compiled :func:`gam_objective_poly` with nu1 = nu2 = 1, rho = 1;
    ``kind`` 0 is squared loss, 1 the check loss at level ``alpha``."""
    n, d = x.shape
    s = 0.0
    for j in range(d):
        a = p[2 * j]
        b = p[2 * j + 1]
        s += a * a + 2 * a * b + 4 * b * b / 3 + 4 * b * b
    if s <= 1e-12:
        return np.inf
    r = 1.0 / np.sqrt(s)
    z = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(d):
            xj = x[i, j]
            acc += p[2 * j] * xj + p[2 * j + 1] * xj * xj
        z[i] = acc * r
    if z.max() - z.min() < 1e-10:
        return np.inf
    fit, t1, t2 = _link_fit(z, y, p[2 * d], p[2 * d + 1], p[2 * d + 2], pad, alpha, kind, 1.0)
    return fit + lam * lam * (np.sqrt(t2) + np.sqrt(t1))


@njit(cache=True)
def nested22_poly_fast(p, x, y, lam, c, nu, pad, alpha, kind):
    """Depth-2 network with widths (2, 2), quadratic nodes, leaf (l1, l2)
    reading column 2 l1 + l2, all per-node weights 1.  ``kind`` as in
    :func:`gam_poly_fast`.

    p: 8 leaf coefficients (a, b per leaf), 4 inner (a, b per inner node,
    anchored at the left end of [-sqrt 2, sqrt 2]), 3 outer link coefficients.
    """
    n = x.shape[0]
    h = np.sqrt(2.0)
    W = 2.0 * h
    u = np.zeros((n, 2))
    for g in range(2):
        s = 0.0
        for l in range(2):
            a = p[4 * g + 2 * l]
            b = p[4 * g + 2 * l + 1]
            s += a * a + 2 * a * b + 4 * b * b / 3 + 4 * b * b
        if s <= 1e-12:
            return np.inf
        r = 1.0 / np.sqrt(s)
        for i in range(n):
            acc = 0.0
            for l in range(2):
                xv = x[i, 2 * g + l]
                acc += p[4 * g + 2 * l] * xv + p[4 * g + 2 * l + 1] * xv * xv
            u[i, g] = min(max(acc * r, -h), h)
    s = 0.0
    for g in range(2):
        a = p[8 + 2 * g]
        b = p[9 + 2 * g]
        s += a * a * W + 2 * a * b * W * W + 4 * b * b * W**3 / 3 + 4 * b * b * W
    if s <= 1e-12:
        return np.inf
    r = 1.0 / np.sqrt(s)
    z = np.empty(n)
    for i in range(n):
        acc = 0.0
        for g in range(2):
            v = u[i, g] + h
            acc += p[8 + 2 * g] * v + p[9 + 2 * g] * v * v
        z[i] = acc * r
    if z.max() - z.min() < 1e-10:
        return np.inf
    fit, t1, t2 = _link_fit(z, y, p[12], p[13], p[14], pad, alpha, kind, c)
    return fit + lam * lam * (t1 + c * t2) ** nu


def _make_nelder_mead(obj):
    @njit(cache=True)
    def nelder_mead(x0, step, args, max_iter, tol):
        dim = x0.size
        S = np.empty((dim + 1, dim))
        fv = np.empty(dim + 1)
        S[0] = x0
        for i in range(dim):
            S[i + 1] = x0
            S[i + 1, i] += step
        for i in range(dim + 1):
            fv[i] = obj(S[i], *args)
        for _ in range(max_iter):
            order = np.argsort(fv)
            S = S[order]
            fv = fv[order]
            if abs(fv[-1] - fv[0]) <= tol * (abs(fv[0]) + 1e-300):
                break
            cen = S[:-1].sum(axis=0) / dim
            xr = cen + (cen - S[-1])
            fr = obj(xr, *args)
            if fr < fv[0]:
                xe = cen + 2.0 * (cen - S[-1])
                fe = obj(xe, *args)
                if fe < fr:
                    S[-1] = xe
                    fv[-1] = fe
                else:
                    S[-1] = xr
                    fv[-1] = fr
            elif fr < fv[-2]:
                S[-1] = xr
                fv[-1] = fr
            else:
                xc = cen + 0.5 * (xr - cen) if fr < fv[-1] else cen + 0.5 * (S[-1] - cen)
                fc = obj(xc, *args)
                if fc < min(fr, fv[-1]):
                    S[-1] = xc
                    fv[-1] = fc
                else:
                    for i in range(1, dim + 1):
                        S[i] = S[0] + 0.5 * (S[i] - S[0])
                        fv[i] = obj(S[i], *args)
        i0 = np.argmin(fv)
        return S[i0].copy(), fv[i0]

    return nelder_mead


_nm_gam = _make_nelder_mead(gam_poly_fast)
_nm_nested = _make_nelder_mead(nested22_poly_fast)


def _restarts(nm, obj, args, dim, restarts, rng, scale, polish):
    ends = []
    for _ in range(restarts):
        x, f = nm(rng.normal(scale=scale, size=dim), 0.5, args, 20000, 1e-13)
        ends.append((float(f), x))
    ends.sort(key=lambda e: e[0])
    best = ends[0]
    for _, x0 in ends[:polish]:
        # alternate simplex restarts and Powell passes until neither helps
        x, f = x0, obj(x0, *args)
        for _ in range(20):
            x1, f1 = nm(x, 0.05, args, 20000, 1e-15)
            res = optimize.minimize(lambda q: obj(q, *args), x1, method="Powell",
                                    options={"xtol": 1e-10, "ftol": 1e-15, "maxfev": 40000})
            f2 = float(res.fun)
            done = f - f2 <= 1e-12 * abs(f)
            x, f = res.x, f2
            if done:
                break
        if f < best[0]:
            best = (f, x)
    return best


def gam_multistart(x, y, lam, restarts=500, seed=0, alpha=0.5, check=False, pad=0.05, polish=10):
    """(best objective, argmin) of the quadratic GAM over ``restarts`` random starts."""
    args = (np.ascontiguousarray(x, dtype=float), np.asarray(y, dtype=float), float(lam),
            float(alpha), 1 if check else 0, float(pad))
    return _restarts(_nm_gam, gam_poly_fast, args, 2 * x.shape[1] + 3, restarts,
                     np.random.default_rng(seed), 2.0, polish)


def nested22_multistart(x, y, lam, c=1.0, nu=1.0, restarts=500, seed=0, pad=0.05, polish=10,
                        alpha=0.5, check=False):
    """(best objective, argmin) of :func:`nested22_poly_fast` over random starts."""
    args = (np.ascontiguousarray(x, dtype=float), np.asarray(y, dtype=float), float(lam),
            float(c), float(nu), float(pad), float(alpha), 1 if check else 0)
    return _restarts(_nm_nested, nested22_poly_fast, args, 15, restarts,
                     np.random.default_rng(seed), 2.0, polish)
