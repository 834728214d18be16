"""Smoothness penalties for ``F[m_1(x_1) + ... + m_d(x_d)]``.

``T_l(f)^2`` is the integral of the squared l-th derivative.  The penalty

    J = J1**nu1 + J2**nu2
    J1 = rho0 * T_k(F) * S**((2k - 1) / 4)
    J2 = T_1(F) * S**(1/4)
    S  = sum_j T_1(m_j)^2 + rho_j^2 T_k(m_j)^2

is unchanged by the reparameterisation ``F(z) -> F(alpha (z + sum beta))``,
``m_j -> m_j / alpha - beta_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import integrate

from .splines import BasisSpec, SplineFunction, affine_reparam, gram_matrix


@dataclass(frozen=True)
class PenaltyConfig:
    k: int = 2
    nu1: float = 1.0
    nu2: float = 1.0
    rho0: float = 1.0
    rho: tuple[float, ...] | None = None  # None means 1 for every component

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not (self.nu1 > 0 and self.nu2 >= self.nu1):
            raise ValueError("need nu2 >= nu1 > 0")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.rho is not None:
            rho = tuple(float(r) for r in self.rho)
            if any(not (r > 0 and np.isfinite(r)) for r in rho):
                raise ValueError("rho weights must lie in (0, inf)")
            object.__setattr__(self, "rho", rho)

    def rho_for(self, d: int) -> np.ndarray:
        if self.rho is None:
            return np.ones(d)
        if len(self.rho) != d:
            raise ValueError(f"expected {d} rho weights, got {len(self.rho)}")
        return np.asarray(self.rho)


def t_l_squared(f: SplineFunction, l: int) -> float:
    """``T_l(f)^2``, integrated from the coefficients of ``f^(l)``.

    Differencing the coefficients first keeps the value exactly zero for
    polynomials of degree below ``l`` whose coefficients are exact (constants).
    """
    t, p = f.basis.knots, f.basis.order
    if l < 0 or l > p - 1:
        raise ValueError(f"derivative order {l} not available for order {p}")
    c = f.coefficients
    if l == 0:
        return max(float(c @ gram_matrix(f.basis, 0) @ c), 0.0)
    tt = t
    for q in range(p, p - l, -1):  # order before each differentiation
        span = tt[q:-1] - tt[1:-q]
        c = (q - 1) * np.diff(c) / span
        tt = tt[1:-1]
    if not np.any(c):
        return 0.0
    return max(float(c @ gram_matrix(BasisSpec(tt, p - l), 0) @ c), 0.0)


def component_norm_matrix(f_or_basis, k: int, rho: float = 1.0) -> np.ndarray:
    """Matrix of the quadratic form ``T_1^2 + rho^2 T_k^2`` on coefficients."""
    basis = getattr(f_or_basis, "basis", f_or_basis)
    return gram_matrix(basis, 1) + rho**2 * gram_matrix(basis, k)


def additive_smoothness(components: Sequence[SplineFunction], cfg: PenaltyConfig) -> float:
    rho = cfg.rho_for(len(components))
    return float(
        sum(t_l_squared(m, 1) + r**2 * t_l_squared(m, cfg.k) for m, r in zip(components, rho))
    )


class JValues(NamedTuple):
    j1: float
    j2: float
    j: float
    degenerate: bool


def j_from_parts(tk_f: float, t1_f: float, s: float, cfg: PenaltyConfig) -> JValues:
    """Assemble (J1, J2, J) from ``T_k(F)``, ``T_1(F)`` and ``S``."""
    if s <= 0.0:
        return JValues(0.0, 0.0, 0.0, True)
    k = cfg.k
    j1 = cfg.rho0 * tk_f * s ** ((2 * k - 1) / 4.0)
    j2 = t1_f * s**0.25
    return JValues(j1, j2, j1**cfg.nu1 + j2**cfg.nu2, False)


def j_functionals(F: SplineFunction, components: Sequence[SplineFunction], cfg: PenaltyConfig) -> JValues:
    s = additive_smoothness(components, cfg)
    return j_from_parts(
        np.sqrt(t_l_squared(F, cfg.k)), np.sqrt(t_l_squared(F, 1)), s, cfg
    )


def transform_model(
    F: SplineFunction,
    components: Sequence[SplineFunction],
    alpha: float,
    beta: Sequence[float],
) -> tuple[SplineFunction, list[SplineFunction]]:
    """Apply ``F -> F(alpha (x + sum beta))`` and ``m_j -> m_j / alpha - beta_j``.

    Both maps are exact on the spline representation: ``F`` is re-knotted,
    components have their coefficients scaled and shifted (partition of unity).
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    beta = np.asarray(beta, dtype=float)
    if beta.size != len(components):
        raise ValueError("beta must have one entry per component")
    F_new = affine_reparam(F, alpha, float(beta.sum()))
    m_new = [
        m.with_coefficients(m.coefficients / alpha - b) for m, b in zip(components, beta)
    ]
    return F_new, m_new


def composition_sides(f: SplineFunction, g: SplineFunction) -> tuple[float, float]:
    """``(int_0^1 f(g)^2 g'^2, 2 T_2(g) int_a^b f^2)`` for ``g: [0, 1] -> [a, b]``.

    The left side is integrated adaptively between the knots of ``g``; the
    right side is exact.
    """
    lo, hi = f.domain
    if g.domain != (0.0, 1.0):
        raise ValueError("g must live on [0, 1]")

    def integrand(y):
        gy = np.clip(g(y), lo, hi)
        return f(gy) ** 2 * g(y, 1) ** 2

    pts = [float(v) for v in g.basis.interior_knots]
    lhs = integrate.quad(integrand, 0.0, 1.0, points=pts or None, limit=400, epsabs=1e-13, epsrel=1e-11)[0]
    rhs = 2.0 * np.sqrt(t_l_squared(g, 2)) * t_l_squared(f, 0)
    return float(lhs), float(rhs)
