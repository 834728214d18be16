"""Penalized least squares for ``Y = F[m_1(X^1) + ... + m_d(X^d)] + U``.

During optimisation every component is anchored (``m_j(0) = 0``) and the
components jointly satisfy ``sum_j T_1^2(m_j) + rho_j^2 T_k^2(m_j) = 1``.
The fit alternates two steps:

* components, with ``F`` fixed: ``F`` is linearised around the current index,
  which leaves a quadratic in the stacked coefficients to be minimised on the
  ellipsoid above (a scalar Lagrange multiplier problem), followed by a
  backtracking guard on the true objective;
* link, with the components fixed: ``F`` is re-knotted onto the padded index
  range and the penalised least squares problem in its coefficients is solved
  (one linear solve for quadratic penalties, majorize-minimize otherwise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize

from ._solvers import RootFindingError, _sym_solve, solve_norm_constrained, solve_penalized_spline
from .penalty import PenaltyConfig, j_from_parts, j_functionals, t_l_squared, transform_model
from .splines import (
    BasisSpec,
    SplineFunction,
    design_matrix,
    eval_continued,
    gram_matrix,
    linear_spline,
    make_uniform_basis,
    natural_spline_operator,
    project_onto_basis,
    reflect,
)

log = logging.getLogger(__name__)

NORMINGS = ("anchored", "canonical", "raw")
START_KINDS = ("additive", "marginal")


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        y = np.array(self.y, dtype=float).ravel()
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] != y.size:
            raise ValueError("x must be (n, d) with n matching y")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError("need n >= 1 and d >= 1")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("missing or non-finite values")
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise ValueError("covariates must lie in [0, 1]")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class FitConfig:
    lam: float = 0.1
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    m_interior_knots: int = 4
    f_interior_knots: int = 4
    spline_order: int | None = None  # defaults to 2k
    max_sweeps: int = 200
    tol_objective: float = 1e-8
    mm_floor: float = 1e-12
    f_domain_padding: float = 0.05
    mm_max_iter: int = 200
    starts: tuple[str, ...] = ("additive", "marginal")

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(self.starts))
        if not self.starts or any(st not in START_KINDS for st in self.starts):
            raise ValueError(f"starts must be a non-empty subset of {START_KINDS}")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if not (self.tol_objective > 0 and self.mm_floor > 0):
            raise ValueError("tolerances must be positive")
        if self.f_domain_padding < 0:
            raise ValueError("padding must be >= 0")
        if self.order <= self.penalty.k:
            raise ValueError("spline order must exceed k so that T_k is informative")

    @property
    def order(self) -> int:
        return self.spline_order if self.spline_order is not None else 2 * self.penalty.k


@dataclass(frozen=True, eq=False)
class GamModel:
    link: SplineFunction
    components: tuple[SplineFunction, ...]
    norming: str = "raw"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.norming not in NORMINGS:
            raise ValueError(f"norming must be one of {NORMINGS}")

    @property
    def d(self) -> int:
        return len(self.components)

    def index(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return sum(m(np.clip(x[:, j], *m.domain)) for j, m in enumerate(self.components))

    def eval_component(self, j: int, x) -> np.ndarray:
        return self.components[j](np.asarray(x, dtype=float))

    def eval_link(self, z) -> np.ndarray:
        return self.link.clamped(np.asarray(z, dtype=float))[0]


@dataclass(frozen=True, eq=False)
class FitResult:
    model: GamModel
    objective_trace: list[float]
    j_value: float
    converged: bool
    sweeps_used: int
    stalled: bool = False
    objective: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.objective is None:
            object.__setattr__(self, "objective", self.objective_trace[-1])


class Step(NamedTuple):
    model: GamModel
    objective: float
    stalled: bool


class SquaredLoss:
    name = "squared"

    def value(self, r: np.ndarray) -> np.ndarray:
        return r * r

    def majorizer(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.ones_like(r), np.zeros_like(r)


SQUARED = SquaredLoss()


# -- evaluation ---------------------------------------------------------------

def evaluate_regression(model: GamModel, x) -> tuple[np.ndarray | float, np.ndarray | float]:
    """``F(clamp(sum_j m_j(x_j)))`` and the clamp distance, per point."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z = model.index(np.atleast_2d(x))
    val, dist = model.link.clamped(z)
    if single:
        return float(val[0]), float(dist[0])
    return val, dist


def objective(model: GamModel, data: Dataset, cfg: FitConfig, loss=SQUARED) -> float:
    """``n^-1 sum loss(residual) + lambda^2 J(F, m)``."""
    val, _ = evaluate_regression(model, data.x)
    r = data.y - val
    J = j_functionals(model.link, model.components, cfg.penalty).j
    return float(np.mean(loss.value(r)) + cfg.lam**2 * J)


# -- internal problem ----------------------------------------------------------

def link_terms(pc: PenaltyConfig, basis: BasisSpec, s: float, lam2: float):
    """``lambda^2 J`` as a function of link coefficients, for fixed ``S``."""
    k = pc.k
    c1 = lam2 * (pc.rho0 * s ** ((2 * k - 1) / 4.0)) ** pc.nu1
    c2 = lam2 * (s**0.25) ** pc.nu2
    return [
        (c1, gram_matrix(basis, k), pc.nu1 / 2.0),
        (c2, gram_matrix(basis, 1), pc.nu2 / 2.0),
    ]


def reknot_link(F: SplineFunction, z: np.ndarray, cfg: FitConfig) -> SplineFunction | None:
    """``F`` carried over to the padded range of ``z``; ``None`` if degenerate.

    Beyond its old domain ``F`` is continued by its end polynomials, so the
    transfer is exact whenever ``F`` is a single polynomial.
    """
    lo, hi = float(np.min(z)), float(np.max(z))
    width = hi - lo
    if width < 1e-10:
        return None
    pad = cfg.f_domain_padding * width
    basis = make_uniform_basis(lo - pad, hi + pad, cfg.f_interior_knots, cfg.order)
    if basis == F.basis:
        return F
    return project_onto_basis(
        lambda u: eval_continued(F, u), basis,
        extra_breaks=F.basis.breakpoints(), nodes=max(basis.order, F.basis.order),
    )


def end_sensitivities(F: SplineFunction, pieces, pad: float) -> tuple[float, float]:
    """Derivatives of a link penalty with respect to the smallest and largest
    index value, when the link lives on the range padded by ``pad``.

    ``pieces`` lists ``(dP/dT_l^2, l)``.  Moving the upper domain end by ``h``
    changes ``T_l^2`` by about ``h F^(l)(end)^2``; the lower end likewise with
    the opposite sign.
    """
    lo, hi = F.domain
    d_lo = d_hi = 0.0
    for dp, l in pieces:
        ends = eval_continued(F, np.array([lo, hi]), l) ** 2
        d_hi += dp * ends[1]
        d_lo -= dp * ends[0]
    g_hi = (1.0 + pad) * d_hi - pad * d_lo
    g_lo = (1.0 + pad) * d_lo - pad * d_hi
    return g_lo, g_hi


def squarem_point(t0: np.ndarray, t1: np.ndarray, t2: np.ndarray) -> np.ndarray | None:
    """Squared-extrapolation (SQUAREM) point from three successive iterates."""
    r = t1 - t0
    v = (t2 - t1) - r
    nv = float(np.linalg.norm(v))
    if nv == 0.0:
        return None
    a = -float(np.linalg.norm(r)) / nv
    if a >= -1.0:
        return None
    return t0 - 2.0 * a * r + a * a * v


class _Problem:
    """Per-fit cache of designs and norm matrices for anchored components."""

    def __init__(self, data: Dataset, cfg: FitConfig, loss=SQUARED, bases: Sequence[BasisSpec] | None = None):
        self.data, self.cfg, self.loss = data, cfg, loss
        d = data.d
        if bases is None:
            b = make_uniform_basis(0.0, 1.0, cfg.m_interior_knots, cfg.order)
            bases = [b] * d
        self.bases = list(bases)
        self.rho = cfg.penalty.rho_for(d)
        k = cfg.penalty.k
        blocks, Qs, self.slices = [], [], []
        start = 0
        for j, b in enumerate(self.bases):
            D = design_matrix(b, data.x[:, j])
            blocks.append(D[:, 1:])
            Q = gram_matrix(b, 1) + self.rho[j] ** 2 * gram_matrix(b, k)
            Qs.append(Q[1:, 1:])
            self.slices.append(slice(start, start + b.basis_count - 1))
            start += b.basis_count - 1
        self.D = np.hstack(blocks)
        self.Q = sla.block_diag(*Qs)

    # representation ------------------------------------------------------
    def components(self, theta: np.ndarray) -> list[SplineFunction]:
        return [
            SplineFunction(b, np.concatenate([[0.0], theta[s]]))
            for b, s in zip(self.bases, self.slices)
        ]

    def model(self, F: SplineFunction, theta: np.ndarray, **meta) -> GamModel:
        return GamModel(F, self.components(theta), "anchored", dict(meta))

    def theta_of(self, model: GamModel) -> tuple[SplineFunction, np.ndarray]:
        """Anchored, unit-norm representation of ``model`` on this problem's bases."""
        F, comps = model.link, list(model.components)
        for j, (m, b) in enumerate(zip(comps, self.bases)):
            if m.basis != b:
                comps[j] = project_onto_basis(m, b)
        anchors = np.array([m.coefficients[0] for m in comps])
        s = sum(
            float(m.coefficients @ (gram_matrix(b, 1) + r**2 * gram_matrix(b, self.cfg.penalty.k)) @ m.coefficients)
            for m, b, r in zip(comps, self.bases, self.rho)
        )
        if s <= 0:
            raise ValueError("all components constant; cannot norm")
        alpha = np.sqrt(s)
        F, comps = transform_model(F, comps, alpha, anchors / alpha)
        theta = np.concatenate([m.coefficients[1:] for m in comps])
        return F, theta

    # objective pieces ---------------------------------------------------
    def index(self, theta):
        return self.D @ theta

    def s_value(self, theta) -> float:
        return float(theta @ self.Q @ theta)

    def penalty(self, F: SplineFunction, s: float) -> float:
        k = self.cfg.penalty.k
        jv = j_from_parts(np.sqrt(t_l_squared(F, k)), np.sqrt(t_l_squared(F, 1)), s, self.cfg.penalty)
        return self.cfg.lam**2 * jv.j

    def objective(self, F, theta, z=None) -> float:
        if z is None:
            z = self.index(theta)
        fz, _ = F.clamped(z)
        r = self.data.y - fz
        return float(np.mean(self.loss.value(r))) + self.penalty(F, self.s_value(theta))

    # steps ----------------------------------------------------------------
    def update_components(self, F: SplineFunction, theta: np.ndarray):
        y, n = self.data.y, self.data.n
        z0 = self.index(theta)
        zc = np.clip(z0, *F.domain)
        fz = F(zc)
        dF = F(zc, 1)
        w, shift = self.loss.majorizer(y - fz)
        y_work = y + shift - fz + dF * z0
        G = dF[:, None] * self.D
        Gw = G * w[:, None]
        A = Gw.T @ G / n
        b = Gw.T @ y_work / n - 0.5 * self.domain_gradient(F, z0)
        obj0 = self.objective(F, theta, z0)
        if not np.any(dF != 0):
            return theta, F, obj0, True
        try:
            target, _ = solve_norm_constrained(0.5 * (A + A.T), b, self.Q)
        except (RootFindingError, sla.LinAlgError, ValueError):
            return theta, F, obj0, True
        t = 1.0
        while t >= 1e-12:
            trial = self._trial(F, theta, target, t)
            if trial is not None and trial[2] <= obj0:
                break
            t *= 0.5
        else:
            return theta, F, obj0, False
        if t == 1.0:
            # consecutive sweeps tend to move the same way: extrapolate while it pays
            while t < 64.0:
                longer = self._trial(F, theta, target, 2.0 * t)
                if longer is None or longer[2] >= trial[2]:
                    break
                trial, t = longer, 2.0 * t
        cand, F_cand, obj = trial
        return cand, F_cand, obj, False

    def _trial(self, F, theta, target, t):
        cand = theta + t * (target - theta)
        nrm = self.s_value(cand)
        if not nrm > 0:
            return None
        cand = cand / np.sqrt(nrm)
        z = self.index(cand)
        F_cand = self.reknot(F, z)
        if F_cand is None:
            return None
        return cand, F_cand, self.objective(F_cand, cand, z)

    def domain_gradient(self, F: SplineFunction, z: np.ndarray) -> np.ndarray:
        """First-order change of the link penalty through the ends of its domain
        (``S`` is constant on the constraint surface)."""
        pc, lam2 = self.cfg.penalty, self.cfg.lam**2
        pieces = []
        for coef, l, p in ((lam2 * pc.rho0**pc.nu1, pc.k, pc.nu1 / 2.0), (lam2, 1, pc.nu2 / 2.0)):
            t = t_l_squared(F, l)
            if t > 0.0:
                pieces.append((coef * p * t ** (p - 1.0), l))
        g_lo, g_hi = end_sensitivities(F, pieces, self.cfg.f_domain_padding)
        return g_hi * self.D[int(np.argmax(z))] + g_lo * self.D[int(np.argmin(z))]

    def extrapolate(self, F: SplineFunction, history, obj: float):
        """Jump along the direction of three successive sweeps; kept only if,
        after refitting the link, the objective is lower than ``obj``."""
        cand = squarem_point(*history)
        if cand is None:
            return None
        nrm = self.s_value(cand)
        if not nrm > 0:
            return None
        cand = cand / np.sqrt(nrm)
        F_cand = self.reknot(F, self.index(cand))
        if F_cand is None:
            return None
        F_cand, obj_cand, stalled = self.update_link(F_cand, cand)
        if stalled or not obj_cand < obj:
            return None
        return cand, F_cand, obj_cand

    def joint_step(self, F: SplineFunction, theta: np.ndarray, obj0: float):
        """Gauss-Newton step in the components and the link together.

        Alternating the two blocks converges slowly once they are coupled
        through the scale of the index; a joint linearisation, moving along the
        tangent space of the norm surface, removes most of that zig-zag.
        """
        cfg = self.cfg
        y, n = self.data.y, self.data.n
        basis, c0 = F.basis, F.coefficients
        G, N, r = self.linearize(F, theta)
        w, shift = self.loss.majorizer(r)
        q = basis.basis_count
        P = np.zeros((G.shape[1], G.shape[1]))
        for coef, Om, p in link_terms(cfg.penalty, basis, self.s_value(theta), cfg.lam**2):
            t0 = max(float(c0 @ Om @ c0), cfg.mm_floor)
            P[:q, :q] += coef * p * t0 ** (p - 1.0) * Om
        Gw = G * w[:, None]
        A = Gw.T @ G / n + P
        A[q:, q:] += 1e-12 * np.trace(A[q:, q:]) / max(A.shape[0] - q, 1) * np.eye(A.shape[0] - q)
        rhs = Gw.T @ (y + shift) / n
        try:
            sol = _sym_solve(A, rhs)
        except (sla.LinAlgError, ValueError):
            return None
        dc, du = sol[:q] - c0, N @ sol[q:]
        t = 1.0
        while t >= 1e-6:
            moved = self.move(F, theta, t * dc, t * du)
            if moved is not None:
                obj = self.objective(*moved)
                if obj < obj0:
                    return moved[1], moved[0], obj
            t *= 0.5
        return None

    def linearize(self, F: SplineFunction, theta: np.ndarray):
        """``(G, N, r)``: residuals ``r`` and their Jacobian ``-G`` with respect to
        the link coefficients and the coordinates ``N`` of the tangent space of
        ``{theta' Q theta = 1}`` at ``theta``."""
        z0 = self.index(theta)
        lo, hi = F.domain
        zc = np.clip(z0, lo, hi)
        B = design_matrix(F.basis, zc)
        dF = np.where((z0 >= lo) & (z0 <= hi), F(zc, 1), 0.0)
        N = sla.null_space((self.Q @ theta)[None, :])
        return np.hstack([B, (dF[:, None] * self.D) @ N]), N, self.data.y - B @ F.coefficients

    def move(self, F: SplineFunction, theta: np.ndarray, dc: np.ndarray, du: np.ndarray):
        """``(F, theta)`` after the step, renormalised and re-knotted; ``None`` if
        the index degenerates."""
        cand = theta + du
        nrm = self.s_value(cand)
        if not nrm > 0:
            return None
        cand = cand / np.sqrt(nrm)
        F_cand = self.reknot(SplineFunction(F.basis, F.coefficients + dc), self.index(cand))
        if F_cand is None:
            return None
        return F_cand, cand

    def reknot(self, F: SplineFunction, z: np.ndarray) -> SplineFunction | None:
        return reknot_link(F, z, self.cfg)

    def update_link(self, F: SplineFunction, theta: np.ndarray):
        cfg = self.cfg
        z = self.index(theta)
        obj0 = self.objective(F, theta, z)
        F_start = self.reknot(F, z)
        if F_start is None:
            return F, obj0, True
        basis, c0 = F_start.basis, F_start.coefficients
        B = design_matrix(basis, z)
        w, shift = self.loss.majorizer(self.data.y - B @ c0)
        terms = link_terms(cfg.penalty, basis, self.s_value(theta), cfg.lam**2)
        c = solve_penalized_spline(B, self.data.y + shift, w, terms, c0, cfg.mm_floor, cfg.tol_objective, cfg.mm_max_iter)
        F_new = SplineFunction(basis, c)
        obj = self.objective(F_new, theta, z)
        if obj <= obj0:
            return F_new, obj, False
        obj_start = self.objective(F_start, theta, z)
        if obj_start <= obj0:
            return F_start, obj_start, False
        return F, obj0, False


# -- public steps ----------------------------------------------------------------

def init_model(data: Dataset, cfg: FitConfig) -> GamModel:
    """Marginal least-squares lines, jointly scaled to unit norm; identity link."""
    x, y = data.x, data.y
    xc = x - x.mean(axis=0)
    var = np.sum(xc * xc, axis=0)
    slopes = np.where(var > 0, xc.T @ (y - y.mean()) / np.where(var > 0, var, 1.0), 0.0)
    fallback = bool(np.all(np.abs(slopes) < 1e-12))
    if fallback:
        slopes = np.zeros(data.d)
        slopes[0] = 1.0
    basis = make_uniform_basis(0.0, 1.0, cfg.m_interior_knots, cfg.order)
    # T_1^2(x) = 1 and T_k^2(x) = 0 on [0, 1], whatever rho is
    slopes = slopes / np.sqrt(float(np.sum(slopes**2)))
    comps = [linear_spline(basis, b) for b in slopes]
    z = x @ slopes
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-10:
        lo, hi = lo - 0.5, hi + 0.5
    pad = cfg.f_domain_padding * (hi - lo)
    fb = make_uniform_basis(lo - pad, hi + pad, cfg.f_interior_knots, cfg.order)
    return GamModel(linear_spline(fb), comps, "anchored", {"init_fallback": fallback})


def init_additive(data: Dataset, cfg: FitConfig) -> GamModel:
    """Penalised additive fit with an identity link, as a starting point.

    Minimises ``n^-1 sum (y - a - sum_j m_j)^2 + lambda^2 sum_j N_j(m_j)`` with
    ``N_j = T_1^2 + rho_j^2 T_k^2``, a single linear solve.  Falls back to
    :func:`init_model` when the result has no variation.
    """
    basis = make_uniform_basis(0.0, 1.0, cfg.m_interior_knots, cfg.order)
    k = cfg.penalty.k
    rho = cfg.penalty.rho_for(data.d)
    X = np.hstack([np.ones((data.n, 1))] + [design_matrix(basis, data.x[:, j])[:, 1:] for j in range(data.d)])
    P = sla.block_diag(np.zeros((1, 1)), *[
        (gram_matrix(basis, 1) + r**2 * gram_matrix(basis, k))[1:, 1:] for r in rho
    ])
    coef = np.linalg.lstsq(X.T @ X / data.n + cfg.lam**2 * P, X.T @ data.y / data.n, rcond=None)[0]
    p = basis.basis_count - 1
    comps = [SplineFunction(basis, np.concatenate([[0.0], coef[1 + j * p:1 + (j + 1) * p]])) for j in range(data.d)]
    if float(coef[1:] @ P[1:, 1:] @ coef[1:]) <= 1e-24:
        return init_model(data, cfg)
    z = sum(m(data.x[:, j]) for j, m in enumerate(comps))
    lo, hi = float(np.min(z)), float(np.max(z))
    if hi - lo < 1e-10:
        return init_model(data, cfg)
    pad = cfg.f_domain_padding * (hi - lo)
    fb = make_uniform_basis(lo - pad, hi + pad, cfg.f_interior_knots, cfg.order)
    return GamModel(linear_spline(fb, 1.0, float(coef[0])), comps, "raw", {"init_fallback": False})


def _step_result(prob: _Problem, F, theta, obj, stalled) -> Step:
    return Step(prob.model(F, theta), obj, stalled)


def update_components(model: GamModel, data: Dataset, cfg: FitConfig, loss=SQUARED) -> Step:
    prob = _Problem(data, cfg, loss, [m.basis for m in model.components])
    F, theta = prob.theta_of(model)
    theta, F, obj, stalled = prob.update_components(F, theta)
    return _step_result(prob, F, theta, obj, stalled)


def update_link(model: GamModel, data: Dataset, cfg: FitConfig, loss=SQUARED) -> Step:
    prob = _Problem(data, cfg, loss, [m.basis for m in model.components])
    F, theta = prob.theta_of(model)
    F, obj, stalled = prob.update_link(F, theta)
    return _step_result(prob, F, theta, obj, stalled)


def fit_gam(data: Dataset, cfg: FitConfig, loss=SQUARED, init: GamModel | None = None) -> FitResult:
    """Backfitting: components then link, until the relative objective change
    drops below ``cfg.tol_objective`` or ``cfg.max_sweeps`` is reached.

    Without ``init`` one run is made per entry of ``cfg.starts`` and the run
    with the lowest final objective is returned.
    """
    if init is not None:
        return _backfit(data, cfg, loss, init)
    best = None
    for kind in cfg.starts:
        model0 = init_additive(data, cfg) if kind == "additive" else init_model(data, cfg)
        res = _backfit(data, cfg, loss, model0)
        res.diagnostics["start"] = kind
        if best is None or res.objective < best.objective:
            best = res
    return best


def _backfit(data: Dataset, cfg: FitConfig, loss, model0: GamModel) -> FitResult:
    prob = _Problem(data, cfg, loss)
    F, theta = prob.theta_of(model0)
    F, obj, stalled = prob.update_link(F, theta)
    trace = [obj]
    converged = False
    sweeps = 0
    stalled_any = stalled
    history = [theta]
    for sweeps in range(1, cfg.max_sweeps + 1):
        theta, F, _, st1 = prob.update_components(F, theta)
        F, obj_new, st2 = prob.update_link(F, theta)
        stalled_any |= st1 or st2
        joint = prob.joint_step(F, theta, obj_new)
        if joint is not None:
            theta, F, obj_new = joint
        history.append(theta)
        if len(history) == 3:
            jump = prob.extrapolate(F, history, obj_new)
            if jump is not None:
                theta, F, obj_new = jump
            history = [theta]
        trace.append(obj_new)
        change = trace[-2] - obj_new
        if change <= cfg.tol_objective * abs(trace[-2]):
            converged = True
            break
    model = prob.model(F, theta, init_fallback=model0.meta.get("init_fallback", False))
    J = j_functionals(model.link, model.components, cfg.penalty).j
    return FitResult(model, trace, J, converged, sweeps, stalled_any)


# -- canonical forms -----------------------------------------------------------

def _mean_and_sq(m: SplineFunction) -> tuple[float, float]:
    lo, hi = m.domain
    t, p = m.basis.knots, m.basis.order
    integrals = (t[p:] - t[:-p]) / p
    mean = float(integrals @ m.coefficients) / (hi - lo)
    c = m.coefficients - mean
    return mean, float(c @ gram_matrix(m.basis, 0) @ c)


def index_range(model: GamModel, grid: int = 2001) -> tuple[float, float]:
    lo = hi = 0.0
    for m in model.components:
        a, b = m.domain
        v = m(np.unique(np.concatenate([np.linspace(a, b, grid), m.basis.breakpoints()])))
        lo += float(v.min())
        hi += float(v.max())
    return lo, hi


def canonicalize(model: GamModel) -> GamModel:
    """Centre each component, scale to unit total L2 norm, and orient the link
    so that its average slope over the index range is positive."""
    stats = [_mean_and_sq(m) for m in model.components]
    means = np.array([s[0] for s in stats])
    sq = sum(s[1] for s in stats)
    if not sq > 0:
        raise ValueError("all components constant: model is not identified")
    alpha = np.sqrt(sq)
    F, comps = transform_model(model.link, model.components, alpha, means / alpha)
    lo, hi = index_range(GamModel(F, comps))
    if hi > lo:
        fl, fh = F.clamped(np.array([lo, hi]))[0]
        if fh < fl:
            F = reflect(F)
            comps = [m.with_coefficients(-m.coefficients) for m in comps]
    return GamModel(F, comps, "canonical", dict(model.meta))


# -- natural-spline refits --------------------------------------------------------

def _dedupe(values: np.ndarray, rel_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Sorted representatives and inverse map, merging values closer than tol."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    tol = rel_tol * max(float(np.ptp(v)), 1.0)
    new_group = np.concatenate([[True], np.diff(v) > tol])
    gid = np.cumsum(new_group) - 1
    reps = v[new_group]
    inv = np.empty_like(gid)
    inv[order] = gid
    return reps, inv


def refit_component_natural(model: GamModel, data: Dataset, cfg: FitConfig, j0: int) -> GamModel:
    """Replace ``m_j0`` by the best natural spline of order 2k with knots at the
    observed ``X^j0`` values, everything else held fixed."""
    k = cfg.penalty.k
    pc = cfg.penalty
    xs, inv = _dedupe(data.x[:, j0])
    if xs.size < k:
        raise ValueError(f"need at least k={k} distinct covariate values in column {j0}")
    lo, hi = model.components[j0].domain
    basis, M = natural_spline_operator(xs, k, (min(lo, xs[0]), max(hi, xs[-1])))
    rho = pc.rho_for(model.d)
    Qn = M.T @ (gram_matrix(basis, 1) + rho[j0] ** 2 * gram_matrix(basis, k)) @ M
    s_other = sum(
        t_l_squared(m, 1) + r**2 * t_l_squared(m, k)
        for j, (m, r) in enumerate(zip(model.components, rho)) if j != j0
    )
    other = sum(
        m(np.clip(data.x[:, j], *m.domain)) for j, m in enumerate(model.components) if j != j0
    )
    other = np.zeros(data.n) + other
    F = model.link
    tk_f = np.sqrt(t_l_squared(F, k))
    t1_f = np.sqrt(t_l_squared(F, 1))
    lam2, n, y = cfg.lam**2, data.n, data.y
    a = (2 * k - 1) / 4.0
    flo, fhi = F.domain

    def fun(v):
        z = other + v[inv]
        zc = np.clip(z, flo, fhi)
        r = y - F(zc)
        dF = np.where((z >= flo) & (z <= fhi), F(zc, 1), 0.0)
        qv = Qn @ v
        s = s_other + float(v @ qv)
        jv = j_from_parts(tk_f, t1_f, s, pc)
        val = float(np.mean(r * r)) + lam2 * jv.j
        g = np.bincount(inv, weights=-2.0 * r * dF / n, minlength=v.size)
        if s > 0:
            dj_ds = (pc.nu1 * a * jv.j1**pc.nu1 + pc.nu2 * 0.25 * jv.j2**pc.nu2) / s
            g = g + lam2 * dj_ds * 2.0 * qv
        return val, g

    m_old = model.components[j0]
    v0 = m_old(np.clip(xs, *m_old.domain))
    res = minimize(fun, v0, jac=True, method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000, "maxcor": 30})
    v = res.x if res.fun <= fun(v0)[0] else v0
    comps = list(model.components)
    comps[j0] = SplineFunction(basis, M @ v)
    return GamModel(F, comps, "raw", dict(model.meta))


def refit_link_natural(model: GamModel, data: Dataset, cfg: FitConfig) -> GamModel:
    """Replace ``F`` by the best natural spline of order 2k with knots at the
    current index values, components held fixed."""
    k = cfg.penalty.k
    z = np.zeros(data.n) + model.index(data.x)
    zs, inv = _dedupe(z)
    if zs.size < k:
        raise ValueError(f"need at least k={k} distinct index values")
    lo, hi = model.link.domain
    basis, M = natural_spline_operator(zs, k, (min(lo, zs[0]), max(hi, zs[-1])))
    Bv = design_matrix(basis, z) @ M
    s = sum(
        t_l_squared(m, 1) + r**2 * t_l_squared(m, k)
        for m, r in zip(model.components, cfg.penalty.rho_for(model.d))
    )
    terms = [(coef, M.T @ Om @ M, p) for coef, Om, p in link_terms(cfg.penalty, basis, s, cfg.lam**2)]
    v0 = model.link.clamped(zs)[0]
    v = solve_penalized_spline(Bv, data.y, np.ones(data.n), terms, v0, cfg.mm_floor, 1e-14, 10 * cfg.mm_max_iter)
    # MM creeps when a seminorm is near zero; the interpolant of the incumbent
    # values is in the same class and may still be better
    cands = [GamModel(SplineFunction(basis, M @ vv), model.components, "raw", dict(model.meta)) for vv in (v, v0)]
    return min(cands, key=lambda m: objective(m, data, cfg))
