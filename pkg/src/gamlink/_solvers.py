"""Small dense solvers shared by the GAM and nested fitters."""

from __future__ import annotations

import warnings
from typing import Sequence

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq, minimize


class RootFindingError(RuntimeError):
    pass


def solve_norm_constrained(A: np.ndarray, b: np.ndarray, Q: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimise ``c'Ac - 2b'c`` subject to ``c'Qc = 1`` (Q positive definite).

    Stationarity gives ``(A + mu Q) c = b``; the multiplier is the unique root
    of the secular equation on ``mu > -gamma_min`` (global minimiser), with the
    degenerate "hard case" handled separately.
    """
    gam, V = sla.eigh(A, Q)  # V' Q V = I
    beta = V.T @ b
    g0 = gam[0]
    bnorm = float(np.linalg.norm(beta))
    scale = max(abs(gam[-1]), bnorm, 1e-300)

    def phi(mu):
        return float(np.sum((beta / (gam + mu)) ** 2) - 1.0)

    if bnorm == 0.0:
        eta = np.zeros_like(beta)
        eta[0] = 1.0
        return V @ eta, -g0

    degenerate = (np.abs(gam - g0) <= 1e-12 * scale) & (np.abs(beta) <= 1e-13 * bnorm)
    if degenerate[0]:
        rest = ~degenerate
        gap = gam[rest] - g0
        if np.all(gap > 0):
            norm_rest = float(np.sum((beta[rest] / gap) ** 2))
        else:
            norm_rest = np.inf
        if norm_rest <= 1.0:
            eta = np.zeros_like(beta)
            eta[rest] = beta[rest] / gap
            eta[np.flatnonzero(degenerate)[0]] = np.sqrt(1.0 - norm_rest)
            return V @ eta, -g0
        step = bnorm
        while phi(-g0 + step) > 0:
            step *= 2.0
        hi = -g0 + step
        step_lo = step
        while phi(-g0 + step_lo) <= 0 and step_lo > 1e-300:
            step_lo *= 0.5
        lo = -g0 + step_lo
    else:
        # phi(lo) >= 3 and phi(hi) <= -3/4 by construction
        lo = -g0 + 0.5 * abs(beta[0])
        hi = -g0 + 2.0 * bnorm
    try:
        mu = brentq(phi, lo, hi, xtol=1e-15 * max(1.0, abs(lo), abs(hi)), rtol=4 * np.finfo(float).eps, maxiter=500)
    except ValueError as exc:
        raise RootFindingError(str(exc)) from exc
    eta = beta / (gam + mu)
    c = V @ eta
    return c / np.sqrt(c @ Q @ c), mu


def penalized_objective(c, BtWB, BtWy, ywy, terms) -> float:
    val = float(c @ BtWB @ c - 2.0 * BtWy @ c + ywy)
    for coef, Om, power in terms:
        val += coef * max(float(c @ Om @ c), 0.0) ** power
    return val


def _sym_solve(M, rhs):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", sla.LinAlgWarning)
            return sla.solve(M, rhs, assume_a="pos")
    except (sla.LinAlgError, sla.LinAlgWarning, ValueError):
        return np.linalg.lstsq(M, rhs, rcond=None)[0]


def _mm(c, BtWB, BtWy, ywy, terms, mm_floor, tol, max_iter):
    prev = penalized_objective(c, BtWB, BtWy, ywy, terms)
    for _ in range(max_iter):
        M = BtWB.copy()
        for coef, Om, p in terms:
            if p == 1.0:
                M += coef * Om
            else:
                t0 = max(float(c @ Om @ c), mm_floor)
                M += coef * p * t0 ** (p - 1.0) * Om
        c_new = _sym_solve(M, BtWy)
        val = penalized_objective(c_new, BtWB, BtWy, ywy, terms)
        if val > prev:
            break
        c = c_new
        done = prev - val <= tol * max(abs(prev), 1e-300)
        prev = val
        if done:
            break
    return c, prev


def solve_penalized_spline(
    B: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    terms: Sequence[tuple[float, np.ndarray, float]],
    c0: np.ndarray,
    mm_floor: float = 1e-12,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> np.ndarray:
    """Minimise ``n^-1 sum w (y - Bc)^2 + sum coef * (c' Om c)^power``.

    All powers equal to one give one linear solve.  Powers in (0, 1) are
    handled by majorize-minimize with tangent majorants of ``t^power``
    (majorisation point floored at ``mm_floor``).  Powers above one use a
    quasi-Newton solve started at ``c0``.
    """
    n = y.size
    Bw = B * w[:, None]
    BtWB = Bw.T @ B / n
    BtWy = Bw.T @ y / n
    ywy = float(np.sum(w * y * y) / n)
    powers = [p for _, _, p in terms]
    if all(p == 1.0 for p in powers):
        M = BtWB + sum(coef * Om for coef, Om, _ in terms)
        return _sym_solve(M, BtWy)
    if all(p <= 1.0 for p in powers):
        # A seminorm sitting at (numerically) zero is absorbing for MM, so a
        # second run starts from the quadratic-penalty solution, where every
        # seminorm is generically positive; the better end point wins.
        ridge = _sym_solve(BtWB + sum(coef * Om for coef, Om, _ in terms), BtWy)
        best, best_val = None, np.inf
        for start in (np.asarray(c0, dtype=float), ridge):
            c, val = _mm(start, BtWB, BtWy, ywy, terms, mm_floor, tol, max_iter)
            if val < best_val:
                best, best_val = c, val
        return best

    def fun(c):
        r = BtWB @ c
        val = c @ r - 2.0 * BtWy @ c + ywy
        grad = 2.0 * r - 2.0 * BtWy
        for coef, Om, p in terms:
            oc = Om @ c
            t = max(float(c @ oc), 0.0)
            val += coef * t**p
            if t > 0:
                grad = grad + coef * p * t ** (p - 1.0) * 2.0 * oc
        return val, grad

    res = minimize(fun, np.asarray(c0, dtype=float), jac=True, method="L-BFGS-B",
                   options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 2000})
    return res.x
