import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from gamlink import Dataset, FitConfig, canonicalize, evaluate_regression, fit_gam
from gamlink.nested import NetworkSpec, _gam_equivalent, evaluate_network
from gamlink.quantile import (
    QuantileConfig,
    SmoothedCheckLoss,
    check_loss,
    fit_quantile_gam,
    fit_quantile_nested,
    trust_region_step,
)
from gamlink.simulation import benchmark_data

import oracles

TINY = FitConfig(lam=0.1, m_interior_knots=0, f_interior_knots=0, spline_order=3)
SPEC22 = NetworkSpec(2, (2, 2), {(0, 0): 0, (0, 1): 1, (1, 0): 2, (1, 1): 3})


# -- check loss --------------------------------------------------------------------

def test_check_loss_examples():
    assert check_loss(2.0, 0.5) == 1.0
    assert check_loss(-2.0, 0.5) == 1.0
    assert check_loss(-1.0, 0.9) == pytest.approx(0.1, abs=1e-16)
    assert check_loss(0.0, 0.3) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(0.001, 0.999))
def test_check_loss_matches_reference_and_is_nonnegative(z, a):
    assert check_loss(z, a) == oracles.check_loss_ref(z, a)
    assert check_loss(z, a) >= 0


def test_pinball_identities():
    rng = np.random.default_rng(0)
    z = rng.normal(scale=10, size=1000)
    a = rng.integers(1, 64, size=1000) / 64  # dyadic, so 1 - a is exact
    # the two levels add up to |z| at the same argument, and a reflection
    # swaps the levels
    assert np.max(np.abs(check_loss(z, a) + check_loss(z, 1 - a) - np.abs(z))) <= 1e-15 * np.max(np.abs(z))
    np.testing.assert_allclose(check_loss(-z, 1 - a), check_loss(z, a), rtol=0)


def test_pinball_reflected_sum_is_not_absolute_value():
    # u_a(z) + u_{1-a}(-z) = 2 a z for z > 0: equals |z| only at a = 1/2
    z, a = 3.0, 0.2
    assert check_loss(z, a) + check_loss(-z, 1 - a) == pytest.approx(2 * a * z)
    assert check_loss(z, 0.5) + check_loss(-z, 0.5) == pytest.approx(abs(z))


# -- smoothed surrogate ---------------------------------------------------------------

@pytest.mark.parametrize("a", [0.1, 0.5, 0.85])
def test_surrogate_equals_check_loss_away_from_zero(a):
    from gamlink.quantile import smoothed_check_loss
    eps = 0.01
    z = np.array([-10 * eps, -eps, eps, 10 * eps, 3.0, -7.0])
    val, der, curv = smoothed_check_loss(z, a, eps)
    np.testing.assert_array_equal(val, check_loss(z, a))
    np.testing.assert_array_equal(der, np.where(z > 0, a, a - 1))
    assert np.all(curv == 0)


@pytest.mark.parametrize("a", [0.1, 0.5, 0.85])
def test_surrogate_at_zero_and_continuity(a):
    from gamlink.quantile import smoothed_check_loss
    eps = 0.02
    v0, d0, c0 = smoothed_check_loss(0.0, a, eps)
    assert v0 == pytest.approx(eps / 4)
    assert d0 == pytest.approx(a - 0.5)
    assert c0 == pytest.approx(1 / (2 * eps))
    for s in (-1, 1):
        inside = smoothed_check_loss(s * eps * (1 - 1e-12), a, eps)
        edge = smoothed_check_loss(s * eps, a, eps)
        assert inside[0] == pytest.approx(edge[0], abs=1e-13)
        assert inside[1] == pytest.approx(edge[1], abs=1e-10)


@pytest.mark.parametrize("a", [0.05, 0.5, 0.7])
def test_surrogate_excess_integral(a):
    from gamlink.quantile import smoothed_check_loss
    eps = 0.3
    gap = integrate.quad(lambda z: smoothed_check_loss(z, a, eps)[0] - check_loss(z, a),
                         -eps, eps, points=[0.0], epsabs=1e-14)[0]
    # the quadratic piece exceeds the check loss by eps^2 / 6 in total
    assert gap == pytest.approx(eps**2 / 6, rel=1e-10)
    assert gap <= eps**2


def test_surrogate_bounds_and_convexity():
    from gamlink.quantile import smoothed_check_loss
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, eps = rng.uniform(0.01, 0.99), rng.uniform(1e-3, 1)
        z = rng.uniform(-3 * eps, 3 * eps, 1000)
        val, der, curv = smoothed_check_loss(z, a, eps)
        u = check_loss(z, a)
        # a C^1 convex function matching both tangent lines lies above them
        assert np.all(val >= u - 1e-15)
        assert np.all(val <= u + eps / 4 + 1e-15)
        assert np.all(curv >= 0)
        order = np.argsort(z)
        assert np.all(np.diff(der[order]) >= -1e-15)


def test_majorizer_touches_and_dominates():
    rng = np.random.default_rng(2)
    loss = SmoothedCheckLoss(0.3, 0.05)
    for _ in range(50):
        r0 = rng.normal()
        w, shift = loss.majorizer(np.array([r0]))
        # w (r + shift)^2 + const >= loss(r), with equality at r0
        q = lambda r: w[0] * ((r + shift[0]) ** 2 - (r0 + shift[0]) ** 2) + loss.value(np.array([r0]))[0]
        r = rng.normal(scale=2, size=200)
        assert np.all(q(r) >= loss.value(r) - 1e-12)
        assert q(r0) == pytest.approx(loss.value(np.array([r0]))[0], abs=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        QuantileConfig(alpha=0.0)
    with pytest.raises(ValueError):
        QuantileConfig(alpha=1.0)
    with pytest.raises(ValueError):
        QuantileConfig(alpha=0.5, epsilon=0.0)
    y = np.array([1.0, 3.0, 5.0])
    assert QuantileConfig().resolve_epsilon(y) == pytest.approx(1e-3 * 2.0)


# -- trust-region subproblem ------------------------------------------------------------

def test_trust_region_step_matches_linear_program():
    from scipy.optimize import linprog

    rng = np.random.default_rng(3)
    n, k, a = 30, 4, 0.3
    G = rng.normal(size=(n, k))
    r0 = rng.normal(size=n)
    lin = rng.normal(size=k) * 0.1
    box = np.full(k, 0.5)
    d, pred = trust_region_step(G, r0, lin, [], np.zeros(0), box, a)
    cost = np.concatenate([lin, np.full(n, a / n), np.full(n, (1 - a) / n)])
    A = np.hstack([G, np.eye(n), -np.eye(n)])
    ref = linprog(cost, A_eq=A, b_eq=r0, bounds=[(-0.5, 0.5)] * k + [(0, None)] * (2 * n), method="highs")
    base = np.mean(check_loss(r0, a))
    assert pred == pytest.approx(base - ref.fun, abs=1e-7)
    assert np.mean(check_loss(r0 - G @ d, a)) + lin @ d == pytest.approx(ref.fun, abs=1e-7)


# -- fitted quantiles -------------------------------------------------------------------

def _toy(seed, n=12):
    rng = np.random.default_rng(200 + seed)
    x = rng.uniform(0, 1, (n, 2))
    y = np.sin(2 * x[:, 0]) + x[:, 1] ** 2 + 0.1 * rng.normal(size=n)
    return x, y


def test_reported_objective_is_exact_check_loss():
    x, y = _toy(5, 30)
    res = fit_quantile_gam(Dataset(x, y), QuantileConfig(0.3, base=TINY))
    fitted, _ = evaluate_regression(res.model, x)
    assert res.objective == pytest.approx(np.mean(check_loss(y - fitted, 0.3)) + 0.01 * res.j_value, rel=1e-12)
    tr = np.asarray(res.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * (1 + np.abs(tr[:-1])))
    assert res.model.meta["alpha"] == 0.3
    assert res.diagnostics["objective_before_polish"] >= res.objective


@pytest.mark.parametrize("seed", range(3))
def test_toy_matches_multistart_oracle(seed):
    x, y = _toy(seed)
    res = fit_quantile_gam(Dataset(x, y), QuantileConfig(0.25, base=TINY))
    best, _ = oracles.gam_multistart(x, y, 0.1, restarts=500, seed=seed, alpha=0.25, check=True)
    assert res.objective <= best + 1e-3


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9])
def test_interpolation_regime(alpha):
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, (30, 2))
    z = x[:, 0] + 0.4 * x[:, 0] ** 2 - 0.7 * x[:, 1]
    y = z + 0.3 * z**2
    cfg = FitConfig(lam=1e-8, m_interior_knots=0, f_interior_knots=0, spline_order=3)
    res = fit_quantile_gam(Dataset(x, y), QuantileConfig(alpha, base=cfg))
    fitted, _ = evaluate_regression(res.model, x)
    assert np.mean(check_loss(y - fitted, alpha)) <= 1e-6


@pytest.fixture(scope="module")
def benchmark_rep():
    data, _ = benchmark_data(400, 20070601, 0)
    return data


def _l2(a, b, j):
    u = np.linspace(0, 1, 1001)
    return float(np.sqrt(np.mean((a.components[j](u) - b.components[j](u)) ** 2)))


def test_median_close_to_least_squares(benchmark_rep):
    cfg = FitConfig(lam=0.1)
    med = canonicalize(fit_quantile_gam(benchmark_rep, QuantileConfig(0.5, base=cfg)).model)
    ls = canonicalize(fit_gam(benchmark_rep, cfg).model)
    assert max(_l2(med, ls, 0), _l2(med, ls, 1)) <= 0.1


def test_lower_quantile_below_upper(benchmark_rep):
    cfg = FitConfig(lam=0.1)
    lo = fit_quantile_gam(benchmark_rep, QuantileConfig(0.25, base=cfg)).model
    hi = fit_quantile_gam(benchmark_rep, QuantileConfig(0.75, base=cfg)).model
    g = np.linspace(0, 1, 41)
    grid = np.array([(a, b) for a in g for b in g])
    below = evaluate_regression(lo, grid)[0] <= evaluate_regression(hi, grid)[0]
    assert below.mean() >= 0.95


# -- nested quantiles --------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(2))
def test_nested_depth_one_reduces_to_gam(seed):
    rng = np.random.default_rng(300 + seed)
    d = int(rng.integers(1, 4))
    x = rng.uniform(0, 1, (60, d))
    y = np.sin(2 * x.sum(axis=1)) + 0.2 * rng.normal(size=60)
    spec = NetworkSpec.additive(d, c=float(rng.uniform(0.5, 2)))
    cfg = FitConfig(lam=0.1)
    a = fit_quantile_nested(Dataset(x, y), spec, QuantileConfig(0.3, base=cfg)).objective
    b = fit_quantile_gam(Dataset(x, y), QuantileConfig(0.3, base=_gam_equivalent(spec, cfg))).objective
    assert abs(a - b) <= 1e-6


@pytest.mark.parametrize("alpha", [0.2, 0.8])
def test_nested_interpolation_regime(alpha):
    rng = np.random.default_rng(10)
    spec = NetworkSpec(2, (2, 1), {(0, 0): 0, (1, 0): 1})
    cfg = FitConfig(lam=1e-8, m_interior_knots=0, f_interior_knots=0, spline_order=3)
    x = rng.uniform(0, 1, (40, 2))
    z = (x[:, 0] + 0.3 * x[:, 0] ** 2) - 0.5 * x[:, 1]
    y = z + 0.3 * z**2
    res = fit_quantile_nested(Dataset(x, y), spec, QuantileConfig(alpha, base=cfg))
    assert np.mean(check_loss(y - evaluate_network(res.model, x)[0], alpha)) <= 1e-6


def test_nested_depth_two_matches_multistart_oracle():
    rng = np.random.default_rng(400)
    x = rng.uniform(0, 1, (25, 4))
    y = np.tanh(x[:, 0] + x[:, 1] ** 2) + (x[:, 2] - x[:, 3]) ** 2 + 0.05 * rng.normal(size=25)
    res = fit_quantile_nested(Dataset(x, y), SPEC22, QuantileConfig(0.3, base=TINY))
    best, _ = oracles.nested22_multistart(x, y, 0.1, restarts=500, alpha=0.3, check=True)
    assert res.objective <= best + 1e-3
