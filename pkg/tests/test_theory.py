import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcompress.theory import (TheoryError, bilinear_quadratic, contraction_factors, contraction_suite,
                               duality_gap, fit_rate, pl_nonconvex, pl_quadratic, pl_violations,
                               pl_envelope, pl_rate_check, pl_step_sizes, quantization_error_violations,
                               run_gda_pl, run_quantized_gda, scalar_game)


def test_scalar_game_gap_is_half_squared_norm():
    g = scalar_game()
    assert duality_gap(g, np.zeros(1), np.zeros(1)) == 0.0
    assert duality_gap(g, np.ones(1), np.ones(1)) == pytest.approx(1.0)
    assert duality_gap(g, np.array([2.0]), np.array([-1.0])) == pytest.approx(2.5)


def test_exact_gda_on_scalar_game_converges():
    rep = run_quantized_gda(scalar_game(), 0.5, 0.5, 0.0, K=4000, seed=0)
    assert rep.value[-1] < 1e-2 * rep.value[0]
    burn = rep.value[400:]
    assert np.all(np.diff(burn) <= 1e-12)
    assert rep.passed


def test_quantized_gda_rejects_non_convex_concave():
    with pytest.raises(TheoryError, match="convex-concave"):
        run_quantized_gda(pl_nonconvex(), K=10)


def test_gda_from_stationary_point_stays_put():
    p = pl_quadratic(2.0, 2.0, 0.5, d=2)
    rep = run_gda_pl(p, K=20, x0=np.zeros(2), y0=np.zeros(2))
    assert np.all(rep.value == 0.0)
    assert np.all(rep.potential == 0.0)


def test_missing_envelope_is_an_error():
    p = bilinear_quadratic(2)
    with pytest.raises(TheoryError, match="closed-form"):
        run_gda_pl(p, K=5)


def test_pl_step_and_envelope_constants():
    p = pl_quadratic(2.0, 2.0)
    alpha, beta = pl_step_sizes(p)
    assert alpha == pytest.approx(1 / 36) and beta == pytest.approx(0.5)
    rate, M = pl_envelope(p)
    assert rate == pytest.approx(1 - 1 / 36)
    # L_h = L + L^2 / (2 mu2) = 3; M = max(2 * 9 / 2, 40 * 4 / 2)
    assert M == pytest.approx(80.0)
    assert pl_rate_check(p, K=200).passed


def test_zero_step_gives_unit_factors():
    assert contraction_factors(2.0, 2.0, 2.0, 0.0, 0.0, 0.1, 1.0) == (1.0, 1.0)


def test_gamma1_within_half_step_bound():
    p = pl_quadratic(2.0, 2.0)
    alpha, beta = pl_step_sizes(p)
    g1, _ = contraction_factors(p.L, p.mu1, p.mu2, alpha, beta, 0.1, 1.0)
    assert g1 <= 1 - 0.5 * p.mu1 * alpha


def test_contraction_errors_name_the_condition():
    with pytest.raises(ValueError, match="side condition"):
        contraction_factors(1.0, 1.0, 1.0, 0.5, 0.0, 10.0, 0.01)
    with pytest.raises(ValueError, match="beta <= 1/L"):
        contraction_factors(2.0, 2.0, 2.0, 0.01, 1.0, 0.1, 1.0)


def test_contraction_suite_passes():
    reps = contraction_suite(K=200)
    assert len(reps) == 3 and all(r.passed for r in reps)


def test_pl_families_hold_pl_inequalities():
    for p in (pl_quadratic(2.0, 2.0), pl_quadratic(2.0, 3.0, 1.0, d=3), pl_nonconvex()):
        assert pl_violations(p, n=2000) == 0


def test_fit_rate_synthetic():
    k = np.arange(1, 2001)
    geo = fit_rate(k, 3.0 * 0.9 ** k, window=(0, 300), model="geometric")
    assert geo.rate == pytest.approx(0.9, abs=1e-6)
    inv = fit_rate(k, 2.0 / np.sqrt(k), window=(0, 2000), fit_floor=False)
    assert inv.rate == pytest.approx(-0.5, abs=1e-6)
    floored = fit_rate(k, 2.0 / np.sqrt(k) + 0.01, window=(0, 2000))
    assert floored.rate == pytest.approx(-0.5, abs=1e-3) and floored.floor == pytest.approx(0.01, rel=1e-3)
    with pytest.raises(ValueError, match="positive"):
        fit_rate(k, -np.ones(2000), window=(0, 10))


@pytest.mark.parametrize("mode", ["grid", "sign"])
def test_quantization_error_bound(mode):
    for d in (1, 10, 100):
        assert quantization_error_violations(d, n=200, mode=mode) == 0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_duality_gap_nonnegative_and_zero_only_at_saddle(seed):
    r = np.random.default_rng(seed)
    p = bilinear_quadratic(4, seed=seed % 5)
    x, y = r.normal(size=4), r.normal(size=4)
    assert duality_gap(p, x, y) > 0
    assert duality_gap(p, p.x_star, p.y_star) == pytest.approx(0.0, abs=1e-12)
