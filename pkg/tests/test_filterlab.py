import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optformer.errors import ValidationError
from optformer.filterlab import (
    FilterScenario,
    char_root_moduli,
    coefficients,
    compare_filters,
    diagonal_redundancy_check,
    eigenmode_recurrence,
    fit_envelope_rate,
    momentum_rate,
    random_balanced_vector,
    rate_gap,
    recurrence_coeffs,
    spd_inv_sqrt,
    sweep,
    sweep_csv,
    token_side_factorization_check,
    vanilla_rate,
)

KAPPAS = [1.5, 2, 4, 9, 25, 100]


def test_vanilla_rate_values():
    assert vanilla_rate(3.0, 3.0) == (pytest.approx(1 / 3), 0.0)
    eta, rho = vanilla_rate(1, 9)
    assert eta == pytest.approx(0.2, abs=1e-15) and rho == pytest.approx(0.8, abs=1e-15)
    rhos = [vanilla_rate(1, k)[1] for k in (1, 2, 4, 9, 100)]
    assert all(a < b for a, b in zip(rhos, rhos[1:]))


def test_momentum_rate_values():
    eta, beta, rho = momentum_rate(2.0, 2.0)
    assert beta == 0.0 and rho == 0.0
    eta, beta, rho = momentum_rate(1, 9)
    assert (eta, beta, rho) == (pytest.approx(0.25), pytest.approx(0.25), pytest.approx(0.5))


@pytest.mark.parametrize("kappa", [2, 4, 9])
def test_gap_formula_matches_direct_subtraction(kappa):
    direct = vanilla_rate(1, kappa)[1] - momentum_rate(1, kappa)[2]
    assert rate_gap(kappa) == pytest.approx(direct, rel=1e-12)


@pytest.mark.parametrize("kappa", KAPPAS)
def test_momentum_strictly_better(kappa):
    assert momentum_rate(1, kappa)[2] < vanilla_rate(1, kappa)[1]


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(1e-3, 10), kappa=st.floats(1.0001, 1e4))
def test_momentum_strictly_better_property(mu, kappa):
    assert momentum_rate(mu, mu * kappa)[2] < vanilla_rate(mu, mu * kappa)[1]


def test_rate_errors():
    with pytest.raises(ValidationError):
        vanilla_rate(0.0, 1.0)
    with pytest.raises(ValidationError):
        momentum_rate(2.0, 1.0)


# --- recurrences ------------------------------------------------------------


def test_vanilla_recurrence_is_geometric_at_endpoints():
    for kappa in KAPPAS:
        sc = FilterScenario.vanilla(1.0, kappa, 40, spectrum=[1.0, kappa])
        e = eigenmode_recurrence(sc).errors
        rho = vanilla_rate(1.0, kappa)[1]
        np.testing.assert_allclose(np.abs(e[:, 1:] / e[:, :-1]), rho, atol=1e-12)
        np.testing.assert_allclose(np.abs(e[0]), np.abs(e[1]), rtol=1e-9)


def test_vanilla_special_case_single_step():
    sc = FilterScenario(1.0, 4.0, a=0, b=0, c=1, eta=0.3, depth=3, spectrum=[2.0], e0=1.0)
    np.testing.assert_allclose(eigenmode_recurrence(sc).errors[0], 0.4 ** np.arange(4), atol=1e-15)


def test_recurrence_matches_two_term_form():
    rng = np.random.default_rng(0)
    for _ in range(10):
        a, b, c = rng.uniform(0, 0.5), rng.uniform(0, 0.9), rng.uniform(0.5, 1.5)
        lam = rng.uniform(1, 9, 5)
        sc = FilterScenario(1, 9, a, b, c, 0.1, 30, list(lam), 1.0, 0.0)
        E = eigenmode_recurrence(sc).errors
        al, th = recurrence_coeffs(a, b, c, 0.1, lam[:, None])
        pred = al * E[:, 1:-1] - th * E[:, :-2]
        np.testing.assert_allclose(E[:, 2:], pred, atol=1e-12)


def test_heavy_ball_fitted_rate():
    sc = FilterScenario.heavy_ball(1.0, 9.0, 200)
    traj = eigenmode_recurrence(sc)
    worst = max(fit_envelope_rate(row) for row in traj.errors)
    assert worst <= 0.55
    assert abs(worst - 0.5) < 0.05


def test_fit_envelope_rate_on_pure_geometric():
    assert fit_envelope_rate(0.7 ** np.arange(50)) == pytest.approx(0.7, rel=1e-9)
    assert fit_envelope_rate((-0.6) ** np.arange(50)) == pytest.approx(0.6, rel=1e-9)
    with pytest.raises(ValidationError):
        fit_envelope_rate([1.0, 0.5])


def test_tmm_with_unit_reinjection_equals_yurii():
    y = coefficients("yurii", mu=0.3, beta=0.7)
    t = coefficients("tmm", mu=0.3, beta=0.7, nu=1.0)
    assert y == t
    lam = np.linspace(1, 9, 7)
    for u, w in zip(recurrence_coeffs(*y, 0.1, lam), recurrence_coeffs(*t, 0.1, lam)):
        np.testing.assert_array_equal(u, w)
    assert coefficients("hb", beta=0.5) == (0.0, 0.5, 1.0)
    with pytest.raises(ValidationError):
        coefficients("adam")


def test_divergence_is_flagged_not_raised():
    sc = FilterScenario(1, 9, 0, 0, 1, eta=1.0, depth=200, spectrum=[9.0])
    tr = eigenmode_recurrence(sc)
    assert not tr.stable and tr.diverged_at is not None


def test_scenario_validation():
    with pytest.raises(ValidationError):
        FilterScenario(1, 9, spectrum=[10.0])
    with pytest.raises(ValidationError):
        FilterScenario(0, 9)
    assert FilterScenario(2, 8).kappa == 4


@pytest.mark.parametrize("kappa", KAPPAS)
def test_characteristic_root_moduli(kappa):
    _, beta, _ = momentum_rate(1.0, kappa)
    mods = char_root_moduli(1.0, kappa, lam=np.linspace(1.0, kappa, 501))
    assert np.abs(mods - math.sqrt(beta)).max() < 1e-9


def test_characteristic_roots_real_regime():
    mods = char_root_moduli(1, 9, lam=[1.0], eta=0.01, beta=0.25)
    r = np.sort(np.abs(np.roots([1, -(1 - 0.01 + 0.25), 0.25])))
    np.testing.assert_allclose(mods[0], r)


# --- comparisons ------------------------------------------------------------


def test_compare_kappa_one():
    r = compare_filters(2.0, 2.0, 10)
    assert r.rho_vanilla == r.rho_mom == 0.0
    assert r.crossover_N == 0
    assert max(r.worst_vanilla[1:]) == 0.0 and max(r.worst_mom[1:]) == 0.0


def test_compare_kappa_nine():
    r = compare_filters(1.0, 9.0, 50)
    assert r.worst_mom[50] < r.worst_vanilla[50]
    assert r.crossover_N is not None and r.crossover_N <= r.analytic_N0
    assert r.c_mom >= 1.0


def test_compare_kappa_nine_frozen():
    # frozen from a reference run of the same simulation
    r = compare_filters(1.0, 9.0, 200)
    assert r.crossover_N == 5 and r.analytic_N0 == 13 and r.c_mom == pytest.approx(301.0)


def test_sweep_csv_columns():
    rows = sweep((1.0, 4.0), depth=40)
    text = sweep_csv(rows).splitlines()
    assert text[0] == "kappa,rho_vanilla,rho_mom,observed_rate_vanilla,observed_rate_mom,crossover_N"
    assert text[1].startswith("1.0,0.0,0.0,")
    with pytest.raises(ValidationError):
        sweep(())


# --- redundancy results -----------------------------------------------------


def test_constant_second_moment_is_scalar():
    r = diagonal_redundancy_check(np.full(8, 2.5), delta=0.1, epsilon=0.1)
    assert r.deviation == 0.0 and r.holds


def test_balanced_vector_deviation_hand_range():
    s = np.linspace(1.0, 1.1, 17)
    r = diagonal_redundancy_check(s, 0.0, 0.1)
    assert r.deviation <= 0.05
    assert r.deviation == pytest.approx(1 - 1 / math.sqrt(1.1), rel=1e-12)
    assert r.holds and r.chain_holds


def test_unbalanced_vector_flagged():
    r = diagonal_redundancy_check(np.array([1.0, 4.0]), 0.0, 0.1)
    assert not r.balanced and not r.holds


@pytest.mark.parametrize("eps", [0.01, 0.1, 0.5, 1.0])
def test_redundancy_chain_random(eps):
    rng = np.random.default_rng(int(eps * 100))
    for _ in range(200):
        r = diagonal_redundancy_check(random_balanced_vector(rng, 16, eps), rng.uniform(0, 1), eps)
        assert r.balanced and r.holds and r.chain_holds


def test_layernorm_absorbs_scalar_part():
    from optformer.core.ops import layernorm
    rng = np.random.default_rng(1)
    s = random_balanced_vector(rng, 8, 0.1)
    u = rng.standard_normal(8)
    r = diagonal_redundancy_check(s, 0.01, 0.1)
    D = 1 / (np.sqrt(s) + 0.01)
    u_prime = (D / r.alpha) * u
    np.testing.assert_allclose(layernorm(D * u, eps=0).data, layernorm(r.alpha * u_prime, eps=0).data,
                               atol=1e-12)
    np.testing.assert_allclose(layernorm(3.7 * u, eps=0).data, layernorm(u, eps=0).data, atol=1e-12)


def test_redundancy_input_errors():
    with pytest.raises(ValidationError):
        diagonal_redundancy_check(np.array([1.0, 0.0]))
    with pytest.raises(ValidationError):
        diagonal_redundancy_check(np.ones(3), epsilon=2.0)


def test_token_side_factorization():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T, d = 5, 3
        A, P = rng.standard_normal((T, T)), rng.standard_normal((T, T))
        r = token_side_factorization_check(A, rng.standard_normal((d, d)), P, rng.standard_normal((T, d)))
        assert r.residual < 1e-10
    A = np.tril(rng.random((T, T)))
    A /= A.sum(1, keepdims=True)
    r = token_side_factorization_check(A, np.eye(d), np.eye(T), rng.standard_normal((T, d)))
    assert r.residual == 0.0 and r.causal and r.nonnegative and r.row_stochastic
    M = rng.standard_normal((T, T))
    P = spd_inv_sqrt(M @ M.T + np.eye(T))
    r = token_side_factorization_check(A, np.eye(d), P, rng.standard_normal((T, d)))
    assert not r.causal and not r.row_stochastic
    with pytest.raises(ValidationError):
        token_side_factorization_check(A, np.eye(2), P, np.ones((T, d)))
