import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmj import engine, spectral
from cmj.characteristics import Alive, BornCounter, GenerationCounter, MeanFunction, Window
from cmj.errors import CriticalLineError
from cmj.laws import (EpidemicGamma, ExponentialLifetime, FixedLifetime, Fragmentation, GaltonWatson, LatticeTable,
                      PoissonLifetime, UniformLifetime)
from cmj.spectral import (Root, bernoulli_number, bernoulli_polynomial, beta_of, coefficient_matrix,
                          epidemic_roots_closed_form, epidemic_threshold, expansion_vector, find_roots, jordan_exp,
                          malthusian, mean_coefficients, poisson_lifetime_sigma_closed_form,
                          poisson_lifetime_sigma_corrected, rho_values, sigma_squared_contour, sigma_squared_direct,
                          spectral_profile)

GW13 = GaltonWatson({1: 0.5, 3: 0.5})
GW2 = GaltonWatson({2: 1.0})
PL = PoissonLifetime(2, ExponentialLifetime(1.0))
CRITICAL_DET = LatticeTable([((1, 3, 3, 3, 3), 1.0)])
CRITICAL_RANDOM = LatticeTable.independent_counts({1: {1: 1.0}, 3: {3: 0.5, 5: 0.5}})
DOUBLE = LatticeTable.independent_counts({1: {0: 0.6, 1: 0.4}, 2: {1: 0.84, 2: 0.16}, 3: {34: 0.04, 35: 0.96},
                                          4: {47: 1.0}, 5: {100: 1.0}})

BUILTIN = [GW13, GW2, EpidemicGamma(18, 1, 10), EpidemicGamma(18, 1, 12), EpidemicGamma(4, 1, 3), PL,
           PoissonLifetime(2, FixedLifetime(2.0)), PoissonLifetime(2, UniformLifetime(0.5, 1.5)),
           Fragmentation(3), CRITICAL_DET, CRITICAL_RANDOM, DOUBLE]


@pytest.fixture(scope="module")
def profiles():
    return {repr(law): spectral_profile(law) for law in BUILTIN}


# --- Malthusian parameter ---------------------------------------------------------------------------

def test_malthusian_gw():
    assert malthusian(GW13) == pytest.approx(math.log(2), abs=1e-14)


@pytest.mark.parametrize("a,b,r0", [(18, 1, 10), (4, 1, 3), (2, 3.5, 1.7)])
def test_malthusian_epidemic(a, b, r0):
    assert malthusian(EpidemicGamma(a, b, r0)) == pytest.approx(b * (r0 ** (1 / a) - 1), rel=1e-12)


def test_malthusian_poisson_lifetime():
    alpha = malthusian(PL)
    assert alpha == pytest.approx(1.0, abs=1e-12)
    assert abs(PL.laplace(alpha) - 1) <= 1e-12


def test_malthusian_fragmentation():
    assert malthusian(Fragmentation(4, 0.3)) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("law", BUILTIN, ids=repr)
def test_profile_invariants(law, profiles):
    p = profiles[repr(law)]
    assert abs(law.laplace(p.alpha) - 1) <= 1e-12
    assert p.beta == pytest.approx(-law.laplace_derivative(p.alpha, 1).real, rel=1e-12)
    assert p.beta > 0
    assert 0 < p.theta < p.alpha / 2
    assert p.alpha_root.multiplicity == 1
    real_roots = [r for r in p.roots if abs(r.lam.imag) < 1e-12]
    assert len(real_roots) == 1
    for r in p.roots:
        assert abs(law.laplace(r.lam) - 1) <= 1e-10
        for j in range(1, r.multiplicity):
            assert abs(law.laplace_derivative(r.lam, j)) <= 1e-8
        assert abs(law.laplace_derivative(r.lam, r.multiplicity)) >= 1e-6
        assert r.lam.real >= p.alpha / 2 - 1e-9
        if law.is_lattice:
            assert -math.pi < r.lam.imag <= math.pi
        if abs(r.lam.imag) > 1e-12 and not (law.is_lattice and abs(abs(r.lam.imag) - math.pi) < 1e-9):
            partners = [q for q in p.roots if abs(q.lam - r.lam.conjugate()) < 1e-8]
            assert len(partners) == 1 and partners[0].multiplicity == r.multiplicity


# --- roots ------------------------------------------------------------------------------------------

def test_gw_single_root_in_strip():
    roots = find_roots(GW13, math.log(2))
    assert len(roots) == 1
    assert roots[0].lam == pytest.approx(math.log(2))


def test_epidemic_roots_right_of_line():
    law = EpidemicGamma(18, 1, 12)
    alpha = malthusian(law)
    roots = find_roots(law, alpha)
    closed = [z for z in epidemic_roots_closed_form(18, 1, 12) if z.real >= alpha / 2]
    assert len(roots) == len(closed) == 3
    for z in closed:
        assert min(abs(r.lam - z) for r in roots) <= 1e-10
    pair = [r for r in roots if r.lam.imag != 0]
    assert all(r.lam.real > alpha / 2 for r in pair)


def test_epidemic_single_root_below_threshold():
    law = EpidemicGamma(18, 1, 10)
    alpha = malthusian(law)
    roots = find_roots(law, alpha)
    assert len(roots) == 1
    assert roots[0].lam.real == pytest.approx(0.1364637, abs=5e-8)
    nearest = epidemic_roots_closed_form(18, 1, 10)
    second = max((z for z in nearest if abs(z.imag) > 0), key=lambda z: z.real)
    assert second.real < alpha / 2


def test_find_roots_below_line_when_asked():
    law = EpidemicGamma(18, 1, 10)
    alpha = malthusian(law)
    roots = find_roots(law, alpha, re_min=0.0)
    closed = [z for z in epidemic_roots_closed_form(18, 1, 10) if z.real >= 0.0]
    assert len(roots) == len(closed)
    for z in closed:
        assert min(abs(r.lam - z) for r in roots) <= 1e-10


def test_closed_form_small_shape():
    assert epidemic_roots_closed_form(2, 1, 4) == pytest.approx([1.0])


def test_closed_form_count_and_alpha():
    roots = epidemic_roots_closed_form(18, 1, 10)
    assert len(roots) == 17
    real = [z for z in roots if z.imag == 0]
    assert real[0].real == pytest.approx(0.1364637, abs=1e-7)


def test_epidemic_threshold_brackets():
    r = epidemic_threshold(18)
    assert r == pytest.approx((2 * math.cos(math.pi / 9) - 1) ** -18, rel=1e-14)
    assert 10 < r < 12


def test_double_root_detected():
    alpha = malthusian(DOUBLE)
    assert alpha == pytest.approx(math.log(4), abs=1e-12)
    roots = find_roots(DOUBLE, alpha)
    doubles = [r for r in roots if r.multiplicity == 2]
    assert len(doubles) == 2
    w0 = np.roots([5, 1.8, 1])  # 1 + 1.8 w + 5 w^2 = 0, w = e^{-z}
    expected = sorted((-np.log(w) for w in w0), key=lambda z: z.imag)
    found = sorted((r.lam for r in doubles), key=lambda z: z.imag)
    assert np.allclose(found, expected, atol=1e-9)


def test_critical_line_roots():
    p = spectral_profile(CRITICAL_DET)
    assert len(p.boundary) == 2
    for r in p.boundary:
        assert r.on_critical_line
        assert r.lam.real == pytest.approx(math.log(2) / 2, abs=1e-10)


# --- matrix calculus --------------------------------------------------------------------------------

def test_jordan_identity():
    assert np.allclose(jordan_exp(0.3 + 1j, 0.0, 4), np.eye(4))


def test_jordan_gamma_zero():
    assert np.allclose(jordan_exp(0, 2.5, 2), [[1, 0], [2.5, 1]])


def test_jordan_entries():
    g, s = 0.2 - 0.4j, 1.7
    m = jordan_exp(g, s, 3)
    assert m[2, 0] == pytest.approx(np.exp(g * s) * s**2)
    assert m[2, 1] == pytest.approx(np.exp(g * s) * 2 * s)
    assert m[0, 1] == 0


@settings(max_examples=60, deadline=None)
@given(re=st.floats(-2, 2), im=st.floats(-5, 5), s=st.floats(-3, 3), t=st.floats(-3, 3), k=st.integers(1, 5))
def test_jordan_semigroup(re, im, s, t, k):
    g = complex(re, im)
    lhs = jordan_exp(g, s, k) @ jordan_exp(g, t, k)
    rhs = jordan_exp(g, s + t, k)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-10 * np.abs(rhs).max())


def test_bernoulli_numbers():
    assert bernoulli_number(0) == 1
    assert bernoulli_number(1) == Fraction(-1, 2)
    assert bernoulli_number(2) == Fraction(1, 6)
    assert bernoulli_number(3) == 0
    assert bernoulli_number(4) == Fraction(-1, 30)
    assert bernoulli_number(12) == Fraction(-691, 2730)


def test_bernoulli_polynomials():
    assert bernoulli_polynomial(1) == (Fraction(-1, 2), Fraction(1))
    assert bernoulli_polynomial(2) == (Fraction(1, 6), Fraction(-1), Fraction(1))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), x=st.fractions(-3, 3, max_denominator=7))
def test_bernoulli_difference_property(n, x):
    # B_n(x + 1) - B_n(x) = n x^{n-1}
    poly = bernoulli_polynomial(n)
    ev = lambda y: sum(c * y**i for i, c in enumerate(poly))
    assert ev(x + 1) - ev(x) == n * x ** (n - 1)


@pytest.mark.parametrize("law", BUILTIN, ids=repr)
def test_determinant_identity(law, profiles):
    for r in profiles[repr(law)].roots:
        M = coefficient_matrix(law, r)
        k = r.multiplicity
        target = (-law.laplace_derivative(r.lam, k) / k) ** k
        assert abs(np.linalg.det(M) - target) <= 1e-8 * abs(target)


def test_gw_coefficient_matrix_is_beta():
    alpha = math.log(2)
    M = coefficient_matrix(GW13, Root(complex(alpha), 1, False), lattice=True)
    assert M.shape == (1, 1)
    assert M[0, 0] == pytest.approx(1.0)
    assert expansion_vector(M)[0] == pytest.approx(1.0)


def test_simple_non_lattice_root():
    law = EpidemicGamma(18, 1, 12)
    for r in find_roots(law, malthusian(law)):
        M = coefficient_matrix(law, r)
        assert M[0, 0] == pytest.approx(-law.laplace_derivative(r.lam, 1))
        assert expansion_vector(M)[0] == pytest.approx(-1 / law.laplace_derivative(r.lam, 1))


def test_expansion_vector_examples():
    beta = 2.7
    assert expansion_vector(np.array([[beta]]))[0] == pytest.approx(1 / beta)
    for k in (1, 2, 4):
        assert np.allclose(expansion_vector(np.eye(k)), np.eye(k)[-1])
    assert np.allclose(expansion_vector(np.array([[2.0, 1.0], [0.0, 2.0]])), [-0.25, 0.5])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False), min_size=6, max_size=6),
       st.lists(st.floats(0.5, 3), min_size=3, max_size=3))
def test_expansion_vector_residual(upper, diag):
    M = np.diag(np.asarray(diag, dtype=complex))
    M[0, 1], M[0, 2], M[1, 2] = upper[:3]
    b = expansion_vector(M)
    assert np.allclose(M @ b, [0, 0, 1], atol=1e-10)


def test_conjugate_coefficients(profiles):
    p = profiles[repr(DOUBLE)]
    b = {r: expansion_vector(coefficient_matrix(DOUBLE, r)) for r in p.roots}
    for r in p.roots:
        partner = next(q for q in p.roots if abs(q.lam - r.lam.conjugate()) < 1e-8)
        assert np.allclose(b[partner], np.conj(b[r]))


# --- coefficients -----------------------------------------------------------------------------------

def _coeffs(law, char):
    p = spectral_profile(law)
    b = {r: expansion_vector(coefficient_matrix(law, r)) for r in p.roots}
    return p, mean_coefficients(p, b, char.mean_function(law), p.lattice)


def test_gw_generation_counter_coefficient():
    p, a = _coeffs(GW13, GenerationCounter())
    assert a[p.alpha_root][0] == pytest.approx(1.0, abs=1e-12)


def test_gw_total_progeny_coefficient():
    for pmf, m in (({1: 0.5, 3: 0.5}, 2.0), ({0: 0.1, 2: 0.4, 3: 0.5}, 2.3)):
        p, a = _coeffs(GaltonWatson(pmf), BornCounter())
        assert a[p.alpha_root][0] == pytest.approx(m / (m - 1), rel=1e-10)


def test_zero_characteristic_coefficients():
    p = spectral_profile(DOUBLE)
    b = {r: expansion_vector(coefficient_matrix(DOUBLE, r)) for r in p.roots}
    a = mean_coefficients(p, b, MeanFunction(), True)
    assert all(np.all(v == 0) for v in a.values())


def test_epidemic_born_counter_coefficient():
    law = EpidemicGamma(4, 1, 3)
    p, a = _coeffs(law, BornCounter())
    assert a[p.alpha_root][0] == pytest.approx(1 / (p.alpha * p.beta), rel=1e-10)


def test_poisson_lifetime_alive_coefficient():
    p, a = _coeffs(PL, Alive())
    assert a[p.alpha_root][0] == pytest.approx(1 / (2 * p.beta), rel=1e-10)


def test_expansion_reproduces_lattice_mean():
    # renewal mean minus principal terms stays bounded (sub-leading roots only)
    law, char = DOUBLE, BornCounter()
    p, a = _coeffs(law, char)
    m = engine.renewal_mean_lattice(law, char.mean_function(law), 25)
    n = np.arange(26, dtype=float)
    q = sum(np.exp(r.lam * n) * sum(a[r][l] * n**l for l in range(r.multiplicity)) for r in p.principal)
    resid = np.abs(m - q.real)
    assert np.all(resid[10:] <= 0.01 + 1e-14 * m[10:])
    assert resid[10] / m[10] <= 1e-7


def test_rho_empty_boundary():
    res = rho_values(GW13, {})
    assert res.rho == [] and res.n_star == -1


def test_rho_deterministic_reproduction_vanishes():
    p = spectral_profile(CRITICAL_DET)
    a = {r: np.array([1.0 + 0.5j]) for r in p.boundary}
    res = rho_values(CRITICAL_DET, a)
    assert res.rho == [pytest.approx(0.0, abs=1e-12)]
    assert res.n_star == -1


def test_rho_random_reproduction_positive():
    law = CRITICAL_RANDOM
    p = spectral_profile(law)
    assert len(p.boundary) == 2
    cs = spectral.coefficient_set(law, p, BornCounter().mean_function(law))
    assert cs.n_star == 0 and cs.rho[0] > 0
    # the delay-3 count is 3 or 5 with equal probability, so R = a (e^{-3 lam} (count - 4)) summed over the pair
    var = sum(abs(cs.a[r][0] * np.exp(-3 * r.lam)) ** 2 for r in p.boundary)
    assert cs.rho[0] ** 2 == pytest.approx(var, rel=1e-10)


# --- sigma squared ----------------------------------------------------------------------------------

def _remainder(law, char, n=200):
    p = spectral_profile(law)
    b = {r: expansion_vector(coefficient_matrix(law, r)) for r in p.roots}
    mf = char.mean_function(law)
    a = mean_coefficients(p, b, mf, p.lattice)
    return p, engine.remainder_lattice(law, mf, p.principal, a, n)


@pytest.mark.parametrize("pmf", [{1: 0.5, 3: 0.5}, {0: 0.2, 2: 0.3, 4: 0.5}, {1: 0.3, 2: 0.3, 5: 0.4}])
def test_sigma_gw_generation_counter(pmf):
    law = GaltonWatson(pmf)
    p, h = _remainder(law, GenerationCounter())
    res = sigma_squared_direct(law, GenerationCounter(), h, p.alpha)
    m = law.mean
    assert res.value == pytest.approx(law.variance / (m * m - m), rel=1e-10)


@pytest.mark.parametrize("pmf", [{1: 0.5, 3: 0.5}, {0: 0.2, 2: 0.3, 4: 0.5}])
def test_sigma_gw_total_progeny(pmf):
    law = GaltonWatson(pmf)
    p, h = _remainder(law, BornCounter())
    res = sigma_squared_direct(law, BornCounter(), h, p.alpha)
    m = law.mean
    assert res.value == pytest.approx((m + 1) * law.variance / (m - 1) ** 3, rel=1e-10)


def test_sigma_deterministic_law_is_zero():
    for char in (BornCounter(), GenerationCounter(), Window(3.0)):
        p, h = _remainder(GW2, char)
        assert sigma_squared_direct(GW2, char, h, p.alpha).value == pytest.approx(0.0, abs=1e-20)


def test_poisson_lifetime_contour_matches_corrected_value():
    p = spectral_profile(PL)
    res = sigma_squared_contour(PL, Alive(), p.alpha)
    assert res.value == pytest.approx(poisson_lifetime_sigma_corrected(PL, p.alpha, p.beta), rel=1e-4)
    assert poisson_lifetime_sigma_closed_form(PL, p.alpha, p.beta) == pytest.approx(2.0)


@pytest.mark.parametrize("lifetime", [ExponentialLifetime(2.0), FixedLifetime(2.0), UniformLifetime(0.5, 1.5)],
                         ids=repr)
def test_poisson_lifetime_corrected_value_other_lifetimes(lifetime):
    law = PoissonLifetime(3.0 if isinstance(lifetime, ExponentialLifetime) else 2.0, lifetime)
    p = spectral_profile(law)
    res = sigma_squared_contour(law, Alive(), p.alpha)
    assert res.value == pytest.approx(poisson_lifetime_sigma_corrected(law, p.alpha, p.beta), rel=1e-4)


def test_poisson_lifetime_direct_agrees_with_contour():
    p = spectral_profile(PL)
    mf = Alive().mean_function(PL)
    b = {r: expansion_vector(coefficient_matrix(PL, r)) for r in p.roots}
    a = mean_coefficients(p, b, mf, False)
    h = engine.remainder_grid(PL, mf, p.principal, a, 25 / p.alpha, 0.01)
    direct = sigma_squared_direct(PL, Alive(), h, p.alpha, n_samples=20_000, dx=0.05, x_min=-25.0)
    contour = sigma_squared_contour(PL, Alive(), p.alpha)
    assert abs(direct.value - contour.value) <= 4 * direct.stderr + 0.01 * contour.value


def test_epidemic_contour_formula():
    # Poisson offspring: Var[L xi(z)] = Lmu(2 Re z) = Lmu(alpha) = 1 on the line, and L phi = 1/z is deterministic,
    # so the integrand reduces to |1 / (z (1 - Lmu(z)))|^2
    from scipy import integrate
    law = EpidemicGamma(4, 1, 3)
    alpha = malthusian(law)

    def f(y):
        z = complex(alpha / 2, y)
        return abs(1 / (z * (1 - law.laplace(z)))) ** 2

    ref = integrate.quad(f, 0, np.inf, limit=500, epsabs=1e-13)[0] / math.pi
    res = sigma_squared_contour(law, BornCounter(), alpha)
    assert res.value == pytest.approx(ref, rel=1e-6)


def test_contour_rejects_critical_line():
    law = EpidemicGamma(18, 1, epidemic_threshold(18))
    with pytest.raises(CriticalLineError):
        sigma_squared_contour(law, BornCounter(), malthusian(law))
