import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmj.errors import ConfigurationError, DomainError
from cmj.laws import (EpidemicGamma, ExponentialLifetime, FixedLifetime, Fragmentation, GaltonWatson,
                      LatticeTable, PoissonLifetime, ReproductionSample, SampleBatch, UniformLifetime,
                      laplace_derivative, laplace_transform, sample_reproduction, second_moment_check)
from cmj.rng import stream

GW13 = GaltonWatson({1: 0.5, 3: 0.5})
GW2 = GaltonWatson({2: 1.0})
EPI = EpidemicGamma(18, 1, 10)
PL = PoissonLifetime(2, ExponentialLifetime(1.0))
FRAG = Fragmentation(3, 1.0)

ALL_LAWS = [
    GW13,
    GaltonWatson({0: 0.2, 2: 0.5, 4: 0.3}),
    EpidemicGamma(4, 1, 3),
    EPI,
    PL,
    PoissonLifetime(2, FixedLifetime(2.0)),
    PoissonLifetime(2, UniformLifetime(0.5, 1.5)),
    FRAG,
    Fragmentation(2, 2.5),
    LatticeTable([((1,), 0.5), ((1, 3, 3), 0.5)]),
]


def real_points(law):
    return [0.1, 0.6, 1.5]


# --- construction ---------------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [
    lambda: GaltonWatson({1: 0.5, 3: 0.4}),
    lambda: GaltonWatson({1: 1.0}),
    lambda: GaltonWatson({-1: 0.5, 3: 0.5}),
    lambda: EpidemicGamma(0, 1, 3),
    lambda: EpidemicGamma(2, -1, 3),
    lambda: EpidemicGamma(2, 1, 0.5),
    lambda: PoissonLifetime(0, ExponentialLifetime(1.0)),
    lambda: PoissonLifetime(0.5, ExponentialLifetime(1.0)),
    lambda: ExponentialLifetime(0.0),
    lambda: FixedLifetime(-1.0),
    lambda: UniformLifetime(2.0, 1.0),
    lambda: Fragmentation(1),
    lambda: Fragmentation(2, 0.0),
])
def test_invalid_parameters_raise(bad):
    with pytest.raises(ConfigurationError):
        bad()


def test_gw_pmf_mean_and_variance():
    assert GW13.mean == 2.0
    assert GW13.variance == 1.0
    assert GW13.is_lattice and not EPI.is_lattice


# --- sampling -------------------------------------------------------------------------------------

def test_gw_deterministic_sample():
    s = sample_reproduction(GW2, stream(0, 0))
    assert list(s.offspring_delays) == [1, 1]
    assert s.lifetime == math.inf


def test_epidemic_mean_count():
    batch = EPI.sample_batch(100_000, stream(7, 0))
    mean = batch.counts.mean()
    assert abs(mean - 10) <= 3 * math.sqrt(10 / 100_000)


def test_sample_delays_sorted_positive():
    for law in ALL_LAWS:
        for i in range(30):
            s = sample_reproduction(law, stream(5, i))
            d = np.asarray(s.offspring_delays)
            assert np.all(np.diff(d) >= 0)
            assert np.all(d > 0)
            if law.is_lattice:
                assert np.all(d == np.round(d))


def test_poisson_lifetime_births_before_death():
    batch = PoissonLifetime(2, UniformLifetime(0.5, 1.5)).sample_batch(2000, stream(2, 0))
    for i in range(len(batch)):
        s = batch.sample(i)
        assert all(d <= s.lifetime for d in s.offspring_delays)


@pytest.mark.parametrize("law", ALL_LAWS, ids=repr)
def test_reproducible_sampling(law):
    a = law.sample_batch(500, stream(11, 3))
    b = law.sample_batch(500, stream(11, 3))
    assert np.array_equal(a.counts, b.counts)
    assert np.array_equal(a.delays, b.delays)
    assert np.array_equal(a.lifetimes, b.lifetimes)


def test_fragmentation_conservation():
    batch = Fragmentation(4, 0.7).sample_batch(5000, stream(3, 0))
    mass = np.bincount(batch.owner(), np.exp(-batch.delays), minlength=len(batch))
    assert np.all(mass <= 1 + 1e-12)
    assert np.allclose(mass, 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(pieces=st.integers(2, 6), conc=st.floats(0.2, 5.0), seed=st.integers(0, 2**32 - 1))
def test_fragmentation_conservation_property(pieces, conc, seed):
    batch = Fragmentation(pieces, conc).sample_batch(50, stream(seed, 0))
    mass = np.bincount(batch.owner(), np.exp(-batch.delays), minlength=len(batch))
    assert np.all(mass <= 1 + 1e-12)


def test_sample_batch_roundtrip():
    samples = [ReproductionSample((1.0, 2.0)), ReproductionSample(()), ReproductionSample((0.5,), 3.0)]
    batch = SampleBatch.from_samples(samples)
    assert list(batch.counts) == [2, 0, 1]
    assert list(batch.owner()) == [0, 0, 2]
    assert batch.sample(2).lifetime == 3.0
    sub = batch.take(np.array([2, 0]))
    assert list(sub.delays) == [0.5, 1.0, 2.0]
    both = SampleBatch.concat([batch, sub])
    assert len(both) == 5


# --- transforms -----------------------------------------------------------------------------------

def test_gw_transform_at_log_m():
    law = GaltonWatson({2: 1.0})
    assert laplace_transform(law, math.log(2)) == pytest.approx(1.0, abs=1e-15)


def test_epidemic_transform_at_zero():
    assert laplace_transform(EpidemicGamma(3, 2, 4.5), 0.0) == pytest.approx(4.5, rel=1e-14)


def test_poisson_lifetime_transform_hand_value():
    assert laplace_transform(PL, 1.0) == pytest.approx(1.0, rel=1e-14)


def test_gw_beta_is_one():
    law = GaltonWatson({2: 1.0})
    assert laplace_derivative(law, math.log(2), 1) == pytest.approx(-1.0, rel=1e-14)


def test_epidemic_beta_formula():
    a, b, R0 = 18, 1.0, 10.0
    alpha = b * (R0 ** (1 / a) - 1)
    beta = R0 * a * b**a * (b + alpha) ** (-a - 1)
    assert -laplace_derivative(EPI, alpha, 1) == pytest.approx(beta, rel=1e-12)


@pytest.mark.parametrize("law", ALL_LAWS, ids=repr)
def test_order_zero_derivative_is_transform(law):
    for z in real_points(law) + [0.9 + 0.7j]:
        assert laplace_derivative(law, z, 0) == pytest.approx(laplace_transform(law, z), rel=1e-12)


@pytest.mark.parametrize("law", ALL_LAWS, ids=repr)
def test_first_derivative_matches_central_difference(law):
    h = 1e-5
    for z in real_points(law) + [1.2 + 0.8j]:
        fd = (laplace_transform(law, z + h) - laplace_transform(law, z - h)) / (2 * h)
        assert abs(laplace_derivative(law, z, 1) - fd) <= 1e-6 * max(1.0, abs(fd))


@pytest.mark.parametrize("law", ALL_LAWS, ids=repr)
def test_higher_derivatives_chain(law):
    h = 1e-4
    z = 1.3 + 0.4j
    for order in (1, 2, 3):
        fd = (laplace_derivative(law, z + h, order - 1) - laplace_derivative(law, z - h, order - 1)) / (2 * h)
        d = laplace_derivative(law, z, order)
        assert abs(d - fd) <= 1e-5 * max(1.0, abs(d))


@pytest.mark.parametrize("law", ALL_LAWS, ids=repr)
def test_transform_matches_monte_carlo(law):
    batch = law.sample_batch(100_000, stream(21, 0))
    for z in real_points(law):
        per = np.bincount(batch.owner(), np.exp(-z * batch.delays), minlength=len(batch))
        se = per.std(ddof=1) / math.sqrt(len(per))
        assert abs(per.mean() - laplace_transform(law, z).real) <= 4 * se + 1e-12


def test_domain_errors():
    with pytest.raises(DomainError):
        laplace_transform(EPI, -1.5)
    with pytest.raises(DomainError):
        laplace_transform(PL, -1.5)
    with pytest.raises(DomainError):
        laplace_derivative(FRAG, -2.0, 1)


def test_conjugate_symmetry():
    for law in ALL_LAWS:
        z = 1.1 + 0.6j
        assert laplace_transform(law, z.conjugate()) == pytest.approx(np.conj(laplace_transform(law, z)))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.5, 30), b=st.floats(0.2, 5), r0=st.floats(1.1, 20), x=st.floats(0.0, 3.0),
       y=st.floats(-3.0, 3.0))
def test_epidemic_closed_form_property(a, b, r0, x, y):
    z = complex(x, y)
    assert laplace_transform(EpidemicGamma(a, b, r0), z) == pytest.approx(r0 * (b / (b + z)) ** a, rel=1e-10)


# --- second moment condition ---------------------------------------------------------------------

def test_second_moment_deterministic_gw():
    ok, rep = second_moment_check(GW2, math.log(2), weighted=False)
    assert ok
    assert rep["mc_second_moment"] == pytest.approx(2.0, rel=1e-14)
    assert rep["samples"] >= 10_000
    ok, rep = second_moment_check(GW2, math.log(2))
    assert rep["mc_second_moment"] == pytest.approx(8.0, rel=1e-14)


@pytest.mark.parametrize("law", [GW13, EPI, EpidemicGamma(2, 3, 1.5), PL, FRAG], ids=repr)
def test_second_moment_finite_builtins(law):
    from cmj.spectral import malthusian
    ok, rep = second_moment_check(law, malthusian(law))
    assert ok
    assert np.isfinite(rep["mc_second_moment"])
