"""Random characteristics phi(sample, age) and their mean functions E[phi](t)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from ._quad import power_exp_integral
from .errors import ConfigurationError
from .laws import INF, ReproductionLaw, ReproductionSample, SampleBatch


# ---------------------------------------------------------------------------
# mean functions


@dataclass(frozen=True)
class Term:
    """coef * t**power * exp(rate * t) on lo <= t < hi."""

    coef: complex
    rate: complex
    power: int
    lo: float
    hi: float


def _lattice_power_exp_sum(q, c, lo, hi):
    """sum over integers lo <= n < hi of n**q * exp(c n)."""
    start = math.ceil(lo)
    if math.isfinite(hi):
        n = np.arange(start, math.ceil(hi), dtype=float)
        return complex(np.sum(n**q * np.exp(c * n)))
    if not c.real < 0:
        raise ConfigurationError("mean function is not summable against the requested weight")
    total = 0j
    chunk = 512
    while True:
        n = np.arange(start, start + chunk, dtype=float)
        part = n**q * np.exp(c * n)
        total += np.sum(part)
        if abs(part[-1]) <= 1e-18 * max(abs(total), 1e-300) and abs(part[-1]) <= abs(part[0]):
            return complex(total)
        start += chunk
        if start > 10_000_000:
            raise ConfigurationError("lattice sum did not converge")


def _tail_power_exp(n, c, lo):
    """Integral over [lo, inf) of x**n * exp(-c x), Re c > 0."""
    if not c.real > 0:
        raise ConfigurationError("mean function is not integrable against the requested weight")
    s = sum(math.factorial(n) / math.factorial(k) * lo**k / c ** (n - k + 1) for k in range(n + 1))
    return complex(np.exp(-c * lo) * s)


class MeanFunction:
    """Exponential-polynomial function given by a finite list of :class:`Term`."""

    def __init__(self, terms: Sequence[Term] = ()):
        self.terms = tuple(Term(complex(t.coef), complex(t.rate), int(t.power), float(t.lo), float(t.hi))
                           if isinstance(t, Term) else Term(complex(t[0]), complex(t[1]), int(t[2]), float(t[3]), float(t[4]))
                           for t in terms)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for term in self.terms:
            m = (t >= term.lo) & (t < term.hi)
            if np.any(m):
                tm = t[m]
                out[m] += term.coef * tm**term.power * np.exp(term.rate * tm)
        if self.is_real:
            return out.real
        return out

    @property
    def is_real(self) -> bool:
        return all(t.coef.imag == 0 and t.rate.imag == 0 for t in self.terms)

    @property
    def support_lo(self) -> float:
        return min((t.lo for t in self.terms), default=0.0)

    @property
    def support_hi(self) -> float:
        return max((t.hi for t in self.terms), default=0.0)

    def is_zero(self) -> bool:
        return all(t.coef == 0 for t in self.terms)

    def moment(self, p: int, lam: complex, lattice: bool) -> complex:
        """Integral (or lattice sum) of x**p exp(-lam x) f(x)."""
        lam = complex(lam)
        total = 0j
        for t in self.terms:
            if t.coef == 0:
                continue
            q = p + t.power
            c = t.rate - lam
            if lattice:
                total += t.coef * _lattice_power_exp_sum(q, c, t.lo, t.hi)
            elif math.isfinite(t.hi):
                total += t.coef * power_exp_integral(q, -c, t.lo, t.hi)
            else:
                total += t.coef * _tail_power_exp(q, -c, t.lo)
        return total

    def transform(self, z, lattice=False):
        """Bilateral Laplace transform (generating function for lattice)."""
        return self.moment(0, z, lattice)

    def scaled(self, c) -> "MeanFunction":
        return MeanFunction([Term(c * t.coef, t.rate, t.power, t.lo, t.hi) for t in self.terms])

    def __add__(self, other):
        if isinstance(other, MeanFunction) and not isinstance(other, CallableMean):
            return MeanFunction(self.terms + other.terms)
        return CallableMean(lambda t: self(t) + other(t), lo=min(self.support_lo, other.support_lo))

    def __repr__(self):
        return f"MeanFunction({list(self.terms)!r})"


class CallableMean(MeanFunction):
    """Mean function without an exponential-polynomial form; integrals by quadrature."""

    def __init__(self, func: Callable, lo: float = 0.0, complex_valued: bool = False):
        super().__init__(())
        self.func = func
        self.lo = float(lo)
        self.complex_valued = complex_valued

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return self.func(t)

    @property
    def is_real(self):
        return not self.complex_valued

    @property
    def support_lo(self):
        return self.lo

    @property
    def support_hi(self):
        return INF

    def is_zero(self):
        return False

    def moment(self, p, lam, lattice):
        lam = complex(lam)
        if lattice:
            total = 0j
            start = math.ceil(self.lo)
            while True:
                n = np.arange(start, start + 512, dtype=float)
                part = n**p * np.exp(-lam * n) * self(n)
                total += np.sum(part)
                if np.max(np.abs(part[-16:])) <= 1e-18 * max(abs(total), 1e-300):
                    return complex(total)
                start += 512
                if start > 1_000_000:
                    raise ConfigurationError("lattice sum did not converge")

        def integrand(x, part):
            v = x**p * np.exp(-lam * x) * complex(np.asarray(self(np.array([x])))[0])
            return v.real if part == 0 else v.imag

        re = integrate.quad(integrand, self.lo, np.inf, args=(0,), epsabs=1e-12, limit=400)[0]
        im = integrate.quad(integrand, self.lo, np.inf, args=(1,), epsabs=1e-12, limit=400)[0]
        return complex(re, im)

    def scaled(self, c):
        return CallableMean(lambda t: c * self(t), self.lo, self.complex_valued or complex(c).imag != 0)

    def __add__(self, other):
        return CallableMean(lambda t: self(t) + other(t), min(self.lo, other.support_lo),
                            self.complex_valued or not other.is_real)

    def __repr__(self):
        return f"CallableMean(lo={self.lo})"


ZERO_MEAN = MeanFunction(())


# ---------------------------------------------------------------------------
# characteristics


def _sum_by_owner(weights, owner, n):
    if np.iscomplexobj(weights):
        return (np.bincount(owner, weights=weights.real, minlength=n)
                + 1j * np.bincount(owner, weights=weights.imag, minlength=n))
    return np.bincount(owner, weights=weights, minlength=n)


class Characteristic:
    """Base class. Subclasses implement ``_values(batch, ages)`` (one value per sample)."""

    random = False       # depends on the reproduction sample
    complex_valued = False

    @property
    def support_nonnegative(self) -> bool:
        return True

    def values(self, batch: SampleBatch, ages, lattice: bool = False):
        ages = np.broadcast_to(np.asarray(ages, dtype=float), (len(batch),))
        if lattice:
            ages = np.floor(ages)
        return self._values(batch, ages)

    def evaluate(self, sample: ReproductionSample, age: float, lattice: bool = False):
        v = self.values(SampleBatch.from_samples([sample]), [age], lattice)[0]
        return complex(v) if self.complex_valued else float(v)

    def mean_function(self, law: ReproductionLaw) -> MeanFunction:
        raise NotImplementedError

    def __mul__(self, c):
        return Scaled(c, self)

    __rmul__ = __mul__

    def __add__(self, other):
        return Sum((self, other))


@dataclass(frozen=True, eq=True)
class Alive(Characteristic):
    random = True

    def _values(self, batch, ages):
        return ((ages >= 0) & (ages < batch.lifetimes)).astype(float)

    def mean_function(self, law):
        return MeanFunction(law.survival_terms())


@dataclass(frozen=True)
class BornCounter(Characteristic):
    def _values(self, batch, ages):
        return (ages >= 0).astype(float)

    def mean_function(self, law):
        return MeanFunction([Term(1.0, 0.0, 0, 0.0, INF)])


@dataclass(frozen=True)
class Window(Characteristic):
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigurationError("window length must be positive")

    def _values(self, batch, ages):
        return ((ages >= 0) & (ages < self.a)).astype(float)

    def mean_function(self, law):
        return MeanFunction([Term(1.0, 0.0, 0, 0.0, self.a)])


@dataclass(frozen=True)
class GenerationCounter(Characteristic):
    """Indicator of age in [0, 1): counts the current generation of a GW process."""

    def _values(self, batch, ages):
        return ((ages >= 0) & (ages < 1.0)).astype(float)

    def mean_function(self, law):
        return MeanFunction([Term(1.0, 0.0, 0, 0.0, 1.0)])


class Deterministic(Characteristic):
    """phi(age) = f(age) for a deterministic function f (a MeanFunction)."""

    def __init__(self, f: MeanFunction):
        if not isinstance(f, MeanFunction):
            raise ConfigurationError("Deterministic needs a MeanFunction")
        self.f = f

    @property
    def support_nonnegative(self):
        return self.f.support_lo >= 0

    @property
    def complex_valued(self):
        return not self.f.is_real

    def _values(self, batch, ages):
        return self.f(ages)

    def mean_function(self, law):
        return self.f

    def __repr__(self):
        return f"Deterministic({self.f!r})"


@dataclass(frozen=True)
class PhiLambda(Characteristic):
    """Entry (i, j) of sum_m 1{0 <= age < X_m} exp(lam, age - X_m, k); indices start at 1."""

    lam: complex
    k: int = 1
    i: int = 1
    j: int = 1

    random = True
    complex_valued = True

    def __post_init__(self):
        if not (1 <= self.i <= self.k and 1 <= self.j <= self.k):
            raise ConfigurationError("PhiLambda indices must lie in 1..k")

    @property
    def _binom(self):
        return math.comb(self.i - 1, self.j - 1) if self.i >= self.j else 0

    def _values(self, batch, ages):
        n = len(batch)
        if self._binom == 0 or len(batch.delays) == 0:
            return np.zeros(n, dtype=complex)
        owner = batch.owner()
        a = ages[owner]
        d = a - batch.delays
        pending = (a >= 0) & (d < 0)
        p = self.i - self.j
        w = np.where(pending, self._binom * np.exp(self.lam * np.where(pending, d, 0.0)) * d**p, 0.0)
        return _sum_by_owner(w.astype(complex), owner, n)

    def mean_function(self, law):
        c, p, lam = self._binom, self.i - self.j, complex(self.lam)
        if c == 0:
            return ZERO_MEAN
        if law.is_lattice:
            terms = []
            for k, mass in law.atoms().items():
                for q in range(p + 1):
                    coef = mass * c * math.comb(p, q) * (-k) ** (p - q) * np.exp(-lam * k)
                    terms.append(Term(coef, lam, q, 0.0, float(k)))
            return MeanFunction(terms)

        def func(t):
            t = np.atleast_1d(np.asarray(t, dtype=float))
            out = np.zeros(t.shape, dtype=complex)
            for idx, tv in enumerate(t):
                if tv < 0:
                    continue
                f = lambda x, part: (lambda v: v.real if part == 0 else v.imag)(
                    np.exp(lam * (tv - x)) * (tv - x) ** p * law.intensity_density(x))
                re = integrate.quad(f, tv, np.inf, args=(0,), limit=200)[0]
                im = integrate.quad(f, tv, np.inf, args=(1,), limit=200)[0]
                out[idx] = c * complex(re, im)
            return out

        return CallableMean(func, 0.0, complex_valued=True)


def phi_lambda_mean_process(lam, k=1, i=1, j=1) -> MeanFunction:
    """The mean process m_t of PhiLambda: 1_{t>=0} exp(lam, t, k)_{ij}."""
    if i < j:
        return ZERO_MEAN
    return MeanFunction([Term(math.comb(i - 1, j - 1), lam, i - j, 0.0, INF)])


class Scaled(Characteristic):
    def __init__(self, c, inner: Characteristic):
        self.c = c
        self.inner = inner
        self.random = inner.random
        self.complex_valued = inner.complex_valued or isinstance(c, complex)

    @property
    def support_nonnegative(self):
        return self.inner.support_nonnegative

    def _values(self, batch, ages):
        return self.c * self.inner._values(batch, ages)

    def mean_function(self, law):
        return self.inner.mean_function(law).scaled(self.c)

    def __repr__(self):
        return f"Scaled({self.c!r}, {self.inner!r})"


class Sum(Characteristic):
    def __init__(self, parts: Sequence[Characteristic]):
        self.parts = tuple(parts)
        self.random = any(p.random for p in self.parts)
        self.complex_valued = any(p.complex_valued for p in self.parts)

    @property
    def support_nonnegative(self):
        return all(p.support_nonnegative for p in self.parts)

    def _values(self, batch, ages):
        return sum(p._values(batch, ages) for p in self.parts)

    def mean_function(self, law):
        out = self.parts[0].mean_function(law)
        for p in self.parts[1:]:
            out = out + p.mean_function(law)
        return out

    def __repr__(self):
        return f"Sum({list(self.parts)!r})"


class LatticeSequence:
    """Callable view of a sequence m_{n0}, m_{n0+1}, ...; zero below n0."""

    def __init__(self, values, n0: int = 0):
        self.values = np.asarray(values)
        self.n0 = int(n0)

    def __call__(self, t):
        n = np.floor(np.asarray(t, dtype=float)).astype(np.int64) - self.n0
        if np.any(n >= len(self.values)):
            raise ConfigurationError("lattice sequence evaluated beyond its computed range")
        out = np.zeros(n.shape, dtype=self.values.dtype)
        ok = n >= 0
        out[ok] = self.values[n[ok]]
        return out


class Centered(Characteristic):
    """chi_f(sample, t) = sum_m m^f(t - X_m) - (mu * m^f)(t)."""

    random = True

    def __init__(self, f: Deterministic, law: ReproductionLaw, mean_process: Callable):
        self.f = f
        self.law = law
        self.m = mean_process

    @property
    def support_nonnegative(self):
        return self.f.support_nonnegative

    def _convolution(self, ages):
        if self.law.is_lattice:
            return sum(c * self.m(ages - k) for k, c in self.law.atoms().items())
        # renewal identity: mu * m^f = m^f - E[f]
        return self.m(ages) - self.f.f(ages)

    def _values(self, batch, ages):
        n = len(batch)
        owner = batch.owner()
        if len(batch.delays):
            s = _sum_by_owner(np.asarray(self.m(ages[owner] - batch.delays), dtype=float), owner, n)
        else:
            s = np.zeros(n)
        return s - self._convolution(ages)

    def mean_function(self, law):
        return ZERO_MEAN

    def __repr__(self):
        return f"Centered({self.f!r})"


def centered_characteristic(f: Deterministic, law: ReproductionLaw, mean_process: Callable | None):
    if mean_process is None:
        raise ConfigurationError("centering needs the mean process m^f")
    if not isinstance(f, Deterministic):
        f = Deterministic(f)
    return Centered(f, law, mean_process)


def evaluate(char: Characteristic, sample: ReproductionSample, age: float, lattice: bool = False):
    return char.evaluate(sample, age, lattice)


def mean_function(char: Characteristic, law: ReproductionLaw) -> MeanFunction:
    return char.mean_function(law)
