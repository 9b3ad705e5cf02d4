"""Reproduction laws: samplable (xi, zeta) pairs with exact Laplace transforms.

Every law exposes

* ``laplace(z)`` and ``laplace_derivative(z, order)`` for the intensity
  measure mu = E[xi], vectorized over ``z``;
* ``sample_batch(n, rng)`` returning a :class:`SampleBatch` (ragged arrays of
  sorted offspring delays plus lifetimes);
* ``domain_bound``: the transform is only evaluated on Re z > domain_bound;
* ``lattice_span``: 1.0 for integer-delay laws, ``None`` otherwise.

Lattice laws additionally expose ``atoms()`` (mean number of children per
integer delay) and ``finite_outcomes()`` for exact enumeration; non-lattice
laws expose ``intensity_density(x)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import special, stats

from ._quad import cauchy_derivative, power_exp_integral
from .errors import ConfigurationError, DomainError
from .rng import as_generator

INF = math.inf


# ---------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class ReproductionSample:
    offspring_delays: np.ndarray
    lifetime: float = INF
    mark: float = 0.0

    @property
    def n_offspring(self) -> int:
        return int(len(self.offspring_delays))


@dataclass
class SampleBatch:
    """Ragged batch of reproduction samples.

    Sample i owns ``delays[offsets[i]:offsets[i+1]]`` (sorted ascending).
    ``marks`` is an extra uniform variate per sample, unused by built-ins.
    """

    counts: np.ndarray
    delays: np.ndarray
    lifetimes: np.ndarray
    marks: np.ndarray
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.delays = np.asarray(self.delays, dtype=float)
        self.lifetimes = np.asarray(self.lifetimes, dtype=float)
        self.marks = np.asarray(self.marks, dtype=float)
        self.offsets = np.concatenate(([0], np.cumsum(self.counts)))

    def __len__(self):
        return len(self.counts)

    def owner(self) -> np.ndarray:
        """Sample index of every entry of ``delays``."""
        return np.repeat(np.arange(len(self.counts)), self.counts)

    def sample(self, i: int) -> ReproductionSample:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return ReproductionSample(self.delays[lo:hi].copy(), float(self.lifetimes[i]), float(self.marks[i]))

    def take(self, idx) -> "SampleBatch":
        """Sub-batch of the samples at positions ``idx`` (in that order)."""
        idx = np.asarray(idx, dtype=np.int64)
        counts = self.counts[idx]
        starts = self.offsets[:-1][idx]
        total = int(counts.sum())
        if total:
            shift = np.repeat(starts - np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
            gather = np.arange(total) + shift
            delays = self.delays[gather]
        else:
            delays = np.zeros(0)
        return SampleBatch(counts, delays, self.lifetimes[idx], self.marks[idx])

    @classmethod
    def from_samples(cls, samples: Sequence[ReproductionSample]) -> "SampleBatch":
        counts = [s.n_offspring for s in samples]
        delays = np.concatenate([np.asarray(s.offspring_delays, float) for s in samples]) if samples else np.zeros(0)
        return cls(counts, delays, [s.lifetime for s in samples], [s.mark for s in samples])

    @classmethod
    def concat(cls, batches: Sequence["SampleBatch"]) -> "SampleBatch":
        return cls(
            np.concatenate([b.counts for b in batches]),
            np.concatenate([b.delays for b in batches]),
            np.concatenate([b.lifetimes for b in batches]),
            np.concatenate([b.marks for b in batches]),
        )


def _sorted_ragged(owner: np.ndarray, values: np.ndarray) -> np.ndarray:
    order = np.lexsort((values, owner))
    return values[order]


# ---------------------------------------------------------------------------
# lifetimes


class LifetimeDist:
    domain_bound = -INF

    def sample(self, n, rng):
        raise NotImplementedError

    def laplace(self, z):
        raise NotImplementedError

    def survival(self, t):
        """P(zeta > t)."""
        raise NotImplementedError

    def survival_terms(self):
        """P(zeta > t) on t >= 0 as (coef, rate, power, lo, hi) exponential-polynomial pieces."""
        raise NotImplementedError

    def tail_transform(self, z, order):
        """Integral over x >= 0 of (-x)^order e^{-zx} P(zeta >= x)."""
        raise NotImplementedError

    @property
    def mean(self):
        raise NotImplementedError


@dataclass(frozen=True)
class ExponentialLifetime(LifetimeDist):
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigurationError("exponential lifetime rate must be positive")

    @property
    def domain_bound(self):
        return -self.rate

    def sample(self, n, rng):
        return rng.exponential(1.0 / self.rate, n)

    def laplace(self, z):
        return self.rate / (self.rate + np.asarray(z, dtype=complex))

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(t < 0, 1.0, np.exp(-self.rate * np.maximum(t, 0.0)))

    def survival_terms(self):
        return [(1.0, -self.rate, 0, 0.0, INF)]

    def tail_transform(self, z, order):
        z = np.asarray(z, dtype=complex)
        return (-1) ** order * math.factorial(order) / (z + self.rate) ** (order + 1)

    @property
    def mean(self):
        return 1.0 / self.rate


@dataclass(frozen=True)
class FixedLifetime(LifetimeDist):
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigurationError("deterministic lifetime must be positive")

    def sample(self, n, rng):
        return np.full(n, float(self.value))

    def laplace(self, z):
        return np.exp(-np.asarray(z, dtype=complex) * self.value)

    def survival(self, t):
        return (np.asarray(t, dtype=float) < self.value).astype(float)

    def survival_terms(self):
        return [(1.0, 0.0, 0, 0.0, float(self.value))]

    def tail_transform(self, z, order):
        return (-1) ** order * power_exp_integral(order, z, 0.0, self.value)

    @property
    def mean(self):
        return float(self.value)


@dataclass(frozen=True)
class UniformLifetime(LifetimeDist):
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.lo > 0 and self.hi > self.lo):
            raise ConfigurationError("uniform lifetime needs 0 < lo < hi")

    def sample(self, n, rng):
        return rng.uniform(self.lo, self.hi, n)

    def laplace(self, z):
        z = np.asarray(z, dtype=complex)
        small = np.abs(z) < 1e-8
        zs = np.where(small, 1.0, z)
        val = (np.exp(-zs * self.lo) - np.exp(-zs * self.hi)) / (zs * (self.hi - self.lo))
        return np.where(small, 1.0 - z * 0.5 * (self.lo + self.hi), val)

    def survival(self, t):
        t = np.asarray(t, dtype=float)
        return np.clip((self.hi - t) / (self.hi - self.lo), 0.0, 1.0)

    def survival_terms(self):
        w = self.hi - self.lo
        return [
            (1.0, 0.0, 0, 0.0, float(self.lo)),
            (self.hi / w, 0.0, 0, float(self.lo), float(self.hi)),
            (-1.0 / w, 0.0, 1, float(self.lo), float(self.hi)),
        ]

    def tail_transform(self, z, order):
        w = self.hi - self.lo
        head = power_exp_integral(order, z, 0.0, self.lo)
        ramp = (self.hi * power_exp_integral(order, z, self.lo, self.hi)
                - power_exp_integral(order + 1, z, self.lo, self.hi)) / w
        return (-1) ** order * (head + ramp)

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)


# ---------------------------------------------------------------------------
# laws


class ReproductionLaw:
    lattice_span: float | None = None
    domain_bound: float = -INF

    @property
    def is_lattice(self) -> bool:
        return self.lattice_span is not None

    # -- transforms -------------------------------------------------------
    def _check_domain(self, z):
        z = np.asarray(z, dtype=complex)
        if np.any(z.real <= self.domain_bound):
            raise DomainError(f"Re z must exceed {self.domain_bound} for {self!r}")
        return z

    def laplace(self, z):
        z = self._check_domain(z)
        out = self._laplace(z)
        return complex(out) if np.ndim(out) == 0 else out

    def laplace_derivative(self, z, order: int):
        if order < 0:
            raise ValueError("order must be non-negative")
        z = self._check_domain(z)
        out = self._laplace(z) if order == 0 else self._derivative(z, int(order))
        return complex(out) if np.ndim(out) == 0 else out

    def _laplace(self, z):
        raise NotImplementedError

    def _derivative(self, z, order):
        raise NotImplementedError

    # -- sampling ---------------------------------------------------------
    def sample_batch(self, n: int, rng) -> SampleBatch:
        raise NotImplementedError

    def sample(self, rng) -> ReproductionSample:
        return self.sample_batch(1, as_generator(rng)).sample(0)

    # -- structure ----------------------------------------------------------
    @property
    def mean_offspring(self) -> float:
        return float(self.laplace(0.0).real)

    def finite_outcomes(self):
        """List of (delays tuple, lifetime, probability) or None."""
        return None

    def atoms(self) -> dict[int, float]:
        raise DomainError("atoms are only defined for lattice laws")

    def intensity_density(self, x):
        raise DomainError("intensity density is only defined for non-lattice laws")

    def survival_terms(self):
        """P(zeta > t) as exponential-polynomial pieces; infinite lifetime by default."""
        return [(1.0, 0.0, 0, 0.0, INF)]

    @property
    def extinction_free(self) -> bool:
        return False

    def second_moment_finite(self) -> tuple[bool, str]:
        raise NotImplementedError


def _parse_pmf(pmf) -> tuple[tuple[int, float], ...]:
    if isinstance(pmf, Mapping):
        items = pmf.items()
    else:
        items = pmf
    out = []
    for k, p in items:
        if int(k) != k or k < 0:
            raise ConfigurationError(f"offspring value {k!r} is not a non-negative integer")
        if not p >= 0:
            raise ConfigurationError(f"probability {p!r} is negative")
        if p > 0:
            out.append((int(k), float(p)))
    total = sum(p for _, p in out)
    if abs(total - 1.0) > 1e-12:
        raise ConfigurationError(f"pmf sums to {total!r}, not 1")
    return tuple(sorted(out))


@dataclass(frozen=True)
class GaltonWatson(ReproductionLaw):
    """All children born at age 1; the count N follows ``pmf``."""

    pmf: tuple

    lattice_span = 1.0
    domain_bound = -INF

    def __init__(self, pmf):
        object.__setattr__(self, "pmf", _parse_pmf(pmf))
        if not self.mean > 1.0:
            raise ConfigurationError(f"offspring mean {self.mean} must exceed 1")

    @property
    def mean(self) -> float:
        return sum(k * p for k, p in self.pmf)

    @property
    def variance(self) -> float:
        return sum(k * k * p for k, p in self.pmf) - self.mean**2

    def _laplace(self, z):
        return self.mean * np.exp(-z)

    def _derivative(self, z, order):
        return (-1) ** order * self.mean * np.exp(-z)

    def sample_batch(self, n, rng):
        vals = np.array([k for k, _ in self.pmf])
        probs = np.array([p for _, p in self.pmf])
        counts = vals[rng.choice(len(vals), size=n, p=probs)]
        return SampleBatch(counts, np.ones(int(counts.sum())), np.full(n, INF), rng.random(n))

    def finite_outcomes(self):
        return [((1,) * k, INF, p) for k, p in self.pmf]

    def atoms(self):
        return {1: self.mean}

    @property
    def extinction_free(self):
        return self.pmf[0][0] >= 1

    def second_moment_finite(self):
        return True, "finite offspring table: every moment of N is finite"


@dataclass(frozen=True)
class LatticeTable(ReproductionLaw):
    """Finitely many outcomes, each a tuple of positive integer delays."""

    outcomes: tuple

    lattice_span = 1.0
    domain_bound = -INF

    def __init__(self, outcomes):
        cleaned = []
        for delays, p in outcomes:
            ds = tuple(sorted(int(d) for d in delays))
            if any(d < 1 or d != dd for d, dd in zip(ds, sorted(delays))):
                raise ConfigurationError("lattice delays must be positive integers")
            if p < 0:
                raise ConfigurationError("negative probability")
            if p > 0:
                cleaned.append((ds, float(p)))
        total = sum(p for _, p in cleaned)
        if abs(total - 1.0) > 1e-12:
            raise ConfigurationError(f"outcome probabilities sum to {total!r}")
        object.__setattr__(self, "outcomes", tuple(cleaned))
        if not self.mean_offspring > 1.0:
            raise ConfigurationError("mean number of children must exceed 1")

    @classmethod
    def independent_counts(cls, count_laws: Mapping[int, Mapping[int, float]]) -> "LatticeTable":
        """Independent counts per delay: ``{delay: {count: prob}}``."""
        delays = sorted(count_laws)
        tables = [sorted(count_laws[d].items()) for d in delays]
        outcomes = []
        for combo in itertools.product(*tables):
            p = math.prod(q for _, q in combo)
            tup = tuple(d for d, (c, _) in zip(delays, combo) for _ in range(int(c)))
            outcomes.append((tup, p))
        return cls(outcomes)

    def atoms(self):
        out: dict[int, float] = {}
        for delays, p in self.outcomes:
            for d in delays:
                out[d] = out.get(d, 0.0) + p
        return dict(sorted(out.items()))

    def _laplace(self, z):
        return sum(c * np.exp(-z * k) for k, c in self.atoms().items())

    def _derivative(self, z, order):
        return sum(c * (-k) ** order * np.exp(-z * k) for k, c in self.atoms().items())

    def sample_batch(self, n, rng):
        probs = np.array([p for _, p in self.outcomes])
        idx = rng.choice(len(probs), size=n, p=probs)
        counts = np.array([len(d) for d, _ in self.outcomes])[idx]
        delays = np.concatenate([np.asarray(self.outcomes[i][0], float) for i in idx]) if n else np.zeros(0)
        return SampleBatch(counts, delays, np.full(n, INF), rng.random(n))

    def finite_outcomes(self):
        return [(d, INF, p) for d, p in self.outcomes]

    @property
    def extinction_free(self):
        return all(len(d) > 0 for d, _ in self.outcomes)

    def second_moment_finite(self):
        return True, "finitely many outcomes with bounded delays"


@dataclass(frozen=True)
class EpidemicGamma(ReproductionLaw):
    """Poisson(R0) children at i.i.d. Gamma(shape a, rate b) ages."""

    a: float
    b: float
    R0: float

    lattice_span = None

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigurationError("a must be positive")
        if not self.b > 0:
            raise ConfigurationError("b must be positive")
        if not self.R0 > 1:
            raise ConfigurationError("R0 must exceed 1")

    @property
    def domain_bound(self):
        return -self.b

    def _laplace(self, z):
        return self.R0 * np.exp(self.a * (np.log(self.b) - np.log(self.b + z)))

    def _derivative(self, z, order):
        poch = special.poch(self.a, order)
        return (-1) ** order * self.R0 * poch * np.exp(self.a * np.log(self.b) - (self.a + order) * np.log(self.b + z))

    def sample_batch(self, n, rng):
        counts = rng.poisson(self.R0, n)
        owner = np.repeat(np.arange(n), counts)
        vals = rng.gamma(self.a, 1.0 / self.b, int(counts.sum()))
        return SampleBatch(counts, _sorted_ragged(owner, vals), np.full(n, INF), rng.random(n))

    def intensity_density(self, x):
        return self.R0 * stats.gamma.pdf(x, self.a, scale=1.0 / self.b)

    def second_moment_finite(self):
        return True, "Poisson counts have all moments and Gamma ages have all exponential moments below b"


@dataclass(frozen=True)
class PoissonLifetime(ReproductionLaw):
    """Rate-b Poisson births during a lifetime drawn from ``lifetime``."""

    b: float
    lifetime: LifetimeDist

    lattice_span = None

    def __post_init__(self):
        if not self.b > 0:
            raise ConfigurationError("b must be positive")
        if not isinstance(self.lifetime, LifetimeDist):
            raise ConfigurationError("lifetime must be a LifetimeDist")
        if not self.b * self.lifetime.mean > 1:
            raise ConfigurationError("b * E[lifetime] must exceed 1 (supercritical)")

    @property
    def domain_bound(self):
        return self.lifetime.domain_bound

    def _laplace(self, z):
        if isinstance(self.lifetime, ExponentialLifetime):
            return self.b / (self.lifetime.rate + z)
        return self.b * self.lifetime.tail_transform(z, 0)

    def _derivative(self, z, order):
        return self.b * self.lifetime.tail_transform(z, order)

    def sample_batch(self, n, rng):
        life = self.lifetime.sample(n, rng)
        counts = rng.poisson(self.b * life)
        owner = np.repeat(np.arange(n), counts)
        # 1 - U lies in (0, 1], so positions lie in (0, zeta]
        vals = (1.0 - rng.random(int(counts.sum()))) * life[owner]
        return SampleBatch(counts, _sorted_ragged(owner, vals), life, rng.random(n))

    def intensity_density(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.b * self.lifetime.survival(x), 0.0)

    def survival_terms(self):
        return self.lifetime.survival_terms()

    def second_moment_finite(self):
        return True, "Poisson counts given zeta with E[zeta^2] finite for all built-in lifetimes"


@dataclass(frozen=True)
class Fragmentation(ReproductionLaw):
    """Split into ``pieces`` parts with Dirichlet(kappa, ..., kappa) sizes; delays are -log V."""

    pieces: int
    concentration: float = 1.0

    lattice_span = None

    def __post_init__(self):
        if int(self.pieces) != self.pieces or self.pieces < 2:
            raise ConfigurationError("fragmentation needs an integer number of pieces >= 2")
        if not self.concentration > 0:
            raise ConfigurationError("concentration must be positive")

    @property
    def domain_bound(self):
        return -self.concentration

    def _laplace(self, z):
        b, k = self.pieces, self.concentration
        return b * np.exp(special.loggamma(b * k) + special.loggamma(k + z)
                          - special.loggamma(k) - special.loggamma(b * k + z))

    def _derivative(self, z, order):
        radius_of = lambda w: min(0.5 * (w.real - self.domain_bound), 0.5)
        if np.ndim(z) == 0:
            w = complex(z)
            return cauchy_derivative(self._laplace, w, order, radius_of(w))
        return np.array([cauchy_derivative(self._laplace, w, order, radius_of(w)) for w in np.ravel(z)]).reshape(np.shape(z))

    def sample_batch(self, n, rng):
        g = rng.gamma(self.concentration, 1.0, (n, self.pieces))
        v = g / g.sum(axis=1, keepdims=True)
        delays = np.sort(-np.log(v), axis=1).ravel()
        return SampleBatch(np.full(n, self.pieces), delays, np.full(n, INF), rng.random(n))

    def intensity_density(self, x):
        x = np.asarray(x, dtype=float)
        k, b = self.concentration, self.pieces
        v = np.exp(-x)
        return np.where(x > 0, b * stats.beta.pdf(v, k, (b - 1) * k) * v, 0.0)

    @property
    def extinction_free(self):
        return True

    def second_moment_finite(self):
        return True, "exactly b children with E[V^s] finite for s > -kappa"


# ---------------------------------------------------------------------------
# module-level operations


def sample_reproduction(law: ReproductionLaw, rng) -> ReproductionSample:
    return law.sample(rng)


def laplace_transform(law: ReproductionLaw, z):
    return law.laplace(z)


def laplace_derivative(law: ReproductionLaw, z, order: int):
    return law.laplace_derivative(z, order)


def second_moment_check(law: ReproductionLaw, alpha: float, kstar: int = 1,
                        n_samples: int = 10_000, seed: int = 0, weighted: bool = True):
    """Decide E[(sum_j (1 + X_j^{k*-1/2}) e^{-alpha X_j/2})^2] < inf; MC estimate in the report.

    ``weighted=False`` drops the polynomial factor (the plain e^{-alpha X/2} sum).
    """
    ok, reason = law.second_moment_finite()
    batch = law.sample_batch(n_samples, as_generator(seed))
    x = batch.delays
    w = np.exp(-alpha * x / 2)
    if weighted:
        w = w * (1.0 + x ** (kstar - 0.5))
    per = np.bincount(batch.owner(), weights=w, minlength=len(batch))
    sq = per**2
    report = {
        "reason": reason,
        "mc_second_moment": float(sq.mean()),
        "mc_stderr": float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else 0.0,
        "samples": int(n_samples),
    }
    return ok, report
