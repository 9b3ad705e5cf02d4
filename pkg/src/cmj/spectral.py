"""Analytic side: Malthusian parameter, roots of Lmu(z) = 1, Jordan-block
exponentials, expansion coefficients, critical-line variances rho_l and the
limit variance sigma^2 (direct and contour forms)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import integrate, optimize

from .characteristics import (Alive, BornCounter, Characteristic, Deterministic, MeanFunction,
                              Window)
from .errors import (ConfigurationError, CriticalLineError, DomainError, NotSupercriticalError,
                     NumericalError)
from .laws import (INF, EpidemicGamma, ExponentialLifetime, PoissonLifetime, ReproductionLaw, SampleBatch)
from .rng import as_generator

CRITICAL_TOL = 1e-8
ZERO_DERIV_REL = 1e-8


# ---------------------------------------------------------------------------
# Malthusian parameter


def malthusian(law: ReproductionLaw) -> float:
    """Real alpha > 0 with Lmu(alpha) = 1."""
    f = lambda x: law.laplace(x).real - 1.0
    lo = max(law.domain_bound, 0.0)
    if lo == 0.0:
        if not f(0.0) > 0:
            raise NotSupercriticalError("mean number of children does not exceed 1")
    else:
        lo = lo + 1e-12
        if not f(lo) > 0:
            raise NotSupercriticalError("Lmu stays below 1 on the domain")
    hi = max(1.0, 2 * lo)
    while f(hi) > 0:
        hi *= 2
        if hi > 1e8:
            raise NotSupercriticalError("no sign change of Lmu - 1 on a large bracket")
    alpha = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    d = law.laplace_derivative(alpha, 1).real
    if d != 0:
        step = f(alpha) / d
        if abs(step) < 1e-10:
            alpha -= step
    return float(alpha)


def beta_of(law: ReproductionLaw, alpha: float) -> float:
    return float(-law.laplace_derivative(alpha, 1).real)


# ---------------------------------------------------------------------------
# roots


@dataclass(frozen=True)
class Root:
    lam: complex
    multiplicity: int = 1
    on_critical_line: bool = False

    @property
    def k(self) -> int:
        return self.multiplicity


class _BoundaryHit(Exception):
    pass


def _edge_arg_change(F, a, b, n0=24, max_rounds=60):
    t = np.linspace(0.0, 1.0, n0 + 1)
    f = F(a + (b - a) * t)
    for _ in range(max_rounds):
        if np.any(f == 0):
            raise _BoundaryHit
        d = np.angle(f[1:] / f[:-1])
        bad = np.abs(d) > 0.5
        if not bad.any():
            return float(d.sum())
        mids = 0.5 * (t[:-1][bad] + t[1:][bad])
        if np.min(t[1:][bad] - t[:-1][bad]) < 1e-15:
            raise _BoundaryHit
        fm = F(a + (b - a) * mids)
        t = np.concatenate((t, mids))
        f = np.concatenate((f, fm))
        order = np.argsort(t, kind="stable")
        t, f = t[order], f[order]
    raise _BoundaryHit


def _winding(F, x0, x1, y0, y1) -> int:
    corners = [complex(x0, y0), complex(x1, y0), complex(x1, y1), complex(x0, y1)]
    total = sum(_edge_arg_change(F, corners[i], corners[(i + 1) % 4]) for i in range(4))
    w = total / (2 * np.pi)
    if abs(w - round(w)) > 0.1:
        raise _BoundaryHit
    return int(round(w))


def _derivs(law, z, kmax):
    return [law.laplace_derivative(z, j) for j in range(kmax + 1)]


def _multiplicity_ok(law, z, k):
    d = _derivs(law, z, k)
    if abs(d[0] - 1.0) > 1e-10:
        return False
    scale = max(1.0, abs(d[k]))
    if any(abs(d[j]) > ZERO_DERIV_REL * scale for j in range(1, k)):
        return False
    return abs(d[k]) >= 1e-6


def _newton(law, z, k, tol=1e-15, maxit=100):
    """Newton on Lmu^{(k-1)} - [k == 1] (a simple zero at a root of multiplicity k)."""
    target = 1.0 if k == 1 else 0.0
    for _ in range(maxit):
        try:
            g = law.laplace_derivative(z, k - 1) - target
            dg = law.laplace_derivative(z, k)
        except DomainError:
            return None
        if dg == 0:
            return None
        step = g / dg
        z = z - step
        if abs(step) <= tol * max(1.0, abs(z)):
            return z
    return z if abs(law.laplace_derivative(z, k - 1) - target) < 1e-12 else None


def _search_cell(law, F, x0, x1, y0, y1, w, depth, out, min_size):
    size = max(x1 - x0, y1 - y0)
    pad = 1e-12 * max(1.0, abs(x0), abs(x1), abs(y0), abs(y1))
    if w == 1 or size < min_size:
        z = _newton(law, complex(0.5 * (x0 + x1), 0.5 * (y0 + y1)), w)
        if (z is not None and x0 - pad <= z.real <= x1 + pad and y0 - pad <= z.imag <= y1 + pad
                and _multiplicity_ok(law, z, w)):
            out.append((z, w))
            return
    if depth > 60:
        raise NumericalError(f"root search did not resolve cell [{x0},{x1}]x[{y0},{y1}] with winding {w}")
    for attempt in range(6):
        r = 0.5 + 0.0618034 * attempt * (-1) ** attempt
        xm, ym = x0 + r * (x1 - x0), y0 + r * (y1 - y0)
        cells = [(x0, xm, y0, ym), (xm, x1, y0, ym), (x0, xm, ym, y1), (xm, x1, ym, y1)]
        try:
            ws = [_winding(F, *c) for c in cells]
        except _BoundaryHit:
            continue
        if sum(ws) != w:
            continue
        for c, wc in zip(cells, ws):
            if wc:
                _search_cell(law, F, *c, wc, depth + 1, out, min_size)
        return
    raise NumericalError(f"root on cell boundary near [{x0},{x1}]x[{y0},{y1}] after retries")


def default_im_max(law: ReproductionLaw, re_min: float, re_max: float) -> float:
    """Height beyond which |Lmu| < 1/2 on the search strip (no roots above)."""
    if law.is_lattice:
        return np.pi
    xs = np.linspace(re_min, re_max, 9)
    y = 1.0
    while y < 1e4:
        ys = y * np.geomspace(1.0, 8.0, 12)
        zz = (xs[:, None] + 1j * ys[None, :]).ravel()
        if np.max(np.abs(law.laplace(zz))) < 0.5:
            return float(y)
        y *= 2.0
    raise NumericalError("could not bound the imaginary extent of the roots")


def find_roots(law: ReproductionLaw, alpha: float, re_min: float | None = None,
               im_max: float | None = None, re_max: float | None = None) -> list[Root]:
    """All roots of Lmu(z) = 1 in [re_min, re_max] x [-im_max, im_max] with multiplicities.

    For lattice laws the imaginary range is one period, reported in (-pi, pi].
    """
    if re_min is None:
        re_min = alpha / 2 - 1e-9
    if re_min <= law.domain_bound:
        re_min = law.domain_bound + 1e-9 * max(1.0, abs(law.domain_bound))
    if re_max is None:
        re_max = alpha + 0.05 * alpha + 1e-3
    F = lambda z: law.laplace(z) - 1.0
    for attempt in range(8):
        shift = attempt * (math.sqrt(2) - 1) * 1e-7
        x0, x1 = re_min - shift, re_max + shift
        if law.is_lattice:
            eps = 1e-3 * (math.sqrt(5) - 1) + shift
            y0, y1 = -np.pi + eps, np.pi + eps
        else:
            top = im_max if im_max is not None else default_im_max(law, x0, x1)
            y0, y1 = -top * (1 + shift), top * (1 + shift)
        try:
            n_y = max(1, min(64, int(math.ceil((y1 - y0) / max(x1 - x0, 1e-3)))))
            out: list = []
            edges = np.linspace(y0, y1, n_y + 1)
            # keep interior edges off the real axis, where alpha sits
            edges[1:-1] += (math.sqrt(2) - 1) * 0.1 * (y1 - y0) / n_y
            for ya, yb in zip(edges[:-1], edges[1:]):
                w = _winding(F, x0, x1, ya, yb)
                if w:
                    _search_cell(law, F, x0, x1, ya, yb, w, 0, out, min_size=1e-4 * max(1.0, x1 - x0))
            break
        except _BoundaryHit:
            continue
    else:
        raise NumericalError("root search failed: roots persistently on the search boundary")
    roots = []
    for z, k in out:
        if law.is_lattice:
            im = z.imag
            while im > np.pi:
                im -= 2 * np.pi
            while im <= -np.pi:
                im += 2 * np.pi
            z = complex(z.real, im)
        if abs(z.imag) < 1e-13 * max(1.0, abs(z)):
            z = complex(z.real, 0.0)
        crit = abs(z.real - alpha / 2) <= CRITICAL_TOL * max(1.0, alpha)
        roots.append(Root(z, k, crit))
    roots.sort(key=lambda r: (-r.lam.real, r.lam.imag))
    return roots


def epidemic_roots_closed_form(a: float, b: float, R0: float) -> list[complex]:
    """b(R0^{1/a} e^{-i phi} - 1) for phi in (2 pi / a) Z within (-pi, pi)."""
    step = 2 * np.pi / a
    n = int(math.floor(np.pi / step))
    out = []
    for j in range(-n, n + 1):
        phi = j * step
        if -np.pi < phi < np.pi:
            out.append(complex(b * (R0 ** (1 / a) * np.exp(-1j * phi) - 1)))
    return sorted(out, key=lambda z: (-z.real, z.imag))


def epidemic_threshold(a: float) -> float:
    """R0 above which the phi = 2 pi / a root lies right of alpha / 2."""
    return float((2 * math.cos(2 * math.pi / a) - 1) ** (-a))


# ---------------------------------------------------------------------------
# matrix calculus


def jordan_exp(gamma: complex, s: float, k: int) -> np.ndarray:
    """Lower triangular k x k matrix with entries e^{gamma s} C(i-1, j-1) s^{i-j}."""
    out = np.zeros((k, k), dtype=complex)
    e = np.exp(gamma * s)
    for i in range(k):
        for j in range(i + 1):
            out[i, j] = e * math.comb(i, j) * s ** (i - j)
    return out


@lru_cache(maxsize=None)
def bernoulli_number(n: int) -> Fraction:
    """B_n with B_1 = -1/2, from the explicit double sum."""
    total = Fraction(0)
    for k in range(n + 1):
        inner = sum((-1) ** j * math.comb(k, j) * Fraction(j) ** n if (j or n) else Fraction(1)
                    for j in range(k + 1))
        total += Fraction(inner, k + 1)
    return total


@lru_cache(maxsize=None)
def bernoulli_polynomial(n: int) -> tuple[Fraction, ...]:
    """Coefficients c[p] of x^p in B_n(x)."""
    coeffs = [Fraction(0)] * (n + 1)
    for k in range(n + 1):
        coeffs[n - k] += math.comb(n, k) * bernoulli_number(k)
    return tuple(coeffs)


@lru_cache(maxsize=None)
def lattice_operator_polynomial(k: int, l: int) -> tuple[Fraction, ...]:
    """Coefficients in y of (-1)^l sum_m C(k-1,m-1) y^{k-m} (B_{l+m}(-y) - B_{l+m}(0)) / (l+m)."""
    deg = k + l
    out = [Fraction(0)] * (deg + 1)
    for m in range(1, k + 1):
        n = l + m
        bp = bernoulli_polynomial(n)
        for p in range(1, n + 1):
            c = bp[p] * (-1) ** p * math.comb(k - 1, m - 1) / Fraction(n)
            out[p + k - m] += (-1) ** l * c
    return tuple(out)


def coefficient_matrix(law: ReproductionLaw, root: Root, lattice: bool | None = None) -> np.ndarray:
    """The upper triangular matrix M with M b = e_k determining b_lambda."""
    if lattice is None:
        lattice = law.is_lattice
    k, lam = root.multiplicity, root.lam
    d = [law.laplace_derivative(lam, j) for j in range(2 * k + 1)]
    M = np.zeros((k, k), dtype=complex)
    for i in range(1, k + 1):
        for j in range(i, k + 1):
            if lattice:
                poly = lattice_operator_polynomial(k, j - i)
                val = sum(float(c) * d[p] for p, c in enumerate(poly) if c)
                M[i - 1, j - 1] = math.comb(j - 1, i - 1) * val
            else:
                coef = (math.factorial(j - 1) * math.factorial(k - 1)
                        / (math.factorial(i - 1) * math.factorial(j - i + k)))
                M[i - 1, j - 1] = -coef * d[k + j - i]
    if abs(np.linalg.det(M)) < 1e-12:
        raise NumericalError(f"degenerate coefficient matrix at {lam}")
    return M


def expansion_vector(M: np.ndarray, k: int | None = None) -> np.ndarray:
    """Solve M b = e_k for upper triangular M by back substitution."""
    M = np.asarray(M, dtype=complex)
    k = M.shape[0] if k is None else k
    rhs = np.zeros(k, dtype=complex)
    rhs[-1] = 1.0
    b = np.zeros(k, dtype=complex)
    for i in range(k - 1, -1, -1):
        if M[i, i] == 0:
            raise NumericalError("singular coefficient matrix")
        b[i] = (rhs[i] - M[i, i + 1:] @ b[i + 1:]) / M[i, i]
    if np.max(np.abs(M @ b - rhs)) > 1e-10 * max(1.0, np.max(np.abs(M))):
        raise NumericalError("back substitution residual too large")
    return b


# ---------------------------------------------------------------------------
# profile and coefficients


@dataclass(frozen=True)
class SpectralProfile:
    alpha: float
    beta: float
    roots: tuple
    theta: float
    gamma: float
    lattice: bool

    @property
    def principal(self) -> tuple:
        """Lambda: roots strictly right of the critical line."""
        return tuple(r for r in self.roots if not r.on_critical_line)

    @property
    def boundary(self) -> tuple:
        """Roots on the critical line."""
        return tuple(r for r in self.roots if r.on_critical_line)

    @property
    def alpha_root(self) -> Root:
        return min(self.roots, key=lambda r: abs(r.lam - self.alpha))

    @property
    def c_alpha(self) -> float:
        return 1.0 / (1.0 - math.exp(-self.alpha)) if self.lattice else 1.0 / self.alpha


def spectral_profile(law: ReproductionLaw, im_max: float | None = None, epsilon: float = 1e-3,
                     strip_search: bool = True) -> SpectralProfile:
    alpha = malthusian(law)
    beta = beta_of(law, alpha)
    roots = find_roots(law, alpha, im_max=im_max)
    # the alpha root is exact from the real solver
    roots = [Root(complex(alpha, 0.0), 1, False) if abs(r.lam - alpha) < 1e-9 else r for r in roots]
    if not any(r.lam == alpha for r in roots):
        roots.insert(0, Root(complex(alpha, 0.0), 1, False))
    lower = max(law.domain_bound, 0.0)
    left_re = None
    if strip_search:
        try:
            left = find_roots(law, alpha, re_min=lower + epsilon, re_max=alpha / 2 - 1e-6, im_max=im_max)
            if left:
                left_re = max(r.lam.real for r in left)
        except NumericalError:
            left_re = None
    gap = alpha / 2 - (left_re if left_re is not None else lower)
    theta = max(lower + epsilon, alpha / 2 - gap / 2)
    theta = min(theta, alpha / 2 - 1e-9)
    principal_re = [r.lam.real for r in roots if not r.on_critical_line and r.lam != alpha]
    gamma = (alpha / 2 + min(principal_re)) / 2 if principal_re else 0.75 * alpha
    return SpectralProfile(alpha, beta, tuple(roots), theta, gamma, law.is_lattice)


def mean_coefficients(profile: SpectralProfile, b_vectors: Mapping[Root, np.ndarray],
                      char_mean: MeanFunction, lattice: bool | None = None) -> dict:
    """a_lambda = sum over x of exp(lambda, -x, k)^T b_lambda E[phi](x)."""
    lattice = profile.lattice if lattice is None else lattice
    out = {}
    for root, b in b_vectors.items():
        k = root.multiplicity
        moments = [char_mean.moment(p, root.lam, lattice) for p in range(k)]
        a = np.zeros(k, dtype=complex)
        for i in range(k):
            for j in range(i, k):
                a[i] += math.comb(j, i) * b[j] * (-1) ** (j - i) * moments[j - i]
        out[root] = a
    return out


def _finite_batch(law):
    outs = law.finite_outcomes()
    if outs is None:
        return None, None
    batch = SampleBatch([len(d) for d, _, _ in outs],
                        np.concatenate([np.asarray(d, float) for d, _, _ in outs]) if outs else [],
                        [life for _, life, _ in outs], np.zeros(len(outs)))
    return batch, np.array([p for _, _, p in outs])


@dataclass
class RhoResult:
    rho: list
    n_star: int
    stderr: list


def rho_values(law: ReproductionLaw, boundary_a: Mapping[Root, np.ndarray], n_samples: int = 100_000,
               seed: int = 0) -> RhoResult:
    """rho_l from the variances of R_{lambda,l} over critical-line roots."""
    if not boundary_a:
        return RhoResult([], -1, [])
    kstar = max(r.multiplicity for r in boundary_a)
    batch, probs = _finite_batch(law)
    exact = batch is not None
    if not exact:
        batch = law.sample_batch(n_samples, as_generator(seed))
    owner = batch.owner()
    n = len(batch)
    var = np.zeros(kstar)
    se = np.zeros(kstar)
    for root, a in boundary_a.items():
        k = root.multiplicity
        x = batch.delays
        for l in range(k):
            w = np.zeros(len(x), dtype=complex)
            for j in range(l, k):
                w += a[j] * math.comb(j, l) * (-x) ** (j - l) * np.exp(-root.lam * x)
            R = (np.bincount(owner, w.real, minlength=n) + 1j * np.bincount(owner, w.imag, minlength=n))
            if exact:
                mean = np.sum(probs * R)
                var[l] += float(np.sum(probs * np.abs(R - mean) ** 2))
            else:
                dev = np.abs(R - R.mean()) ** 2
                var[l] += float(dev.mean() * n / (n - 1))
                se[l] = math.sqrt(se[l] ** 2 + dev.var(ddof=1) / n)
    rho = [math.sqrt(max(v, 0.0)) for v in var]
    n_star = -1
    for l, v in enumerate(var):
        if v > 1e-24 and (exact or v > 4 * se[l]):
            n_star = l
    return RhoResult(rho, n_star, [float(s) for s in se])


@dataclass
class CoefficientSet:
    b: dict
    a: dict
    rho: list
    n_star: int
    rho_stderr: list = field(default_factory=list)


def coefficient_set(law: ReproductionLaw, profile: SpectralProfile, char_mean: MeanFunction,
                    n_samples: int = 100_000, seed: int = 0) -> CoefficientSet:
    b = {r: expansion_vector(coefficient_matrix(law, r, profile.lattice), r.multiplicity)
         for r in profile.roots}
    a = mean_coefficients(profile, b, char_mean, profile.lattice)
    rr = rho_values(law, {r: a[r] for r in profile.boundary}, n_samples, seed)
    return CoefficientSet(b, a, rr.rho, rr.n_star, rr.stderr)


def principal_terms(profile: SpectralProfile, a: Mapping[Root, np.ndarray], roots: Sequence[Root] | None = None):
    """q(t) = sum over the given roots (default Lambda) of e^{lambda t} sum_l a_l t^l, vectorized."""
    roots = profile.principal if roots is None else roots

    def q(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for r in roots:
            poly = sum(a[r][l] * t**l for l in range(r.multiplicity))
            out += np.exp(r.lam * t) * poly
        return out

    return q


# ---------------------------------------------------------------------------
# limit variance


@dataclass
class SigmaResult:
    value: float
    stderr: float
    method: str


def _divergence_check(terms, label):
    terms = np.abs(np.asarray(terms))
    if len(terms) > 60:
        tail = terms[-20:].mean()
        head = terms[: len(terms) // 3].max()
        if tail > 1e-3 * head and terms[-1] > 1e-6 * terms.sum():
            raise NumericalError(f"{label}: integrand does not decay (is n_star >= 0?)")


def covariance_integral(law: ReproductionLaw, characteristic: Characteristic, h_phi: Callable,
                        alpha: float, shift_a: float = 0.0, shift_b: float = 0.0, n_samples: int = 100_000,
                        seed: int = 0, dx: float = 0.02, x_min: float | None = None,
                        x_max: float | None = None, batches: int = 20) -> SigmaResult:
    """Integral (lattice sum) over x of Cov[Y(x - shift_a), Y(x - shift_b)] e^{-alpha x},
    where Y(y) = phi(y) + sum_m h(y - X_m).

    ``h_phi`` is the remainder t -> m_t - sum over Lambda of e^{lambda t} sum_l a_l t^l,
    vectorized and valid for t <= ``h_phi.t_max``. Finite lattice laws are
    enumerated exactly; otherwise Monte Carlo with a batch-means standard error.
    """
    t_max = float(getattr(h_phi, "t_max", x_max if x_max is not None else 50.0 / alpha))
    if x_max is None:
        x_max = t_max + min(shift_a, shift_b)
    if x_min is None:
        x_min = -40.0 / alpha
    lattice = law.is_lattice
    batch, probs = _finite_batch(law) if lattice else (None, None)
    exact = batch is not None
    if not exact:
        batch = law.sample_batch(n_samples, as_generator(seed))
    owner = batch.owner()
    n = len(batch)

    def values_at(ys):
        rows = []
        for y in ys:
            phi = np.real(characteristic.values(batch, y, lattice))
            hv = np.real(h_phi(y - batch.delays)) if len(batch.delays) else np.zeros(0)
            rows.append(phi + np.bincount(owner, hv, minlength=n))
        return np.array(rows)

    if lattice:
        xs = np.arange(math.floor(x_min), math.floor(x_max) + 1, dtype=float)
    else:
        xs = np.arange(x_min, x_max + 0.5 * dx, dx)
    weights = np.exp(-alpha * xs)
    same = shift_a == shift_b
    if exact:
        parts = []
        for i0 in range(0, len(xs), 256):
            va = values_at(xs[i0:i0 + 256] - shift_a)
            vb = va if same else values_at(xs[i0:i0 + 256] - shift_b)
            da = va - (va @ probs)[:, None]
            db = vb - (vb @ probs)[:, None]
            parts.append((da * db) @ probs)
        integrand = np.concatenate(parts) * weights
        _divergence_check(integrand[xs >= 0], "covariance integral")
        return SigmaResult(float(integrand.sum()), 0.0, "exact-lattice")
    groups = np.arange(n) % batches
    cov = np.zeros(len(xs))
    cov_b = np.zeros((batches, len(xs)))
    for i0 in range(0, len(xs), 128):
        sl = slice(i0, i0 + 128)
        va = values_at(xs[sl] - shift_a)
        vb = va if same else values_at(xs[sl] - shift_b)
        da = va - va.mean(axis=1, keepdims=True)
        db = vb - vb.mean(axis=1, keepdims=True)
        cov[sl] = (da * db).sum(axis=1) / (n - 1)
        for g in range(batches):
            m = groups == g
            ga = va[:, m] - va[:, m].mean(axis=1, keepdims=True)
            gb = vb[:, m] - vb[:, m].mean(axis=1, keepdims=True)
            cov_b[g, sl] = (ga * gb).sum(axis=1) / (m.sum() - 1)
    integrand = cov * weights
    if lattice:
        value = float(integrand.sum())
        per_batch = (cov_b * weights).sum(axis=1)
    else:
        value = float(integrate.trapezoid(integrand, xs))
        per_batch = integrate.trapezoid(cov_b * weights, xs, axis=1)
    _divergence_check(integrand[xs >= 0], "covariance integral")
    se = float(per_batch.std(ddof=1) / math.sqrt(batches))
    return SigmaResult(value, se, "monte-carlo")


def sigma_squared_direct(law: ReproductionLaw, characteristic: Characteristic, h_phi: Callable,
                         alpha: float, **kwargs) -> SigmaResult:
    """sigma^2 = integral of Var[phi(x) + h*xi(x)] e^{-alpha x} (see covariance_integral)."""
    return covariance_integral(law, characteristic, h_phi, alpha, 0.0, 0.0, **kwargs)


def _closed_form_inner_variance(law, characteristic):
    """Return f(z, c) = Var[L phi(z) + c L xi(z)] in closed form, or None."""
    if isinstance(law, EpidemicGamma) and isinstance(characteristic, (BornCounter, Window, Alive, Deterministic)):
        def var(z, c):
            return abs(c) ** 2 * law.laplace(2 * z.real).real
        return var
    if isinstance(law, PoissonLifetime) and isinstance(characteristic, (Alive, BornCounter, Window)):
        life, b = law.lifetime, law.b

        def var(z, c):
            x = z.real
            lz2 = life.laplace(2 * x).real
            expected_cond_var = b * (1 - lz2) / (2 * x) if x != 0 else b * life.mean
            if isinstance(characteristic, Alive):
                v = -(1.0 + c * b) / z
            else:
                v = -c * b / z
            spread = lz2 - abs(life.laplace(z)) ** 2
            return abs(c) ** 2 * expected_cond_var + abs(v) ** 2 * spread
        return var
    return None


def _per_sample_phi_transform(characteristic, batch, z):
    if isinstance(characteristic, BornCounter):
        return np.full(len(batch), 1.0 / z, dtype=complex)
    if isinstance(characteristic, Window):
        return np.full(len(batch), (1 - np.exp(-z * characteristic.a)) / z, dtype=complex)
    if isinstance(characteristic, Alive):
        life = batch.lifetimes
        return np.where(np.isinf(life), 1.0 / z, (1 - np.exp(-z * np.where(np.isinf(life), 0.0, life))) / z)
    if isinstance(characteristic, Deterministic):
        return np.full(len(batch), characteristic.f.transform(z), dtype=complex)
    raise ConfigurationError(f"no Laplace transform available for {characteristic!r}")


def sigma_squared_contour(law: ReproductionLaw, characteristic: Characteristic, alpha: float,
                          char_mean: MeanFunction | None = None, n_samples: int = 20_000, seed: int = 0,
                          rel_tail: float = 1e-6) -> SigmaResult:
    """(1/2pi) integral over Re z = alpha/2 of Var[L phi(z) + L xi(z) L h(z)]."""
    if law.is_lattice:
        raise DomainError("contour form is only implemented for non-lattice laws")
    on_line = [r.lam for r in find_roots(law, alpha) if r.on_critical_line]
    if on_line:
        raise CriticalLineError(f"roots on the critical line: {on_line}")
    if char_mean is None:
        char_mean = characteristic.mean_function(law)
    inner = _closed_form_inner_variance(law, characteristic)
    method = "contour-closed-form"
    if inner is None:
        method = "contour-monte-carlo"
        batch = law.sample_batch(n_samples, as_generator(seed))
        owner = batch.owner()

        def inner(z, c):
            lxi = np.exp(-z * batch.delays)
            s = np.bincount(owner, lxi.real, minlength=len(batch)) + 1j * np.bincount(owner, lxi.imag, minlength=len(batch))
            y = _per_sample_phi_transform(characteristic, batch, z) + c * s
            return float(np.mean(np.abs(y - y.mean()) ** 2))

    x = alpha / 2

    def integrand(eta):
        z = complex(x, eta)
        one_minus = 1.0 - law.laplace(z)
        if abs(one_minus) < CRITICAL_TOL:
            raise CriticalLineError(f"1 - Lmu vanishes near {z}")
        c = char_mean.transform(z) / one_minus
        return inner(z, c)

    total = 0.0
    lo, hi = 0.0, 1.0
    while True:
        # oscillatory integrands for bounded lifetimes trip quad's roundoff heuristics while still
        # converging to ~1e-7 relative; the warnings carry no information here
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            part, _ = integrate.quad(integrand, lo, hi, epsabs=1e-12 * total, epsrel=1e-10, limit=1000)
        total += part
        tail = hi * integrand(hi)
        if tail <= rel_tail * total or hi > 1e8:
            break
        lo, hi = hi, 2 * hi
    total += tail
    return SigmaResult(total / np.pi, 0.0, method)


def poisson_lifetime_sigma_closed_form(law: PoissonLifetime, alpha: float, beta: float) -> float:
    """Closed form 2 / (alpha b beta) for PoissonLifetime with Alive (omits the -1/b term; see the corrected form)."""
    return 2.0 / (alpha * law.b * beta)


def poisson_lifetime_sigma_corrected(law: PoissonLifetime, alpha: float, beta: float) -> float:
    """2 / (alpha b beta) - 1 / b: the value the variance integral actually takes."""
    return 2.0 / (alpha * law.b * beta) - 1.0 / law.b
