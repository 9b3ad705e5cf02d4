"""Population simulation and path functionals; exact and discretized renewal means."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .characteristics import Characteristic, MeanFunction
from .errors import ConfigurationError, DomainError
from .laws import (INF, ExponentialLifetime, GaltonWatson, PoissonLifetime, ReproductionLaw,
                   SampleBatch)
from .rng import as_generator

NO_PARENT = np.uint64(2**64 - 1)
DUMP_MAGIC = b"CMJPATH\x00"
DUMP_VERSION = 1


@dataclass
class PathRecord:
    """One simulated population up to ``horizon``.

    Rows are ordered by birth time (ties by creation order). ``samples`` is
    aligned with the rows. Children born after the horizon are kept as
    coming-generation entries (birth time and parent row, no sample).
    """

    birth: np.ndarray
    parent: np.ndarray
    generation: np.ndarray
    samples: SampleBatch
    coming_birth: np.ndarray
    coming_parent: np.ndarray
    horizon: float
    capped: bool
    lattice: bool
    survival: bool = False
    _children: tuple | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.birth)

    def children(self):
        """(parent birth, child birth) for every child of every materialized individual."""
        if self._children is None:
            pb = np.repeat(self.birth, self.samples.counts)
            self._children = (pb, pb + self.samples.delays)
        return self._children


def simulate(law: ReproductionLaw, horizon: float, cap: int = 10_000_000, rng=None,
             window: float = 1.0) -> PathRecord:
    """Grow the family tree of a single ancestor born at 0 up to ``horizon``.

    Generation by generation: every individual of the current wave draws its
    reproduction, children born by the horizon form the next wave.
    """
    if horizon < 0:
        raise DomainError("horizon must be non-negative")
    if cap < 1:
        raise DomainError("cap must be at least 1")
    rng = as_generator(rng)
    births = [np.zeros(1)]
    parents = [np.full(1, -1, dtype=np.int64)]
    gens = [np.zeros(1, dtype=np.int32)]
    batches = []
    coming_b, coming_p = [], []
    wave_birth = births[0]
    wave_ids = np.zeros(1, dtype=np.int64)
    total = 1
    g = 0
    capped = False
    while len(wave_ids):
        batch = law.sample_batch(len(wave_ids), rng)
        batches.append(batch)
        cb = np.repeat(wave_birth, batch.counts) + batch.delays
        cp = np.repeat(wave_ids, batch.counts)
        keep = cb <= horizon
        coming_b.append(cb[~keep])
        coming_p.append(cp[~keep])
        n_new = int(keep.sum())
        if total + n_new > cap:
            capped = True
            break
        g += 1
        wave_birth = cb[keep]
        wave_ids = np.arange(total, total + n_new, dtype=np.int64)
        births.append(wave_birth)
        parents.append(cp[keep])
        gens.append(np.full(n_new, g, dtype=np.int32))
        total += n_new
    birth = np.concatenate(births)
    parent = np.concatenate(parents)
    generation = np.concatenate(gens)
    samples = SampleBatch.concat(batches)
    if capped:
        # individuals of the last wave have no drawn sample; drop them
        n = len(samples)
        birth, parent, generation = birth[:n], parent[:n], generation[:n]
    order = np.argsort(birth, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    birth = birth[order]
    parent = parent[order]
    parent = np.where(parent >= 0, rank[np.maximum(parent, 0)], -1)
    cb = np.concatenate(coming_b)
    cpar = rank[np.concatenate(coming_p)] if len(cb) else np.zeros(0, dtype=np.int64)
    corder = np.lexsort((cpar, cb))
    rec = PathRecord(birth, parent, generation[order], samples.take(order), cb[corder], cpar[corder],
                     float(horizon), capped, law.is_lattice)
    rec.survival = bool(np.any((birth > horizon - window) & (birth <= horizon)))
    return rec


def _check_t(path: PathRecord, t: float):
    if t > path.horizon:
        raise DomainError(f"t={t} exceeds the path horizon {path.horizon}")


def score(path: PathRecord, char: Characteristic, t: float):
    """Z_t^phi: sum over individuals born by t of phi(sample, t - S(u))."""
    _check_t(path, t)
    if not char.support_nonnegative:
        raise ConfigurationError("score needs a characteristic supported on [0, inf)")
    n = int(np.searchsorted(path.birth, t, side="right"))
    if n == 0:
        return 0.0
    idx = np.arange(n)
    vals = char.values(path.samples.take(idx), t - path.birth[:n], path.lattice)
    total = np.sum(vals)
    return complex(total) if char.complex_valued else float(total)


def births_count(path: PathRecord, t: float) -> int:
    """N(t): number of individuals born by time t."""
    _check_t(path, t)
    return int(np.searchsorted(path.birth, t, side="right"))


def nerman_statistic(path: PathRecord, lam: complex, j: int, t: float) -> complex:
    """(-1)^j sum over the coming generation at t of S(u)^j e^{-lam S(u)}."""
    _check_t(path, t)
    pb, cb = path.children()
    sel = cb[(pb <= t) & (cb > t)]
    val = (-1) ** j * np.sum(sel**j * np.exp(-lam * sel))
    return complex(val)


def biggins_statistic(path: PathRecord, alpha: float, n: int) -> float:
    """Z_n = sum over generation n of e^{-alpha S(u)} (generation must be complete)."""
    sel = path.birth[path.generation == n]
    return float(np.sum(np.exp(-alpha * sel)))


# ---------------------------------------------------------------------------
# aggregated exact fast paths


def simulate_generations(law: GaltonWatson, n_generations: int, rng=None) -> np.ndarray:
    """Generation sizes gen_0..gen_n of a Galton-Watson process (exact, multinomial)."""
    rng = as_generator(rng)
    values = np.array([k for k, _ in law.pmf])
    probs = np.array([p for _, p in law.pmf])
    sizes = np.zeros(n_generations + 1, dtype=np.int64)
    sizes[0] = 1
    for g in range(n_generations):
        counts = rng.multinomial(int(sizes[g]), probs)
        sizes[g + 1] = int(counts @ values)
    return sizes


def simulate_birth_death(law: PoissonLifetime, times: Sequence[float], rng=None) -> np.ndarray:
    """Alive counts at increasing ``times`` for exponential lifetimes (linear birth-death chain)."""
    if not isinstance(law.lifetime, ExponentialLifetime):
        raise ConfigurationError("birth-death fast path needs exponential lifetimes")
    rng = as_generator(rng)
    b, r = law.b, law.lifetime.rate
    out = np.zeros(len(times), dtype=np.int64)
    k, t_prev = 1, 0.0
    for i, t in enumerate(times):
        h = t - t_prev
        if h < 0:
            raise DomainError("times must be increasing")
        if k > 0 and h > 0:
            e = math.exp((b - r) * h)
            p0 = r * (e - 1) / (b * e - r)
            q = b * (e - 1) / (b * e - r)
            s = rng.binomial(k, 1 - p0)
            k = int(s + (rng.negative_binomial(s, 1 - q) if s > 0 else 0))
        out[i] = k
        t_prev = t
    return out


# ---------------------------------------------------------------------------
# renewal means


def renewal_mean_lattice(law: ReproductionLaw, mean_fn: MeanFunction, n_max: int, n_min: int = 0) -> np.ndarray:
    """m_n = E[phi](n) + sum_k mu({k}) m_{n-k} for n = n_min..n_max (exact recursion)."""
    if not law.is_lattice:
        raise DomainError("renewal_mean_lattice needs a lattice law")
    lo = mean_fn.support_lo
    if not math.isfinite(lo):
        raise ConfigurationError("mean function support must be bounded below")
    start = min(n_min, math.floor(lo))
    ns = np.arange(start, n_max + 1)
    f = np.asarray(mean_fn(ns.astype(float)))
    m = np.zeros(len(ns), dtype=f.dtype)
    atoms = list(law.atoms().items())
    for i in range(len(ns)):
        acc = f[i]
        for k, c in atoms:
            if i - k >= 0:
                acc = acc + c * m[i - k]
        m[i] = acc
    return m[n_min - start:]


@dataclass
class RenewalGrid:
    t: np.ndarray
    m: np.ndarray

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x > self.t[-1] + 1e-9):
            raise DomainError("renewal grid evaluated beyond t_max")
        return np.where(x < 0, 0.0, np.interp(x, self.t, self.m))


def _trapezoid_renewal(g, forcing, dt):
    """Solve y_i = forcing_i + dt * trapezoid of sum_j g_j y_{i-j} (implicit in y_i)."""
    n = len(forcing)
    y = np.zeros(n, dtype=np.result_type(forcing, g))
    denom = 1.0 - 0.5 * dt * g[0]
    for i in range(n):
        acc = forcing[i]
        if i >= 1:
            acc = acc + dt * (0.5 * g[i] * y[0] + np.dot(g[1:i], y[i - 1:0:-1]))
        y[i] = acc / denom
    return y


def renewal_mean_grid(law: ReproductionLaw, mean_fn: MeanFunction, t_max: float, dt: float) -> RenewalGrid:
    """m = E[phi] + mu * m on [0, t_max] by trapezoid discretization (O(dt) near jumps)."""
    if law.is_lattice:
        raise DomainError("renewal_mean_grid needs a non-lattice law")
    if mean_fn.support_lo < 0:
        raise ConfigurationError("grid renewal solver needs E[phi] supported on [0, inf)")
    t = np.arange(0.0, t_max + 0.5 * dt, dt)
    g = law.intensity_density(t)
    f = np.asarray(mean_fn(t))
    return RenewalGrid(t, _trapezoid_renewal(g, f, dt))


class Remainder:
    """h(t) = m_t - (principal terms q(t)); exact -q(t) for t < 0, tabulated on [0, t_max]."""

    def __init__(self, q, t, values, lattice: bool):
        self.q = q
        self.t = t
        self.values = values
        self.lattice = lattice
        self.t_max = float(t[-1])

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x > self.t_max + 1e-9):
            raise DomainError("remainder evaluated beyond its tabulated range")
        out = np.zeros(x.shape, dtype=complex)
        neg = x < 0
        if np.any(neg):
            out[neg] = -self.q(x[neg])
        pos = ~neg
        if np.any(pos):
            if self.lattice:
                out[pos] = self.values[np.floor(x[pos]).astype(np.int64)]
            else:
                out[pos] = (np.interp(x[pos], self.t, self.values.real)
                            + 1j * np.interp(x[pos], self.t, self.values.imag))
        return out


def _principal(roots, a):
    def q(t):
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape, dtype=complex)
        for r in roots:
            out += np.exp(r.lam * t) * sum(a[r][l] * t**l for l in range(r.multiplicity))
        return out
    return q


def remainder_lattice(law: ReproductionLaw, mean_fn: MeanFunction, roots, a: Mapping, n_max: int) -> Remainder:
    """Solve h = E[phi] + mu * h on n >= 0 with h = -q below 0 (no cancellation)."""
    if mean_fn.support_lo < 0:
        raise ConfigurationError("remainder needs E[phi] supported on [0, inf)")
    q = _principal(roots, a)
    atoms = list(law.atoms().items())
    kmax = max(k for k, _ in atoms)
    hist = -q(np.arange(-kmax, 0, dtype=float))
    f = np.asarray(mean_fn(np.arange(0, n_max + 1, dtype=float)), dtype=complex)
    h = np.concatenate((hist, np.zeros(n_max + 1, dtype=complex)))
    for n in range(n_max + 1):
        i = n + kmax
        acc = f[n]
        for k, c in atoms:
            acc += c * h[i - k]
        h[i] = acc
    return Remainder(q, np.arange(0, n_max + 1, dtype=float), h[kmax:], True)


def _discrete_root(w, tt, lam, iters=50):
    """Root of sum_j w_j e^{-z t_j} = 1 next to ``lam``."""
    z = complex(lam)
    for _ in range(iters):
        e = w * np.exp(-z * tt)
        step = (np.sum(e) - 1.0) / -np.sum(tt * e)
        z -= step
        if abs(step) < 1e-15 * max(1.0, abs(z)):
            break
    return z


def _convolution_renewal(w, forcing):
    """y_i = forcing_i + sum_{j<=i} w_j y_{i-j}."""
    n = len(forcing)
    y = np.zeros(n, dtype=complex)
    denom = 1.0 - w[0]
    for i in range(n):
        acc = forcing[i]
        if i >= 1:
            acc = acc + np.dot(w[1:i + 1], y[i - 1::-1])
        y[i] = acc / denom
    return y


def remainder_grid(law: ReproductionLaw, mean_fn: MeanFunction, roots, a: Mapping, t_max: float,
                   dt: float) -> Remainder:
    """Non-lattice remainder on a grid: h = E[phi] + int_0^t g h + tail(t), tail from -q."""
    if mean_fn.support_lo < 0:
        raise ConfigurationError("remainder needs E[phi] supported on [0, inf)")
    q = _principal(roots, a)
    re_min = min((r.lam.real for r in roots), default=1.0)
    t_far = t_max + min(40.0 / max(re_min, 1e-3), 4000.0)
    tt = np.arange(0.0, t_far + 0.5 * dt, dt)
    g = law.intensity_density(tt)
    # tail(t) = -sum_l a_l K_l(t), K_l(t) = int_t^inf g(x) e^{lam(t-x)} (t-x)^l dx, by a backward recursion
    tail = np.zeros(len(tt), dtype=complex)
    for r in roots:
        k = r.multiplicity
        decay = np.exp(-r.lam * dt)
        K = np.zeros(k, dtype=complex)
        Ks = np.zeros((len(tt), k), dtype=complex)
        binom = [[math.comb(l, p) * (-dt) ** (l - p) for p in range(l + 1)] for l in range(k)]
        for i in range(len(tt) - 2, -1, -1):
            newK = np.empty(k, dtype=complex)
            for l in range(k):
                slab = 0.5 * dt * ((g[i] if l == 0 else 0.0) + g[i + 1] * decay * (-dt) ** l)
                carried = decay * sum(binom[l][p] * K[p] for p in range(l + 1))
                newK[l] = slab + carried
            K = newK
            Ks[i] = K
        tail -= Ks @ a[r]
    n = int(round(t_max / dt)) + 1
    forcing = np.asarray(mean_fn(tt), dtype=complex) + tail
    w = dt * g.astype(complex)
    w[0] *= 0.5
    # trapezoid as a pure discrete convolution y = F + w * y (end-point half weight moved into F)
    y0 = forcing[0] / (1.0 - w[0])
    forcing[1:] -= 0.5 * w[1:] * y0
    # discretization leaves a trace of each discrete growth mode e^{lam_d t}; remove it via the forcing
    for r in roots:
        if r.multiplicity != 1:
            continue
        lam_d = _discrete_root(w, tt, r.lam)
        kern = np.exp(-lam_d * tt)
        coef = np.sum(forcing * kern) / np.sum(tt * w * kern) * dt
        s_tail = np.zeros(len(tt), dtype=complex)
        step = np.exp(-lam_d * dt)
        for i in range(len(tt) - 2, -1, -1):
            s_tail[i] = step * (w[i + 1] + s_tail[i + 1])
        forcing -= coef * s_tail
    h = _convolution_renewal(w[:n], forcing[:n])
    t = tt[:n]
    return Remainder(q, t, h, False)


# ---------------------------------------------------------------------------
# binary dump


def dump_path(path: PathRecord) -> bytes:
    flags = int(path.capped) | (int(path.survival) << 1) | (int(path.lattice) << 2)
    out = bytearray(DUMP_MAGIC)
    out += struct.pack("<IIdQQ", DUMP_VERSION, flags, path.horizon, len(path), len(path.coming_birth))
    s = path.samples
    for i in range(len(path)):
        par = NO_PARENT if path.parent[i] < 0 else np.uint64(path.parent[i])
        lo, hi = s.offsets[i], s.offsets[i + 1]
        out += struct.pack("<QQdI", i, int(par), float(path.birth[i]), int(hi - lo))
        out += np.asarray(s.delays[lo:hi], dtype="<f8").tobytes()
        out += struct.pack("<d", float(s.lifetimes[i]))
    for b, p in zip(path.coming_birth, path.coming_parent):
        out += struct.pack("<Qd", int(p), float(b))
    return bytes(out)


def load_path(data: bytes) -> PathRecord:
    if data[:8] != DUMP_MAGIC:
        raise ConfigurationError("not a path dump")
    version, flags, horizon, n, nc = struct.unpack_from("<IIdQQ", data, 8)
    if version != DUMP_VERSION:
        raise ConfigurationError(f"unsupported dump version {version}")
    pos = 8 + struct.calcsize("<IIdQQ")
    birth, parent, counts, delays, life = [], [], [], [], []
    for _ in range(n):
        _, par, b, k = struct.unpack_from("<QQdI", data, pos)
        pos += struct.calcsize("<QQdI")
        delays.append(np.frombuffer(data, dtype="<f8", count=k, offset=pos))
        pos += 8 * k
        (lt,) = struct.unpack_from("<d", data, pos)
        pos += 8
        birth.append(b)
        parent.append(-1 if par == int(NO_PARENT) else par)
        counts.append(k)
        life.append(lt)
    cb, cp = [], []
    for _ in range(nc):
        p, b = struct.unpack_from("<Qd", data, pos)
        pos += 16
        cb.append(b)
        cp.append(p)
    parent = np.array(parent, dtype=np.int64)
    generation = np.zeros(n, dtype=np.int32)
    for i in range(n):
        if parent[i] >= 0:
            generation[i] = generation[parent[i]] + 1
    samples = SampleBatch(counts, np.concatenate(delays) if delays else np.zeros(0), life, np.zeros(n))
    return PathRecord(np.array(birth), parent, generation, samples, np.array(cb), np.array(cp, dtype=np.int64),
                      horizon, bool(flags & 1), bool(flags & 4), bool(flags & 2))
