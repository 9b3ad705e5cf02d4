"""Monte Carlo checks of the fluctuation limit theorems.

For each replicate the population is grown to T + delta, the random principal
part H(T) is built from martingale proxies at T + delta, and the fluctuation
raw = Z_T - H(T) is normalized by a_T e^{alpha T / 2}. The report compares the
normalized sample with the predicted mixture sigma sqrt(W / beta) N(0, 1).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import engine, spectral
from .characteristics import (Alive, BornCounter, Characteristic, Deterministic, GenerationCounter,
                              Scaled, Window)
from .errors import ConfigurationError, DegenerateCase, DomainError, InsufficientDataError
from .laws import ExponentialLifetime, GaltonWatson, PoissonLifetime, ReproductionLaw, SampleBatch
from .rng import stream

BOOTSTRAP_STREAM = 2**31 - 1


@dataclass
class FluctuationSample:
    replicate: int
    raw: float
    w_hat: float
    n_t: int
    survival: bool
    normalized: float
    capped: bool = False
    lag_raw: dict = field(default_factory=dict)


@dataclass
class TestReport:
    replicates: int
    used: int
    dropped_capped: int
    sigma2: float
    a_t: float
    variance_ratio: float
    variance_ci: tuple
    empirical_sigma2: float
    scaled_variance: float
    scaled_variance_stderr: float
    scaled_variance_target: float
    ks_stat: float
    ks_p: float
    nt_variance: float
    nt_ks_p: float
    mean_abs: float
    tolerance: float
    ks_threshold: float
    passed: bool
    degenerate: bool = False
    notes: list = field(default_factory=list)
    config: dict = field(default_factory=dict)


def default_delta(alpha: float) -> float:
    """Smallest delta with alpha delta >= 2 log 10."""
    return 2 * math.log(10) / alpha


def normalization(sigma: float, rho_nstar: float, n_star: int, t: float) -> float:
    """a_t = sqrt(sigma^2 + rho_n^2 t^{2n+1} / (2n+1))."""
    extra = 0.0 if n_star < 0 else rho_nstar**2 * t ** (2 * n_star + 1) / (2 * n_star + 1)
    val = sigma**2 + extra
    if val <= 0:
        raise DegenerateCase("sigma and rho vanish: Z = H + r almost surely")
    return math.sqrt(val)


def estimate_W(path: engine.PathRecord, alpha: float, t: float, delta: float) -> float:
    if t + delta > path.horizon:
        raise DomainError("horizon too short for the martingale proxy")
    return float(engine.nerman_statistic(path, alpha, 0, t + delta).real)


def _H_from_proxies(roots_principal, roots_boundary, a, t, proxy):
    """H(t) given proxy(lam, m) ~ W^{(m)}(lam)."""
    total = 0j
    for r in roots_principal:
        e = np.exp(r.lam * t)
        for l in range(r.multiplicity):
            for j in range(l + 1):
                total += e * a[r][l] * math.comb(l, j) * t**j * proxy(r.lam, l - j)
    for r in roots_boundary:
        total += np.exp(r.lam * t) * sum(a[r][l] * t**l for l in range(r.multiplicity))
    if abs(total.imag) > 1e-8 * max(1.0, abs(total)):
        raise spectral.NumericalError("principal part has a non-negligible imaginary part")
    return total.real


def build_H(path: engine.PathRecord, profile: spectral.SpectralProfile, coeffs: spectral.CoefficientSet,
            t: float, delta: float) -> float:
    """Random principal part H(t) with martingale proxies taken at t + delta."""
    proxy = lambda lam, m: engine.nerman_statistic(path, lam, m, t + delta)
    return _H_from_proxies(profile.principal, profile.boundary, coeffs.a, t, proxy)


# ---------------------------------------------------------------------------
# planning


@dataclass
class _Plan:
    law: ReproductionLaw
    char: Characteristic
    alpha: float
    beta: float
    lattice: bool
    principal: tuple
    boundary: tuple
    a: dict
    T: float
    delta: float
    a_T: float
    cap: int
    mode: str
    lags: tuple
    a_alpha: complex


def _plain(char):
    while isinstance(char, Scaled):
        char = char.inner
    return char


def _pick_mode(law, char, fast):
    base = _plain(char)
    if fast and isinstance(law, GaltonWatson) and isinstance(base, (Alive, BornCounter, Window,
                                                                    GenerationCounter, Deterministic)):
        return "generations"
    if (fast and isinstance(law, PoissonLifetime) and isinstance(law.lifetime, ExponentialLifetime)
            and isinstance(base, Alive)):
        return "birth-death"
    return "paths"


@dataclass
class Analysis:
    profile: spectral.SpectralProfile
    coeffs: spectral.CoefficientSet
    sigma: spectral.SigmaResult
    remainder: object
    mean_fn: object


def analyze(law: ReproductionLaw, char: Characteristic, sigma_method: str = "auto", seed: int = 0,
            n_samples: int = 100_000, remainder_span: float | None = None, dt: float = 0.01) -> Analysis:
    """Spectral profile, coefficients, remainder and sigma^2 for (law, char)."""
    profile = spectral.spectral_profile(law)
    mean_fn = char.mean_function(law)
    coeffs = spectral.coefficient_set(law, profile, mean_fn, n_samples=n_samples, seed=seed)
    remainder = None
    if coeffs.n_star >= 0:
        return Analysis(profile, coeffs, spectral.SigmaResult(0.0, 0.0, "irrelevant (critical-line roots)"),
                        None, mean_fn)
    if profile.lattice:
        span = remainder_span or max(200.0, 80.0 / profile.alpha)
        remainder = engine.remainder_lattice(law, mean_fn, profile.principal, coeffs.a, int(span))
        sigma = spectral.sigma_squared_direct(law, char, remainder, profile.alpha, n_samples=n_samples, seed=seed)
        return Analysis(profile, coeffs, sigma, remainder, mean_fn)
    method = sigma_method
    if method == "auto":
        method = "contour" if spectral._closed_form_inner_variance(law, _plain(char)) is not None else "direct"
    if method == "contour":
        sigma = spectral.sigma_squared_contour(law, char, profile.alpha, mean_fn, seed=seed)
    else:
        span = remainder_span or 25.0 / profile.alpha
        remainder = engine.remainder_grid(law, mean_fn, profile.principal, coeffs.a, span, dt)
        sigma = spectral.sigma_squared_direct(law, char, remainder, profile.alpha, n_samples=n_samples,
                                              seed=seed, dx=max(dt, 0.02))
    return Analysis(profile, coeffs, sigma, remainder, mean_fn)


def _remainder_at(an: Analysis, law, t):
    """r(t) = m_t - all principal terms (Lambda and the critical line)."""
    if an.remainder is None:
        span = max(t + 5, 50)
        if an.profile.lattice:
            rem = engine.remainder_lattice(law, an.mean_fn, an.profile.principal, an.coeffs.a, int(span))
        else:
            rem = engine.remainder_grid(law, an.mean_fn, an.profile.principal, an.coeffs.a, span, 0.005)
    else:
        rem = an.remainder
    h = complex(np.asarray(rem(np.array([t])))[0])
    for r in an.profile.boundary:
        h -= np.exp(r.lam * t) * sum(an.coeffs.a[r][l] * t**l for l in range(r.multiplicity))
    return h.real


# ---------------------------------------------------------------------------
# replicates


def _char_on_generation(char, age):
    dummy = SampleBatch([0], [], [math.inf], [0.0])
    return float(np.real(char.values(dummy, age, lattice=True))[0])


def _replicate(plan: _Plan, seed: int, index: int) -> FluctuationSample:
    rng = stream(seed, index)
    T, delta, alpha = plan.T, plan.delta, plan.alpha
    lags = (0.0,) + tuple(plan.lags)
    raws = {}
    if plan.mode == "generations":
        top = int(math.floor(T + delta)) + 1
        sizes = engine.simulate_generations(plan.law, top, rng)
        g_next = int(math.floor(T + delta)) + 1
        proxy = lambda lam, m: complex((-1) ** m * sizes[g_next] * g_next**m * np.exp(-lam * g_next))
        w_hat = float(proxy(alpha, 0).real)
        for s in lags:
            t = T - s
            nt = int(math.floor(t))
            ages = nt - np.arange(nt + 1)
            phi = np.array([_char_on_generation(plan.char, float(a)) for a in ages])
            z = float(np.dot(sizes[: nt + 1], phi))
            raws[s] = z - _H_from_proxies(plan.principal, plan.boundary, plan.a, t, proxy)
        n_t = int(sizes[: int(math.floor(T)) + 1].sum())
        survival = bool(sizes[int(math.floor(T + delta))] > 0)
        capped = False
    elif plan.mode == "birth-death":
        times = sorted({T - s for s in lags} | {T + delta})
        counts = dict(zip(times, engine.simulate_birth_death(plan.law, times, rng)))
        scale = plan.char.c if isinstance(plan.char, Scaled) else 1.0
        w_hat = float(counts[T + delta] * math.exp(-alpha * (T + delta)) / plan.a_alpha.real)
        for s in lags:
            t = T - s
            raws[s] = scale * counts[t] - plan.a_alpha.real * math.exp(alpha * t) * w_hat * scale
        n_t = -1
        survival = bool(counts[T + delta] > 0)
        capped = False
    else:
        path = engine.simulate(plan.law, T + delta, plan.cap, rng)
        capped = path.capped
        proxy = lambda lam, m: engine.nerman_statistic(path, lam, m, T + delta)
        w_hat = float(proxy(alpha, 0).real)
        for s in lags:
            t = T - s
            raws[s] = float(np.real(engine.score(path, plan.char, t))) - _H_from_proxies(
                plan.principal, plan.boundary, plan.a, t, proxy)
        n_t = engine.births_count(path, T)
        survival = path.survival
    raw = raws[0.0]
    normalized = raw * math.exp(-alpha * T / 2) / plan.a_T if plan.a_T > 0 else 0.0
    return FluctuationSample(index, raw, w_hat, n_t, survival, normalized, capped,
                             {s: v for s, v in raws.items() if s != 0.0})


def _run_chunk(args):
    plan, seed, indices = args
    return [_replicate(plan, seed, i) for i in indices]


def _collect(plan, seed, replicates, workers):
    if workers <= 1:
        return [_replicate(plan, seed, i) for i in range(replicates)]
    chunks = [list(range(i, replicates, workers)) for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(plan, seed, c) for c in chunks]))
    out = [s for part in parts for s in part]
    out.sort(key=lambda s: s.replicate)
    return out


def make_plan(law, char, T, delta=None, analysis: Analysis | None = None, cap=10_000_000, fast=True,
              lags: Sequence[float] = ()):
    an = analysis or analyze(law, char)
    prof, co = an.profile, an.coeffs
    if delta is None:
        delta = default_delta(prof.alpha)
    if delta <= 0:
        raise ConfigurationError("delta must be positive")
    rho_n = co.rho[co.n_star] if co.n_star >= 0 else 0.0
    try:
        a_T = normalization(math.sqrt(max(an.sigma.value, 0.0)), rho_n, co.n_star, T)
    except DegenerateCase:
        a_T = 0.0
    a_alpha = co.a[prof.alpha_root][0]
    plan = _Plan(law, char, prof.alpha, prof.beta, prof.lattice, prof.principal, prof.boundary, co.a,
                 float(T), float(delta), a_T, cap, _pick_mode(law, char, fast), tuple(lags), a_alpha)
    return plan, an


def _bootstrap_ci(x, seed, n_boot=1000):
    rng = stream(seed, BOOTSTRAP_STREAM)
    idx = rng.integers(0, len(x), size=(n_boot, len(x)))
    means = np.mean(x[idx], axis=1)
    return float(np.quantile(means, 0.025)), float(np.quantile(means, 0.975))


def run_experiment(law: ReproductionLaw, char: Characteristic, T: float, replicates: int, seed: int,
                   conditioning: bool = True, delta: float | None = None, tolerance: float = 0.10,
                   ks_threshold: float = 0.01, workers: int = 1, fast: bool = True, cap: int = 10_000_000,
                   analysis: Analysis | None = None, lags: Sequence[float] = ()):
    """Simulate ``replicates`` populations and test the normalized fluctuation."""
    plan, an = make_plan(law, char, T, delta, analysis, cap, fast, lags)
    samples = _collect(plan, seed, replicates, workers)
    config = {"law": repr(law), "characteristic": repr(char), "T": T, "delta": plan.delta,
              "replicates": replicates, "seed": seed, "conditioning": conditioning, "mode": plan.mode}
    capped = sum(s.capped for s in samples)
    kept = [s for s in samples if not s.capped]
    if plan.a_T == 0.0:
        r_T = _remainder_at(an, law, T)
        dev = max(abs(s.raw - r_T) for s in kept) if kept else 0.0
        ok = dev <= 1e-9 * max(1.0, abs(r_T))
        report = TestReport(replicates, len(kept), capped, 0.0, 0.0, float("nan"), (float("nan"),) * 2,
                            float("nan"), 0.0, 0.0, 0.0, float("nan"), float("nan"), float("nan"),
                            float("nan"), 0.0, tolerance, ks_threshold, ok, True,
                            [f"degenerate case (i): Z=H+r, r(T)={r_T!r}, max deviation {dev:.3g}"], config)
        return samples, report
    pool = [s for s in kept if s.w_hat > 0 and (s.survival or not conditioning)]
    if not pool:
        raise InsufficientDataError("no surviving replicates")
    w = np.array([s.w_hat for s in pool])
    x = np.array([s.normalized for s in pool]) * np.sqrt(plan.beta / w)
    ratio = float(np.mean(x**2))
    ci = _bootstrap_ci(x**2, seed)
    ks = stats.kstest(x, "norm")
    scaled = np.array([s.raw for s in kept]) * math.exp(-plan.alpha * T / 2)
    sv = float(np.var(scaled, ddof=1))
    sv_se = float(np.std((scaled - scaled.mean()) ** 2, ddof=1) / math.sqrt(len(scaled)))
    c_alpha = 1 / (1 - math.exp(-plan.alpha)) if plan.lattice else 1 / plan.alpha
    with_n = [s for s in pool if s.n_t > 0]
    notes = []
    if with_n:
        y = np.array([s.raw * math.sqrt(c_alpha / s.n_t) / plan.a_T for s in with_n])
        nt_var = float(np.mean(y**2))
        nt_p = float(stats.kstest(y, "norm").pvalue)
    else:
        nt_var, nt_p = float("nan"), float("nan")
        notes.append("N(T) not tracked on this simulation path; statistic (c) unavailable")
    passed = abs(ratio - 1) <= tolerance and ks.pvalue > ks_threshold
    report = TestReport(
        replicates=replicates, used=len(pool), dropped_capped=capped, sigma2=float(an.sigma.value),
        a_t=plan.a_T, variance_ratio=ratio, variance_ci=ci, empirical_sigma2=ratio * plan.a_T**2,
        scaled_variance=sv, scaled_variance_stderr=sv_se, scaled_variance_target=plan.a_T**2 / plan.beta,
        ks_stat=float(ks.statistic), ks_p=float(ks.pvalue), nt_variance=nt_var, nt_ks_p=nt_p,
        mean_abs=float(np.mean(np.abs([s.normalized for s in pool]))), tolerance=tolerance,
        ks_threshold=ks_threshold, passed=bool(passed), notes=notes, config=config)
    return samples, report


def two_lag_covariance(law: ReproductionLaw, char: Characteristic, T: float, s: float, u: float,
                       replicates: int, seed: int, delta: float | None = None, independent: bool = False,
                       analysis: Analysis | None = None, n_samples: int = 100_000) -> dict:
    """Empirical covariance of the normalized fluctuations at T - s and T - u against the integral formula."""
    an = analysis or analyze(law, char)
    if an.coeffs.n_star >= 0:
        raise ConfigurationError("two-lag covariance needs n_star = -1")
    lags = tuple(v for v in {s, u} if v != 0.0)
    samples, report = run_experiment(law, char, T, replicates, seed, delta=delta, analysis=an, lags=lags)
    if independent:
        other, _ = run_experiment(law, char, T, replicates, seed + 1, delta=delta, analysis=an, lags=lags)
    else:
        other = samples
    alpha, beta = an.profile.alpha, an.profile.beta

    def series(smp, lag):
        vals = []
        for q in smp:
            if q.capped or q.w_hat <= 0 or not q.survival:
                vals.append(np.nan)
                continue
            raw = q.raw if lag == 0.0 else q.lag_raw[lag]
            vals.append(raw * math.exp(-alpha * T / 2) * math.sqrt(beta / q.w_hat))
        return np.array(vals)

    xa, xb = series(samples, s), series(other, u)
    ok = ~(np.isnan(xa) | np.isnan(xb))
    xa, xb = xa[ok], xb[ok]
    prod = (xa - xa.mean()) * (xb - xb.mean())
    emp = float(prod.sum() / (len(prod) - 1))
    se = float(prod.std(ddof=1) / math.sqrt(len(prod)))
    rem = an.remainder
    if rem is None:
        rem = engine.remainder_grid(law, an.mean_fn, an.profile.principal, an.coeffs.a, 25 / alpha, 0.01)
    pred = spectral.covariance_integral(law, char, rem, alpha, s, u, n_samples=n_samples, seed=seed)
    predicted = 0.0 if independent else pred.value
    return {"empirical": emp, "stderr": se, "predicted": predicted, "predicted_stderr": pred.stderr,
            "ratio": emp / predicted if predicted else float("nan"), "pairs": int(len(prod))}


def report_rows(report: TestReport) -> list[tuple]:
    """(key, value, stderr, tolerance, pass) rows for the report CSV."""
    rows = [
        ("replicates", report.replicates, "", "", ""),
        ("used", report.used, "", "", ""),
        ("dropped_capped", report.dropped_capped, "", "", ""),
        ("sigma2", report.sigma2, "", "", ""),
        ("a_t", report.a_t, "", "", ""),
    ]
    if report.degenerate:
        rows.append(("degenerate_case_i", 1, "", "", int(report.passed)))
        for n in report.notes:
            rows.append(("note", n, "", "", ""))
        return rows
    var_ok = abs(report.variance_ratio - 1) <= report.tolerance
    rows += [
        ("variance_ratio", report.variance_ratio, (report.variance_ci[1] - report.variance_ci[0]) / 3.92,
         report.tolerance, int(var_ok)),
        ("variance_ci_low", report.variance_ci[0], "", "", ""),
        ("variance_ci_high", report.variance_ci[1], "", "", ""),
        ("empirical_sigma2", report.empirical_sigma2, "", "", ""),
        ("scaled_variance", report.scaled_variance, report.scaled_variance_stderr, "", ""),
        ("scaled_variance_target", report.scaled_variance_target, "", "", ""),
        ("ks_stat", report.ks_stat, "", "", ""),
        ("ks_p", report.ks_p, "", report.ks_threshold, int(report.ks_p > report.ks_threshold)),
        ("nt_variance_ratio", report.nt_variance, "", "", ""),
        ("nt_ks_p", report.nt_ks_p, "", "", ""),
        ("mean_abs", report.mean_abs, "", "", ""),
        ("passed", int(report.passed), "", "", int(report.passed)),
    ]
    for n in report.notes:
        rows.append(("note", n, "", "", ""))
    return rows
