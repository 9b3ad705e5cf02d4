"""Command line entry point: ``cmj analyze | verify | simulate --config FILE``.

Exit codes: 0 pass, 1 test failure, 2 configuration error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, engine, harness
from .spectral import malthusian
from .characteristics import Alive, BornCounter, Characteristic, GenerationCounter, Scaled, Window
from .errors import ConfigurationError, DomainError, InsufficientDataError, NumericalError
from .laws import (EpidemicGamma, ExponentialLifetime, FixedLifetime, Fragmentation, GaltonWatson,
                   PoissonLifetime, ReproductionLaw, UniformLifetime)
from .rng import stream

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

SECTION_ALIASES = {"law": "law", "char": "char", "characteristic": "char", "run": "run", "output": "output"}
ALLOWED = {
    "law": {"kind", "pmf", "a", "b", "r0", "lifetime", "rate", "value", "lo", "hi", "pieces", "concentration"},
    "char": {"kind", "a", "scale"},
    "run": {"horizon", "delta", "replicates", "seed", "cap", "conditioning", "tolerance", "ks_threshold",
            "threads", "fast", "grid"},
    "output": {"directory", "prefix"},
}
LAW_KINDS = ("galton_watson", "epidemic_gamma", "poisson_lifetime", "fragmentation")
CHAR_KINDS = ("alive", "born_counter", "window", "generation_counter")


@dataclass
class RunSettings:
    horizon: float
    delta: float | None = None
    replicates: int = 1000
    seed: int = 0
    cap: int = 10_000_000
    conditioning: bool = True
    tolerance: float = 0.10
    ks_threshold: float = 0.01
    threads: int = 1
    fast: bool = True
    grid: float = 1.0


@dataclass
class ExperimentConfig:
    law: ReproductionLaw
    characteristic: Characteristic
    run: RunSettings
    directory: str = "."
    prefix: str = "cmj"
    echo: dict = field(default_factory=dict)

    def echo_line(self) -> str:
        parts = [f"{sec}.{k}={v}" for sec, kv in self.echo.items() for k, v in kv.items()]
        return f"# cmj {__version__} config: " + "; ".join(parts)


class ConfigErrors(ConfigurationError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


def _line_index(text):
    """(section, key) -> 1-based line number, plus section header lines."""
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            where.setdefault((section, None), no)
            continue
        if section is not None:
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


def _parse_pmf(text):
    pmf = {}
    for item in text.split(","):
        if not item.strip():
            continue
        k, _, p = item.partition(":")
        if not _:
            raise ValueError(f"pmf entry {item.strip()!r} is not value:prob")
        value = int(k.strip())
        pmf[value] = pmf.get(value, 0.0) + float(p.strip())
    if not pmf:
        raise ValueError("empty pmf")
    return pmf


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate the INI experiment description; raise ConfigErrors listing every problem."""
    where = _line_index(text)
    errors = []
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigErrors([f"line {getattr(exc, 'lineno', '?')}: {exc.message if hasattr(exc, 'message') else exc}"])

    sections = {}
    for raw in parser.sections():
        name = SECTION_ALIASES.get(raw.lower())
        if name is None:
            errors.append(f"line {where.get((raw.lower(), None), '?')}: unknown section [{raw}]")
            continue
        sections[name] = (raw.lower(), dict(parser[raw]))

    def line(sec, key=None):
        raw = sections[sec][0] if sec in sections else sec
        return where.get((raw, key), where.get((raw, None), "?"))

    for sec, (raw, kv) in sections.items():
        for key in kv:
            if key not in ALLOWED[sec]:
                errors.append(f"line {line(sec, key)}: unknown key {key!r} in [{raw}]")
    for sec in ("law", "char", "run"):
        if sec not in sections:
            errors.append(f"line ?: missing section [{sec}]")
    if errors:
        raise ConfigErrors(errors)

    def get(sec, key, conv, default=None, required=False, check=None, message=""):
        kv = sections.get(sec, (sec, {}))[1]
        if key not in kv:
            if required:
                errors.append(f"line {line(sec)}: missing required key {sec}.{key}")
            return default
        try:
            value = conv(kv[key])
        except (ValueError, TypeError) as exc:
            errors.append(f"line {line(sec, key)}: {sec}.{key}: {exc}")
            return default
        if check is not None and not check(value):
            errors.append(f"line {line(sec, key)}: {sec}.{key}={kv[key]}: {message}")
            return default
        return value

    law = None
    kind = get("law", "kind", str.strip, required=True)
    if kind is not None and kind not in LAW_KINDS:
        errors.append(f"line {line('law', 'kind')}: unknown law kind {kind!r} (expected one of {', '.join(LAW_KINDS)})")
    elif kind is not None:
        try:
            law = _build_law(kind, get, errors)
        except ConfigurationError as exc:
            errors.append(f"line {line('law', 'kind')}: {exc}")

    char = None
    ckind = get("char", "kind", str.strip, required=True)
    if ckind is not None and ckind not in CHAR_KINDS:
        errors.append(f"line {line('char', 'kind')}: unknown characteristic kind {ckind!r}")
    elif ckind is not None:
        try:
            char = {"alive": Alive, "born_counter": BornCounter, "generation_counter": GenerationCounter}.get(ckind)
            char = char() if char else Window(get("char", "a", float, required=True, check=lambda v: v > 0,
                                                  message="must be positive") or 1.0)
        except ConfigurationError as exc:
            errors.append(f"line {line('char', 'kind')}: {exc}")
        scale = get("char", "scale", float, check=lambda v: v != 0, message="must be nonzero")
        if scale is not None and char is not None:
            char = Scaled(scale, char)

    positive = dict(check=lambda v: v > 0, message="must be positive")
    run = RunSettings(
        horizon=get("run", "horizon", float, required=True, **positive),
        delta=get("run", "delta", float, **positive),
        replicates=get("run", "replicates", int, 1000, check=lambda v: v >= 2, message="need at least 2"),
        seed=get("run", "seed", int, 0, check=lambda v: 0 <= v < 2**64, message="must be a 64-bit unsigned integer"),
        cap=get("run", "cap", int, 10_000_000, **positive),
        conditioning=get("run", "conditioning", _bool, True),
        tolerance=get("run", "tolerance", float, 0.10, **positive),
        ks_threshold=get("run", "ks_threshold", float, 0.01, check=lambda v: 0 < v < 1, message="must lie in (0, 1)"),
        threads=get("run", "threads", int, 1, **positive),
        fast=get("run", "fast", _bool, True),
        grid=get("run", "grid", float, 1.0, **positive),
    )
    if run.horizon is not None and run.delta is not None and run.horizon < run.delta:
        errors.append(f"line {line('run', 'horizon')}: run.horizon={run.horizon} is smaller than run.delta={run.delta}")
    directory = get("output", "directory", str.strip, ".")
    prefix = get("output", "prefix", str.strip, "cmj")
    if errors:
        raise ConfigErrors(errors)
    echo = {sec: dict(sorted(kv.items())) for sec, (_, kv) in sorted(sections.items())}
    return ExperimentConfig(law, char, run, directory, prefix, echo)


def _build_law(kind, get, errors):
    positive = dict(check=lambda v: v > 0, message="must be positive")
    if kind == "galton_watson":
        pmf = get("law", "pmf", _parse_pmf, required=True)
        return GaltonWatson(pmf) if pmf else None
    if kind == "epidemic_gamma":
        a = get("law", "a", float, required=True, **positive)
        b = get("law", "b", float, required=True, **positive)
        r0 = get("law", "r0", float, required=True, check=lambda v: v > 1, message="R0 must exceed 1")
        return EpidemicGamma(a, b, r0) if None not in (a, b, r0) else None
    if kind == "poisson_lifetime":
        b = get("law", "b", float, required=True, **positive)
        lt = get("law", "lifetime", str.strip, "exponential",
                 check=lambda v: v in ("exponential", "fixed", "uniform"), message="expected exponential, fixed or uniform")
        if lt == "exponential":
            life = ExponentialLifetime(get("law", "rate", float, 1.0, **positive) or 1.0)
        elif lt == "fixed":
            life = FixedLifetime(get("law", "value", float, required=True, **positive) or 1.0)
        elif lt == "uniform":
            life = UniformLifetime(get("law", "lo", float, required=True, **positive) or 1.0,
                                   get("law", "hi", float, required=True, **positive) or 2.0)
        else:
            return None
        return PoissonLifetime(b, life) if b is not None else None
    pieces = get("law", "pieces", int, 2, check=lambda v: v >= 2, message="need at least 2 pieces")
    conc = get("law", "concentration", float, 1.0, **positive)
    return Fragmentation(pieces or 2, conc or 1.0)


# ---------------------------------------------------------------------------
# CSV output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return "" if v is None else str(v)


def _write_csv(path: Path, header_lines, columns, rows):
    buf = io.StringIO()
    for h in header_lines:
        buf.write(h + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def _complex_rows(key, value, extra=()):
    value = complex(value)
    return [(f"{key}_re", value.real, *extra), (f"{key}_im", value.imag, *extra)]


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: ExperimentConfig, out: Path) -> int:
    an = harness.analyze(cfg.law, cfg.characteristic, seed=cfg.run.seed)
    prof, co = an.profile, an.coeffs
    rows = [("alpha", prof.alpha, "", "", ""), ("beta", prof.beta, "", "", ""),
            ("lattice", int(prof.lattice), "", "", ""), ("theta", prof.theta, "", "", ""),
            ("root_count", len(prof.roots), "", "", "")]
    for i, r in enumerate(prof.roots):
        rows += _complex_rows(f"root{i}", r.lam, ("", "", ""))
        rows.append((f"root{i}_mult", r.multiplicity, "", "", ""))
        rows.append((f"root{i}_critical_line", int(r.on_critical_line), "", "", ""))
        for l, (bv, av) in enumerate(zip(co.b[r], co.a[r])):
            rows += _complex_rows(f"root{i}_b{l}", bv, ("", "", ""))
            rows += _complex_rows(f"root{i}_a{l}", av, ("", "", ""))
    rows.append(("n_star", co.n_star, "", "", ""))
    for l, (rho, se) in enumerate(zip(co.rho, co.rho_stderr)):
        rows.append((f"rho{l}", rho, se, "", ""))
    rows.append(("sigma2", an.sigma.value, an.sigma.stderr, "", ""))
    rows.append(("sigma2_method", an.sigma.method, "", "", ""))
    _write_csv(out / f"{cfg.prefix}_analyze.csv", [cfg.echo_line()], ["key", "value", "stderr", "tolerance", "pass"],
               rows)
    return EXIT_PASS


def cmd_verify(cfg: ExperimentConfig, out: Path, threads: int | None = None) -> int:
    run = cfg.run
    an = harness.analyze(cfg.law, cfg.characteristic, seed=run.seed)
    delta = run.delta if run.delta is not None else harness.default_delta(an.profile.alpha)
    if run.horizon < delta:
        raise ConfigErrors([f"line ?: run.horizon={run.horizon} is smaller than the default delta={delta:.6g}"])
    samples, report = harness.run_experiment(
        cfg.law, cfg.characteristic, run.horizon, run.replicates, run.seed, conditioning=run.conditioning,
        delta=delta, tolerance=run.tolerance, ks_threshold=run.ks_threshold, workers=threads or run.threads,
        fast=run.fast, cap=run.cap, analysis=an)
    header = [cfg.echo_line()]
    _write_csv(out / f"{cfg.prefix}_samples.csv", header,
               ["replicate", "survival", "n_t", "w_hat", "raw", "normalized"],
               [(s.replicate, s.survival, s.n_t, s.w_hat, s.raw, s.normalized) for s in samples])
    _write_csv(out / f"{cfg.prefix}_report.csv", header, ["key", "value", "stderr", "tolerance", "pass"],
               harness.report_rows(report))
    for note in report.notes:
        print(note)
    print(f"verify: {'PASS' if report.passed else 'FAIL'}")
    return EXIT_PASS if report.passed else EXIT_FAIL


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    run = cfg.run
    law = cfg.law
    alpha = malthusian(law)
    path = engine.simulate(law, run.horizon, run.cap, stream(run.seed, 0))
    header = [cfg.echo_line()]
    if path.capped:
        header.append(f"# capped: population exceeded cap={run.cap}; data beyond the cap time is partial")
    grid = np.arange(0.0, run.horizon + 1e-9, run.grid)
    rows = []
    for t in grid:
        rows.append((float(t), engine.births_count(path, t), float(np.real(engine.score(path, cfg.characteristic, t))),
                     float(engine.nerman_statistic(path, alpha, 0, t).real)))
    _write_csv(out / f"{cfg.prefix}_trajectory.csv", header, ["t", "n_t", "z_t", "w_t"], rows)
    (out / f"{cfg.prefix}_path.bin").write_bytes(engine.dump_path(path))
    return EXIT_PASS


def build_parser():
    p = argparse.ArgumentParser(prog="cmj", description="Supercritical CMJ branching processes: analysis and CLT checks")
    p.add_argument("--version", action="version", version=f"cmj {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("analyze", "spectral profile, coefficients and sigma^2"),
                           ("verify", "Monte Carlo check of the fluctuation CLT"),
                           ("simulate", "one path: trajectory CSV and binary dump")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path, default=None)
        if name == "verify":
            sp.add_argument("--threads", type=int, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        text = args.config.read_text(encoding="utf-8")
        cfg = parse_config(text)
        env_seed = os.environ.get("CMJ_SEED")
        if env_seed is not None:
            try:
                seed = int(env_seed)
                if not 0 <= seed < 2**64:
                    raise ValueError
            except ValueError:
                raise ConfigErrors([f"CMJ_SEED={env_seed!r} is not a 64-bit unsigned integer"])
            cfg.run.seed = seed
            cfg.echo.setdefault("run", {})["seed"] = str(seed)
        out = args.out if args.out is not None else Path(cfg.directory)
        if args.command == "analyze":
            return cmd_analyze(cfg, out)
        if args.command == "verify":
            if args.threads is not None and args.threads < 1:
                raise ConfigErrors(["--threads must be positive"])
            return cmd_verify(cfg, out, args.threads)
        return cmd_simulate(cfg, out)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigurationError as exc:
        print(f"config error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InsufficientDataError as exc:
        print(f"test failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (NumericalError, DomainError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
