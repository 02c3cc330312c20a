"""Command-line front end for the assembly studies.

Subcommands
-----------
``run <config>``
    Parse a key=value config (flags override), run the requested study and
    write its CSV tables plus an echo of the effective configuration.
``assemble <config>``
    Assemble the study's matrices on every ladder level and emit them in
    MatrixMarket format, without solving anything.
``report <dir>``
    Merge the CSV tables found under a directory, grouped by schema, into
    ``merged_*.csv`` files with a leading source column.

Configs are flat ``key = value`` lines; the same keys work as ``--key value``
flags and flags take precedence.  Exit codes: 0 success, 2 invalid
configuration, 3 numerical failure.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

from .assembly import (
    FormKind,
    assemble,
    assemble_divergence,
    make_discretization,
    save_matrix_market,
    stokes_subgrid_spaces,
)
from .geometry import BUILTIN_NAMES
from .surrogate import (
    ConstantSampling,
    MeshDependentSampling,
    SurrogateMode,
    build_surrogate_divergence,
    build_surrogate_matrix,
)
from .studies import (
    REPORT_CSV_HEADER,
    EIGEN_CSV_HEADER,
    ERRORS_CSV_HEADER,
    ERRORS_CSV_HEADER_H2,
    FIELDS_CSV_HEADER,
    TIMING_CSV_HEADER,
    resolve_domain,
    run_biharmonic_study,
    run_cavity_flow,
    run_eigen_study,
    run_poisson_study,
    run_stokes_study,
    timing_harness,
    write_csv,
    write_eigen_csv,
    write_errors_csv,
    write_fields_csv,
    write_timing_csv,
)

THREADS_ENV = "SURRIGA_THREADS"

PROBLEMS = ("poisson", "eigen", "biharmonic", "stokes", "bench")

_DEFAULTS = {
    "poisson": dict(geometry="coons_rational", p=2, q=3,
                    ladder=(16, 32, 64, 128), strategy="M=5"),
    "eigen": dict(geometry="quarter_annulus", p=2, q=5,
                  ladder=(16, 32, 64), strategy="M=5"),
    "biharmonic": dict(geometry="quarter_annulus", p=3, q=3,
                       ladder=(16, 32, 64, 128), strategy="M=5"),
    "stokes": dict(geometry="coons_cubic", p=2, q=3,
                   ladder=(8, 16, 32), strategy="M=5"),
    "bench": dict(geometry="unit_square", p=2, q=5,
                  ladder=(32, 64, 128), strategy="c=3.0,beta=0.5"),
}

_KEYS = ("problem", "geometry", "p", "q", "mode", "strategy", "M", "c",
         "beta", "ladder", "outdir", "threads", "seed")


class ConfigError(ValueError):
    """Invalid configuration; one located message per line."""


@dataclass(frozen=True)
class StudyConfig:
    """Fully validated description of one study invocation."""

    problem: str
    geometry: str
    p: int
    q: int
    mode: SurrogateMode | None
    strategy: object
    ladder: tuple
    outdir: str = "."
    threads: int = 1
    seed: int = 0

    def echo_lines(self) -> list:
        """Canonical key = value rendering of the effective config."""
        if isinstance(self.strategy, ConstantSampling):
            strat = f"M={self.strategy.M}"
        else:
            strat = f"c={self.strategy.c!r},beta={self.strategy.beta!r}"
        mode = "default" if self.mode is None else self.mode.value
        return [
            f"problem = {self.problem}",
            f"geometry = {self.geometry}",
            f"p = {self.p}",
            f"q = {self.q}",
            f"mode = {mode}",
            f"strategy = {strat}",
            f"ladder = {','.join(str(s) for s in self.ladder)}",
            f"outdir = {self.outdir}",
            f"threads = {self.threads}",
            f"seed = {self.seed}",
        ]


def _read_config_file(path: str):
    """Yield ``(location, key, value)`` triples from a key=value file."""
    out, errors = [], []
    try:
        lines = open(path).read().splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    for i, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"{path}:{i}: expected key = value, got {raw.strip()!r}")
            continue
        key, value = line.split("=", 1)
        out.append((f"{path}:{i}", key.strip(), value.strip()))
    if errors:
        raise ConfigError("\n".join(errors))
    return out


def _read_flags(flags):
    """Yield ``(location, key, value)`` triples from --key value pairs."""
    out = []
    errors = []
    toks = list(flags)
    i = 0
    while i < len(toks):
        tok = toks[i]
        if not tok.startswith("--"):
            errors.append(f"{tok}: expected a --key flag")
            i += 1
            continue
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
            i += 1
        else:
            key = body
            if i + 1 >= len(toks):
                errors.append(f"--{key}: missing value")
                i += 1
                continue
            value = toks[i + 1]
            i += 2
        out.append((f"--{key}", key, value))
    if errors:
        raise ConfigError("\n".join(errors))
    return out


def _parse_int(loc: str, key: str, value: str, errors: list):
    try:
        return int(value)
    except ValueError:
        errors.append(f"{loc}: {key} expects an integer, got {value!r}")
        return None


def _parse_float(loc: str, key: str, value: str, errors: list):
    try:
        return float(value)
    except ValueError:
        errors.append(f"{loc}: {key} expects a number, got {value!r}")
        return None


def _parse_strategy(loc: str, value: str, errors: list):
    """Parse ``M=<int>`` or ``c=<real>,beta=<real>`` strategy syntax."""
    parts = dict()
    for piece in value.split(","):
        if "=" not in piece:
            errors.append(f"{loc}: strategy expects M=<int> or "
                          f"c=<real>,beta=<real>, got {value!r}")
            return None
        k, v = piece.split("=", 1)
        parts[k.strip()] = v.strip()
    if set(parts) == {"M"}:
        M = _parse_int(loc, "M", parts["M"], errors)
        if M is None:
            return None
        if M < 1:
            errors.append(f"{loc}: M ≥ 1")
            return None
        return ConstantSampling(M)
    if set(parts) <= {"c", "beta"} and "c" in parts:
        c = _parse_float(loc, "c", parts["c"], errors)
        beta = _parse_float(loc, "beta", parts.get("beta", "0.5"), errors)
        if c is None or beta is None:
            return None
        if c <= 0.0:
            errors.append(f"{loc}: c must be positive")
            return None
        if beta < 0.0:
            errors.append(f"{loc}: beta must be nonnegative")
            return None
        return MeshDependentSampling(c, beta)
    errors.append(f"{loc}: strategy expects M=<int> or c=<real>,beta=<real>, "
                  f"got {value!r}")
    return None


def _parse_ladder(loc: str, value: str, errors: list):
    try:
        levels = tuple(int(tok) for tok in value.split(",") if tok.strip())
    except ValueError:
        errors.append(f"{loc}: ladder expects comma-separated integers, "
                      f"got {value!r}")
        return None
    if not levels or any(s < 1 for s in levels):
        errors.append(f"{loc}: ladder levels must be positive")
        return None
    if any(b <= a for a, b in zip(levels, levels[1:])):
        errors.append(f"{loc}: ladder levels must be strictly increasing")
        return None
    return levels


def parse_config(path: str | None = None, flags=(), env=None) -> StudyConfig:
    """Build a validated study configuration from a file and/or flags.

    Parameters
    ----------
    path : str or None
        Optional ``key = value`` config file.
    flags : sequence of str
        Command-line ``--key value`` or ``--key=value`` tokens; these
        override file entries.
    env : mapping, optional
        Environment, consulted for the thread-count fallback; defaults to
        ``os.environ``.

    Returns
    -------
    StudyConfig

    Raises
    ------
    ConfigError
        With one located message per problem found.
    """
    env = os.environ if env is None else env
    entries = []
    if path is not None:
        entries += _read_config_file(path)
    entries += _read_flags(flags)

    errors: list = []
    seen: dict = {}
    for loc, key, value in entries:
        if key not in _KEYS:
            errors.append(f"{loc}: unknown key {key!r}")
            continue
        seen[key] = (loc, value)

    problem = "poisson"
    if "problem" in seen:
        loc, value = seen["problem"]
        if value not in PROBLEMS:
            errors.append(f"{loc}: problem must be one of "
                          f"{', '.join(PROBLEMS)}; got {value!r}")
        else:
            problem = value
    defaults = _DEFAULTS[problem]

    def _int_key(key, default, minimum, what):
        if key not in seen:
            return default
        loc, value = seen[key]
        got = _parse_int(loc, key, value, errors)
        if got is None:
            return default
        if got < minimum:
            errors.append(f"{loc}: {what}")
            return default
        return got

    p = _int_key("p", defaults["p"], 1, "p ≥ 1")
    q = _int_key("q", defaults["q"], 1, "q ≥ 1")
    threads_default = 1
    if THREADS_ENV in env:
        try:
            threads_default = max(1, int(env[THREADS_ENV]))
        except ValueError:
            errors.append(f"{THREADS_ENV}: expects an integer, "
                          f"got {env[THREADS_ENV]!r}")
    if problem == "bench" and "threads" not in seen:
        # benchmark timings are single-core comparisons
        threads_default = 1
    threads = _int_key("threads", threads_default, 1, "threads ≥ 1")
    seed = _int_key("seed", 0, 0, "seed ≥ 0")

    geometry = defaults["geometry"]
    if "geometry" in seen:
        loc, value = seen["geometry"]
        if value in BUILTIN_NAMES or os.path.exists(value):
            geometry = value
        else:
            errors.append(f"{loc}: geometry must be a builtin "
                          f"({', '.join(BUILTIN_NAMES)}) or an existing file; "
                          f"got {value!r}")

    mode = None
    if "mode" in seen:
        loc, value = seen["mode"]
        name = value.strip().lower().replace("-", "_")
        if name in ("", "default"):
            mode = None
        else:
            try:
                mode = SurrogateMode(name)
            except ValueError:
                errors.append(
                    f"{loc}: mode must be one of general, symmetric, "
                    f"symmetric_kernel_preserving or default; got {value!r}")
        if (problem == "stokes"
                and mode not in (None, SurrogateMode.GENERAL)):
            errors.append(f"{loc}: the divergence matrix supports only "
                          f"general mode; got {value!r}")

    strat_sources = [k for k in ("strategy", "M", "c", "beta") if k in seen]
    strategy = None
    if "strategy" in seen and len(strat_sources) > 1:
        locs = ", ".join(seen[k][0] for k in strat_sources)
        errors.append(f"{locs}: give either strategy=... or the M / c,beta "
                      f"shorthand, not both")
    elif "strategy" in seen:
        loc, value = seen["strategy"]
        strategy = _parse_strategy(loc, value, errors)
    elif "M" in seen and ("c" in seen or "beta" in seen):
        locs = ", ".join(seen[k][0] for k in strat_sources)
        errors.append(f"{locs}: constant sampling (M) and mesh-dependent "
                      f"sampling (c, beta) are mutually exclusive")
    elif "M" in seen:
        loc, value = seen["M"]
        strategy = _parse_strategy(loc, f"M={value}", errors)
    elif "c" in seen or "beta" in seen:
        loc = seen.get("c", seen.get("beta"))[0]
        pieces = []
        if "c" in seen:
            pieces.append(f"c={seen['c'][1]}")
        else:
            errors.append(f"{loc}: beta needs an accompanying c")
        if "beta" in seen:
            pieces.append(f"beta={seen['beta'][1]}")
        if pieces and pieces[0].startswith("c="):
            strategy = _parse_strategy(loc, ",".join(pieces), errors)
    if strategy is None and not errors:
        strategy = _parse_strategy("default", defaults["strategy"], errors)

    if isinstance(strategy, MeshDependentSampling) and q <= p:
        loc = seen.get("q", seen.get("strategy", seen.get("c", ("default",))))[0]
        errors.append(f"{loc}: mesh-dependent sampling needs q > p "
                      f"(got q={q}, p={p})")

    if problem == "biharmonic" and p < 2:
        loc = seen.get("p", ("default",))[0]
        errors.append(f"{loc}: plate bending needs degree at least 2")

    ladder = defaults["ladder"]
    if "ladder" in seen:
        loc, value = seen["ladder"]
        got = _parse_ladder(loc, value, errors)
        if got is not None:
            ladder = got

    outdir = seen["outdir"][1] if "outdir" in seen else "."

    if errors:
        raise ConfigError("\n".join(errors))
    return StudyConfig(problem=problem, geometry=geometry, p=p, q=q,
                       mode=mode, strategy=strategy, ladder=ladder,
                       outdir=outdir, threads=threads, seed=seed)


# ---------------------------------------------------------------------------
# Study dispatch
# ---------------------------------------------------------------------------

def _write_echo(cfg: StudyConfig) -> None:
    os.makedirs(cfg.outdir, exist_ok=True)
    with open(os.path.join(cfg.outdir, "config.txt"), "w") as f:
        f.write("\n".join(cfg.echo_lines()) + "\n")


def _run_poisson(cfg: StudyConfig) -> None:
    rows = run_poisson_study(geometry=cfg.geometry, p=cfg.p, q=cfg.q,
                             strategy=cfg.strategy, mode=cfg.mode,
                             ladder=cfg.ladder, threads=cfg.threads)
    write_errors_csv(os.path.join(cfg.outdir, "errors.csv"), rows)


def _run_biharmonic(cfg: StudyConfig) -> None:
    rows = run_biharmonic_study(geometry=cfg.geometry, p=cfg.p, q=cfg.q,
                                strategy=cfg.strategy, mode=cfg.mode,
                                ladder=cfg.ladder, threads=cfg.threads)
    write_errors_csv(os.path.join(cfg.outdir, "errors.csv"), rows,
                     include_h2=True)


def _run_eigen(cfg: StudyConfig) -> None:
    rows = run_eigen_study(geometry=cfg.geometry, p=cfg.p, q=cfg.q,
                           strategy=cfg.strategy, ladder=cfg.ladder,
                           threads=cfg.threads)
    write_eigen_csv(os.path.join(cfg.outdir, "eigen.csv"), rows)


def _run_stokes(cfg: StudyConfig) -> None:
    vel, pre = run_stokes_study(geometry=cfg.geometry, p_pressure=cfg.p,
                                q=cfg.q, strategy=cfg.strategy,
                                ladder=cfg.ladder, threads=cfg.threads)
    write_errors_csv(os.path.join(cfg.outdir, "errors_velocity.csv"), vel)
    write_errors_csv(os.path.join(cfg.outdir, "errors_pressure.csv"), pre)
    cavity = run_cavity_flow(geometry=cfg.geometry, p_pressure=cfg.p,
                             q=cfg.q, strategy=cfg.strategy,
                             spans=cfg.ladder[-1])
    write_fields_csv(os.path.join(cfg.outdir, "fields_standard.csv"),
                     cavity["standard"])
    write_fields_csv(os.path.join(cfg.outdir, "fields_surrogate.csv"),
                     cavity["surrogate"])


def _run_bench(cfg: StudyConfig) -> None:
    rows = timing_harness(geometry=cfg.geometry, p=cfg.p, q=cfg.q,
                          strategy=cfg.strategy, ladder=cfg.ladder)
    write_timing_csv(os.path.join(cfg.outdir, "timing.csv"), rows)
    geo = resolve_domain(cfg.geometry)
    for spans in cfg.ladder:
        disc = make_discretization(geo, cfg.p, spans)
        A, _ = build_surrogate_matrix(FormKind.POISSON, disc,
                                      strategy=cfg.strategy, q=cfg.q,
                                      mode=cfg.mode)
        save_matrix_market(
            os.path.join(cfg.outdir, f"surrogate_{spans}.mtx"), A)


_DISPATCH = {
    "poisson": _run_poisson,
    "eigen": _run_eigen,
    "biharmonic": _run_biharmonic,
    "stokes": _run_stokes,
    "bench": _run_bench,
}


def run(cfg: StudyConfig) -> int:
    """Execute a study; returns the process exit code."""
    try:
        _write_echo(cfg)
        _DISPATCH[cfg.problem](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# assemble: matrices only
# ---------------------------------------------------------------------------

def _assemble_level(cfg: StudyConfig, geo, spans, reports) -> None:
    out = cfg.outdir
    if cfg.problem == "stokes":
        spaces = stokes_subgrid_spaces(geo, cfg.p, spans)
        A = assemble(FormKind.STOKES_VELOCITY, spaces.velocity)
        At, repA = build_surrogate_matrix(FormKind.STOKES_VELOCITY,
                                          spaces.velocity,
                                          strategy=cfg.strategy, q=cfg.q)
        save_matrix_market(os.path.join(out, f"velocity_std_{spans}.mtx"), A)
        save_matrix_market(os.path.join(out, f"velocity_surr_{spans}.mtx"), At)
        B = assemble_divergence(spaces)
        Bt, repB = build_surrogate_divergence(spaces, strategy=cfg.strategy,
                                              q=cfg.q, mode=cfg.mode)
        for c, (Bc, Btc) in enumerate(zip(B, Bt)):
            save_matrix_market(
                os.path.join(out, f"divergence{c}_std_{spans}.mtx"), Bc)
            save_matrix_market(
                os.path.join(out, f"divergence{c}_surr_{spans}.mtx"), Btc)
        reports += [repA, repB]
        return
    forms = {"poisson": (FormKind.POISSON,), "bench": (FormKind.POISSON,),
             "biharmonic": (FormKind.BIHARMONIC,),
             "eigen": (FormKind.POISSON, FormKind.MASS)}[cfg.problem]
    disc = make_discretization(geo, cfg.p, spans)
    for form in forms:
        tag = form.value
        A = assemble(form, disc)
        At, rep = build_surrogate_matrix(form, disc, strategy=cfg.strategy,
                                         q=cfg.q, mode=cfg.mode)
        save_matrix_market(os.path.join(out, f"{tag}_std_{spans}.mtx"), A)
        save_matrix_market(os.path.join(out, f"{tag}_surr_{spans}.mtx"), At)
        reports.append(rep)


def run_assemble(cfg: StudyConfig) -> int:
    """Assemble and export matrices for every ladder level; no solves."""
    try:
        _write_echo(cfg)
        geo = resolve_domain(cfg.geometry)
        reports: list = []
        for spans in cfg.ladder:
            _assemble_level(cfg, geo, spans, reports)
        write_csv(os.path.join(cfg.outdir, "report.csv"), REPORT_CSV_HEADER,
                  (f"{r.csv_row()},{';'.join(r.flags)}" for r in reports))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# report: merge CSV tables by schema
# ---------------------------------------------------------------------------

_SCHEMAS = {
    ERRORS_CSV_HEADER + ",flags": "errors",
    ERRORS_CSV_HEADER_H2 + ",flags": "errors_h2",
    EIGEN_CSV_HEADER + ",flags": "eigen",
    TIMING_CSV_HEADER + ",flags": "timing",
    REPORT_CSV_HEADER + ",flags": "report",
    FIELDS_CSV_HEADER: "fields",
}


def run_report(directory: str) -> int:
    """Concatenate same-schema CSV files under ``directory``."""
    if not os.path.isdir(directory):
        print(f"error: {directory}: not a directory", file=sys.stderr)
        return 2
    groups: dict = {}
    for root, _dirs, files in sorted(os.walk(directory)):
        for name in sorted(files):
            if not name.endswith(".csv") or name.startswith("merged_"):
                continue
            path = os.path.join(root, name)
            with open(path) as f:
                lines = f.read().splitlines()
            if not lines or lines[0] not in _SCHEMAS:
                continue
            rel = os.path.relpath(path, directory)
            groups.setdefault(lines[0], []).extend(
                f"{rel},{row}" for row in lines[1:] if row)
    for header, rows in groups.items():
        out = os.path.join(directory, f"merged_{_SCHEMAS[header]}.csv")
        with open(out, "w") as f:
            f.write("\n".join([f"source,{header}"] + rows) + "\n")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_USAGE = """usage: surriga <command> [arguments]

commands:
  run [config-file] [--key value ...]       run a study, write CSV tables
  assemble [config-file] [--key value ...]  export matrices only
  report <directory>                        merge CSV tables by schema

config keys: problem geometry p q mode strategy M c beta ladder outdir
threads seed; flags override file entries; SURRIGA_THREADS supplies the
thread count when none is given."""


def _split_run_args(args):
    path = None
    if args and not args[0].startswith("--"):
        path = args[0]
        args = args[1:]
    return path, args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ("-h", "--help", "help"):
        print(_USAGE)
        return 0
    cmd, rest = argv[0], argv[1:]
    if cmd == "report":
        if len(rest) != 1:
            print("error: report expects exactly one directory",
                  file=sys.stderr)
            return 2
        return run_report(rest[0])
    if cmd in ("run", "assemble"):
        path, flags = _split_run_args(rest)
        try:
            cfg = parse_config(path, flags)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return run(cfg) if cmd == "run" else run_assemble(cfg)
    print(f"error: unknown command {cmd!r}\n{_USAGE}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
