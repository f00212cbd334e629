"""Command-line front end.

Every subcommand writes CSV/JSON artifacts into ``--out`` (default taken
from ``$ODEMARKOV_OUT``, else ``./odemarkov-out``) together with a
``<subcommand>_manifest.json`` listing a sha256 for each artifact.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 theory discrepancy (divergence where stability is predicted).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .chain import build_shift_register, load_chain
from .errors import ConfigError, NumericalError, UnstableGain
from .nonlin import (
    FIXTURES,
    SIGN_NOTE,
    alpha_scaling_experiment,
    interpolated_overlay,
    simulate_sensitivity,
    solve_equilibrium,
    write_overlay_csv,
)
from .oper import build_L, scan_curve, segment_fits, spectral_radius, write_region_json
from .perturb import derivative_report
from .rng import RNG_ID
from .simlin import SimConfig, backward_couple, q_radius, simulate_linear, stationarity_convergence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DISCREPANCY = 4

OUT_ENV = "ODEMARKOV_OUT"
DEFAULT_OUT = "odemarkov-out"
GRID_TOL = 1e-12


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# -- flag parsing ---------------------------------------------------------------

def parse_grid(text):
    """``start:stop:step`` with both endpoints included (stop matched within 1e-12)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"alpha grid {text!r} must look like start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"alpha grid {text!r} has a non-numeric field") from None
    if not (math.isfinite(start) and math.isfinite(stop) and math.isfinite(step)):
        raise ConfigError(f"alpha grid {text!r} must be finite")
    if step <= 0 or stop < start or start < 0:
        raise ConfigError(f"alpha grid {text!r} needs 0 <= start <= stop and step > 0")
    span = (stop - start) / step
    n = int(math.floor(span + GRID_TOL * max(1.0, span)))
    grid = np.array([round(start + i * step, 12) for i in range(n + 1)])
    if abs(grid[-1] - stop) <= GRID_TOL * max(1.0, abs(stop)):
        grid[-1] = stop
    return grid


def parse_floats(text, what):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} {text!r} must be a comma-separated list of numbers") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals


def parse_noise(text):
    """``none`` or ``iid:s`` (i.i.d. Gaussian with covariance ``s I``)."""
    if text is None or text == "none":
        return None
    kind, _, value = text.partition(":")
    if kind != "iid" or not value:
        raise ConfigError(f"noise {text!r} must be 'none' or 'iid:<variance>'")
    try:
        s = float(value)
    except ValueError:
        raise ConfigError(f"noise variance {value!r} is not a number") from None
    if not s >= 0 or not math.isfinite(s):
        raise ConfigError("noise variance must be finite and >= 0")
    return s


def parse_builtin(text):
    name, _, arg = text.partition(":")
    if name.replace("_", "-") != "shift-register":
        raise ConfigError(f"unknown builtin {name!r}; available: shift-register:<L>")
    try:
        L = int(arg)
    except ValueError:
        raise ConfigError(f"builtin {text!r} needs an integer length") from None
    return build_shift_register(L)


def resolve_chain(args, required=True):
    if args.builtin and args.config:
        raise ConfigError("give either --builtin or --config, not both")
    if args.builtin:
        return parse_builtin(args.builtin), f"builtin:{args.builtin}"
    if args.config:
        return load_chain(args.config), str(args.config)
    if required:
        raise ConfigError("a chain is required: --builtin shift-register:<L> or --config <file>")
    return None, None


def _phi0(text):
    if text == "stationary":
        return text
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"--phi0 must be 'stationary' or a state index, got {text!r}") from None


# -- manifest -------------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: str | None
    seed: int | None
    output_dir: str
    tool_version: str = __version__
    rng: str = RNG_ID
    backend: str = kernels.BACKEND
    duration_s: float = 0.0
    arguments: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK

    def add(self, path):
        path = Path(path)
        self.artifacts[path.name] = sha256_file(path)

    def write(self):
        path = Path(self.output_dir) / f"{self.subcommand.replace('-', '_')}_manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(asdict(self)), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _out_dir(args):
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _args_record(args):
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}


# -- subcommands ----------------------------------------------------------------

def cmd_spectrum(args, out, manifest):
    model, _ = resolve_chain(args)
    alphas = parse_grid(args.alpha)
    failed = 0
    for kind in ("L", "Q"):
        rep = scan_curve(model, kind, alphas, workers=args.threads)
        path = out / f"spectrum_{kind}.csv"
        rep.to_csv(path)
        manifest.add(path)
        manifest.results[kind] = {
            "breakpoints": rep.breakpoints,
            "segments": segment_fits(rep),
            "failed_points": {str(alphas[i]): msg for i, msg in sorted(rep.errors.items())},
        }
        failed += len(rep.errors)
        if kind == "Q":
            rpath = out / "region_O.json"
            write_region_json(rep.region_O, rpath)
            manifest.add(rpath)
            manifest.results["region_O"] = rep.region_O
    if failed:
        print(f"odemarkov: {failed} grid point(s) failed; see the CSV flags", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_derivatives(args, out, manifest):
    model, _ = resolve_chain(args)
    rep = derivative_report(model)
    path = out / "derivatives.json"
    rep.to_json(path)
    manifest.add(path)
    manifest.results = {"deltas": rep.deltas(), "hypothesis_flags": rep.hypothesis_flags}
    return EXIT_OK


def _require_seed(args):
    if args.seed is None:
        raise ConfigError("--seed is required for stochastic commands")
    if args.seed < 0:
        raise ConfigError("--seed must be non-negative")


def cmd_simulate(args, out, manifest):
    _require_seed(args)
    model, _ = resolve_chain(args)
    cfg = SimConfig(alpha=args.alpha, T=args.T, trials=args.trials, seed=args.seed,
                    x0=None if args.x0 is None else tuple(parse_floats(args.x0, "--x0")),
                    phi0=_phi0(args.phi0), noise_cov=parse_noise(args.noise),
                    use_w=not args.no_disturbance)
    xq = q_radius(model, args.alpha)
    stats = simulate_linear(model, cfg, workers=args.threads)
    stats.metadata["xi_Q"] = xq
    path = out / "simulate.csv"
    stats.to_csv(path)
    manifest.add(path)
    manifest.results = {"classification": stats.classification, "sigma2_hat": stats.sigma2_hat,
                        "tail_slope": stats.tail_slope, "overflowed": stats.overflowed,
                        "xi_Q": xq}
    print(f"classification: {stats.classification} (xi^Q = {xq:.6g})")
    if xq < 1.0 and stats.classification == "diverged":
        print("odemarkov: divergence observed although xi^Q < 1", file=sys.stderr)
        return EXIT_DISCREPANCY
    return EXIT_OK


def cmd_couple(args, out, manifest):
    _require_seed(args)
    model, _ = resolve_chain(args)
    depths = [int(d) for d in parse_floats(args.depths, "--depths")]
    noise = parse_noise(args.noise)
    try:
        rep = backward_couple(model, args.alpha, depths, args.seed, trials=args.trials,
                              noise_cov=noise, workers=args.threads)
    except UnstableGain as exc:
        raise ConfigError(str(exc)) from None
    path = out / "coupling.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("depth_lo,depth_hi,D,ci\n")
        for lo, hi, d, c in zip(depths[:-1], depths[1:], rep.D, rep.ci):
            fh.write(f"{lo},{hi},{d:.17g},{c:.17g}\n")
    manifest.add(path)
    k = model.k
    gamma = np.ones(k) if args.gamma is None else np.array(parse_floats(args.gamma, "--gamma"))
    if gamma.shape != (k,):
        raise ConfigError(f"--gamma must have {k} entries")
    dec = stationarity_convergence(model, args.alpha, gamma, args.T, args.trials, args.seed,
                                   workers=args.threads)
    dpath = out / "decay.csv"
    dec.to_csv(dpath)
    manifest.add(dpath)
    manifest.results = {
        "coupling_slope": rep.slope, "q_rate": rep.q_rate, "l_rate": rep.l_rate,
        "decay_rate": dec.rate, "predicted_rate": dec.predicted_rate,
        "relative_error": dec.relative_error, "within_tolerance": dec.within_tolerance,
    }
    print(f"coupling slope {rep.slope:.6g}, decay rate {dec.rate:.6g} "
          f"(2 log xi = {dec.predicted_rate:.6g})")
    if (math.isfinite(rep.slope) and rep.slope >= 0) or (math.isfinite(dec.rate) and dec.rate >= 0):
        print("odemarkov: no geometric decay although xi^Q < 1", file=sys.stderr)
        return EXIT_DISCREPANCY
    return EXIT_OK


def cmd_nonlinear(args, out, manifest):
    _require_seed(args)
    if args.fixture not in FIXTURES:
        raise ConfigError(f"unknown fixture {args.fixture!r}; available: {', '.join(FIXTURES)}")
    if args.fixture == "tanh":
        if args.builtin or args.config:
            raise ConfigError("the tanh fixture carries its own chain; drop --builtin/--config")
        problem = FIXTURES["tanh"]()
    else:
        model, _ = resolve_chain(args)
        problem = FIXTURES[args.fixture](model)
    alphas = parse_floats(args.alphas, "--alphas")
    if min(alphas) <= 0:
        raise ConfigError("--alphas must be positive")
    eq = solve_equilibrium(problem)
    x0 = None if args.x0 is None else parse_floats(args.x0, "--x0")
    table = alpha_scaling_experiment(problem, alphas, args.T, args.trials, args.seed,
                                     noise_cov=parse_noise(args.noise), delta=args.delta,
                                     x0=x0, workers=args.threads)
    path = out / "scaling.csv"
    table.to_csv(path)
    manifest.add(path)
    i = int(np.argmin(table.alphas))
    times, X, gamma = interpolated_overlay(problem, table.paths[i], float(table.alphas[i]))
    opath = out / "overlay.csv"
    write_overlay_csv(opath, times, X, gamma)
    manifest.add(opath)
    manifest.results = {
        "xstar": eq.xstar, "exponentially_stable": eq.exponentially_stable,
        "band": table.band, "band_ok": table.band_ok,
        "exceedance_monotone": table.exceedance_monotone, "overflowed": table.overflowed,
        "sign_note": SIGN_NOTE,
    }
    if args.sensitivity:
        sens = {}
        for a in alphas:
            cfg = SimConfig(alpha=a, T=args.T, trials=args.trials, seed=args.seed,
                            x0=None if x0 is None else tuple(x0), noise_cov=parse_noise(args.noise))
            rep = simulate_sensitivity(problem, cfg, equilibrium=eq, workers=args.threads)
            entry = {"exponent": rep.exponent, "ci": rep.ci}
            if args.fixture == "linear":
                entry["log_xi"] = math.log(spectral_radius(build_L(problem.chain, a)))
            sens[f"{a:.17g}"] = entry
        spath = out / "sensitivity.json"
        with open(spath, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(sens), fh, indent=2, sort_keys=True)
            fh.write("\n")
        manifest.add(spath)
        manifest.results["sensitivity"] = sens
    print(f"scaling band {table.band:.4g} (limit {table.band_limit:g}), "
          f"exceedance monotone: {table.exceedance_monotone}")
    if eq.exponentially_stable and any(table.overflowed):
        print("odemarkov: paths blew up around an exponentially stable equilibrium", file=sys.stderr)
        return EXIT_DISCREPANCY
    return EXIT_OK


def _reference_residual(rep, ref):
    lo, hi = rep.segments()[0]
    a = rep.alphas[lo:hi]
    return float(np.max(np.abs(rep.xi[lo:hi] - ref(a))))


def cmd_reproduce_figures(args, out, manifest):
    alphas = parse_grid(f"0:{args.alpha_max!r}:{args.step!r}")
    jobs = (
        ("lambda_L2.csv", 2, "L", {"1 - alpha": lambda a: 1 - a}),
        ("lambda_L3.csv", 3, "L", {"1 - alpha": lambda a: 1 - a}),
        ("eta_L2.csv", 2, "Q", {"(1 - alpha)^2": lambda a: (1 - a) ** 2,
                                "1 - 2 alpha + 2 alpha^2": lambda a: 1 - 2 * a + 2 * a * a}),
    )
    failed = 0
    for name, L, kind, refs in jobs:
        rep = scan_curve(build_shift_register(L), kind, alphas, workers=args.threads)
        path = out / name
        rep.to_csv(path)
        manifest.add(path)
        failed += len(rep.errors)
        manifest.results[name] = {
            "shift_register_length": L,
            "operator": kind,
            "breakpoints": rep.breakpoints,
            "segments": segment_fits(rep),
            "first_segment_residual_vs": {k: _reference_residual(rep, f) for k, f in refs.items()},
        }
    return EXIT_NUMERICAL if failed else EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--threads", type=int, default=1, help="worker cap (default 1)")

    chain = argparse.ArgumentParser(add_help=False)
    chain.add_argument("--builtin", help="built-in chain, e.g. shift-register:2")
    chain.add_argument("--config", help="chain config file (JSON)")

    stoch = argparse.ArgumentParser(add_help=False)
    stoch.add_argument("--seed", type=int, help="RNG seed (required)")
    stoch.add_argument("--trials", type=int, default=1000)
    stoch.add_argument("--T", type=int, default=1000, help="time horizon")
    stoch.add_argument("--noise", default="none", help="'none' or iid:<variance>")

    p = _ArgumentParser(prog="odemarkov", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"odemarkov {__version__}")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_ArgumentParser)

    s = sub.add_parser("spectrum", parents=[common, chain],
                       help="spectral radius curves of L and Q over a gain grid")
    s.add_argument("--alpha", default="0:2:0.01", help="grid start:stop:step, inclusive")
    s.set_defaults(func=cmd_spectrum)

    s = sub.add_parser("derivatives", parents=[common, chain],
                       help="analytic and finite-difference derivatives at alpha = 0")
    s.set_defaults(func=cmd_derivatives)

    s = sub.add_parser("simulate", parents=[common, chain, stoch],
                       help="Monte Carlo second moment of the linear recursion")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--x0", help="initial state, comma separated (default 0)")
    s.add_argument("--phi0", default="stationary", help="'stationary' or a state index")
    s.add_argument("--no-disturbance", action="store_true", help="drop the per-state term w")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("couple", parents=[common, chain, stoch],
                       help="backward coupling and decay towards stationarity")
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--depths", default="8,16,32,64")
    s.add_argument("--gamma", help="initial offset for the decay run (default all ones)")
    s.set_defaults(func=cmd_couple, T=200)

    s = sub.add_parser("nonlinear", parents=[common, chain, stoch],
                       help="O(alpha) error scaling of a nonlinear fixture")
    s.add_argument("--fixture", default="tanh", help=f"one of {', '.join(FIXTURES)}")
    s.add_argument("--alphas", default="0.02,0.04,0.08")
    s.add_argument("--delta", type=float, default=0.2, help="exceedance threshold")
    s.add_argument("--x0", help="initial state, comma separated (default x*)")
    s.add_argument("--sensitivity", action="store_true", help="also estimate the Lyapunov exponent")
    s.set_defaults(func=cmd_nonlinear, noise="iid:1.0")

    s = sub.add_parser("reproduce-figures", parents=[common],
                       help="lambda curves for L = 2, 3 and the eta curve for L = 2")
    s.add_argument("--alpha-max", type=float, default=2.0)
    s.add_argument("--step", type=float, default=0.01)
    s.set_defaults(func=cmd_reproduce_figures, seed=None)
    return p


def main(argv=None):
    t0 = time.perf_counter()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = _out_dir(args)
        manifest = RunManifest(
            subcommand=args.subcommand,
            config=getattr(args, "config", None) or getattr(args, "builtin", None),
            seed=getattr(args, "seed", None),
            output_dir=str(out),
            arguments=_args_record(args),
        )
        code = args.func(args, out, manifest)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ConfigError, ValueError) as exc:
        print(f"odemarkov: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"odemarkov: i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"odemarkov: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"odemarkov: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    manifest.exit_code = code
    manifest.duration_s = round(time.perf_counter() - t0, 3)
    manifest.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
