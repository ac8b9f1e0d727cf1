"""Command-line entry point: ``ctmc-perturb <command> ...``.

Exit status is 0 when the command's check passes, 1 when it fails and 2 for
usage, configuration or model-file errors.  Any option may also come from a
YAML ``--config`` file (keys are option names with ``-`` or ``_``); options
given on the command line take precedence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import ibp, montecarlo
from .exceptions import (ConfigurationError, CtmcError, InvariantError, ModelError,
                         ModelFileError, SolverError)
from .modelio import load_model
from .perturbation import regularity_equivalence_experiment
from .qmatrix import Window, perturb, validate
from .semigroup import (DEFAULT_STEPS, DEFAULT_TAIL_TOL, METHODS, PLATEAU_RTOL, THETA_EXP,
                        THETA_REG, solve, uniformization_solve)
from .transition import TimeGrid

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PROG = "ctmc-perturb"


def _int_list(text):
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# command -> [(option, type, default, help)]; positionals are listed as "<name>"
OPTIONS = {
    "validate": [
        ("<model>", str, None, "model file"),
        ("--window", int, None, "largest state checked (default: model window or support)"),
        ("--tol", float, 1e-10, "conservativeness tolerance relative to max(1, q_i)"),
    ],
    "solve": [
        ("<model>", str, None, "model file"),
        ("--method", str, "uniform", f"solver: {', '.join(METHODS)}"),
        ("--T", float, 1.0, "time horizon"),
        ("--h", float, None, f"grid step (default T/{DEFAULT_STEPS})"),
        ("--window", int, None, "truncation window 0..N"),
        ("--rows", _int_list, None, "comma-separated start states (default: all)"),
        ("--n-max", int, 200, "series: largest term index"),
        ("--tail-tol", float, DEFAULT_TAIL_TOL, "series: stop once the last term is below this"),
        ("--tol", float, 1e-10, "ode: step-halving tolerance"),
        ("--eps", float, 1e-10, "uniform: truncation error of the Poisson series"),
    ],
    "theorem13": [
        ("<model>", str, None, "model file of R (or of R and A together)"),
        ("<model_a>", str, None, "model file of A (optional if the first file has both)"),
        ("--schedule", _int_list, [100, 200, 400], "increasing truncation windows"),
        ("--i", int, 1, "start state"),
        ("--T", float, 1.0, "time of the defect"),
        ("--method", str, "uniform", f"solver: {', '.join(METHODS)}"),
        ("--steps", int, DEFAULT_STEPS, "grid steps on [0, T]"),
        ("--theta-reg", float, THETA_REG, "largest defect read as regular"),
        ("--theta-exp", float, THETA_EXP, "smallest defect read as explosive"),
        ("--plateau-rtol", float, PLATEAU_RTOL, "relative spread allowed in an explosive plateau"),
    ],
    "theorem14": [
        ("<model>", str, None, "model file of R (or of R and A together)"),
        ("<model_a>", str, None, "model file of A (optional if the first file has both)"),
        ("--T", float, 1.0, "time horizon"),
        ("--h", float, None, f"grid step (default T/{DEFAULT_STEPS})"),
        ("--window", int, None, "truncation window 0..N"),
        ("--bound", float, 1e-5, "pass when the matrix identity residual is at most this"),
        ("--eps", float, 1e-13, "uniformization error for R(t) and Q(t)"),
        ("--csv-stride", int, 64, "grid stride of the rows written to a CSV --out"),
    ],
    "montecarlo": [
        ("<model>", str, None, "model file of R (or of R and A together)"),
        ("<model_a>", str, None, "model file of A (optional if the first file has both)"),
        ("--i", int, 0, "start state"),
        ("--j", int, 0, "target state"),
        ("--t", float, 1.0, "time"),
        ("--paths", int, 100_000, "number of simulated paths"),
        ("--seed", int, None, "master seed (required)"),
        ("--window", int, None, "truncation window 0..N for Q and the paths"),
        ("--h", float, None, f"grid step of the time integral (default t/{DEFAULT_STEPS})"),
        ("--max-jumps", int, 10**6, "paths with this many jumps count as exploded"),
        ("--z-max", float, 3.0, "pass within this many standard errors"),
    ],
}
COMMON = [
    ("--config", str, None, "YAML file supplying default option values"),
    ("--threads", int, None, f"worker threads (default: ${montecarlo.THREADS_ENV} or 1)"),
    ("--out", str, None, "machine-readable output (.json or .csv; solve also writes binary)"),
]
DESCRIPTIONS = {
    "validate": "check stability, signs and conservativeness of a model",
    "solve": "compute the minimal transition function on a window",
    "theorem13": "regularity of R and R+A from honesty-defect traces",
    "theorem14": "integration-by-parts identity residuals between R(t) and Q(t)",
    "montecarlo": "Monte Carlo check of the Feynman-Kac representation of Q(t)",
}


def _dest(option: str) -> str:
    return option.strip("<>-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=DESCRIPTIONS[cmd], description=DESCRIPTIONS[cmd])
        for option, typ, default, text in opts + COMMON:
            shown = f" (default: {default})" if default is not None else ""
            if option.startswith("<"):
                p.add_argument(_dest(option), nargs="?", default=None, help=text)
            else:
                p.add_argument(option, dest=_dest(option), type=typ, default=None, help=text + shown)
    return parser


def resolve(argv=None) -> argparse.Namespace:
    """Parse ``argv`` and merge in config-file values and defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    opts = OPTIONS[args.command] + COMMON
    types = {_dest(o): t for o, t, _, _ in opts}
    config = {}
    if args.config:
        try:
            raw = yaml.safe_load(Path(args.config).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(raw, dict):
            parser.error(f"config {args.config} must be a mapping of option names")
        for key, val in raw.items():
            dest = str(key).replace("-", "_")
            if dest not in types or dest == "config":
                parser.error(f"config {args.config}: unknown option {key!r} for {args.command}")
            try:
                config[dest] = None if val is None else types[dest](val)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                parser.error(f"config {args.config}: bad value for {key!r}: {exc}")
    for option, _, default, _ in opts:
        dest = _dest(option)
        if getattr(args, dest) is None:
            setattr(args, dest, config.get(dest, default))
    if args.model is None:
        parser.error(f"{args.command}: a model file is required")
    if args.command == "montecarlo" and args.seed is None:
        parser.error("montecarlo: --seed is required")
    if getattr(args, "method", None) is not None and args.method not in METHODS:
        parser.error(f"--method must be one of {', '.join(METHODS)}")
    return args


def _header(args, extra=None) -> str:
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    settings.update(extra or {})
    lines = [f"# {PROG} {args.command}"]
    lines += [f"#   {k} = {v}" for k, v in sorted(settings.items())]
    return "\n".join(lines)


def _window(args, *models) -> Window:
    if args.window is not None:
        return Window(args.window)
    for m in models:
        if m is not None and m.window is not None:
            return m.window
    bounds = [m.generator.support_bound for m in models if m is not None]
    bounds = [b for b in bounds if b is not None]
    if bounds:
        return Window(min(bounds))
    raise ConfigurationError("this model has infinitely many states; pass --window N "
                             "(or set 'window' in the model file)")


def _pair(args):
    """``(R, A, models)`` from one combined file or two files."""
    first = load_model(args.model)
    second = load_model(args.model_a) if args.model_a else None
    if second is None:
        if first.r is None or first.a is None:
            raise ConfigurationError(f"{args.model} holds only one of R and A; pass the A file "
                                     "as the second positional argument")
        return first.r, first.a, (first,)
    r = first.generator
    window = args.window if getattr(args, "window", None) is not None else None
    a = second.as_perturbation(Window(window) if window else (second.window or first.window))
    return r, a, (first, second)


def _write_json(path, payload):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{x:.17g}" if isinstance(x, float) else x for x in row])
    Path(path).write_text(buf.getvalue())


def _grid(T, h):
    return TimeGrid.uniform(T, DEFAULT_STEPS) if h is None else TimeGrid(float(T), float(h))


def cmd_validate(args, out) -> int:
    model = load_model(args.model)
    window = _window(args, model)
    gen = model.generator
    report = validate(gen, window, args.tol)
    ok = report.passed
    extra = {"window": window.max_state, "kind": model.kind}
    if model.a is not None:
        extra["gamma"] = model.gamma
    print(_header(args, extra), file=out)
    print(report.summary(), file=out)
    if model.a is not None:
        try:
            model.a.killing_rates(window)
        except InvariantError as exc:
            print(f"perturbation: {exc}", file=out)
            ok = False
        print(f"gamma = {model.gamma:.17g}", file=out)
    print("PASS" if ok else "FAIL", file=out)
    if args.out:
        _write_json(args.out, {"passed": ok, "window": window.max_state, "gamma": model.gamma,
                               "max_residual": report.max_residual,
                               "failing_rows": report.failing_rows().tolist(),
                               "residuals": report.residuals.tolist()})
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_solve(args, out) -> int:
    model = load_model(args.model)
    window = _window(args, model)
    grid = _grid(args.T, args.h)
    kw = {"series": {"n_max": args.n_max, "tail_tol": args.tail_tol},
          "ode": {"tol": args.tol}, "uniform": {"eps": args.eps}}[args.method]
    fn = solve(model.generator, window, grid, method=args.method, rows=args.rows, **kw)
    print(_header(args, {"window": window.max_state, "h": grid.h}), file=out)
    sums = fn.row_sums()[-1]
    print(f"row sums at t = {grid.T:g}", file=out)
    print("i,row_sum,defect", file=out)
    for i, s in zip(fn.rows[:50], sums[:50]):
        print(f"{i},{s:.12g},{1 - s:.6g}", file=out)
    if fn.rows.size > 50:
        print(f"... {fn.rows.size - 50} more rows", file=out)
    for key in ("converged", "n_terms", "tail_mass", "halving_gap"):
        if key in fn.info:
            print(f"{key} = {fn.info[key]}", file=out)
    if args.out:
        fn.save(args.out)
    return EXIT_PASS


def cmd_theorem13(args, out) -> int:
    r, a, _ = _pair(args)
    res = regularity_equivalence_experiment(
        r, a, args.schedule, i=args.i, T=args.T, method=args.method, steps=args.steps,
        theta_reg=args.theta_reg, theta_exp=args.theta_exp, plateau_rtol=args.plateau_rtol)
    print(_header(args), file=out)
    print("N,defect_R,defect_R+A", file=out)
    for n, dr, dq in zip(args.schedule, res.r_probe.defects, res.q_probe.defects):
        print(f"{n},{dr:.6e},{dq:.6e}", file=out)
    print(f"R: {res.r_probe.verdict}", file=out)
    print(f"R+A: {res.q_probe.verdict}", file=out)
    if res.finding:
        print(f"FINDING: {res.finding}", file=out)
    print("PASS" if res.consistent else "FAIL", file=out)
    if args.out:
        _write_json(args.out, res.as_dict())
    return EXIT_PASS if res.consistent else EXIT_FAIL


def cmd_theorem14(args, out) -> int:
    r, a, models = _pair(args)
    window = _window(args, *models)
    grid = _grid(args.T, args.h)
    q = perturb(r, a)
    rfun = uniformization_solve(r, window, grid, eps=args.eps)
    qfun = uniformization_solve(q, window, grid, eps=args.eps)
    res = ibp.matrix_identity_residual(rfun, a, qfun)
    lhs, rhs = ibp.ibp_sides(rfun, a, qfun)
    side_gap = float(np.abs(lhs - rhs).max())
    table = []
    if grid.n_steps % 2 == 0:
        table = ibp.richardson_table(r, a, window, grid.T, (grid.n_steps // 2, grid.n_steps), args.eps)
    ok = res.sup <= args.bound
    print(_header(args, {"window": window.max_state, "h": grid.h, "gamma": a.gamma}), file=out)
    print(f"matrix identity residual = {res.sup:.6e} (bound {args.bound:g})", file=out)
    print(f"max |lhs - rhs| = {side_gap:.6e}", file=out)
    if table:
        print("steps,h,residual,shrink", file=out)
        for row in table:
            print(f"{row['steps']},{row['h']:.6g},{row['residual']:.6e},{row.get('shrink', '')}",
                  file=out)
    print("PASS" if ok else "FAIL", file=out)
    if args.out:
        if args.out.endswith(".csv"):
            t_idx = range(0, grid.size, max(1, args.csv_stride))
            if grid.n_steps not in t_idx:
                t_idx = list(t_idx) + [grid.n_steps]
            rows = ibp.residual_table(rfun, a, qfun, t_indices=t_idx)
            _write_csv(args.out, ["t", "i", "j", "lhs", "rhs", "residual"], rows)
        else:
            _write_json(args.out, {"residual": res.sup, "bound": args.bound, "passed": ok,
                                   "max_side_gap": side_gap, "h": grid.h,
                                   "window": window.max_state, "richardson": table})
    return EXIT_PASS if ok else EXIT_FAIL


def cmd_montecarlo(args, out) -> int:
    r, a, models = _pair(args)
    window = _window(args, *models)
    grid = _grid(args.t, args.h)
    qfun = uniformization_solve(perturb(r, a), window, grid, eps=1e-13)
    rep = montecarlo.verify_representation(r, a, args.i, args.j, args.t, qfun, args.paths,
                                           args.seed, args.max_jumps, args.z_max,
                                           threads=args.threads)
    print(_header(args, {"window": window.max_state, "h": grid.h, "atol": rep.atol,
                         "threads": montecarlo.thread_count(args.threads)}), file=out)
    est = rep.estimate
    print(f"monte carlo  {est.mean:.8f} +- {est.std_error:.2e}  ({est.n_paths} paths, "
          f"exploded {est.exploded_fraction:.3g}, killed {est.killed_fraction:.3g})", file=out)
    print(f"deterministic Q_{args.i}{args.j}({args.t:g}) = {rep.deterministic:.8f}", file=out)
    print(f"gap {rep.gap:.3e} = {rep.z:.2f} standard errors", file=out)
    print("PASS" if rep.passed else "FAIL", file=out)
    if args.out:
        if args.out.endswith(".json"):
            _write_json(args.out, rep.as_dict())
        else:
            _write_csv(args.out, ["quantity", "mean", "std_error", "n_paths", "exploded_fraction"],
                       [["representation_rhs", est.mean, est.std_error, est.n_paths,
                         est.exploded_fraction],
                        ["deterministic_Q", rep.deterministic, 0.0, 0, 0.0]])
    return EXIT_PASS if rep.passed else EXIT_FAIL


COMMANDS = {"validate": cmd_validate, "solve": cmd_solve, "theorem13": cmd_theorem13,
            "theorem14": cmd_theorem14, "montecarlo": cmd_montecarlo}


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    try:
        args = resolve(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_PASS
    try:
        return COMMANDS[args.command](args, out)
    except (ModelFileError, ConfigurationError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelError as exc:
        print(f"{PROG}: invalid model: {exc}", file=sys.stderr)
        return EXIT_FAIL if args.command == "validate" else EXIT_USAGE
    except (InvariantError, SolverError) as exc:
        print(f"{PROG}: check failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except CtmcError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
