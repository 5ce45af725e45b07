"""Command-line front end.

Exit codes: 0 success, 1 bad input (parse, spec, model or certificate
errors), 2 numerical breakdown, 3 no convergence before the cap,
4 violations found by ``drift-check``.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import bounds, models, oracle, solver
from .block_chain import validate_generator
from .errors import HessolveError, NumericalBreakdown

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CAP, EXIT_DRIFT = 0, 1, 2, 3, 4
COMPARE_MAX_N = 25
COMPARE_TOL = 1e-9
DEFAULT_CAP = 5000
HUMAN_FULL_LEVELS = 10

BUILTINS = ("mm1", "bmap", "mms-retrial", "counterexample", "random")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse's own exit status 2 would collide with "numerical breakdown"
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


@dataclass
class Model:
    gen: object
    cert: Optional[bounds.DriftCertificate]
    label: str
    params: dict


def _seed() -> int:
    raw = os.environ.get("HESSOLVE_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"HESSOLVE_SEED must be an integer, got {raw!r}") from None


def _opt(value, default):
    return default if value is None else value


def resolve_model(args) -> Model:
    name = args.model
    if name.startswith("file:"):
        path = name[len("file:"):]
        gen, cert = models.load_model(path)
        model = Model(gen, cert, gen.name, {"path": path})
    elif name == "mm1":
        lam, mu = _opt(args.lam, 1.0), _opt(args.mu, 2.0)
        cert = bounds.mm1_certificate(lam, mu) if lam < mu else None
        model = Model(models.mm1_generator(lam, mu), cert, name, {"lambda": lam, "mu": mu})
    elif name == "bmap":
        mu = _opt(args.mu, 1.0)
        if args.bmap_d:
            spec = models.BMAPSpec(tuple(json.loads(args.bmap_d)), mu)
            params = {"D": [d.tolist() for d in spec.D], "mu": mu}
        else:
            lam = _opt(args.lam, 2.0)
            spec = models.BMAPSpec.poisson(lam, mu)
            params = {"lambda": lam, "mu": mu}
        cert = None if args.cert else bounds.bmap_certificate(spec)
        model = Model(models.bmap_generator(spec), cert, name, params)
    elif name == "mms-retrial":
        spec = models.RetrialSpec(_opt(args.lam, 1.0), _opt(args.mu, 1.0),
                                  _opt(args.s, 2), _opt(args.eta, 1.0))
        cert = None if args.cert else bounds.retrial_certificate(spec)
        model = Model(models.retrial_generator(spec), cert, name,
                      {"lambda": spec.lam, "mu": spec.mu, "s": spec.s, "eta": spec.eta})
    elif name == "counterexample":
        spec = models.CounterexampleSpec(_opt(args.d, 10.0), _opt(args.u, 1.0), _opt(args.w, 1.0))
        cert = None if args.cert else bounds.counterexample_certificate(spec)
        model = Model(models.counterexample_generator(spec), cert, name,
                      {"d": spec.d, "u": spec.u, "w": spec.w})
    elif name == "random":
        seed = _seed()
        model = Model(oracle.random_generator(seed), None, name, {"seed": seed})
    else:
        raise UsageError(f"unknown model {name!r}; expected one of {', '.join(BUILTINS)} or file:PATH")

    if args.cert:
        model.cert = models.load_certificate(args.cert)
    if (args.beta is None) != (args.phibar is None):
        raise UsageError("--beta and --phibar must be given together")
    if args.beta is not None:
        if model.cert is None:
            raise UsageError("--beta/--phibar need a drift certificate")
        if not (args.beta > 0 and args.phibar > 0):
            raise UsageError("--beta and --phibar must be positive")
        model.cert = model.cert.with_bound_inputs(args.beta, args.phibar)
    return model


def _require_cert(model: Model):
    if model.cert is None:
        raise UsageError(f"model {model.label!r} has no drift certificate; pass --cert FILE")
    return model.cert


# -- output --------------------------------------------------------------------------


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else repr(x)


def result_dict(model: Model, result: solver.SolveResult, config: dict) -> dict:
    pi = result.pi_hat
    return {
        "model": model.label,
        "params": model.params,
        **config,
        "converged": result.converged,
        "stop_level": result.stop_level,
        "checkpoints": result.checkpoints,
        "j_star_history": result.j_star_history,
        "r_history": [_json_float(r) for r in result.r_history],
        "tv_history": [_json_float(t) for t in result.tv_history],
        "bound": _json_float(result.bound),
        "bound_history": [_json_float(b) for b in result.bound_history],
        "y_exact": result.y_exact,
        "dims": list(pi.dims),
        "marginals": [float(m) for m in pi.marginals()],
        "pi_hat": [[float(x) for x in seg] for seg in pi.segments],
    }


def level_vector_from_json(doc: dict):
    from .block_chain import LevelVector

    return LevelVector.from_segments([np.array(s, dtype=float) for s in doc["pi_hat"]])


def render_json(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def render_csv(doc: dict) -> str:
    out = io.StringIO()
    for key, val in doc.items():
        if key in ("pi_hat", "marginals", "dims"):
            continue
        out.write(f"# {key}: {json.dumps(val)}\n")
    out.write("level,phase,probability\n")
    for k, seg in enumerate(doc["pi_hat"]):
        for i, p in enumerate(seg):
            out.write(f"{k},{i},{p!r}\n")
    return out.getvalue()


def render_human(doc: dict) -> str:
    lines = [
        f"model: {doc['model']} {json.dumps(doc['params'])}",
        f"converged: {doc['converged']}  stop level: {doc['stop_level']}  "
        f"epsilon: {doc['epsilon']:g}",
        f"checkpoints: {doc['checkpoints']}",
        f"chosen phases j*: {doc['j_star_history']}",
        "r_n: " + ", ".join("-" if r is None else f"{r:.3e}" for r in doc["r_history"]),
        "TV between checkpoints: " + ", ".join(f"{t:.3e}" for t in doc["tv_history"]),
    ]
    if doc["bound"] is not None:
        lines.append(f"error bound E(n): {doc['bound']:.6e}")
    if not doc["y_exact"]:
        lines.append("note: tail sums were upper bounds; r_n uses the bounded y")
    lines += ["", "level  marginal"]
    lines += [f"{k:5d}  {m:.12e}" for k, m in enumerate(doc["marginals"])]
    shown = min(HUMAN_FULL_LEVELS, len(doc["pi_hat"]))
    lines += ["", f"full vectors, levels 0..{shown - 1}:"]
    for k in range(shown):
        lines.append(f"{k:5d}  " + " ".join(f"{p:.12e}" for p in doc["pi_hat"][k]))
    return "\n".join(lines) + "\n"


RENDERERS = {"json": render_json, "csv": render_csv, "human": render_human}


def _emit(text: str, path: Optional[str]):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------------


def _check_epsilon(eps):
    if not 0 < eps < 1:
        raise UsageError("epsilon must lie in (0,1)")


def _schedule(args, default):
    return solver.TruncationSchedule.parse(args.schedule or default, cap=args.cap)


def _warn_drift(gen, cert):
    n = min(max(cert.C_levels, 0) + 50, 200)
    report = bounds.check_drift(gen, cert, n)
    if not report.ok:
        k, i, s = report.violations[0]
        print(f"warning: certificate fails the drift check through level {n} "
              f"({len(report.violations)} violation(s), first at level {k} phase {i}, "
              f"slack {s:.3g}); r_n carries no guarantee", file=sys.stderr)


def cmd_solve(args) -> int:
    _check_epsilon(args.epsilon)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    model = resolve_model(args)
    schedule = _schedule(args, "arithmetic:10")
    state = solver.SolverState.load(args.resume) if args.resume else None
    if args.fixed_phase is not None:
        j = args.fixed_phase
        result = solver.run_fixed_alpha(
            model.gen, schedule, args.epsilon,
            alpha_rule=lambda n: solver.indicator(model.gen.dim(n), j),
            cert=model.cert, state=state, threads=args.threads)
    else:
        cert = _require_cert(model)
        _warn_drift(model.gen, cert)
        result = solver.run(model.gen, cert, schedule, args.epsilon, state, args.threads)
    if args.save_state:
        result.state.save(args.save_state)
    config = {"epsilon": args.epsilon, "schedule": args.schedule or "arithmetic:10",
              "cap": args.cap, "fixed_phase": args.fixed_phase}
    doc = result_dict(model, result, config)
    _emit(RENDERERS[args.out](doc), args.output)
    if not result.converged:
        print(f"not converged: cap {args.cap} reached at level {result.stop_level} "
              f"(last TV {result.tv_history[-1] if result.tv_history else float('nan'):.3e})",
              file=sys.stderr)
        return EXIT_CAP
    return EXIT_OK


def cmd_compare(args) -> int:
    if args.n > COMPARE_MAX_N:
        raise UsageError(f"oracle scale guard: compare supports n <= {COMPARE_MAX_N}, got {args.n}")
    if args.n < 1:
        raise UsageError("compare needs n >= 1")
    model = resolve_model(args)
    gen = model.gen
    schedule = solver.TruncationSchedule.parse(args.schedule or "arithmetic:1", cap=args.n)
    rows, state, worst = [], solver.init_state(gen), 0.0
    for n in schedule.levels():
        state = solver.advance_to(state, gen, n)
        m = gen.dim(n)
        if args.fixed_phase is not None:
            if not 0 <= args.fixed_phase < m:
                raise UsageError(f"phase {args.fixed_phase} out of range at level {n} (M_n={m})")
            phases = [args.fixed_phase]
        else:
            phases = range(m)
        for j in phases:
            alpha = solver.indicator(m, j)
            mine = solver.approximation(state, alpha)
            ref = oracle.dense_augmented_solve(gen, n, oracle.last_block_alpha(gen, n, alpha))
            tv = solver.tv_distance(mine, ref.pi_hat)
            worst = max(worst, tv)
            rows.append((n, j, tv, ref.residual_norm))
    out = [f"# {model.label} {json.dumps(model.params)}", "level  phase  tv              residual"]
    out += [f"{n:5d}  {j:5d}  {tv:.6e}    {res:.3e}" for n, j, tv, res in rows]
    ok = worst < COMPARE_TOL
    out.append(f"max tv {worst:.6e}: {'ok' if ok else 'MISMATCH'} (tolerance {COMPARE_TOL:g})")
    _emit("\n".join(out) + "\n", args.output)
    return EXIT_OK if ok else EXIT_INPUT


def cmd_drift_check(args) -> int:
    model = resolve_model(args)
    report = bounds.check_drift(model.gen, _require_cert(model), args.n_max)
    _emit(str(report) + "\n", args.output)
    return EXIT_OK if report.ok else EXIT_DRIFT


def cmd_validate(args) -> int:
    model = resolve_model(args)
    report = validate_generator(model.gen, args.n_max)
    _emit(str(report) + "\n", args.output)
    return EXIT_OK if report.ok else EXIT_INPUT


def cmd_model(args) -> int:
    name = args.name
    if name == "mm1":
        lam, mu = _opt(args.lam, 1.0), _opt(args.mu, 2.0)
        text = models.mm1_model_text(lam, mu, bounds.mm1_certificate(lam, mu) if lam < mu else None)
    elif name == "bmap":
        spec = models.BMAPSpec.poisson(_opt(args.lam, 2.0), _opt(args.mu, 1.0))
        text = models.bmap_model_text(spec, bounds.bmap_certificate(spec))
    elif name == "mms-retrial":
        spec = models.RetrialSpec(_opt(args.lam, 1.0), _opt(args.mu, 1.0),
                                  _opt(args.s, 2), _opt(args.eta, 1.0))
        cert = bounds.retrial_certificate(spec) if spec.rho < 1 else None
        text = models.retrial_model_text(spec, cert)
    elif name == "counterexample":
        spec = models.CounterexampleSpec(_opt(args.d, 10.0), _opt(args.u, 1.0), _opt(args.w, 1.0))
        text = models.counterexample_model_text(spec, bounds.counterexample_certificate(spec))
    else:
        raise UsageError(f"no canonical file for {name!r}")
    _emit(text, args.output)
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------


def _rate_flags(p):
    p.add_argument("--lambda", dest="lam", type=float, help="arrival rate")
    p.add_argument("--mu", type=float, help="service rate")
    p.add_argument("--s", type=int, help="servers (retrial model)")
    p.add_argument("--eta", type=float, help="retrial rate per orbiting customer")
    p.add_argument("--d", type=float, help="counterexample down rate")
    p.add_argument("--u", type=float, help="counterexample up rate")
    p.add_argument("--w", type=float, help="counterexample within-level rate")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", default="mm1",
                        help="mm1 | bmap | mms-retrial | counterexample | random | file:PATH")
    _rate_flags(common)
    common.add_argument("--bmap-d", help="BMAP matrices D_0..D_m as a JSON list")
    common.add_argument("--cert", metavar="FILE", help="drift certificate file (overrides built-in)")
    common.add_argument("--beta", type=float, help="beta for the full error bound")
    common.add_argument("--phibar", type=float, help="lower bound on phi_bar for the error bound")
    common.add_argument("--output", "-o", metavar="PATH", help="write to PATH instead of stdout")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="hessolve", description="Stationary distributions of "
                     "upper block-Hessenberg Markov chains.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", parents=[common], help="run the sequential-update solver")
    p.add_argument("--epsilon", type=float, default=solver.DEFAULT_EPSILON)
    p.add_argument("--schedule", help="arithmetic:STEP or geometric:RATIO (default arithmetic:10)")
    p.add_argument("--cap", type=int, default=DEFAULT_CAP, help="largest truncation level")
    p.add_argument("--out", choices=sorted(RENDERERS), default="json")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--fixed-phase", type=int, help="augment at this phase instead of the optimum")
    p.add_argument("--save-state", metavar="PATH", help="write the final solver state")
    p.add_argument("--resume", metavar="PATH", help="start from a saved solver state")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("compare", parents=[common], help="solver vs dense oracle")
    p.add_argument("--n", type=int, required=True, help="largest truncation level")
    p.add_argument("--schedule", help="checkpoint rule (default arithmetic:1)")
    p.add_argument("--fixed-phase", type=int, help="compare only this augmentation phase")
    p.set_defaults(func=cmd_compare, cap=None)

    p = sub.add_parser("drift-check", parents=[common], help="check Qv <= -e + b 1_C")
    p.add_argument("--n-max", type=int, default=100)
    p.set_defaults(func=cmd_drift_check)

    p = sub.add_parser("validate", parents=[common], help="check generator structure")
    p.add_argument("--n-max", type=int, default=100)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("model", help="emit a canonical model file")
    p.add_argument("name", choices=BUILTINS[:-1])
    _rate_flags(p)
    p.add_argument("--output", "-o", metavar="PATH")
    p.set_defaults(func=cmd_model)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalBreakdown as exc:
        print(f"numerical breakdown: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, HessolveError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
