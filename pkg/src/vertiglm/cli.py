"""Command line interface.

Subcommands::

    vertiglm serve     --listen HOST:PORT --data a.csv --target y ...
    vertiglm connect   --peer HOST:PORT   --data b.csv --target y ...
    vertiglm simulate  (--data all.csv --target y --split c1,c2 | --n N --p P)
    vertiglm benchmark --reps 20 --p-values 10,50 ...
    vertiglm attack    (--trace t.npz --partner-output b.csv | --study)

Exit status is 0 on success, 2 on usage errors and otherwise the
``exit_code`` of the raised error (see README).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import attack as atk
from .exceptions import NotConverged, VertiGLMError
from .glm import add_intercept, get_family
from .ingest import ingest_csv
from .protocol import SessionConfig, run_party
from .simulation import benchmark, generate_dataset, simulate, split_blocks, write_rows
from .standard_errors import IterationTrace
from .transport import INITIATOR, RESPONDER, open_channel

logger = logging.getLogger("vertiglm")

INTERNAL_ERROR = 70
DEFAULT_PSK_ENV = "VERTIGLM_PSK"


class UsageError(Exception):
    pass


def _csv_list(text, cast=str):
    return [cast(t.strip()) for t in text.split(",") if t.strip()]


def load_psk(args) -> bytes:
    if args.psk_file:
        with open(args.psk_file) as fh:
            text = fh.read().strip()
        source = args.psk_file
    else:
        name = args.psk_env or DEFAULT_PSK_ENV
        text = os.environ.get(name, "").strip()
        source = f"${name}"
        if not text:
            raise UsageError(f"no pre-shared key: set {name} or pass --psk-file")
    try:
        psk = bytes.fromhex(text)
    except ValueError:
        raise UsageError(f"pre-shared key in {source} is not hex") from None
    if len(psk) != 32:
        raise UsageError(f"pre-shared key in {source} must be 32 bytes, got {len(psk)}")
    return psk


def _session_config(args, psk=b"\0" * 32, family=None):
    return SessionConfig(
        family=family or args.family, tolerance=args.tolerance, max_iterations=args.max_iterations,
        min_iterations=args.min_iterations, psk=psk, noise_sd=args.noise_sd, seed=args.seed)


def write_party_output(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "coefficient", "std_error"])
        for name, b, se in zip(result.column_names, result.local_coefficients,
                               result.local_standard_errors):
            w.writerow([name, repr(float(b)), repr(float(se))])


def read_party_output(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [r["name"] for r in rows], np.array([float(r["coefficient"]) for r in rows])


def _summary(result):
    return {"iterations": result.iterations_used, "converged": result.converged,
            "probe_rounds": result.probe_rounds, "partner_rank": result.partner_rank,
            "sigma2": result.sigma2}


# -- subcommands -------------------------------------------------------------

def cmd_party(args):
    psk = load_psk(args)
    role = args.role or (RESPONDER if args.command == "serve" else INITIATOR)
    features = _csv_list(args.features) if args.features else None
    block, y = ingest_csv(args.data, args.target, features, args.family, args.standardize)
    fam = get_family(args.family)
    if role == INITIATOR and not fam.is_gaussian:
        block = add_intercept(block)
    logger.warning("make sure no feature in %s is also entered by the partner; "
                   "this cannot be checked without sharing column metadata", args.data)
    cfg = _session_config(args, psk)
    if args.command == "serve":
        channel = open_channel(args.listen, psk, role, listen=True, timeout=args.timeout,
                               ready=lambda port: print(f"listening on port {port}", file=sys.stderr,
                                                        flush=True))
    else:
        channel = open_channel(args.peer, psk, role, timeout=args.timeout)
    result, trace = run_party(block, y, cfg, role, channel)
    write_party_output(result, args.output)
    if args.trace_export:
        trace.save(args.trace_export)
    print(json.dumps(_summary(result)))
    if not result.converged:
        raise NotConverged(f"stopped after {result.iterations_used} iterations without converging")
    return 0


def cmd_simulate(args):
    fam = get_family(args.family)
    if args.data:
        features = _csv_list(args.features) if args.features else None
        block, y = ingest_csv(args.data, args.target, features, fam, args.standardize)
        if args.split:
            wanted = _csv_list(args.split)
            unknown = [c for c in wanted if c not in block.column_names]
            if unknown:
                raise UsageError(f"--split names unknown column(s) {unknown}")
            first = [block.column_names.index(c) for c in wanted]
        else:
            first = range(block.n_cols // 2)
    else:
        data = generate_dataset(args.n, args.p, args.covariance, fam, np.random.default_rng(args.seed))
        block, y = data.X, data.y
        first = range(block.n_cols // 2)
    try:
        a, b = split_blocks(block, first, fam)
    except ValueError as err:
        raise UsageError(str(err)) from None
    report = simulate(a, b, y, _session_config(args, family=fam))
    report.write_csv(args.output)
    if args.trace_export:
        stem, ext = os.path.splitext(args.trace_export)
        for role, trace in zip((INITIATOR, RESPONDER), report.traces):
            trace.save(f"{stem}.{role}{ext or '.npz'}")
    print(report.table())
    if not report.converged:
        raise NotConverged("simulated session did not converge")
    return 0


def cmd_benchmark(args):
    cfg = _session_config(args)
    rows = benchmark(_csv_list(args.families), _csv_list(args.p_values, int),
                     _csv_list(args.covariances, float), args.reps, args.n, args.seed or 0, cfg)
    write_rows(rows, args.output)
    keys = sorted({(r["family"], r["P"], r["covariance"]) for r in rows})
    print(f"{'family':<10} {'P':>4} {'cov':>5} {'mean iter':>10} {'max|coef diff|':>15} {'se within 3%':>13}")
    for k in keys:
        sel = [r for r in rows if (r["family"], r["P"], r["covariance"]) == k]
        print(f"{k[0]:<10} {k[1]:>4} {k[2]:>5} {np.mean([r['iterations'] for r in sel]):>10.1f} "
              f"{max(r['max_abs_coef_diff'] for r in sel):>15.3g} "
              f"{np.mean([r['frac_se_within_3pct'] for r in sel]):>13.3f}")
    return 0


def cmd_attack(args):
    if args.study:
        rows = atk.mse_study(_csv_list(args.p_values, int),
                             _csv_list(args.r_values, int) if args.r_values else None,
                             args.sigma2, args.n, args.reps, args.seed or 0)
        atk.write_report(rows, args.output)
        return 0
    if not args.trace:
        raise UsageError("attack needs --trace (or --study)")
    trace = IterationTrace.load(args.trace)
    if args.partner_output:
        names, coef = read_party_output(args.partner_output)
        if trace.descent_rounds < 1:
            raise UsageError("trace has no descent rounds to pair with the disclosed coefficients")
        view = atk.AdversaryView(trace.received_predictions, coef,
                                 known_indices=[trace.descent_rounds - 1])
    else:
        view = atk.AdversaryView(trace.received_predictions)
        names = None
    X_hat = atk.reconstruct(view)
    names = names or [f"x{j}" for j in range(X_hat.shape[1])]
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        w.writerows(X_hat.tolist())
    if args.truth:
        truth = np.loadtxt(args.truth, delimiter=",", skiprows=1, ndmin=2)
        truth = truth - truth.mean(axis=0)
        print(json.dumps({"mse": atk.reconstruction_mse(truth, X_hat),
                          "revealed_fraction": atk.revealed_fraction(truth, X_hat)}))
    return 0


# -- parser ------------------------------------------------------------------

def _add_session(p):
    p.add_argument("--family", default="gaussian", choices=["gaussian", "binomial", "poisson"])
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--max-iterations", type=int, default=10_000)
    p.add_argument("--min-iterations", type=int, default=None,
                   help="probe rounds requested after convergence (default: local columns + 5)")
    p.add_argument("--noise-sd", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=None)


def _add_data(p, required=True):
    p.add_argument("--data", required=required, help="CSV file")
    p.add_argument("--target", required=required, help="target column")
    p.add_argument("--features", help="comma-separated feature columns (default: all but target)")
    p.add_argument("--standardize", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="vertiglm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("serve", "connect"):
        p = sub.add_parser(name, help=f"run one party ({'listen' if name == 'serve' else 'dial out'})")
        _add_data(p)
        _add_session(p)
        if name == "serve":
            p.add_argument("--listen", required=True, help="HOST:PORT (port 0 picks a free one)")
        else:
            p.add_argument("--peer", required=True, help="HOST:PORT")
        p.add_argument("--role", choices=[INITIATOR, RESPONDER])
        p.add_argument("--psk-env", help=f"environment variable with the hex key (default {DEFAULT_PSK_ENV})")
        p.add_argument("--psk-file", help="file with the hex key")
        p.add_argument("--timeout", type=float, default=60.0)
        p.add_argument("--output", required=True, help="coefficient CSV")
        p.add_argument("--trace-export", help="write the iteration trace (.npz)")
        p.set_defaults(func=cmd_party)

    p = sub.add_parser("simulate", help="both parties in one process, compared with the pooled fit")
    _add_data(p, required=False)
    _add_session(p)
    p.add_argument("--split", help="comma-separated columns for the initiator (default: first half)")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--p", type=int, default=10)
    p.add_argument("--covariance", type=float, default=0.1)
    p.add_argument("--output", required=True)
    p.add_argument("--trace-export")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="Monte-Carlo grid against the pooled fit")
    _add_session(p)
    p.add_argument("--families", default="gaussian,binomial")
    p.add_argument("--p-values", default="10,50,100")
    p.add_argument("--covariances", default="0.1,0.5")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("attack", help="reconstruct partner features from a trace")
    p.add_argument("--trace", help="trace exported by serve/connect")
    p.add_argument("--partner-output", help="coefficient CSV the partner disclosed")
    p.add_argument("--truth", help="CSV of the partner's real features, for scoring")
    p.add_argument("--study", action="store_true", help="Monte-Carlo MSE study instead")
    p.add_argument("--p-values", default="4,20")
    p.add_argument("--r-values")
    p.add_argument("--sigma2", type=float, default=2.0)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_attack)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as err:
        parser.error(str(err))  # exits with 2
    except VertiGLMError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return err.exit_code
    except (OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return VertiGLMError.exit_code
    except Exception as err:  # pragma: no cover
        logger.exception("internal error")
        print(f"internal error: {err}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
