"""Command line interface.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

import numpy as np

from flowiv import cgnf, harness, synthetic
from flowiv.counterfactual import batch_counterfactuals, write_predictions
from flowiv.errors import NumericalError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("flowiv")


def _rho_arg(s: str):
    if s == "uniform":
        return s
    try:
        return float(s)
    except ValueError:
        raise argparse.ArgumentTypeError("rho must be a number or 'uniform'") from None


def _grid_arg(s: str) -> list[float]:
    """Either ``start:stop:step`` (inclusive) or a comma separated list."""
    try:
        if ":" in s:
            start, stop, step = (float(p) for p in s.split(":"))
            n = int(round((stop - start) / step)) + 1
            return [round(start + i * step, 10) for i in range(n)]
        return [float(p) for p in s.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse grid {s!r}") from None


def _train_config(args) -> cgnf.TrainConfig:
    kw = {}
    for name in ("steps", "lr", "seed", "dtype", "joint_steps", "bound", "average_last"):
        v = getattr(args, name, None)
        if v is not None:
            kw[name] = v
    if getattr(args, "batch_size", None) is not None:
        kw["batch_size"] = None if args.batch_size <= 0 else args.batch_size
    return cgnf.TrainConfig(**kw)


def _add_train_opts(p):
    p.add_argument("--steps", type=int, help="Adam steps per stage (default 3000)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.001)")
    p.add_argument("--batch-size", type=int, help="minibatch rows; 0 for full batch (default 1024)")
    p.add_argument("--seed", type=int)
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--bound", type=float, help="spline tail bound in standardised units")
    p.add_argument("--joint-steps", type=int, help="optional joint fine-tune steps after the stages")
    p.add_argument("--average-last", type=int, help="average the final N minibatch iterates (default 500)")
    p.add_argument(
        "--known-first-stage", metavar="DGP", choices=synthetic.DGP_IDS,
        help="use the true instrument/treatment mechanisms of a synthetic process",
    )


def cmd_generate(args) -> int:
    d, lat = synthetic.generate(synthetic.DgpSpec(args.dgp, args.rho, args.seed), args.n)
    synthetic.save_csv(args.out, d, lat if args.oracle else None)
    log.info("wrote %d rows to %s (rho=%s)", len(d), args.out, lat.rho)
    return EXIT_OK


def cmd_train(args) -> int:
    d = synthetic.load_csv(args.data)
    log.info("loaded %d rows from %s", len(d), args.data)
    first = synthetic.KnownFirstStage(args.known_first_stage) if args.known_first_stage else None
    m = cgnf.fit(d, _train_config(args), first_stage=first)
    cgnf.save_model(m, args.out)
    l1, l2, l3 = cgnf.log_lik_terms(m, d)
    print(json.dumps({"rho": m.rho, "L1": l1, "L2": l2, "L3": l3, "model": str(args.out)}))
    return EXIT_OK


def cmd_eval(args) -> int:
    m = cgnf.load_model(args.model)
    d, lat = synthetic.load_oracle_csv(args.oracle)
    a_prime = synthetic.counterfactual_treatments(d.a, np.random.default_rng(args.seed), args.a_prime_law)
    ev = harness.EvalSet(args.dgp, d, lat, a_prime)
    from flowiv.counterfactual import predict_counterfactual

    mse = harness.counterfactual_mse(lambda q: predict_counterfactual(m, q), ev)
    print(json.dumps({"counterfactual_mse": mse, "n": len(d)}))
    return EXIT_OK


def cmd_counterfactual(args) -> int:
    m = cgnf.load_model(args.model)
    queries = synthetic.load_queries(args.queries)
    e_y, y_cf = batch_counterfactuals(m, queries)
    write_predictions(args.out, queries, e_y, y_cf)
    log.info("wrote %d predictions to %s", len(y_cf), args.out)
    return EXIT_OK


def cmd_profile_rho(args) -> int:
    d = synthetic.load_csv(args.data)
    first = synthetic.KnownFirstStage(args.known_first_stage) if args.known_first_stage else None
    prof = cgnf.profile_rho(d, args.grid, _train_config(args), first_stage=first, warm_start=args.warm_start)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "L3"])
        for rho, l3 in prof:
            w.writerow([repr(rho), repr(l3)])
    print(json.dumps({"argmax_rho": prof.argmax}))
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = harness.load_config(args.config)
    results = harness.run_experiment(cfg, args.out)
    column = {"comparison": "dgp", "convergence": "n_train", "rho_sweep": "rho"}[cfg.experiment]
    print(harness.format_table(results, column))
    failures = sum(r.failures for r in results)
    if failures:
        print(f"{failures} repetition(s) failed; see the error column in {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowiv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic dataset to CSV")
    p.add_argument("--dgp", required=True, choices=synthetic.DGP_IDS)
    p.add_argument("--rho", type=_rho_arg, default=0.0)
    p.add_argument("--n", type=int, default=40_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle", action="store_true", help="also write the latent eps_A, eps_Y columns")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit the flow model to a z,a,y CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="counterfactual MSE of a model on an oracle CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--oracle", required=True)
    p.add_argument("--dgp", required=True, choices=synthetic.DGP_IDS)
    p.add_argument("--seed", type=int, default=0, help="seed for the a' draws")
    p.add_argument("--a-prime-law", choices=synthetic.A_PRIME_LAWS, default="standard_normal",
                   help="law of the counterfactual treatments (default standard_normal)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("counterfactual", help="predict counterfactual outcomes for a query CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--queries", required=True, help="CSV with columns z,a,y,a_prime")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("profile-rho", help="profile likelihood of the confounding correlation")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", type=_grid_arg, default=_grid_arg("-0.8:0.8:0.2"))
    p.add_argument("--warm-start", action="store_true")
    p.add_argument("--out", required=True)
    _add_train_opts(p)
    p.set_defaults(func=cmd_profile_rho)

    p = sub.add_parser("experiment", help="run an experiment described by a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="results CSV (resumed if it exists)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
